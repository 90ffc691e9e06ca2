//! Experiment execution: the training loop over the Y objective or its
//! conditional-autoencoder baselines, random-label sampling, per-iteration
//! metrics, checkpointing with exact resume, evaluation over a test set, and
//! the 2x2 ablation matrix.
//!
//! Every random draw comes from a stream derived from (master seed, stream
//! tag, index) — see [`crate::util`] — so a (seed, config, dataset) triple
//! fully determines the parameter trajectory, and resuming from a checkpoint
//! replays the identical run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{batch_order, gather_batch, DataError, ImageSet, LabelSet};
use crate::loss::{
    loss_classifier, loss_explicit, loss_global, loss_implicit, loss_reconstruction,
    loss_reconstruction_only, LossBundle, LossError, LossValues, ReconNorm,
};
use crate::model::{nchw_from_channel_last, ModelConfig, YaeModel};
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::tensor::Tensor;
use crate::nn::{no_grad, Adam, AdamConfig, Mode, NnError};
use crate::util::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Two-branch training with the full four-term loss.
    Yae,
    /// Conditional autoencoder: single branch, reconstruction loss only.
    Cae,
    /// Regularized cAE baseline: 20 epochs, 16 implicit units, weight decay.
    CaeReg,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_e: f64,
    pub lambda_i: f64,
    pub epochs: usize,
    /// Derived default: 100 epochs over 60k images at batch 128 lands on the
    /// reported iteration count (~4.7e4). Override freely.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub implicit_units: usize,
    pub num_classes: usize,
    pub recon_norm: ReconNorm,
    pub seed: u64,
    /// Resample the random label away from the true class (default on).
    pub exclude_true_label: bool,
    /// Checkpoint every N iterations; 0 = final checkpoint only.
    pub checkpoint_every: usize,
    /// Metrics row every N iterations.
    pub log_every: usize,
    pub input_hw: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Yae,
            lambda_e: 1.0,
            lambda_i: 1.0,
            epochs: 100,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.0,
            implicit_units: 32,
            num_classes: 10,
            recon_norm: ReconNorm::L2,
            seed: 0,
            exclude_true_label: true,
            checkpoint_every: 0,
            log_every: 10,
            input_hw: 32,
        }
    }
}

impl TrainConfig {
    /// The regularized-cAE preset overrides epochs, code width, and weight
    /// decay; other modes pass through unchanged.
    pub fn effective(&self) -> TrainConfig {
        let mut cfg = *self;
        if cfg.mode == TrainMode::CaeReg {
            cfg.epochs = 20;
            cfg.implicit_units = 16;
            cfg.weight_decay = 1e-4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.lambda_e < 0.0 || self.lambda_i < 0.0 {
            return bad(format!("lambda_e/lambda_i must be >= 0, got {}/{}", self.lambda_e, self.lambda_i));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.implicit_units < 1 {
            return bad("implicit_units must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 (batch norm trains on batch statistics)".into());
        }
        if self.num_classes < 2 && self.exclude_true_label {
            return bad(format!(
                "exclude_true_label is impossible with {} class(es)",
                self.num_classes
            ));
        }
        if !self.input_hw.is_power_of_two() || self.input_hw < 8 {
            return bad(format!("input_hw must be a power of two >= 8, got {}", self.input_hw));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::for_input(self.input_hw, self.implicit_units, self.num_classes)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("non-finite loss at iteration {iteration}{}", last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    NonFinite { iteration: u64, last_checkpoint: Option<PathBuf> },
    #[error("empty test set")]
    EmptyTestSet,
}

/// One metrics row; `seconds` is wall time since training started and is the
/// only non-deterministic column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub epoch: u64,
    pub values: LossValues,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "iteration,epoch,loss_r,loss_c,loss_e,loss_i,loss_total,seconds";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let v = r.values;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3}",
            r.iteration, r.epoch, v.l_r, v.l_c, v.l_e, v.l_i, v.total, r.seconds
        );
    }
    out
}

/// Draw one random label per row, uniform over the classes, excluding each
/// row's true class when requested.
pub fn sample_random_labels(
    true_labels: &[u8],
    num_classes: usize,
    exclude_true: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    true_labels
        .iter()
        .map(|&y| {
            if exclude_true {
                let r = rng.gen_range(0..num_classes as u32 - 1) as u8;
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                rng.gen_range(0..num_classes as u32) as u8
            }
        })
        .collect()
}

pub fn one_hot_tensor(labels: &[u8], num_classes: usize) -> Tensor<f32> {
    let mut v = vec![0.0f32; labels.len() * num_classes];
    for (r, &l) in labels.iter().enumerate() {
        v[r * num_classes + l as usize] = 1.0;
    }
    Tensor::constant(&[labels.len(), num_classes], v)
}

pub struct TrainOutput {
    pub model: YaeModel<f32>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

fn compute_bundle(
    model: &YaeModel<f32>,
    cfg: &TrainConfig,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    labels: &[u8],
    label_seed: u64,
    mode: Mode,
) -> Result<LossBundle<f32>, TrainError> {
    match cfg.mode {
        TrainMode::Cae | TrainMode::CaeReg => {
            let code = model.encode(x, mode)?;
            let xhat = model.decode(&code.implicit, y, mode)?;
            let l_r = loss_reconstruction(&xhat, x, cfg.recon_norm)?;
            Ok(loss_reconstruction_only(l_r)?)
        }
        TrainMode::Yae => {
            let mut rng = ChaCha8Rng::seed_from_u64(label_seed);
            let random = sample_random_labels(labels, cfg.num_classes, cfg.exclude_true_label, &mut rng);
            let y_tilde = one_hot_tensor(&random, cfg.num_classes);
            let fwd = model.forward_y(x, y, &y_tilde, mode)?;
            let l_r = loss_reconstruction(&fwd.xhat_l, x, cfg.recon_norm)?;
            let l_c = loss_classifier(&fwd.first.explicit_logits, y)?;
            let l_e = loss_explicit(&fwd.re_r.explicit_logits, &y_tilde)?;
            let l_i = loss_implicit(&fwd.re_l.implicit, &fwd.re_r.implicit)?;
            Ok(loss_global(l_r, l_c, l_e, l_i, cfg.lambda_e, cfg.lambda_i)?)
        }
    }
}

fn write_checkpoint(
    path: &Path,
    model: &YaeModel<f32>,
    opt: &Adam<f32>,
    iteration: u64,
    epoch: u64,
) -> Result<(), NnError> {
    let mut w = CheckpointWriter::new();
    model.write_into(&mut w);
    for (name, shape, values) in opt.state_entries() {
        w.add_tensor(&name, &shape, &values);
    }
    w.add_u64("adam/t", &[opt.step_count()]);
    w.add_u64("meta/iteration", &[iteration]);
    w.add_u64("meta/epoch", &[epoch]);
    w.write_to(path)
}

/// Run the configured training. When `run_dir` is given, `metrics.csv`,
/// intermediate checkpoints, and `final.ckpt` land there. `resume` continues
/// an interrupted run from its recorded iteration; the resulting trajectory
/// is identical to the uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    train_x: &ImageSet,
    train_y: &LabelSet,
    run_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    log_progress: bool,
) -> Result<TrainOutput, TrainError> {
    let cfg = cfg.effective();
    cfg.validate()?;
    if train_x.n != train_y.len() {
        return Err(DataError::SizeMismatch { images: train_x.n, labels: train_y.len() }.into());
    }
    if train_x.h != cfg.input_hw || train_x.w != cfg.input_hw {
        return Err(TrainError::Config(format!(
            "dataset is {}x{}, config expects {}x{} (pad first)",
            train_x.h, train_x.w, cfg.input_hw, cfg.input_hw
        )));
    }

    let model = YaeModel::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(model.params(), AdamConfig::new(cfg.lr).with_weight_decay(cfg.weight_decay));
    let mut start_iteration = 0u64; // completed iterations
    if let Some(ckpt) = resume {
        model.restore_params(ckpt)?;
        let t = ckpt.u64_scalar("adam/t").ok_or_else(|| NnError::Checkpoint("missing adam/t".into()))?;
        opt.restore(t, |name| ckpt.tensor_as::<f32>(name))?;
        start_iteration =
            ckpt.u64_scalar("meta/iteration").ok_or_else(|| NnError::Checkpoint("missing meta/iteration".into()))?;
    }

    let ipe = train_x.n.div_ceil(cfg.batch_size) as u64; // iterations per epoch
    let total_iterations = ipe * cfg.epochs as u64;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Config(format!("run dir {}: {e}", dir.display())))?;
    }
    let started = Instant::now();

    let mut epoch_plan: Option<(u64, Vec<Vec<usize>>)> = None;
    for iteration in (start_iteration + 1)..=total_iterations {
        let epoch = (iteration - 1) / ipe + 1;
        let batch_idx = ((iteration - 1) % ipe) as usize;
        if epoch_plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let order = batch_order(
                train_x.n,
                train_y,
                cfg.batch_size,
                derive_seed(cfg.seed, stream::BATCH, epoch),
                true,
            )?;
            epoch_plan = Some((epoch, order));
        }
        let plan = &epoch_plan.as_ref().unwrap().1[batch_idx];
        let batch = gather_batch(train_x, train_y, plan);
        let x = nchw_from_channel_last::<f32>(&batch.x, batch.b, train_x.h, train_x.w, train_x.c);
        let y = one_hot_tensor(&batch.labels, cfg.num_classes);

        model.params().zero_grads();
        let bundle = match compute_bundle(
            &model,
            &cfg,
            &x,
            &y,
            &batch.labels,
            derive_seed(cfg.seed, stream::LABELS, iteration),
            Mode::Train,
        ) {
            Ok(b) => b,
            Err(TrainError::Loss(LossError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite { iteration, last_checkpoint });
            }
            Err(e) => return Err(e),
        };
        bundle.total.backward()?;
        opt.step()?;
        let values = bundle.values();

        if iteration % cfg.log_every as u64 == 0 || iteration == total_iterations {
            metrics.push(MetricsRow {
                iteration,
                epoch,
                values,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
        if log_progress && iteration % ipe == 0 {
            eprintln!(
                "[train seed={} mode={:?} le={} li={}] epoch {epoch}/{} l_r={:.5} l_c={:.4} l_e={:.4} l_i={:.4}",
                cfg.seed, cfg.mode, cfg.lambda_e, cfg.lambda_i, cfg.epochs, values.l_r, values.l_c, values.l_e, values.l_i
            );
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every as u64 == 0 {
                let path = dir.join(format!("ckpt_{iteration:07}.ckpt"));
                write_checkpoint(&path, &model, &opt, iteration, epoch)?;
                checkpoints.push(path.clone());
                last_checkpoint = Some(path);
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = run_dir {
        let path = dir.join("final.ckpt");
        write_checkpoint(&path, &model, &opt, total_iterations, cfg.epochs as u64)?;
        final_checkpoint = Some(path);
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))
            .map_err(|e| TrainError::Config(format!("metrics.csv: {e}")))?;
    }
    Ok(TrainOutput { model, metrics, checkpoints, final_checkpoint })
}

/// Mean per-term losses over a full test pass: eval-mode batch norm, no
/// gradients, random labels drawn from the evaluation stream.
pub fn evaluate_losses(
    model: &YaeModel<f32>,
    cfg: &TrainConfig,
    test_x: &ImageSet,
    test_y: &LabelSet,
) -> Result<LossValues, TrainError> {
    let cfg = cfg.effective();
    if test_x.n == 0 {
        return Err(TrainError::EmptyTestSet);
    }
    if test_x.n != test_y.len() {
        return Err(DataError::SizeMismatch { images: test_x.n, labels: test_y.len() }.into());
    }
    let order = batch_order(test_x.n, test_y, cfg.batch_size, 0, false)?;
    let mut acc = LossValues::default();
    no_grad(|| -> Result<(), TrainError> {
        for (bi, plan) in order.iter().enumerate() {
            let batch = gather_batch(test_x, test_y, plan);
            let x = nchw_from_channel_last::<f32>(&batch.x, batch.b, test_x.h, test_x.w, test_x.c);
            let y = one_hot_tensor(&batch.labels, cfg.num_classes);
            let mut eval_cfg = cfg;
            eval_cfg.mode = TrainMode::Yae; // full loss surface is reported for every model
            let bundle = compute_bundle(
                model,
                &eval_cfg,
                &x,
                &y,
                &batch.labels,
                derive_seed(cfg.seed, stream::EVAL_LABELS, bi as u64),
                Mode::Eval,
            )?;
            acc.add(&bundle.values(), batch.b as f64);
        }
        Ok(())
    })?;
    Ok(acc.scaled(1.0 / test_x.n as f64))
}

/// One ablation cell: a (lambda_e, lambda_i) condition, its per-seed test
/// evaluations, and their mean.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationCell {
    pub lambda_e: f64,
    pub lambda_i: f64,
    pub per_seed: Vec<LossValues>,
    pub mean: LossValues,
}

pub const ABLATION_CONDITIONS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];

/// Train and evaluate every (condition x seed) job sequentially. Each job is
/// fully isolated: its own model, optimizer, and derived streams.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_matrix(
    base: &TrainConfig,
    conditions: &[(f64, f64)],
    seeds: &[u64],
    train_x: &ImageSet,
    train_y: &LabelSet,
    test_x: &ImageSet,
    test_y: &LabelSet,
    run_dir: Option<&Path>,
    log_progress: bool,
) -> Result<Vec<AblationCell>, TrainError> {
    let mut cells = Vec::new();
    for &(lambda_e, lambda_i) in conditions {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = *base;
            cfg.mode = TrainMode::Yae;
            cfg.lambda_e = lambda_e;
            cfg.lambda_i = lambda_i;
            cfg.seed = seed;
            let job_dir = run_dir.map(|d| d.join(format!("le{lambda_e}_li{lambda_i}_seed{seed}")));
            let out = train(&cfg, train_x, train_y, job_dir.as_deref(), None, log_progress)?;
            per_seed.push(evaluate_losses(&out.model, &cfg, test_x, test_y)?);
        }
        let mut mean = LossValues::default();
        for v in &per_seed {
            mean.add(v, 1.0 / per_seed.len() as f64);
        }
        cells.push(AblationCell { lambda_e, lambda_i, per_seed, mean });
    }
    Ok(cells)
}

/// Summary CSV shaped like the ablation table: one column per condition, one
/// row per loss term.
pub fn ablation_summary_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("loss");
    for c in cells {
        let _ = write!(out, ",le{}_li{}", c.lambda_e, c.lambda_i);
    }
    out.push('\n');
    let rows: [(&str, fn(&LossValues) -> f64); 5] = [
        ("total", |v| v.total),
        ("reconstruction", |v| v.l_r),
        ("classifier", |v| v.l_c),
        ("explicit", |v| v.l_e),
        ("implicit", |v| v.l_i),
    ];
    for (name, get) in rows {
        let _ = write!(out, "{name}");
        for c in cells {
            let _ = write!(out, ",{}", get(&c.mean));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small_data(n_train: usize, n_test: usize) -> (ImageSet, LabelSet, ImageSet, LabelSet) {
        let (tx, ty) = synth::generate(n_train, 77, 0);
        let (ex, ey) = synth::generate(n_test, 77, 1 << 32);
        let tx = crate::dataio::pad_to(&tx, (32, 32)).unwrap();
        let ex = crate::dataio::pad_to(&ex, (32, 32)).unwrap();
        (tx, ty, ex, ey)
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            implicit_units: 8,
            log_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn random_label_exclusion_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let true_labels = vec![4u8; 100_000];
        let drawn = sample_random_labels(&true_labels, 10, true, &mut rng);
        let mut counts = [0usize; 10];
        for &l in &drawn {
            counts[l as usize] += 1;
        }
        assert_eq!(counts[4], 0, "true class must never be drawn");
        let expected = 100_000.0 / 9.0;
        for (c, &n) in counts.iter().enumerate() {
            if c == 4 {
                continue;
            }
            let rel = (n as f64 - expected).abs() / expected;
            assert!(rel < 0.02, "class {c}: {n} vs {expected} ({rel:.4})");
        }
    }

    #[test]
    fn exclusion_with_one_class_is_rejected_at_validation() {
        let cfg = TrainConfig { num_classes: 1, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn same_seed_reproduces_label_stream() {
        let labels = vec![1u8, 5, 9, 0];
        let a = sample_random_labels(&labels, 10, true, &mut ChaCha8Rng::seed_from_u64(7));
        let b = sample_random_labels(&labels, 10, true, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn cae_reg_preset_overrides() {
        let cfg = TrainConfig { mode: TrainMode::CaeReg, ..TrainConfig::default() }.effective();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.implicit_units, 16);
        assert!((cfg.weight_decay - 1e-4).abs() < 1e-12);
        // yae untouched
        let y = TrainConfig::default().effective();
        assert_eq!(y.epochs, 100);
        assert_eq!(y.weight_decay, 0.0);
    }

    #[test]
    fn two_runs_same_seed_identical_metrics() {
        let (tx, ty, _, _) = small_data(48, 8);
        let cfg = smoke_config();
        let a = train(&cfg, &tx, &ty, None, None, false).unwrap();
        let b = train(&cfg, &tx, &ty, None, None, false).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.values, rb.values, "iteration {}", ra.iteration);
        }
    }

    #[test]
    fn cae_mode_never_evaluates_the_right_branch() {
        let (tx, ty, _, _) = small_data(48, 8);
        let mut cfg = smoke_config();
        cfg.mode = TrainMode::Cae;
        let out = train(&cfg, &tx, &ty, None, None, false).unwrap();
        let iters = 48u64.div_ceil(16);
        assert_eq!(out.model.counters.decode_calls.get(), iters, "one decode per iteration");
        assert_eq!(out.model.counters.encode_calls.get(), iters, "one encode per iteration");

        let mut cfg_y = smoke_config();
        cfg_y.mode = TrainMode::Yae;
        let out_y = train(&cfg_y, &tx, &ty, None, None, false).unwrap();
        assert_eq!(out_y.model.counters.decode_calls.get(), 2 * iters);
        assert_eq!(out_y.model.counters.encode_calls.get(), 3 * iters);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let (tx, ty, _, _) = small_data(64, 8);
        let mut cfg = smoke_config();
        cfg.epochs = 2;
        cfg.log_every = 1;
        let dir = tempfile::tempdir().unwrap();

        let full_dir = dir.path().join("full");
        let full = train(&cfg, &tx, &ty, Some(&full_dir), None, false).unwrap();

        // First epoch only, checkpointing at the epoch boundary.
        let ipe = 64usize.div_ceil(cfg.batch_size);
        let mut half_cfg = cfg;
        half_cfg.epochs = 1;
        half_cfg.checkpoint_every = ipe;
        let half_dir = dir.path().join("half");
        train(&half_cfg, &tx, &ty, Some(&half_dir), None, false).unwrap();
        let ckpt = Checkpoint::load(&half_dir.join("final.ckpt")).unwrap();

        let resumed_dir = dir.path().join("resumed");
        let resumed = train(&cfg, &tx, &ty, Some(&resumed_dir), Some(&ckpt), false).unwrap();

        // The resumed half must coincide exactly with the tail of the full run.
        let tail: Vec<_> = full.metrics.iter().filter(|r| r.iteration > ipe as u64).collect();
        assert_eq!(tail.len(), resumed.metrics.len());
        for (a, b) in tail.iter().zip(&resumed.metrics) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.values, b.values, "iteration {}", a.iteration);
        }
        // Final parameters agree bit for bit.
        let fa = Checkpoint::load(&full_dir.join("final.ckpt")).unwrap();
        let fb = Checkpoint::load(&resumed_dir.join("final.ckpt")).unwrap();
        for name in fa.tensor_names() {
            let (_, va) = fa.tensor(name).unwrap();
            let (_, vb) = fb.tensor(name).unwrap();
            assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()), "{name} differs");
        }
    }

    #[test]
    fn evaluate_losses_smoke_and_empty_set() {
        let (tx, ty, ex, ey) = small_data(32, 4);
        let cfg = smoke_config();
        let out = train(&cfg, &tx, &ty, None, None, false).unwrap();
        let v = evaluate_losses(&out.model, &cfg, &ex, &ey).unwrap();
        assert!(v.is_finite());
        // single image: finite bundle as well (eval mode tolerates b = 1)
        let one = ex.take(1);
        let one_y = ey.take(1);
        let v1 = evaluate_losses(&out.model, &cfg, &one, &one_y).unwrap();
        assert!(v1.is_finite());
        let empty = ex.take(0);
        let empty_y = ey.take(0);
        assert!(matches!(
            evaluate_losses(&out.model, &cfg, &empty, &empty_y),
            Err(TrainError::EmptyTestSet)
        ));
    }

    #[test]
    fn ablation_matrix_shape_and_csv() {
        let (tx, ty, ex, ey) = small_data(32, 8);
        let mut cfg = smoke_config();
        cfg.epochs = 1;
        let cells = run_ablation_matrix(
            &cfg,
            &ABLATION_CONDITIONS,
            &[0, 1],
            &tx,
            &ty,
            &ex,
            &ey,
            None,
            false,
        )
        .unwrap();
        assert_eq!(cells.len(), 4);
        assert!(cells.iter().all(|c| c.per_seed.len() == 2));
        let csv = ablation_summary_csv(&cells);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 6, "header + 5 loss rows");
        assert_eq!(lines[0].split(',').count(), 5, "label + 4 condition columns");
        // custom conditions outside {0,1} are legal
        let half = run_ablation_matrix(&cfg, &[(1.0, 0.5)], &[0], &tx, &ty, &ex, &ey, None, false).unwrap();
        assert_eq!(half.len(), 1);
        assert_eq!(half[0].lambda_i, 0.5);
    }
}

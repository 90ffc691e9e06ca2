//! Quantitative disentanglement protocol.
//!
//! A frozen ensemble of five independently seeded LeNet-style classifiers is
//! trained on the original dataset. Generated images — every test input
//! re-decoded under swapped content labels — are then scored three ways:
//!
//! - swap accuracy: does the ensemble read the intended content off the
//!   generated image;
//! - internal SSIM: similarity between each input and its content-swapped
//!   reconstructions (lower is better separation);
//! - internal MSE: the same comparison in squared error (higher is better).
//!
//! The classifier members use stride-2 convolutions where the classic recipe
//! pools; the gate on the ensemble is each member's clean test accuracy, not
//! the layer recipe.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataio::{batch_order, gather_batch, DataError, ImageSet, LabelSet};
use crate::loss::{loss_classifier, LossValues};
use crate::model::{nchw_from_channel_last, YaeModel};
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::init::ParamSet;
use crate::nn::layers::{Conv2d, Dense};
use crate::nn::tensor::Tensor;
use crate::nn::{no_grad, Adam, AdamConfig, Mode, NnError};
use crate::ssim::{mse, ssim, SsimError};
use crate::trainer::one_hot_tensor;
use crate::util::{derive_seed, fnv1a64, stream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ensemble seeds must be distinct, got {0:?}")]
    DuplicateSeeds(Vec<u64>),
    #[error("ensemble member (seed {seed}) reached only {accuracy:.2}% clean accuracy, below the {threshold:.0}% gate")]
    MemberBelowThreshold { seed: u64, accuracy: f64, threshold: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ssim(#[from] SsimError),
}

#[derive(Debug, Clone, Copy)]
pub struct LenetConfig {
    pub input_hw: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Minimum clean test accuracy (percent) per member.
    pub accuracy_threshold: f64,
}

impl LenetConfig {
    pub fn for_input(input_hw: usize, num_classes: usize) -> Self {
        LenetConfig { input_hw, num_classes, epochs: 10, batch_size: 128, lr: 1e-3, accuracy_threshold: 98.0 }
    }
}

/// One classifier member: two stride-2 conv blocks, three dense layers.
pub struct Lenet {
    cfg: LenetConfig,
    params: ParamSet<f32>,
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    fc1: Dense<f32>,
    fc2: Dense<f32>,
    fc3: Dense<f32>,
}

const LENET_SLOPE: f32 = 0.2;

impl Lenet {
    pub fn new(cfg: LenetConfig, seed: u64) -> Self {
        let mut ps = ParamSet::new();
        let conv1 = Conv2d::new(&mut ps, "cls.conv1", 1, 6, 4, 2, 1, seed);
        let conv2 = Conv2d::new(&mut ps, "cls.conv2", 6, 16, 4, 2, 1, seed);
        let flat = 16 * (cfg.input_hw / 4) * (cfg.input_hw / 4);
        let fc1 = Dense::new(&mut ps, "cls.fc1", flat, 120, seed);
        let fc2 = Dense::new(&mut ps, "cls.fc2", 120, 84, seed);
        let fc3 = Dense::new(&mut ps, "cls.fc3", 84, cfg.num_classes, seed);
        Lenet { cfg, params: ps, conv1, conv2, fc1, fc2, fc3 }
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let h = self.conv1.forward(x)?.leaky_relu(LENET_SLOPE);
        let h = self.conv2.forward(&h)?.leaky_relu(LENET_SLOPE);
        let h = self.fc1.forward(&h.flatten()?)?.leaky_relu(LENET_SLOPE);
        let h = self.fc2.forward(&h)?.leaky_relu(LENET_SLOPE);
        self.fc3.forward(&h)
    }

    fn train_on(&self, x: &ImageSet, y: &LabelSet, seed: u64) -> Result<(), EvalError> {
        let mut opt = Adam::new(&self.params, AdamConfig::new(self.cfg.lr));
        for epoch in 1..=self.cfg.epochs as u64 {
            let order = batch_order(
                x.n,
                y,
                self.cfg.batch_size,
                derive_seed(seed, stream::BATCH, epoch),
                true,
            )?;
            for plan in &order {
                let batch = gather_batch(x, y, plan);
                let xb = nchw_from_channel_last::<f32>(&batch.x, batch.b, x.h, x.w, x.c);
                let yb = one_hot_tensor(&batch.labels, self.cfg.num_classes);
                self.params.zero_grads();
                let loss = loss_classifier(&self.logits(&xb)?, &yb)?;
                loss.backward()?;
                opt.step()?;
            }
        }
        Ok(())
    }

    /// Clean accuracy in percent.
    pub fn accuracy(&self, x: &ImageSet, y: &LabelSet) -> Result<f64, EvalError> {
        let order = batch_order(x.n, y, self.cfg.batch_size, 0, false)?;
        let mut correct = 0usize;
        no_grad(|| -> Result<(), EvalError> {
            for plan in &order {
                let batch = gather_batch(x, y, plan);
                let xb = nchw_from_channel_last::<f32>(&batch.x, batch.b, x.h, x.w, x.c);
                let logits = self.logits(&xb)?;
                let v = logits.values();
                let k = self.cfg.num_classes;
                for (r, &label) in batch.labels.iter().enumerate() {
                    let row = &v[r * k..(r + 1) * k];
                    let pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    if pred == label as usize {
                        correct += 1;
                    }
                }
            }
            Ok(())
        })?;
        Ok(100.0 * correct as f64 / x.n as f64)
    }

    fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = CheckpointWriter::new();
        w.add_u64("meta/input_hw", &[self.cfg.input_hw as u64]);
        w.add_u64("meta/num_classes", &[self.cfg.num_classes as u64]);
        for (name, t) in self.params.iter() {
            w.add_tensor(name, t.shape(), &t.values());
        }
        w.write_to(path)
    }

    fn load_params(&self, ckpt: &Checkpoint) -> Result<(), NnError> {
        for (name, t) in self.params.iter() {
            let vals: Vec<f32> = ckpt
                .tensor_as(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if vals.len() != t.len() {
                return Err(NnError::Checkpoint(format!("size mismatch for {name}")));
            }
            t.set_values(&vals);
        }
        Ok(())
    }
}

/// Five frozen members; prediction is the argmax of their mean softmax.
pub struct LenetEnsemble {
    pub members: Vec<Lenet>,
    pub member_accuracies: Vec<f64>,
    /// Whether the ensemble came from the on-disk cache.
    pub loaded_from_cache: bool,
}

fn check_distinct(seeds: &[u64]) -> Result<(), EvalError> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(EvalError::DuplicateSeeds(seeds.to_vec()));
    }
    Ok(())
}

/// Fingerprint of (config, seeds, dataset) for the ensemble cache key.
fn cache_key(cfg: &LenetConfig, seeds: &[u64], train_y: &LabelSet) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(cfg.input_hw as u64).to_le_bytes());
    bytes.extend_from_slice(&(cfg.num_classes as u64).to_le_bytes());
    bytes.extend_from_slice(&(cfg.epochs as u64).to_le_bytes());
    for s in seeds {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    bytes.extend_from_slice(&(train_y.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&train_y.labels);
    fnv1a64(&bytes)
}

impl LenetEnsemble {
    /// Train all members; every member must clear the accuracy gate on the
    /// clean test set before the ensemble is usable.
    pub fn train(
        cfg: LenetConfig,
        seeds: &[u64],
        train_x: &ImageSet,
        train_y: &LabelSet,
        test_x: &ImageSet,
        test_y: &LabelSet,
        log_progress: bool,
    ) -> Result<Self, EvalError> {
        check_distinct(seeds)?;
        let mut members = Vec::new();
        let mut member_accuracies = Vec::new();
        for &seed in seeds {
            let member = Lenet::new(cfg, seed);
            member.train_on(train_x, train_y, seed)?;
            let accuracy = member.accuracy(test_x, test_y)?;
            if log_progress {
                eprintln!("[ensemble] member seed={seed} clean accuracy {accuracy:.2}%");
            }
            if accuracy < cfg.accuracy_threshold {
                return Err(EvalError::MemberBelowThreshold {
                    seed,
                    accuracy,
                    threshold: cfg.accuracy_threshold,
                });
            }
            members.push(member);
            member_accuracies.push(accuracy);
        }
        Ok(LenetEnsemble { members, member_accuracies, loaded_from_cache: false })
    }

    /// Reuse a cached ensemble for this (config, seeds, dataset) if present,
    /// otherwise train and cache it.
    #[allow(clippy::too_many_arguments)]
    pub fn load_or_train(
        cache_dir: &Path,
        cfg: LenetConfig,
        seeds: &[u64],
        train_x: &ImageSet,
        train_y: &LabelSet,
        test_x: &ImageSet,
        test_y: &LabelSet,
        log_progress: bool,
    ) -> Result<Self, EvalError> {
        check_distinct(seeds)?;
        let key = cache_key(&cfg, seeds, train_y);
        let dir = cache_dir.join(format!("lenet-{key:016x}"));
        let paths: Vec<_> = seeds.iter().map(|s| dir.join(format!("member-{s}.ckpt"))).collect();
        if paths.iter().all(|p| p.exists()) {
            let mut members = Vec::new();
            let mut member_accuracies = Vec::new();
            for (path, &_seed) in paths.iter().zip(seeds) {
                let ckpt = Checkpoint::load(path)?;
                let member = Lenet::new(cfg, 0);
                member.load_params(&ckpt)?;
                members.push(member);
            }
            for m in &members {
                member_accuracies.push(m.accuracy(test_x, test_y)?);
            }
            return Ok(LenetEnsemble { members, member_accuracies, loaded_from_cache: true });
        }
        let ensemble = Self::train(cfg, seeds, train_x, train_y, test_x, test_y, log_progress)?;
        for (member, path) in ensemble.members.iter().zip(&paths) {
            member.save(path)?;
        }
        Ok(ensemble)
    }

    /// Mean-softmax predictions for a [b, 1, hw, hw] batch.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<u8>, EvalError> {
        let b = x.shape()[0];
        let k = self.members[0].cfg.num_classes;
        let mut mean = vec![0.0f32; b * k];
        no_grad(|| -> Result<(), EvalError> {
            for member in &self.members {
                let probs = member.logits(x)?.softmax_rows()?;
                let v = probs.values();
                for (m, &p) in mean.iter_mut().zip(v.iter()) {
                    *m += p;
                }
            }
            Ok(())
        })?;
        Ok((0..b)
            .map(|r| {
                mean[r * k..(r + 1) * k]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0 as u8
            })
            .collect())
    }
}

/// Content-swapped generations: for each source image, its implicit code
/// decoded under a sample of content labels (without replacement per source).
pub struct GeneratedSet {
    /// [len, hw*hw] pixels in [0,1]
    pub images: Vec<f32>,
    /// intended content per tuple
    pub intended: Vec<u8>,
    /// source test index per tuple
    pub source: Vec<u32>,
    pub hw: usize,
    pub contents_per_source: usize,
}

impl GeneratedSet {
    pub fn len(&self) -> usize {
        self.intended.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intended.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.hw * self.hw;
        &self.images[i * p..(i + 1) * p]
    }
}

/// Sample `count` distinct classes for one source via partial Fisher-Yates.
fn sample_contents(k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut pool: Vec<u8> = (0..k as u8).collect();
    for j in 0..count {
        let pick = j + rng.gen_range(0..(k - j));
        pool.swap(j, pick);
    }
    pool.truncate(count);
    pool
}

/// Encode every test input, then decode its implicit code under
/// `round(fraction * k)` contents sampled without replacement per input.
/// The true class is *not* excluded here.
pub fn swap_generate(
    model: &YaeModel<f32>,
    test_x: &ImageSet,
    fraction: f64,
    seed: u64,
) -> Result<GeneratedSet, EvalError> {
    let k = model.cfg.num_classes;
    let count = ((fraction * k as f64).round() as usize).clamp(1, k);
    let hw = model.cfg.input_hw;
    let per_image = hw * hw;
    let n = test_x.n;
    let mut images = vec![0.0f32; n * count * per_image];
    let mut intended = vec![0u8; n * count];
    let mut source = vec![0u32; n * count];

    let chunk = 128usize;
    no_grad(|| -> Result<(), EvalError> {
        let mut start = 0;
        while start < n {
            let b = chunk.min(n - start);
            let mut xb = Vec::with_capacity(b * per_image);
            for i in start..start + b {
                xb.extend_from_slice(test_x.image(i));
            }
            let x = nchw_from_channel_last::<f32>(&xb, b, hw, hw, 1);
            let code = model.encode(&x, Mode::Eval)?;
            // contents for each source in this chunk
            let picks: Vec<Vec<u8>> = (start..start + b)
                .map(|i| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SWAP, i as u64));
                    sample_contents(k, count, &mut rng)
                })
                .collect();
            for slot in 0..count {
                let labels: Vec<u8> = picks.iter().map(|p| p[slot]).collect();
                let y = one_hot_tensor(&labels, k);
                let decoded = model.decode(&code.implicit, &y, Mode::Eval)?;
                let dv = decoded.values();
                for r in 0..b {
                    let tuple = (start + r) * count + slot;
                    images[tuple * per_image..(tuple + 1) * per_image]
                        .copy_from_slice(&dv[r * per_image..(r + 1) * per_image]);
                    intended[tuple] = labels[r];
                    source[tuple] = (start + r) as u32;
                }
            }
            start += b;
        }
        Ok(())
    })?;
    Ok(GeneratedSet { images, intended, source, hw, contents_per_source: count })
}

/// Percentage of tuples whose ensemble prediction matches the intended
/// content.
pub fn swap_accuracy(ensemble: &LenetEnsemble, generated: &GeneratedSet) -> Result<f64, EvalError> {
    let per_image = generated.hw * generated.hw;
    let n = generated.len();
    let chunk = 256usize;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let x = nchw_from_channel_last::<f32>(
            &generated.images[start * per_image..(start + b) * per_image],
            b,
            generated.hw,
            generated.hw,
            1,
        );
        let preds = ensemble.predict(&x)?;
        for (p, &want) in preds.iter().zip(&generated.intended[start..start + b]) {
            if *p == want {
                correct += 1;
            }
        }
        start += b;
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Mean SSIM and MSE between every test input and its reconstruction under
/// *all* content classes. MSE is in per-pixel [0,1] units; multiply by 255^2
/// for byte units.
pub fn internal_ssim_mse(
    model: &YaeModel<f32>,
    test_x: &ImageSet,
) -> Result<(f64, f64), EvalError> {
    let k = model.cfg.num_classes;
    let hw = model.cfg.input_hw;
    let per_image = hw * hw;
    let n = test_x.n;
    let chunk = 128usize;
    let mut ssim_sum = 0.0f64;
    let mut mse_sum = 0.0f64;
    no_grad(|| -> Result<(), EvalError> {
        let mut start = 0;
        while start < n {
            let b = chunk.min(n - start);
            let mut xb = Vec::with_capacity(b * per_image);
            for i in start..start + b {
                xb.extend_from_slice(test_x.image(i));
            }
            let x = nchw_from_channel_last::<f32>(&xb, b, hw, hw, 1);
            let code = model.encode(&x, Mode::Eval)?;
            for class in 0..k as u8 {
                let y = one_hot_tensor(&vec![class; b], k);
                let decoded = model.decode(&code.implicit, &y, Mode::Eval)?;
                let dv = decoded.values();
                for r in 0..b {
                    let input = &xb[r * per_image..(r + 1) * per_image];
                    let output = &dv[r * per_image..(r + 1) * per_image];
                    ssim_sum += ssim(input, output, hw, hw)?;
                    mse_sum += mse(input, output);
                }
            }
            start += b;
        }
        Ok(())
    })?;
    let denom = (n * k) as f64;
    Ok((ssim_sum / denom, mse_sum / denom))
}

/// Final protocol scores for one method.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub method: String,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ssim_internal: f64,
    pub mse_internal: f64,
    /// Same MSE in byte units (x 255^2).
    pub mse_internal_255: f64,
    pub losses: Option<LossValues>,
}

impl EvalReport {
    pub fn from_runs(method: &str, accuracies: &[f64], ssims: &[f64], mses: &[f64]) -> EvalReport {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let acc_mean = mean(accuracies);
        let acc_std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - acc_mean).powi(2)).sum::<f64>()
                / (accuracies.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let mse_mean = mean(mses);
        EvalReport {
            method: method.to_string(),
            accuracy_mean: acc_mean,
            accuracy_std: acc_std,
            ssim_internal: mean(ssims),
            mse_internal: mse_mean,
            mse_internal_255: mse_mean * 255.0 * 255.0,
            losses: None,
        }
    }

    /// Flat key-value serialization.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method = {}\n", self.method));
        out.push_str(&format!("accuracy_mean = {:.4}\n", self.accuracy_mean));
        out.push_str(&format!("accuracy_std = {:.4}\n", self.accuracy_std));
        out.push_str(&format!("ssim_internal = {:.4}\n", self.ssim_internal));
        out.push_str(&format!("mse_internal = {:.6}\n", self.mse_internal));
        out.push_str(&format!("mse_internal_255 = {:.2}\n", self.mse_internal_255));
        if let Some(l) = &self.losses {
            out.push_str(&format!("loss_r = {:.6}\nloss_c = {:.6}\nloss_e = {:.6}\nloss_i = {:.6}\nloss_total = {:.6}\n", l.l_r, l.l_c, l.l_e, l.l_i, l.total));
        }
        out
    }

    pub const CSV_HEADER: &'static str = "method,accuracy_mean,accuracy_std,ssim,mse";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.4},{:.6}",
            self.method, self.accuracy_mean, self.accuracy_std, self.ssim_internal, self.mse_internal
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_sets(n_train: usize, n_test: usize) -> (ImageSet, LabelSet, ImageSet, LabelSet) {
        let (tx, ty) = crate::synth::generate(n_train, 3, 0);
        let (ex, ey) = crate::synth::generate(n_test, 3, 1 << 32);
        (
            crate::dataio::pad_to(&tx, (32, 32)).unwrap(),
            ty,
            crate::dataio::pad_to(&ex, (32, 32)).unwrap(),
            ey,
        )
    }

    fn untrained_model() -> YaeModel<f32> {
        YaeModel::new(ModelConfig::for_input(32, 8, 10), 5).unwrap()
    }

    #[test]
    fn duplicate_seeds_rejected() {
        assert!(matches!(check_distinct(&[1, 2, 2, 4, 5]), Err(EvalError::DuplicateSeeds(_))));
        assert!(check_distinct(&[0, 1, 2, 3, 4]).is_ok());
    }

    #[test]
    fn content_sampling_without_replacement_and_fraction_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let picks = sample_contents(10, 6, &mut rng);
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 6, "duplicates in {picks:?}");
        }
        let all = sample_contents(10, 10, &mut rng);
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn swap_generate_counts_and_determinism() {
        let model = untrained_model();
        let (_, _, ex, _) = tiny_sets(4, 25);
        let g = swap_generate(&model, &ex, 0.6, 9).unwrap();
        assert_eq!(g.len(), 25 * 6);
        assert_eq!(g.contents_per_source, 6);
        // no repeated content per source
        for src in 0..25u32 {
            let mut contents: Vec<u8> = (0..g.len())
                .filter(|&i| g.source[i] == src)
                .map(|i| g.intended[i])
                .collect();
            assert_eq!(contents.len(), 6);
            contents.sort_unstable();
            contents.dedup();
            assert_eq!(contents.len(), 6);
        }
        let g2 = swap_generate(&model, &ex, 0.6, 9).unwrap();
        assert_eq!(g.intended, g2.intended);
        assert_eq!(g.images, g2.images);
        // fraction 1.0 covers all classes
        let g_all = swap_generate(&model, &ex.take(3), 1.0, 9).unwrap();
        assert_eq!(g_all.len(), 30);
    }

    #[test]
    fn identity_like_model_scores_ssim_one_mse_zero() {
        // internal metrics on (x, x) pairs: feed the degenerate case directly
        // through the metric kernels used by internal_ssim_mse.
        let (_, _, ex, _) = tiny_sets(2, 3);
        for i in 0..3 {
            let img = ex.image(i);
            assert_eq!(ssim(img, img, 32, 32).unwrap(), 1.0);
            assert_eq!(mse(img, img), 0.0);
        }
    }

    #[test]
    fn report_aggregation_and_serialization() {
        let r = EvalReport::from_runs("yae", &[99.0, 99.5, 100.0], &[0.3, 0.4, 0.35], &[0.04, 0.05, 0.06]);
        assert!((r.accuracy_mean - 99.5).abs() < 1e-9);
        assert!((r.accuracy_std - 0.5).abs() < 1e-9);
        assert!((r.mse_internal_255 - 0.05 * 65025.0).abs() < 1e-6);
        let kv = r.to_kv();
        assert!(kv.contains("method = yae"));
        assert!(r.to_csv_row().starts_with("yae,"));
    }

    // Ensemble training is exercised at realistic scale by the acceptance
    // suite; here a micro run checks the gate plumbing end to end.
    #[test]
    fn undertrained_member_trips_the_accuracy_gate() {
        let (tx, ty, ex, ey) = tiny_sets(40, 20);
        let mut cfg = LenetConfig::for_input(32, 10);
        cfg.epochs = 1;
        cfg.batch_size = 20;
        let result = LenetEnsemble::train(cfg, &[0, 1], &tx, &ty, &ex, &ey, false);
        assert!(matches!(result, Err(EvalError::MemberBelowThreshold { .. })));
    }
}

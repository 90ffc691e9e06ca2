//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use yae_core::dataio::ImageSet;
use yae_core::eval::{
    internal_ssim_mse, swap_accuracy, swap_generate, EvalReport, LenetConfig, LenetEnsemble,
};
use yae_core::model::{nchw_from_channel_last, YaeModel};
use yae_core::nn::checkpoint::Checkpoint;
use yae_core::nn::{no_grad, Mode};
use yae_core::synth;
use yae_core::trainer::{
    self, evaluate_losses, run_ablation_matrix, train, ABLATION_CONDITIONS,
};
use yae_core::util::{derive_seed, stream};

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::config::ExperimentConfig;
use crate::manifest::write_run_manifest;
use crate::{CliError, Command};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, seed, out, resume } => cmd_train(&config, seed, out, resume),
        Command::Ablate { config, conditions, seeds, out } => {
            cmd_ablate(&config, conditions.as_deref(), seeds.as_deref(), out)
        }
        Command::Eval { config, checkpoint, fraction, method, out } => {
            cmd_eval(&config, &checkpoint, fraction, method.as_deref(), out)
        }
        Command::Generate { config, checkpoint, out, rows, seed } => {
            cmd_generate(&config, &checkpoint, out, rows, seed)
        }
        Command::Synth { out, train, test, seed } => cmd_synth(&out, train, test, seed),
    }
}

fn load_config(
    path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<(ExperimentConfig, PathBuf, PathBuf), CliError> {
    let (mut cfg, config_dir) = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    if let Some(out) = out_override {
        cfg.output.dir = out;
    }
    cfg.train.validate().map_err(CliError::from)?;
    let run_dir = cfg.output.dir.clone();
    Ok((cfg, config_dir, run_dir))
}

pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, config_dir, run_dir) = load_config(config_path, seed, out)?;
    write_run_manifest(&run_dir, "train", &cfg, &config_dir, cfg.train.seed)?;
    let (train_x, train_y, _, _) = cfg.load_datasets(&config_dir)?;
    let resume_ckpt = match &resume {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let out = train(&cfg.train, &train_x, &train_y, Some(&run_dir), resume_ckpt.as_ref(), true)?;
    eprintln!(
        "trained {} iterations; wrote {} and metrics.csv under {}",
        out.metrics.last().map(|r| r.iteration).unwrap_or(0),
        out.final_checkpoint.as_deref().unwrap_or(Path::new("final.ckpt")).display(),
        run_dir.display()
    );
    Ok(())
}

fn parse_conditions(s: &str) -> Result<Vec<(f64, f64)>, CliError> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let parts: Vec<&str> = pair.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(CliError::Config(format!("bad condition '{pair}', want 'le,li'")));
            }
            let le = parts[0].parse::<f64>().map_err(|e| CliError::Config(format!("{pair}: {e}")))?;
            let li = parts[1].parse::<f64>().map_err(|e| CliError::Config(format!("{pair}: {e}")))?;
            Ok((le, li))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(|e| CliError::Config(format!("seed '{p}': {e}"))))
        .collect()
}

pub fn cmd_ablate(
    config_path: &Path,
    conditions: Option<&str>,
    seeds: Option<&str>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, config_dir, run_dir) = load_config(config_path, None, out)?;
    let conditions = match conditions {
        Some(s) => parse_conditions(s)?,
        None => ABLATION_CONDITIONS.to_vec(),
    };
    let seeds = match seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![0, 1, 2],
    };
    if conditions.is_empty() || seeds.is_empty() {
        return Err(CliError::Config("need at least one condition and one seed".into()));
    }
    write_run_manifest(&run_dir, "ablate", &cfg, &config_dir, cfg.train.seed)?;
    let (train_x, train_y, test_x, test_y) = cfg.load_datasets(&config_dir)?;
    let cells = run_ablation_matrix(
        &cfg.train,
        &conditions,
        &seeds,
        &train_x,
        &train_y,
        &test_x,
        &test_y,
        Some(&run_dir),
        true,
    )?;
    let summary = trainer::ablation_summary_csv(&cells);
    fs::write(run_dir.join("summary.csv"), &summary)
        .map_err(|e| CliError::Config(format!("summary.csv: {e}")))?;
    println!("{summary}");
    Ok(())
}

pub fn cmd_eval(
    config_path: &Path,
    checkpoints: &[PathBuf],
    fraction: Option<f64>,
    method: Option<&str>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, config_dir, run_dir) = load_config(config_path, None, out)?;
    if let Some(f) = fraction {
        cfg.eval.fraction = f;
    }
    if !(0.0 < cfg.eval.fraction && cfg.eval.fraction <= 1.0) {
        return Err(CliError::Config(format!("eval.fraction = {} out of (0, 1]", cfg.eval.fraction)));
    }
    for p in checkpoints {
        if !p.exists() {
            return Err(CliError::Data(format!("missing checkpoint: {}", p.display())));
        }
    }
    write_run_manifest(&run_dir, "eval", &cfg, &config_dir, cfg.train.seed)?;
    let (train_x, train_y, test_x, test_y) = cfg.load_datasets(&config_dir)?;

    let cache_dir = if cfg.eval.cache_dir.is_absolute() {
        cfg.eval.cache_dir.clone()
    } else {
        run_dir.join(&cfg.eval.cache_dir)
    };
    let mut lenet_cfg = LenetConfig::for_input(cfg.train.effective().input_hw, cfg.train.num_classes);
    lenet_cfg.epochs = cfg.eval.ensemble_epochs;
    let ensemble = LenetEnsemble::load_or_train(
        &cache_dir,
        lenet_cfg,
        &cfg.eval.ensemble_seeds,
        &train_x,
        &train_y,
        &test_x,
        &test_y,
        true,
    )?;
    eprintln!(
        "ensemble ready ({}): member clean accuracies {:?}",
        if ensemble.loaded_from_cache { "cached" } else { "trained" },
        ensemble.member_accuracies.iter().map(|a| format!("{a:.2}%")).collect::<Vec<_>>()
    );

    let mut accuracies = Vec::new();
    let mut ssims = Vec::new();
    let mut mses = Vec::new();
    let mut losses = None;
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let model = YaeModel::<f32>::load(&ckpt)?;
        if model.cfg.input_hw != test_x.h {
            return Err(CliError::Config(format!(
                "checkpoint expects {0}x{0} inputs, dataset is {1}x{1}",
                model.cfg.input_hw, test_x.h
            )));
        }
        let generated = swap_generate(&model, &test_x, cfg.eval.fraction, cfg.train.seed)?;
        let acc = swap_accuracy(&ensemble, &generated)?;
        let (ssim_v, mse_v) = internal_ssim_mse(&model, &test_x)?;
        eprintln!(
            "{}: swap accuracy {acc:.2}% over {} tuples, internal ssim {ssim_v:.4}, mse {mse_v:.6}",
            path.display(),
            generated.len()
        );
        accuracies.push(acc);
        ssims.push(ssim_v);
        mses.push(mse_v);
        losses = Some(evaluate_losses(&model, &cfg.train, &test_x, &test_y)?);
    }
    let mut report = EvalReport::from_runs(
        method.unwrap_or("yae"),
        &accuracies,
        &ssims,
        &mses,
    );
    report.losses = losses;
    fs::write(run_dir.join("eval_report.txt"), report.to_kv())
        .map_err(|e| CliError::Config(format!("eval_report.txt: {e}")))?;
    let results = run_dir.join("results.csv");
    let mut rows = if results.exists() {
        fs::read_to_string(&results).map_err(|e| CliError::Config(format!("results.csv: {e}")))?
    } else {
        format!("{}\n", EvalReport::CSV_HEADER)
    };
    rows.push_str(&report.to_csv_row());
    rows.push('\n');
    fs::write(&results, rows).map_err(|e| CliError::Config(format!("results.csv: {e}")))?;
    println!("{}", report.to_kv());
    Ok(())
}

pub fn cmd_generate(
    config_path: &Path,
    checkpoint: &Path,
    out: Option<PathBuf>,
    rows: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let (cfg, config_dir, run_dir) = load_config(config_path, seed, None)?;
    if !checkpoint.exists() {
        return Err(CliError::Data(format!("missing checkpoint: {}", checkpoint.display())));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = YaeModel::<f32>::load(&ckpt)?;
    let (_, _, test_x, _) = cfg.load_datasets(&config_dir)?;
    if model.cfg.input_hw != test_x.h {
        return Err(CliError::Config(format!(
            "checkpoint expects {0}x{0} inputs, dataset is {1}x{1}",
            model.cfg.input_hw, test_x.h
        )));
    }
    let rows = rows.unwrap_or(cfg.emit.grid_rows).max(1).min(test_x.n);
    let out_path = out.unwrap_or_else(|| run_dir.join("grid.png"));
    let png = render_grid(&model, &test_x, rows, cfg.train.seed)?;
    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    }
    png.save(&out_path).map_err(|e| CliError::Config(format!("{}: {e}", out_path.display())))?;
    eprintln!("wrote {} ({} rows x {} columns)", out_path.display(), rows, model.cfg.num_classes + 1);
    Ok(())
}

/// Column 0: inputs; columns 1..=k: reconstructions under each content class.
fn render_grid(
    model: &YaeModel<f32>,
    test_x: &ImageSet,
    rows: usize,
    seed: u64,
) -> Result<image::GrayImage, CliError> {
    let hw = model.cfg.input_hw;
    let k = model.cfg.num_classes;
    let mut indices: Vec<usize> = (0..test_x.n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SWAP, u64::MAX));
    indices.shuffle(&mut rng);
    indices.truncate(rows);

    let mut xb = Vec::with_capacity(rows * hw * hw);
    for &i in &indices {
        xb.extend_from_slice(test_x.image(i));
    }
    let mut grid = image::GrayImage::new(((k + 1) * hw) as u32, (rows * hw) as u32);
    let quant = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    for (r, _) in indices.iter().enumerate() {
        for y in 0..hw {
            for x in 0..hw {
                grid.put_pixel(x as u32, (r * hw + y) as u32, image::Luma([quant(xb[(r * hw + y) * hw + x])]));
            }
        }
    }
    no_grad(|| -> Result<(), CliError> {
        let x = nchw_from_channel_last::<f32>(&xb, rows, hw, hw, 1);
        let code = model.encode(&x, Mode::Eval).map_err(CliError::from)?;
        for class in 0..k as u8 {
            let y = trainer::one_hot_tensor(&vec![class; rows], k);
            let decoded = model.decode(&code.implicit, &y, Mode::Eval).map_err(CliError::from)?;
            let dv = decoded.values();
            for r in 0..rows {
                for yy in 0..hw {
                    for xx in 0..hw {
                        grid.put_pixel(
                            ((1 + class as usize) * hw + xx) as u32,
                            (r * hw + yy) as u32,
                            image::Luma([quant(dv[(r * hw + yy) * hw + xx])]),
                        );
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok(grid)
}

pub fn cmd_synth(out: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<(), CliError> {
    let paths = synth::ensure_corpus(out, train_n, test_n, seed)?;
    eprintln!(
        "corpus ready under {}: {} train / {} test images",
        paths.dir.display(),
        train_n,
        test_n
    );
    Ok(())
}


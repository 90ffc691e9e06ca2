// Mirrors the acceptance suite's desk-scale ablation exactly:
// 10000 train images, 20 epochs, 1 seed, batch 128, four conditions.
use yae_core::dataio;
use yae_core::trainer::{evaluate_losses, train, TrainConfig};

fn main() {
    let dir = std::path::PathBuf::from("/tmp/yae-calib-corpus");
    let paths = yae_core::synth::ensure_corpus(&dir, 60000, 10000, 0).unwrap();
    let tx = dataio::pad_to(&dataio::load_idx_images(&paths.train_images).unwrap(), (32, 32)).unwrap().take(10000);
    let ty = dataio::load_idx_labels(&paths.train_labels, 10).unwrap().take(10000);
    let ex = dataio::pad_to(&dataio::load_idx_images(&paths.test_images).unwrap(), (32, 32)).unwrap();
    let ey = dataio::load_idx_labels(&paths.test_labels, 10).unwrap();
    eprintln!("data ready: {} train, {} test", tx.n, ex.n);
    for (le, li) in [(1.0, 1.0), (0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
        let cfg = TrainConfig { epochs: 20, lambda_e: le, lambda_i: li, seed: 0, ..TrainConfig::default() };
        let out = train(&cfg, &tx, &ty, None, None, true).unwrap();
        let v = evaluate_losses(&out.model, &cfg, &ex, &ey).unwrap();
        println!(
            "### condition le={le} li={li}: test l_r={:.5} l_c={:.4} l_e={:.4} l_i={:.4} total={:.4}",
            v.l_r, v.l_c, v.l_e, v.l_i, v.total
        );
    }
}

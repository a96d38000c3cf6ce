//! Miniature semi-supervised training run: labeled source rain, unlabeled
//! target rain, GP pseudo-labels on the latent rows.
//!
//! Run with: cargo run --release --example train_ssl

use syn2real::gp::GpMode;
use syn2real::model::ModelConfig;
use syn2real::rainsynth::{derive_seed, procedural_texture, render_rain, RainParams};
use syn2real::trainer::{train, Dataset, LoadedExample, TrainConfig};

fn domain(params: &RainParams, n: usize, labeled: bool, tex_seed: u64) -> Dataset {
    let examples = (0..n)
        .map(|i| {
            let clean = procedural_texture(32, tex_seed + i as u64);
            let p = RainParams { seed: derive_seed(params.seed, i as u64), ..*params };
            let (rainy, _) = render_rain(&clean, &p).unwrap();
            LoadedExample { id: format!("img{:02}", i), rainy, clean: labeled.then_some(clean) }
        })
        .collect();
    Dataset { name: if labeled { "labeled" } else { "unlabeled" }.into(), examples, image_size: 32, skipped: 0 }
}

fn main() {
    let source = RainParams { orientation_deg: 70.0, density: 8.0, seed: 1, ..Default::default() };
    let target = RainParams { orientation_deg: 110.0, density: 16.0, seed: 2, ..Default::default() };

    let labeled = domain(&source, 12, true, 500);
    let unlabeled = domain(&target, 12, false, 600);
    let mut eval = domain(&target, 4, true, 700);
    eval.name = "target-test".into();

    let model_config = ModelConfig { crop: 32, ..Default::default() };
    let config = TrainConfig {
        epochs: 3,
        batch: 4,
        n_neighbors: 4,
        gp_mode: GpMode::PerFeatureMap,
        seed: 11,
        ..Default::default()
    };

    let out = std::path::Path::new("target/example_out/train_ssl");
    let _ = std::fs::remove_dir_all(out);
    let (_model, log) =
        train(model_config, config, &labeled, Some(&unlabeled), &[&eval], out).unwrap();

    println!("epoch  sup_loss   unsup_loss  bank  target PSNR");
    for rec in &log {
        println!(
            "{:>5}  {:>8.5}  {:>10.6}  {:>4}  {:>8.2} dB",
            rec.epoch,
            rec.sup_loss,
            rec.unsup_loss,
            rec.bank_size,
            rec.eval[0].mean_psnr
        );
    }
    println!("checkpoint, run log, bank dump and samples in {}", out.display());
}

//! Derain a single image end to end: synthesize a rainy input, briefly train
//! a small model on matching rain, and compare PSNR before and after.
//!
//! Run with: cargo run --release --example derain_image

use syn2real::gp::GpMode;
use syn2real::model::ModelConfig;
use syn2real::objective::psnr;
use syn2real::rainsynth::{derive_seed, procedural_texture, render_rain, save_png, RainParams};
use syn2real::trainer::{derain_full, train, Dataset, LoadedExample, TrainConfig};

fn main() {
    let params = RainParams { density: 10.0, seed: 3, ..Default::default() };

    // A small supervised training set with the same rain statistics.
    let examples: Vec<LoadedExample> = (0..16)
        .map(|i| {
            let clean = procedural_texture(32, 40 + i as u64);
            let p = RainParams { seed: derive_seed(params.seed, i as u64), ..params };
            let (rainy, _) = render_rain(&clean, &p).unwrap();
            LoadedExample { id: format!("train{:02}", i), rainy, clean: Some(clean) }
        })
        .collect();
    let labeled =
        Dataset { name: "train".into(), examples, image_size: 32, skipped: 0 };

    let out = std::path::Path::new("target/example_out/derain_image");
    let _ = std::fs::remove_dir_all(out);
    let model_config = ModelConfig { crop: 32, ..Default::default() };
    let config = TrainConfig {
        epochs: 12,
        batch: 4,
        gp_mode: GpMode::Off,
        seed: 5,
        ..Default::default()
    };
    let (model, _) = train(model_config, config, &labeled, None, &[], out).unwrap();

    // A held-out rainy image (the tiling path handles the larger size).
    let clean = procedural_texture(64, 999);
    let (rainy, _) = render_rain(&clean, &RainParams { seed: 777, ..params }).unwrap();
    let derained = derain_full(&model, &rainy).unwrap().clamp(0.0, 1.0);

    std::fs::create_dir_all(out).unwrap();
    save_png(&out.join("rainy.png"), &rainy).unwrap();
    save_png(&out.join("derained.png"), &derained).unwrap();
    save_png(&out.join("clean.png"), &clean).unwrap();

    let before = psnr(&rainy.clamp(0.0, 1.0), &clean);
    let after = psnr(&derained, &clean);
    println!("rainy    vs clean: {:.2} dB", before);
    println!("derained vs clean: {:.2} dB  ({:+.2} dB)", after, after - before);
    println!("images written to {}", out.display());
}

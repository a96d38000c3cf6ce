//! PSNR and SSIM behavior on controlled image pairs.
//!
//! Run with: cargo run --release --example quality_metrics

use syn2real::objective::{psnr, ssim};
use syn2real::rainsynth::{procedural_texture, render_rain, RainParams};
use syn2real::tensor::Tensor;

fn main() {
    let img = procedural_texture(64, 21);

    println!("identical images:      psnr {:>6.2} dB   ssim {:.4}", psnr(&img, &img), ssim(&img, &img).unwrap());

    let offset = Tensor::new(
        img.shape.clone(),
        img.data.iter().map(|v| (v + 0.1).clamp(0.0, 1.0)).collect(),
    );
    println!(
        "+0.1 brightness:       psnr {:>6.2} dB   ssim {:.4}",
        psnr(&offset, &img),
        ssim(&offset, &img).unwrap()
    );

    for density in [4.0, 16.0] {
        let (rainy, _) = render_rain(
            &img,
            &RainParams { density, seed: 9, ..Default::default() },
        )
        .unwrap();
        println!(
            "rain at {:>4.1}/kpx:      psnr {:>6.2} dB   ssim {:.4}",
            density,
            psnr(&rainy, &img),
            ssim(&rainy, &img).unwrap()
        );
    }

    let negative = Tensor::new(img.shape.clone(), img.data.iter().map(|v| 1.0 - v).collect());
    println!(
        "negative image:        psnr {:>6.2} dB   ssim {:+.4}",
        psnr(&negative, &img),
        ssim(&negative, &img).unwrap()
    );
}

//! Debug the GP pathway the way `syn2real gp-inspect` does: encode an image,
//! rank bank neighbors, and report the posterior's uncertainty and loss.
//!
//! Run with: cargo run --release --example inspect_gp_pathway

use syn2real::gp::{self, GpMode, KernelKind, KernelSpec};
use syn2real::linalg::sym_eigenvalues;
use syn2real::model::{LatentMatrix, Model, ModelConfig};
use syn2real::objective::unsup_loss;
use syn2real::rainsynth::{derive_seed, procedural_texture, render_rain, RainParams};
use syn2real::tensor::{Tape, Tensor};

fn main() {
    let config = ModelConfig { crop: 32, ..Default::default() };
    let model = Model::init(config, 4).unwrap();
    let params = RainParams { seed: 8, ..Default::default() };

    // Bank from a handful of "labeled" rainy images.
    let labeled: Vec<(String, Tensor)> = (0..10)
        .map(|i| {
            let clean = procedural_texture(32, 60 + i as u64);
            let p = RainParams { seed: derive_seed(params.seed, i as u64), ..params };
            (format!("labeled{:02}", i), render_rain(&clean, &p).unwrap().0)
        })
        .collect();
    let bank = gp::rebuild_bank(&labeled, &model, GpMode::WholeLatent, 256, 0, 0).unwrap();
    println!(
        "bank: {} entries, median row distance {:.3}",
        bank.len(),
        bank.length_scale_heuristic()
    );

    // Probe with one of the bank's own images: it must rank itself first.
    let probe = &labeled[3].1;
    let z = model.encode_tap_batch(&[probe]).unwrap().remove(0);
    let neighbors = gp::nearest(&z, &bank, 4).unwrap();
    println!("nearest neighbors of {}:", labeled[3].0);
    for nb in &neighbors {
        println!("  {:<10} cosine {:.6}", bank.entries[nb.index].image_id, nb.score);
    }
    assert_eq!(bank.entries[neighbors[0].index].image_id, labeled[3].0);

    let spec = KernelSpec::resolve(KernelKind::Lin, bank.length_scale_heuristic());
    let refs: Vec<(usize, &LatentMatrix)> =
        neighbors.iter().map(|nb| (nb.index, &bank.entries[nb.index].latent)).collect();
    let post = gp::posterior(&z, &refs, &spec, 1.0, bank.mode).unwrap();

    let alpha = post.alpha.as_ref().unwrap();
    println!("whole-latent weights: {:?}", alpha.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>());
    let recon: f64 = {
        let mut acc = vec![0.0; z.data.len()];
        for (nb, a) in neighbors.iter().zip(alpha) {
            for (o, v) in acc.iter_mut().zip(&bank.entries[nb.index].latent.data) {
                *o += a * v;
            }
        }
        acc.iter().zip(&post.mu.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    println!("alpha reconstructs mu to {:.1e}", recon);

    let eig = sym_eigenvalues(&post.sigma);
    println!("sigma eigenvalues: [{:.4}, {:.4}]", eig[0], eig[eig.len() - 1]);

    let mut tape = Tape::new();
    let zt = Tensor::new(vec![1, z.rows * z.cols], z.data.clone());
    let zid = tape.leaf(&zt);
    let loss = unsup_loss(&mut tape, zid, &post).unwrap();
    println!("unsup loss at the probe: {:.6}", tape.value(loss));
}

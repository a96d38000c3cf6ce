//! GP posterior over latent matrices: pseudo-ground-truth means, covariance
//! eigenvalues, and the interpolation limit as the noise vanishes.
//!
//! Run with: cargo run --release --example gp_posterior

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use syn2real::gp::{nearest, posterior, BankEntry, FeatureBank, GpMode, KernelSpec};
use syn2real::linalg::sym_eigenvalues;
use syn2real::model::LatentMatrix;

fn rand_latent(m: usize, d: usize, rng: &mut ChaCha8Rng) -> LatentMatrix {
    LatentMatrix { rows: m, cols: d, data: (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect() }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, d) = (4, 16);

    // A bank of "labeled" latents and one query.
    let entries: Vec<BankEntry> = (0..12)
        .map(|i| BankEntry { image_id: format!("labeled{:02}", i), latent: rand_latent(m, d, &mut rng) })
        .collect();
    let bank = FeatureBank::new(entries, GpMode::PerFeatureMap, 0).unwrap();
    let query = rand_latent(m, d, &mut rng);

    let neighbors = nearest(&query, &bank, 4).unwrap();
    println!("nearest neighbors of the query (whole-latent cosine):");
    for nb in &neighbors {
        println!("  {} score {:.4}", bank.entries[nb.index].image_id, nb.score);
    }

    let refs: Vec<(usize, &LatentMatrix)> =
        neighbors.iter().map(|nb| (nb.index, &bank.entries[nb.index].latent)).collect();
    let post = posterior(&query, &refs, &KernelSpec::Lin, 1.0, GpMode::PerFeatureMap).unwrap();
    let eig = sym_eigenvalues(&post.sigma);
    println!("\nper-feature-map posterior at sigma_eps2 = 1:");
    println!("  mu is {}x{} (pseudo-GT for each latent row)", post.mu.rows, post.mu.cols);
    println!("  sigma eigenvalues in [{:.4}, {:.4}] (floor is sigma_eps2)", eig[0], eig[eig.len() - 1]);

    // Interpolation limit: conditioning on the query itself with vanishing
    // noise reproduces the query as its own pseudo-GT.
    let self_post =
        posterior(&query, &[(0, &query)], &KernelSpec::Lin, 1e-9, GpMode::PerFeatureMap).unwrap();
    let max_err = self_post
        .mu
        .data
        .iter()
        .zip(&query.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("\ninterpolation limit (self neighbor, sigma_eps2 = 1e-9):");
    println!("  max |mu - z| = {:.2e}", max_err);
    assert!(max_err < 1e-5);

    // Whole-latent mode exposes the combination weights of Eq. (11)-style
    // mixing: mu is exactly their weighted sum of neighbor latents.
    let wl = posterior(&query, &refs, &KernelSpec::Lin, 1.0, GpMode::WholeLatent).unwrap();
    let alpha = wl.alpha.as_ref().unwrap();
    println!("\nwhole-latent combination weights:");
    for (nb, a) in neighbors.iter().zip(alpha) {
        println!("  alpha[{}] = {:+.4}", bank.entries[nb.index].image_id, a);
    }
}

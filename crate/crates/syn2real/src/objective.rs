//! Loss functions and full-reference quality metrics.
//!
//! The supervised loss is mean absolute error plus a weighted feature-space
//! term. The heavyweight pretrained perceptual network is substituted by a
//! frozen, seeded, 3-layer random convolutional extractor: random features
//! keep the multi-scale smoothing role without any external weight artifact,
//! and the weight semantics of `lambda_p` carry over. Plug a different
//! extractor through [`FeatureExtractor::from_weights`] for full-scale runs.
//!
//! The unsupervised loss is a Gaussian negative-log-likelihood-style term on
//! the latent rows: a Mahalanobis distance to the pseudo-ground-truth under
//! the GP posterior covariance plus the covariance log-determinant. The
//! quadratic term is normalized by the row dimension D so the value does not
//! scale with crop size; the covariance term stays differentiable through
//! the predicted latent while the mean is a constant target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::model::init_bound;
use crate::tensor::{Tape, Tensor, TensorId};

/// Loss weights: `lambda_p` scales the feature term inside the supervised
/// loss, `lambda_unsup` scales the GP latent loss inside the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_p: 0.04, lambda_unsup: 1.5e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_p < 0.0 || self.lambda_unsup < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean absolute error over all elements (mean, not sum, so the value is
/// independent of crop size).
pub fn l1_loss(tape: &mut Tape, y_pred: TensorId, y: TensorId) -> Result<TensorId> {
    let d = tape.sub(y_pred, y)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Frozen random convolutional feature extractor: three 3x3 conv layers with
/// leaky-ReLU and 2x2 average pooling in between. Built once per run from a
/// seed; weights are never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
    slope: f64,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [(3usize, 8usize), (8, 8), (8, 8)];
        let slope = 0.2;
        let layers = widths
            .iter()
            .map(|&(cin, cout)| {
                let a = init_bound(cin * 9, slope);
                let w = Tensor::new(
                    vec![cout, cin, 3, 3],
                    (0..cout * cin * 9).map(|_| rng.gen_range(-a..a)).collect(),
                );
                (w, Tensor::zeros(vec![cout]))
            })
            .collect();
        FeatureExtractor { layers, slope }
    }

    /// Swap in externally supplied conv stacks (weight, bias) pairs.
    pub fn from_weights(layers: Vec<(Tensor, Tensor)>, slope: f64) -> FeatureExtractor {
        FeatureExtractor { layers, slope }
    }

    /// Feature maps of a `[N,3,H,W]` batch. Constant weights; gradients flow
    /// only through the input.
    pub fn features(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wid = tape.constant(w.shape.clone(), w.data.clone());
            let bid = tape.constant(b.shape.clone(), b.data.clone());
            h = tape.conv2d(h, wid, bid, 1)?;
            h = tape.leaky_relu(h, self.slope);
            if i + 1 < self.layers.len() {
                h = tape.avg_pool2(h)?;
            }
        }
        Ok(h)
    }
}

/// Mean squared error between extractor features of the two images.
pub fn feature_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    y_pred: TensorId,
    y: TensorId,
) -> Result<TensorId> {
    let fp = extractor.features(tape, y_pred)?;
    let fy = extractor.features(tape, y)?;
    let d = tape.sub(fp, fy)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Supervised loss: `l1 + lambda_p * feature`.
pub fn sup_loss(
    tape: &mut Tape,
    extractor: &FeatureExtractor,
    y_pred: TensorId,
    y: TensorId,
    weights: &LossWeights,
) -> Result<TensorId> {
    let l1 = l1_loss(tape, y_pred, y)?;
    let fl = feature_loss(tape, extractor, y_pred, y)?;
    let scaled = tape.scalar_mul(fl, weights.lambda_p);
    tape.add(l1, scaled)
}

/// Unsupervised GP loss for one image's predicted latent rows.
///
/// `z_pred` must be `[M, D]` in per-feature-map mode or `[1, M*D]` in
/// whole-latent mode (matching `post.mu`). The covariance is re-assembled on
/// the tape from the posterior's constant Gram factor so gradients reach
/// `z_pred` both through the residual and through the covariance itself:
///
/// `loss = tr(dᵀ Σ⁻¹ d)/D + log|Σ|`, `d = z_pred - mu`,
/// `Σ = K(z,z) - K(z,F) G⁻¹ K(F,z) + σ²I`.
pub fn unsup_loss(tape: &mut Tape, z_pred: TensorId, post: &GpPosterior) -> Result<TensorId> {
    let zs = tape.shape(z_pred).to_vec();
    if zs.len() != 2 || zs[0] != post.mu.rows || zs[1] != post.mu.cols {
        return Err(Error::ShapeMismatch {
            op: "unsup_loss",
            detail: format!(
                "z_pred {:?} vs posterior mean {}x{} ({} mode)",
                zs, post.mu.rows, post.mu.cols, post.mode
            ),
        });
    }
    let m = zs[0];
    let kstar = tape.kernel_gram_const(z_pred, post.index_rows.clone(), post.spec)?;
    let kt = tape.transpose2(kstar)?;
    let w = tape.solve_const_spd(post.chol.clone(), kt)?;
    let q = tape.matmul(kstar, w)?;
    let kuu = tape.kernel_gram_self(z_pred, post.spec)?;
    let schur = tape.sub(kuu, q)?;
    let eye: Vec<f64> = (0..m * m)
        .map(|i| if i % (m + 1) == 0 { post.sigma_eps2 } else { 0.0 })
        .collect();
    let noise = tape.constant(vec![m, m], eye);
    let sigma = tape.add(schur, noise)?;
    let mu = tape.constant(vec![post.mu.rows, post.mu.cols], post.mu.data.clone());
    let delta = tape.sub(z_pred, mu)?;
    tape.gaussian_quad_logdet(sigma, delta)
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Peak signal-to-noise ratio in dB on unit dynamic range, capped at 100.
/// Inputs are expected to be clamped to [0,1] already.
pub fn psnr(y_pred: &Tensor, y: &Tensor) -> f64 {
    assert_eq!(y_pred.shape, y.shape, "psnr shape mismatch");
    let mse = y_pred
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y_pred.data.len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

/// Mean local SSIM over all fully-inside 8x8 windows of the channel-mean
/// grayscale images, with the standard constants on unit dynamic range.
pub fn ssim(y_pred: &Tensor, y: &Tensor) -> Result<f64> {
    if y_pred.shape != y.shape {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("{:?} vs {:?}", y_pred.shape, y.shape),
        });
    }
    let s = &y_pred.shape;
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    const WIN: usize = 8;
    let (h, w) = (s[1], s[2]);
    if h < WIN || w < WIN {
        return Err(Error::Config(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            h, w, WIN, WIN
        )));
    }
    let ga = grayscale(y_pred);
    let gb = grayscale(y);

    // Prefix sums of a, b, a^2, b^2, ab for O(1) window statistics.
    let ps = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut p = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                p[(y + 1) * (w + 1) + x + 1] = f(y * w + x) + p[y * (w + 1) + x + 1]
                    + p[(y + 1) * (w + 1) + x]
                    - p[y * (w + 1) + x];
            }
        }
        p
    };
    let pa = ps(&|i| ga[i]);
    let pb = ps(&|i| gb[i]);
    let paa = ps(&|i| ga[i] * ga[i]);
    let pbb = ps(&|i| gb[i] * gb[i]);
    let pab = ps(&|i| ga[i] * gb[i]);
    let window = |p: &[f64], y0: usize, x0: usize| -> f64 {
        p[(y0 + WIN) * (w + 1) + x0 + WIN] - p[y0 * (w + 1) + x0 + WIN]
            - p[(y0 + WIN) * (w + 1) + x0]
            + p[y0 * (w + 1) + x0]
    };

    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            let sa = window(&pa, y0, x0);
            let sb = window(&pb, y0, x0);
            let (ma, mb) = (sa / n, sb / n);
            let va = window(&paa, y0, x0) / n - ma * ma;
            let vb = window(&pbb, y0, x0) / n - mb * mb;
            let cov = window(&pab, y0, x0) / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn grayscale(img: &Tensor) -> Vec<f64> {
    let (h, w) = (img.shape[1], img.shape[2]);
    let plane = h * w;
    (0..plane)
        .map(|i| (img.data[i] + img.data[plane + i] + img.data[2 * plane + i]) / 3.0)
        .collect()
}

/// Per-image metric row of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

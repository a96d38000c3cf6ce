//! The pseudo-ground-truth engine: kernels over latent feature rows, the
//! labeled feature bank, nearest-neighbor retrieval, and the closed-form GP
//! posterior that supervises unlabeled images.
//!
//! Two modes are supported. In whole-latent mode one function expresses the
//! entire flattened latent as a weighted combination of labeled latents; in
//! per-feature-map mode every latent row gets its own function of the labeled
//! rows, so the conditioning set holds all `M * N_n` rows of the selected
//! neighbors.
//!
//! The posterior mean is used as a constant training target. The covariance
//! stays differentiable with respect to the unlabeled latent (assembled on
//! the autodiff tape by `objective::unsup_loss`), so minimizing the loss also
//! shrinks the predicted variance.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist, Chol, Mat};
use crate::model::{LatentMatrix, Model};
use crate::tensor::Tensor;

/// Which latent structure the GP models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GpMode {
    /// GP disabled; training is supervised-only.
    #[serde(rename = "off")]
    Off,
    /// One GP over flattened latents (the original formulation).
    #[serde(rename = "syn2real")]
    WholeLatent,
    /// One GP function per latent feature map (the extended formulation).
    #[serde(rename = "syn2real++")]
    PerFeatureMap,
}

impl std::fmt::Display for GpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GpMode::Off => "off",
            GpMode::WholeLatent => "syn2real",
            GpMode::PerFeatureMap => "syn2real++",
        };
        f.write_str(s)
    }
}

/// Kernel family, without resolved hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Lin,
    Se,
    Rq,
}

/// Kernel with resolved hyperparameters.
///
/// LIN is parameter-free cosine similarity. SE and RQ take a length scale
/// (resolved from the bank's median-distance heuristic when not given), and
/// RQ additionally a shape parameter `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Lin,
    Se { length_scale: f64 },
    Rq { length_scale: f64, alpha: f64 },
}

impl KernelSpec {
    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Lin => KernelKind::Lin,
            KernelSpec::Se { .. } => KernelKind::Se,
            KernelSpec::Rq { .. } => KernelKind::Rq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Lin => Ok(()),
            KernelSpec::Se { length_scale } if length_scale > 0.0 => Ok(()),
            KernelSpec::Rq { length_scale, alpha } if length_scale > 0.0 && alpha > 0.0 => Ok(()),
            _ => Err(Error::Config(format!("kernel hyperparameters must be positive: {:?}", self))),
        }
    }

    /// Resolve a kind into a spec using the bank's length-scale heuristic.
    pub fn resolve(kind: KernelKind, length_scale: f64) -> KernelSpec {
        match kind {
            KernelKind::Lin => KernelSpec::Lin,
            KernelKind::Se => KernelSpec::Se { length_scale },
            KernelKind::Rq => KernelSpec::Rq { length_scale, alpha: 1.0 },
        }
    }

    #[inline]
    pub(crate) fn eval_raw(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Lin => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
            KernelSpec::Se { length_scale } => {
                (-sq_dist(a, b) / (2.0 * length_scale * length_scale)).exp()
            }
            KernelSpec::Rq { length_scale, alpha } => {
                (1.0 + sq_dist(a, b) / (2.0 * alpha * length_scale * length_scale)).powf(-alpha)
            }
        }
    }
}

/// Kernel value between two equal-length vectors.
///
/// LIN is cosine similarity in [-1, 1] (0 when either vector is all-zero);
/// SE and RQ map squared distance into (0, 1].
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "kernel_eval",
            detail: format!("vector lengths {} vs {}", a.len(), b.len()),
        });
    }
    Ok(spec.eval_raw(a, b))
}

/// Gram matrix: entry (i, j) is `kernel_eval(spec, a_i, b_j)` over the rows
/// of `a` and `b`.
pub fn gram(spec: &KernelSpec, a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "gram",
            detail: format!("row dimensions {} vs {}", a.cols, b.cols),
        });
    }
    let mut out = Mat::zeros(a.rows, b.rows);
    match spec {
        KernelSpec::Lin => {
            let na = row_norms(a);
            let nb = row_norms(b);
            for i in 0..a.rows {
                if na[i] == 0.0 {
                    continue;
                }
                for j in 0..b.rows {
                    if nb[j] == 0.0 {
                        continue;
                    }
                    out.data[i * b.rows + j] = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
                }
            }
        }
        _ => {
            for i in 0..a.rows {
                for j in 0..b.rows {
                    out.data[i * b.rows + j] = spec.eval_raw(a.row(i), b.row(j));
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn row_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows).map(|i| dot(m.row(i), m.row(i)).sqrt()).collect()
}

/// Constant conditioning rows for the differentiable kernel ops: the row
/// matrix plus precomputed L2 norms (used by the LIN kernel).
#[derive(Debug)]
pub struct ConstRows {
    pub mat: Mat,
    pub norms: Vec<f64>,
}

impl ConstRows {
    pub fn new(mat: Mat) -> ConstRows {
        let norms = row_norms(&mat);
        ConstRows { mat, norms }
    }
}

/// One labeled image's latent matrix stored in the bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub image_id: String,
    pub latent: LatentMatrix,
}

/// Stored labeled latents, searchable by whole-latent cosine similarity.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureBank {
    pub entries: Vec<BankEntry>,
    pub mode: GpMode,
    pub built_at_epoch: usize,
    /// Median pairwise Euclidean distance among (subsampled) GP rows at build
    /// time; the length-scale heuristic for SE/RQ kernels.
    pub median_dist: f64,
}

impl FeatureBank {
    pub fn new(entries: Vec<BankEntry>, mode: GpMode, built_at_epoch: usize) -> Result<FeatureBank> {
        if entries.is_empty() {
            return Err(Error::EmptyBank);
        }
        let (m, d) = (entries[0].latent.rows, entries[0].latent.cols);
        for e in &entries {
            if e.latent.rows != m || e.latent.cols != d {
                return Err(Error::ShapeMismatch {
                    op: "feature_bank",
                    detail: format!(
                        "entry {} is {}x{}, expected {}x{}",
                        e.image_id, e.latent.rows, e.latent.cols, m, d
                    ),
                });
            }
        }
        let median_dist = median_row_distance(&entries, mode);
        Ok(FeatureBank { entries, mode, built_at_epoch, median_dist })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Length scale for SE/RQ kernels; falls back to 1 for degenerate banks.
    pub fn length_scale_heuristic(&self) -> f64 {
        if self.median_dist > 0.0 {
            self.median_dist
        } else {
            1.0
        }
    }
}

/// Median pairwise distance among GP rows, on a deterministic subsample
/// (every k-th row, at most 256) to keep rebuilds cheap.
fn median_row_distance(entries: &[BankEntry], mode: GpMode) -> f64 {
    let rows: Vec<&[f64]> = match mode {
        GpMode::WholeLatent => entries.iter().map(|e| e.latent.data.as_slice()).collect(),
        _ => entries
            .iter()
            .flat_map(|e| (0..e.latent.rows).map(move |r| e.latent.row(r)))
            .collect(),
    };
    let cap = 256;
    let stride = rows.len().div_ceil(cap).max(1);
    let sample: Vec<&[f64]> = rows.iter().step_by(stride).copied().collect();
    let mut dists = Vec::with_capacity(sample.len() * (sample.len() - 1) / 2);
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            dists.push(sq_dist(sample[i], sample[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// A retrieved bank neighbor: its index within the bank and the whole-latent
/// cosine similarity that ranked it.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor {
    pub index: usize,
    pub score: f64,
}

/// Top `n_n` bank entries by whole-latent cosine similarity to `z_u`.
///
/// The same similarity is used regardless of the GP kernel so that kernel
/// ablations share one retrieval definition. Ties break toward the lower
/// bank index; the result is deterministic.
pub fn nearest(z_u: &LatentMatrix, bank: &FeatureBank, n_n: usize) -> Result<Vec<Neighbor>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if n_n > bank.len() {
        return Err(Error::NotEnoughNeighbors { requested: n_n, available: bank.len() });
    }
    let lin = KernelSpec::Lin;
    let mut scored: Vec<Neighbor> = bank
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| Neighbor {
            index,
            score: lin.eval_raw(&z_u.data, &e.latent.data),
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(n_n);
    Ok(scored)
}

/// GP posterior for one unlabeled latent: the pseudo-ground-truth mean, the
/// covariance with its factorization context, and everything needed to
/// re-assemble the covariance differentiably on a tape.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    /// Pseudo-GT: `M x D` in per-feature-map mode, `1 x (M*D)` in
    /// whole-latent mode. A constant target; no gradient flows into it.
    pub mu: Mat,
    /// Posterior covariance: `M x M` or `1 x 1`.
    pub sigma: Mat,
    /// Triangular factor of the regularized Gram matrix over the
    /// conditioning rows (after any jitter escalation).
    pub chol: Rc<Chol>,
    /// Bank indices of the selected neighbors.
    pub neighbor_ids: Vec<usize>,
    pub sigma_eps2: f64,
    pub spec: KernelSpec,
    pub mode: GpMode,
    /// The conditioning rows (neighbor latent rows, or flattened neighbor
    /// latents in whole-latent mode).
    pub index_rows: Rc<ConstRows>,
    /// Whole-latent combination weights; `mu` equals their weighted sum of
    /// the flattened neighbor latents by construction.
    pub alpha: Option<Vec<f64>>,
}

/// Closed-form GP posterior of `z_u` conditioned on the selected neighbors.
///
/// The regularized Gram matrix is factored once; the mean and covariance are
/// computed through triangular solves against that factor, never through an
/// explicit inverse.
pub fn posterior(
    z_u: &LatentMatrix,
    neighbors: &[(usize, &LatentMatrix)],
    spec: &KernelSpec,
    sigma_eps2: f64,
    mode: GpMode,
) -> Result<GpPosterior> {
    if neighbors.is_empty() {
        return Err(Error::Config("posterior needs at least one neighbor".into()));
    }
    if !(sigma_eps2 > 0.0) {
        return Err(Error::Config(format!("sigma_eps2 must be positive, got {}", sigma_eps2)));
    }
    spec.validate()?;
    let (m, d) = (z_u.rows, z_u.cols);
    for (_, nb) in neighbors {
        if nb.rows != m || nb.cols != d {
            return Err(Error::ShapeMismatch {
                op: "posterior",
                detail: format!("neighbor is {}x{}, expected {}x{}", nb.rows, nb.cols, m, d),
            });
        }
    }

    // Conditioning rows and the query rows, per mode.
    let (rows, query) = match mode {
        GpMode::PerFeatureMap => {
            let mut data = Vec::with_capacity(neighbors.len() * m * d);
            for (_, nb) in neighbors {
                data.extend_from_slice(&nb.data);
            }
            let rows = Mat { rows: neighbors.len() * m, cols: d, data };
            let query = Mat { rows: m, cols: d, data: z_u.data.clone() };
            (rows, query)
        }
        GpMode::WholeLatent => {
            let mut data = Vec::with_capacity(neighbors.len() * m * d);
            for (_, nb) in neighbors {
                data.extend_from_slice(&nb.data);
            }
            let rows = Mat { rows: neighbors.len(), cols: m * d, data };
            let query = Mat { rows: 1, cols: m * d, data: z_u.data.clone() };
            (rows, query)
        }
        GpMode::Off => return Err(Error::Config("posterior called with gp_mode=off".into())),
    };

    let mut g = gram(spec, &rows, &rows)?;
    g.add_diag(sigma_eps2);
    let chol = factor_with_jitter(&mut g, sigma_eps2)?;

    let k_star = gram(spec, &query, &rows)?;
    // W = G^{-1} k*^T, so mu = W^T F and Sigma = K_uu - k* W + sigma^2 I.
    let w = chol.solve(&k_star.transpose());

    let (mu, alpha) = match mode {
        GpMode::WholeLatent => {
            let alpha: Vec<f64> = (0..rows.rows).map(|i| w.at(i, 0)).collect();
            let mut mu = Mat::zeros(1, rows.cols);
            for (i, &a) in alpha.iter().enumerate() {
                crate::linalg::axpy(mu.row_mut(0), a, rows.row(i));
            }
            (mu, Some(alpha))
        }
        _ => (w.transpose().matmul(&rows), None),
    };

    let mut sigma = gram(spec, &query, &query)?;
    let kw = k_star.matmul(&w);
    for (s, k) in sigma.data.iter_mut().zip(&kw.data) {
        *s -= k;
    }
    sigma.add_diag(sigma_eps2);

    Ok(GpPosterior {
        mu,
        sigma,
        chol: Rc::new(chol),
        neighbor_ids: neighbors.iter().map(|(i, _)| *i).collect(),
        sigma_eps2,
        spec: *spec,
        mode,
        index_rows: Rc::new(ConstRows::new(rows)),
        alpha,
    })
}

/// Factor `g` (which already contains `sigma_eps2` on its diagonal),
/// escalating the diagonal noise tenfold up to four times before giving up.
fn factor_with_jitter(g: &mut Mat, sigma_eps2: f64) -> Result<Chol> {
    let mut ladder = vec![sigma_eps2];
    let mut added = 0.0;
    for attempt in 0..=4 {
        match Chol::factor(g) {
            Ok(ch) => {
                if attempt > 0 {
                    log::warn!("gram factorization needed jitter escalation: {:?}", ladder);
                }
                return Ok(ch);
            }
            Err(_) if attempt < 4 => {
                let next = sigma_eps2 * 10f64.powi(attempt as i32 + 1);
                g.add_diag(next - sigma_eps2 - added);
                added = next - sigma_eps2;
                ladder.push(next);
            }
            Err(_) => {}
        }
    }
    Err(Error::Factorization { ladder })
}

/// Encode a seeded subset of the labeled set (at most `max_entries` images)
/// with the current encoder, gradient tracking disabled.
///
/// Deterministic given the seed and the encoder parameters; called once per
/// epoch so the bank tracks the evolving encoder.
pub fn rebuild_bank(
    labeled: &[(String, Tensor)],
    model: &Model,
    mode: GpMode,
    max_entries: usize,
    seed: u64,
    epoch: usize,
) -> Result<FeatureBank> {
    if labeled.is_empty() {
        return Err(Error::EmptyBank);
    }
    let mut indices: Vec<usize> = (0..labeled.len()).collect();
    if labeled.len() > max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(max_entries);
        indices.sort_unstable();
    }
    let mut entries = Vec::with_capacity(indices.len());
    // Small batches keep the forward-activation footprint bounded.
    for chunk in indices.chunks(8) {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &labeled[i].1).collect();
        let latents = model.encode_tap_batch(&images)?;
        for (&i, latent) in chunk.iter().zip(latents) {
            entries.push(BankEntry { image_id: labeled[i].0.clone(), latent });
        }
    }
    FeatureBank::new(entries, mode, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_latent(m: usize, d: usize, rng: &mut ChaCha8Rng) -> LatentMatrix {
        LatentMatrix {
            rows: m,
            cols: d,
            data: (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Dense joint-conditioning oracle: forms the full joint covariance and
    /// conditions through an explicit Gauss-Jordan inverse. Intentionally a
    /// different route than the factorized solver it checks.
    pub(super) fn dense_oracle(
        z_u: &LatentMatrix,
        neighbors: &[&LatentMatrix],
        spec: &KernelSpec,
        sigma_eps2: f64,
        mode: GpMode,
    ) -> (Mat, Mat) {
        let (m, d) = (z_u.rows, z_u.cols);
        let (rows, query) = match mode {
            GpMode::PerFeatureMap => {
                let mut data = Vec::new();
                for nb in neighbors {
                    data.extend_from_slice(&nb.data);
                }
                (
                    Mat { rows: neighbors.len() * m, cols: d, data },
                    Mat { rows: m, cols: d, data: z_u.data.clone() },
                )
            }
            _ => {
                let mut data = Vec::new();
                for nb in neighbors {
                    data.extend_from_slice(&nb.data);
                }
                (
                    Mat { rows: neighbors.len(), cols: m * d, data },
                    Mat { rows: 1, cols: m * d, data: z_u.data.clone() },
                )
            }
        };
        let mut kff = gram(spec, &rows, &rows).unwrap();
        kff.add_diag(sigma_eps2);
        let inv = gauss_jordan_inverse(&kff);
        let kuf = gram(spec, &query, &rows).unwrap();
        let mu = kuf.matmul(&inv).matmul(&rows);
        let mut sigma = gram(spec, &query, &query).unwrap();
        let t = kuf.matmul(&inv).matmul(&kuf.transpose());
        for (s, v) in sigma.data.iter_mut().zip(&t.data) {
            *s -= v;
        }
        sigma.add_diag(sigma_eps2);
        (mu, sigma)
    }

    fn gauss_jordan_inverse(a: &Mat) -> Mat {
        let n = a.rows;
        let mut aug = Mat::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                *aug.at_mut(i, j) = a.at(i, j);
            }
            *aug.at_mut(i, n + i) = 1.0;
        }
        for col in 0..n {
            let mut pivot = col;
            for r in col + 1..n {
                if aug.at(r, col).abs() > aug.at(pivot, col).abs() {
                    pivot = r;
                }
            }
            if pivot != col {
                for j in 0..2 * n {
                    let tmp = aug.at(col, j);
                    *aug.at_mut(col, j) = aug.at(pivot, j);
                    *aug.at_mut(pivot, j) = tmp;
                }
            }
            let p = aug.at(col, col);
            for j in 0..2 * n {
                *aug.at_mut(col, j) /= p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = aug.at(r, col);
                if f == 0.0 {
                    continue;
                }
                for j in 0..2 * n {
                    let v = aug.at(col, j);
                    *aug.at_mut(r, j) -= f * v;
                }
            }
        }
        Mat::from_fn(n, n, |i, j| aug.at(i, n + j))
    }

    #[test]
    fn lin_kernel_self_similarity_is_one() {
        let v = vec![0.3, -0.7, 2.0];
        assert!((kernel_eval(&KernelSpec::Lin, &v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lin_kernel_orthogonal_is_zero() {
        let k = kernel_eval(&KernelSpec::Lin, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn lin_kernel_zero_vector_is_zero() {
        let k = kernel_eval(&KernelSpec::Lin, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn se_kernel_values() {
        let l = 0.8;
        let spec = KernelSpec::Se { length_scale: l };
        let a = vec![1.0, 2.0];
        assert!((kernel_eval(&spec, &a, &a).unwrap() - 1.0).abs() < 1e-15);
        // ||a-b|| = l*sqrt(2) => exp(-1)
        let b = vec![1.0 + l * (2.0f64).sqrt(), 2.0];
        let k = kernel_eval(&spec, &a, &b).unwrap();
        assert!((k - (-1.0f64).exp()).abs() < 1e-12, "{}", k);
    }

    #[test]
    fn kernel_eval_rejects_dimension_mismatch() {
        assert!(kernel_eval(&KernelSpec::Lin, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gram_is_symmetric_with_unit_diagonal_for_lin() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = Mat::from_fn(5, 7, |_, _| rng.gen_range(-1.0..1.0));
        let g = gram(&KernelSpec::Lin, &a, &a).unwrap();
        let gt = g.transpose();
        assert!(g.max_abs_diff(&gt) < 1e-12);
        for i in 0..5 {
            assert!((g.at(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regularized_gram_eigenvalues_clear_noise_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Mat::from_fn(3, 6, |_, _| rng.gen_range(-1.0..1.0));
        let sigma2 = 0.5;
        let mut g = gram(&KernelSpec::Lin, &a, &a).unwrap();
        g.add_diag(sigma2);
        let eig = crate::linalg::sym_eigenvalues(&g);
        assert!(eig[0] >= sigma2 - 1e-9, "min eig {}", eig[0]);
    }

    #[test]
    fn nearest_finds_exact_match_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let entries: Vec<BankEntry> = (0..5)
            .map(|i| BankEntry {
                image_id: format!("img{}", i),
                latent: rand_latent(2, 4, &mut rng),
            })
            .collect();
        let probe = entries[3].latent.clone();
        let bank = FeatureBank::new(entries, GpMode::PerFeatureMap, 0).unwrap();
        let nb = nearest(&probe, &bank, 2).unwrap();
        assert_eq!(nb[0].index, 3);
        assert!((nb[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_on_orthogonal_bank() {
        let mk = |i: usize| {
            let mut data = vec![0.0; 4];
            data[i] = 1.0;
            LatentMatrix { rows: 1, cols: 4, data }
        };
        let entries = (0..3)
            .map(|i| BankEntry { image_id: format!("e{}", i), latent: mk(i) })
            .collect();
        let bank = FeatureBank::new(entries, GpMode::PerFeatureMap, 0).unwrap();
        let probe = mk(2);
        let nb = nearest(&probe, &bank, 1).unwrap();
        assert_eq!(nb[0].index, 2);
    }

    #[test]
    fn nearest_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let entries: Vec<BankEntry> = (0..100)
            .map(|i| BankEntry {
                image_id: format!("img{}", i),
                latent: rand_latent(3, 5, &mut rng),
            })
            .collect();
        let probe = rand_latent(3, 5, &mut rng);
        let bank = FeatureBank::new(entries, GpMode::PerFeatureMap, 0).unwrap();
        let got = nearest(&probe, &bank, 32).unwrap();

        // Brute-force oracle: score every entry, sort, take the top 32.
        let mut scores: Vec<(usize, f64)> = bank
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, KernelSpec::Lin.eval_raw(&probe.data, &e.latent.data)))
            .collect();
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (n, (idx, score)) in got.iter().zip(scores.iter().take(32)).map(|(a, b)| (a, b)) {
            assert_eq!(n.index, *idx);
            assert_eq!(n.score, *score);
        }
    }

    #[test]
    fn nearest_errors_on_excess_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let entries = vec![BankEntry { image_id: "a".into(), latent: rand_latent(2, 3, &mut rng) }];
        let bank = FeatureBank::new(entries, GpMode::PerFeatureMap, 0).unwrap();
        let probe = rand_latent(2, 3, &mut rng);
        let err = nearest(&probe, &bank, 2).unwrap_err();
        assert!(err.to_string().contains("bank holds only 1"));
    }

    #[test]
    fn posterior_interpolates_self_neighbor_at_tiny_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let z = rand_latent(4, 6, &mut rng);
        let post =
            posterior(&z, &[(0, &z)], &KernelSpec::Lin, 1e-9, GpMode::PerFeatureMap).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert!(
                    (post.mu.at(i, j) - z.data[i * 6 + j]).abs() < 1e-6,
                    "mu[{},{}]",
                    i,
                    j
                );
            }
        }
        for i in 0..4 {
            let v = post.sigma.at(i, i);
            assert!(v >= 0.0 && v < 1e-8, "sigma diag {} = {}", i, v);
        }
    }

    #[test]
    fn posterior_matches_dense_oracle_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let z = rand_latent(2, 3, &mut rng);
        let nbs: Vec<LatentMatrix> = (0..4).map(|_| rand_latent(2, 3, &mut rng)).collect();
        for mode in [GpMode::PerFeatureMap, GpMode::WholeLatent] {
            for spec in [
                KernelSpec::Lin,
                KernelSpec::Se { length_scale: 1.3 },
                KernelSpec::Rq { length_scale: 0.9, alpha: 1.0 },
            ] {
                let refs: Vec<(usize, &LatentMatrix)> =
                    nbs.iter().enumerate().map(|(i, l)| (i, l)).collect();
                let post = posterior(&z, &refs, &spec, 1.0, mode).unwrap();
                let oracle_refs: Vec<&LatentMatrix> = nbs.iter().collect();
                let (mu_o, sigma_o) = dense_oracle(&z, &oracle_refs, &spec, 1.0, mode);
                assert!(post.mu.max_abs_diff(&mu_o) < 1e-8, "{:?} {:?}", mode, spec);
                assert!(post.sigma.max_abs_diff(&sigma_o) < 1e-8, "{:?} {:?}", mode, spec);
            }
        }
    }

    #[test]
    fn posterior_covariance_clears_noise_floor_at_unit_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        for _ in 0..20 {
            let z = rand_latent(3, 5, &mut rng);
            let nbs: Vec<LatentMatrix> = (0..4).map(|_| rand_latent(3, 5, &mut rng)).collect();
            let refs: Vec<(usize, &LatentMatrix)> =
                nbs.iter().enumerate().map(|(i, l)| (i, l)).collect();
            let post = posterior(&z, &refs, &KernelSpec::Lin, 1.0, GpMode::PerFeatureMap).unwrap();
            let eig = crate::linalg::sym_eigenvalues(&post.sigma);
            assert!(eig[0] >= 1.0 - 1e-6, "min eig {}", eig[0]);
        }
    }

    #[test]
    fn whole_latent_alpha_reconstructs_mu_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let z = rand_latent(2, 4, &mut rng);
        let nbs: Vec<LatentMatrix> = (0..3).map(|_| rand_latent(2, 4, &mut rng)).collect();
        let refs: Vec<(usize, &LatentMatrix)> =
            nbs.iter().enumerate().map(|(i, l)| (i, l)).collect();
        let post = posterior(&z, &refs, &KernelSpec::Lin, 1.0, GpMode::WholeLatent).unwrap();
        let alpha = post.alpha.as_ref().unwrap();
        let mut recon = vec![0.0; 8];
        for (i, &a) in alpha.iter().enumerate() {
            crate::linalg::axpy(&mut recon, a, &nbs[i].data);
        }
        assert!(recon
            .iter()
            .zip(&post.mu.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rebuild_bank_size_and_determinism() {
        use crate::model::{Model, ModelConfig};
        use crate::rainsynth::procedural_texture;
        let config = ModelConfig { crop: 16, n_downsamples: 2, ..Default::default() };
        let model = Model::init(config, 3).unwrap();
        let images: Vec<(String, Tensor)> =
            (0..6).map(|i| (format!("im{}", i), procedural_texture(16, 30 + i as u64))).collect();

        let b1 = rebuild_bank(&images, &model, GpMode::PerFeatureMap, 256, 5, 0).unwrap();
        assert_eq!(b1.len(), 6);
        let b2 = rebuild_bank(&images, &model, GpMode::PerFeatureMap, 256, 5, 0).unwrap();
        for (x, y) in b1.entries.iter().zip(&b2.entries) {
            assert_eq!(x.image_id, y.image_id);
            assert_eq!(x.latent.data, y.latent.data);
        }

        let capped = rebuild_bank(&images, &model, GpMode::PerFeatureMap, 4, 5, 0).unwrap();
        assert_eq!(capped.len(), 4);

        // One optimizer-like parameter change gives different latents.
        let mut moved = Model::init(config, 3).unwrap();
        for t in moved.params.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += 1e-3;
            }
        }
        let b3 = rebuild_bank(&images, &moved, GpMode::PerFeatureMap, 256, 5, 0).unwrap();
        assert!(b1
            .entries
            .iter()
            .zip(&b3.entries)
            .any(|(x, y)| x.latent.data != y.latent.data));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        /// The factorized posterior agrees with dense joint conditioning on
        /// every instance with M * N_n <= 64.
        #[test]
        fn posterior_equals_dense_conditioning(
            m in 1usize..5,
            n_n in 1usize..8,
            d in 2usize..7,
            mode_sel in 0u8..2,
            spec_sel in 0u8..3,
            seed in 0u64..u64::MAX,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mode = if mode_sel == 0 { GpMode::PerFeatureMap } else { GpMode::WholeLatent };
            let spec = match spec_sel {
                0 => KernelSpec::Lin,
                1 => KernelSpec::Se { length_scale: 1.1 },
                _ => KernelSpec::Rq { length_scale: 0.9, alpha: 1.0 },
            };
            let z = rand_latent(m, d, &mut rng);
            let nbs: Vec<LatentMatrix> = (0..n_n).map(|_| rand_latent(m, d, &mut rng)).collect();
            let refs: Vec<(usize, &LatentMatrix)> =
                nbs.iter().enumerate().map(|(i, l)| (i, l)).collect();
            let post = posterior(&z, &refs, &spec, 1.0, mode).unwrap();
            let oracle_refs: Vec<&LatentMatrix> = nbs.iter().collect();
            let (mu_o, sigma_o) = dense_oracle(&z, &oracle_refs, &spec, 1.0, mode);
            proptest::prop_assert!(post.mu.max_abs_diff(&mu_o) < 1e-8);
            proptest::prop_assert!(post.sigma.max_abs_diff(&sigma_o) < 1e-8);
        }
    }

    #[test]
    fn posterior_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let z = rand_latent(2, 3, &mut rng);
        assert!(posterior(&z, &[], &KernelSpec::Lin, 1.0, GpMode::PerFeatureMap).is_err());
        assert!(posterior(&z, &[(0, &z)], &KernelSpec::Lin, 0.0, GpMode::PerFeatureMap).is_err());
        assert!(posterior(&z, &[(0, &z)], &KernelSpec::Lin, 1.0, GpMode::Off).is_err());
        let bad = KernelSpec::Se { length_scale: -1.0 };
        assert!(posterior(&z, &[(0, &z)], &bad, 1.0, GpMode::PerFeatureMap).is_err());
    }
}

//! Synthetic rain domains under the additive model: a rainy image is a clean
//! image plus a nonnegative rain residue.
//!
//! Streaks are rendered as anti-aliased line segments with a Gaussian cross
//! profile and Gaussian end caps, all sampled from seeded distributions, so a
//! manifest plus its seeds reproduces every image byte for byte. A built-in
//! procedural texture generator supplies clean images, which keeps the repo
//! free of dataset dependencies; a directory of user PNGs works too.
//!
//! A "real-world" target domain is emulated by rendering with a shifted
//! parameter distribution (orientation, density, length), which is what
//! creates the domain gap the semi-supervised training is meant to bridge.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Generative parameters of one rain domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParams {
    /// Mean streak angle in degrees; 90 is vertical fall (x right, y down).
    pub orientation_deg: f64,
    pub orientation_spread_deg: f64,
    /// Expected streaks per 1000 pixels.
    pub density: f64,
    pub length_px: f64,
    pub length_spread_px: f64,
    /// Cross-section width (integrated profile mass per unit length), 1..3.
    pub width_px: f64,
    /// Additive brightness mean in (0, 1].
    pub intensity: f64,
    pub intensity_spread: f64,
    /// Along-streak Gaussian end softening.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            orientation_deg: 70.0,
            orientation_spread_deg: 10.0,
            density: 8.0,
            length_px: 12.0,
            length_spread_px: 4.0,
            width_px: 1.5,
            intensity: 0.35,
            intensity_spread: 0.1,
            blur_sigma: 1.0,
            seed: 0,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if self.density < 0.0 {
            return Err(Error::Config("rain density must be nonnegative".into()));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::Config("rain intensity mean must be in (0,1]".into()));
        }
        if !(1.0..=3.0).contains(&self.width_px) {
            return Err(Error::Config("rain width_px must be in [1,3]".into()));
        }
        if self.orientation_spread_deg < 0.0
            || self.length_spread_px < 0.0
            || self.intensity_spread < 0.0
            || self.blur_sigma < 0.0
        {
            return Err(Error::Config("rain parameter spreads must be nonnegative".into()));
        }
        Ok(())
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, mean: f64, spread: f64) -> f64 {
    if spread == 0.0 {
        return mean;
    }
    Normal::new(mean, spread).unwrap().sample(rng)
}

/// Render rain onto a clean `[3,H,W]` image in [0,1].
///
/// Returns `(rainy, residue)` with `rainy = clamp(clean + residue, 0, 1)` and
/// `residue >= 0`. Zero density produces a zero residue, not an error.
pub fn render_rain(clean: &Tensor, params: &RainParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let s = &clean.shape;
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "render_rain",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut residue_plane = vec![0.0f64; h * w];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let expected = params.density * (h * w) as f64 / 1000.0;
    let n_streaks = if expected > 0.0 {
        Poisson::new(expected).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };

    // Cross profile integrates to width_px per unit length.
    let sigma_c = params.width_px / (2.0 * PI).sqrt();
    let sigma_b = params.blur_sigma;
    for _ in 0..n_streaks {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let angle = sample_normal(&mut rng, params.orientation_deg, params.orientation_spread_deg)
            .to_radians();
        let len = sample_normal(&mut rng, params.length_px, params.length_spread_px)
            .clamp(2.0, 4.0 * params.length_px);
        let inten =
            sample_normal(&mut rng, params.intensity, params.intensity_spread).clamp(0.02, 1.0);
        draw_streak(&mut residue_plane, h, w, cx, cy, angle, len, inten, sigma_c, sigma_b);
    }

    let mut residue = Tensor::zeros(vec![3, h, w]);
    for c in 0..3 {
        residue.data[c * h * w..(c + 1) * h * w].copy_from_slice(&residue_plane);
    }
    let mut rainy = Tensor::zeros(vec![3, h, w]);
    for (out, (cl, r)) in rainy.data.iter_mut().zip(clean.data.iter().zip(&residue.data)) {
        *out = (cl + r).clamp(0.0, 1.0);
    }
    Ok((rainy, residue))
}

/// Accumulate one streak: Gaussian cross profile along a segment through
/// `(cx, cy)` with direction `angle`, Gaussian end caps of `sigma_b`.
#[allow(clippy::too_many_arguments)]
fn draw_streak(
    plane: &mut [f64],
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    angle: f64,
    len: f64,
    inten: f64,
    sigma_c: f64,
    sigma_b: f64,
) {
    let (dx, dy) = (angle.cos(), angle.sin());
    let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
    let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
    let margin = 3.0 * sigma_c + 3.0 * sigma_b + 1.0;
    let xmin = (x0.min(x1) - margin).floor().max(0.0) as usize;
    let xmax = ((x0.max(x1) + margin).ceil().min(w as f64)).max(0.0) as usize;
    let ymin = (y0.min(y1) - margin).floor().max(0.0) as usize;
    let ymax = ((y0.max(y1) + margin).ceil().min(h as f64)).max(0.0) as usize;
    let inv_2sc2 = 1.0 / (2.0 * sigma_c * sigma_c);
    let inv_2sb2 = if sigma_b > 0.0 { 1.0 / (2.0 * sigma_b * sigma_b) } else { 0.0 };

    for y in ymin..ymax {
        let py = y as f64 + 0.5;
        for x in xmin..xmax {
            let px = x as f64 + 0.5;
            let (vx, vy) = (px - x0, py - y0);
            let t = vx * dx + vy * dy;
            let perp = (vx - t * dx).hypot(vy - t * dy);
            let cross = (-perp * perp * inv_2sc2).exp();
            let along = if t < 0.0 {
                if sigma_b > 0.0 { (-t * t * inv_2sb2).exp() } else { 0.0 }
            } else if t > len {
                let e = t - len;
                if sigma_b > 0.0 { (-e * e * inv_2sb2).exp() } else { 0.0 }
            } else {
                1.0
            };
            let v = inten * cross * along;
            if v > 1e-12 {
                plane[y * w + x] += v;
            }
        }
    }
}

/// Seeded procedural clean image: layered gradients, soft shapes, and a mild
/// sinusoidal modulation, in [0,1].
pub fn procedural_texture(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; 3 * size * size];
    // Base gradient between two random colors along a random direction.
    let c0: [f64; 3] =
        [rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9)];
    let c1: [f64; 3] =
        [rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9)];
    let theta = rng.gen_range(0.0..PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * gx + y as f64 * gy)
                / (size as f64 * (gx.abs() + gy.abs()).max(1e-9));
            let u = u.clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * size * size + y * size + x] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }
    // Soft elliptical shapes.
    let n_shapes = rng.gen_range(3..8);
    for _ in 0..n_shapes {
        let sx = rng.gen_range(0.0..size as f64);
        let sy = rng.gen_range(0.0..size as f64);
        let rx = rng.gen_range(size as f64 * 0.08..size as f64 * 0.4);
        let ry = rng.gen_range(size as f64 * 0.08..size as f64 * 0.4);
        let rot = rng.gen_range(0.0..PI);
        let color: [f64; 3] =
            [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let alpha = rng.gen_range(0.3..0.9);
        let (cr, sr) = (rot.cos(), rot.sin());
        for y in 0..size {
            for x in 0..size {
                let (ux, uy) = (x as f64 - sx, y as f64 - sy);
                let (ex, ey) = (ux * cr + uy * sr, -ux * sr + uy * cr);
                let d2 = (ex / rx).powi(2) + (ey / ry).powi(2);
                if d2 < 4.0 {
                    let fall = (-d2 * 1.5).exp() * alpha;
                    for c in 0..3 {
                        let p = &mut img[c * size * size + y * size + x];
                        *p = *p * (1.0 - fall) + color[c] * fall;
                    }
                }
            }
        }
    }
    // Low-frequency luminance ripple for texture.
    let fx = rng.gen_range(1.0..4.0) * 2.0 * PI / size as f64;
    let fy = rng.gen_range(1.0..4.0) * 2.0 * PI / size as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(0.02..0.08);
    for y in 0..size {
        for x in 0..size {
            let m = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            for c in 0..3 {
                let p = &mut img[c * size * size + y * size + x];
                *p = (*p + m).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], img)
}

// ── PNG I/O ────────────────────────────────────────────────────────────

/// Write a `[3,H,W]` tensor in [0,1] as an 8-bit RGB PNG.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = &img.shape;
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "save_png",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb(std::array::from_fn(|c| {
                (img.data[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            }));
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit RGB PNG as a `[3,H,W]` tensor in [0,1].
pub fn load_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * h * w + y * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

// ── Manifests ──────────────────────────────────────────────────────────

pub const MANIFEST_VERSION: u32 = 1;

/// One dataset record; paths are relative to the manifest's directory.
/// Unlabeled records carry the rainy path only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean: Option<String>,
    pub rainy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub domain: String,
    pub split: String,
    pub labeled: bool,
    pub image_size: usize,
    pub params: RainParams,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = std::fs::File::open(path)
            .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
        let m: DatasetManifest = serde_json::from_reader(std::io::BufReader::new(file))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported (expected {})",
                m.version, MANIFEST_VERSION
            )));
        }
        Ok(m)
    }
}

/// SplitMix64, used to derive independent per-record seeds from domain seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Render a rain domain: `n` records drawn cyclically from `base_images`
/// with seeded random crops, written under `out_dir` with a manifest.
///
/// Labeled domains write clean and rainy PNGs; unlabeled domains write the
/// rainy image only.
#[allow(clippy::too_many_arguments)]
pub fn make_domain(
    base_images: &[Tensor],
    params: &RainParams,
    n: usize,
    size: usize,
    out_dir: &Path,
    labeled: bool,
    domain: &str,
    split: &str,
) -> Result<DatasetManifest> {
    if base_images.is_empty() {
        return Err(Error::Config("make_domain needs at least one base image".into()));
    }
    params.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::FileIo { path: out_dir.to_path_buf(), source: e })?;

    let mut records = Vec::with_capacity(n);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, u64::MAX));
    for i in 0..n {
        let base = &base_images[i % base_images.len()];
        let clean = random_crop(base, size, &mut crop_rng)?;
        let record_seed = derive_seed(params.seed, i as u64);
        let (rainy, _residue) = render_rain(&clean, &RainParams { seed: record_seed, ..*params })?;

        let rainy_name = format!("{}_{}_{:04}_rainy.png", domain, split, i);
        save_png(&out_dir.join(&rainy_name), &rainy)?;
        let clean_name = if labeled {
            let name = format!("{}_{}_{:04}_clean.png", domain, split, i);
            save_png(&out_dir.join(&name), &clean)?;
            Some(name)
        } else {
            None
        };
        records.push(ManifestRecord { clean: clean_name, rainy: rainy_name, seed: record_seed });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        domain: domain.to_string(),
        split: split.to_string(),
        labeled,
        image_size: size,
        params: *params,
        records,
    };
    manifest.save(&manifest_path(out_dir, domain, split))?;
    Ok(manifest)
}

fn random_crop(img: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (img.shape[1], img.shape[2]);
    if h < size || w < size {
        return Err(Error::Config(format!("base image {}x{} smaller than crop {}", h, w, size)));
    }
    let y0 = if h == size { 0 } else { rng.gen_range(0..=h - size) };
    let x0 = if w == size { 0 } else { rng.gen_range(0..=w - size) };
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            let row = (c * h + y0 + y) * w + x0;
            data.extend_from_slice(&img.data[row..row + size]);
        }
    }
    Ok(Tensor::new(vec![3, size, size], data))
}

/// Path of the manifest written by [`make_domain`].
pub fn manifest_path(out_dir: &Path, domain: &str, split: &str) -> PathBuf {
    out_dir.join(format!("{}_{}.json", domain, split))
}

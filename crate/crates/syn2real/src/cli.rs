//! Command implementations behind the thin `syn2real` binary: dataset
//! synthesis, training, evaluation, single-image deraining, and GP
//! inspection. Each takes a parsed [`RunSpec`] or explicit paths, so the
//! same entry points are callable from examples and tests.
//!
//! Config files are strict JSON: unknown keys are hard errors, and every
//! synth/train run writes the resolved config snapshot into its output
//! directory, which alone reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, GpMode, KernelKind, KernelSpec};
use crate::linalg::sym_eigenvalues;
use crate::model::{LatentMatrix, Model, ModelConfig};
use crate::objective;
use crate::rainsynth::{self, make_domain, manifest_path, procedural_texture, RainParams};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{self, Dataset, EvalSummary, TrainConfig};

/// Data-synthesis settings: how the source (labeled) and target (unlabeled)
/// rain domains are manufactured, and which manifests training reads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Side length of synthesized images (the training crop by default).
    pub image_size: usize,
    /// Procedural base textures per pool; crops are drawn from these.
    pub n_base_textures: usize,
    pub base_texture_size: usize,
    pub n_source_train: usize,
    pub n_source_test: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub source: RainParams,
    pub target: RainParams,
    /// Optional directory of user PNGs to use instead of textures.
    pub base_image_dir: Option<PathBuf>,
    /// Manifests consumed by `train`; `synth` fills the conventional paths.
    pub labeled_manifest: Option<PathBuf>,
    pub unlabeled_manifest: Option<PathBuf>,
    pub eval_manifests: Vec<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            image_size: 64,
            n_base_textures: 24,
            base_texture_size: 96,
            n_source_train: 200,
            n_source_test: 50,
            n_target_train: 200,
            n_target_test: 50,
            source: RainParams::default(),
            target: RainParams {
                orientation_deg: 110.0,
                density: 16.0,
                seed: 1,
                ..RainParams::default()
            },
            base_image_dir: None,
            labeled_manifest: None,
            unlabeled_manifest: None,
            eval_manifests: Vec::new(),
        }
    }
}

/// Full run configuration: model geometry, training, and data blocks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<RunSpec> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
        let spec: RunSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.source.validate()?;
        self.data.target.validate()?;
        Ok(())
    }

    /// Write the resolved configuration snapshot into the run directory.
    pub fn write_snapshot(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::FileIo { path: out_dir.to_path_buf(), source: e })?;
        let path = out_dir.join("config.resolved.json");
        let file = std::fs::File::create(&path)
            .map_err(|e| Error::FileIo { path, source: e })?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

pub fn parse_gp_mode(s: &str) -> Result<GpMode> {
    match s {
        "off" => Ok(GpMode::Off),
        "syn2real" => Ok(GpMode::WholeLatent),
        "syn2real++" => Ok(GpMode::PerFeatureMap),
        other => Err(Error::Config(format!(
            "unknown gp-mode {:?}; expected off, syn2real or syn2real++",
            other
        ))),
    }
}

pub fn parse_kernel(s: &str) -> Result<KernelKind> {
    match s {
        "lin" => Ok(KernelKind::Lin),
        "se" => Ok(KernelKind::Se),
        "rq" => Ok(KernelKind::Rq),
        other => {
            Err(Error::Config(format!("unknown kernel {:?}; expected lin, se or rq", other)))
        }
    }
}

/// Names of the four synthesized manifests relative to the synth output dir.
pub struct SynthOutputs {
    pub source_train: PathBuf,
    pub source_test: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

/// Synthesize the source-labeled train/test sets, the target-unlabeled train
/// set, and a target-labeled test set (clean images kept for scoring only).
pub fn cmd_synth(spec: &RunSpec, out_dir: &Path) -> Result<SynthOutputs> {
    let data = &spec.data;
    let dirs = ["src_train", "src_test", "tgt_train", "tgt_test"];
    for d in dirs {
        let p = out_dir.join(d);
        if p.exists() {
            return Err(Error::Config(format!(
                "output directory {} already exists; refusing to overwrite",
                p.display()
            )));
        }
    }
    spec.write_snapshot(out_dir)?;

    // One shared clean-image pool: the two domains differ only in their rain
    // statistics. Test splits draw from held-out textures.
    let pool = base_pool(data)?;
    let holdout = (pool.len() / 4).max(1).min(pool.len() - 1);
    let (train_pool, test_pool) = pool.split_at(pool.len() - holdout);

    let src_test_params =
        RainParams { seed: rainsynth::derive_seed(data.source.seed, 0x7e57), ..data.source };
    let tgt_test_params =
        RainParams { seed: rainsynth::derive_seed(data.target.seed, 0x7e57), ..data.target };

    make_domain(
        train_pool,
        &data.source,
        data.n_source_train,
        data.image_size,
        &out_dir.join("src_train"),
        true,
        "source",
        "train",
    )?;
    make_domain(
        test_pool,
        &src_test_params,
        data.n_source_test,
        data.image_size,
        &out_dir.join("src_test"),
        true,
        "source",
        "test",
    )?;
    make_domain(
        train_pool,
        &data.target,
        data.n_target_train,
        data.image_size,
        &out_dir.join("tgt_train"),
        false,
        "target",
        "train",
    )?;
    make_domain(
        test_pool,
        &tgt_test_params,
        data.n_target_test,
        data.image_size,
        &out_dir.join("tgt_test"),
        true,
        "target",
        "test",
    )?;

    Ok(SynthOutputs {
        source_train: manifest_path(&out_dir.join("src_train"), "source", "train"),
        source_test: manifest_path(&out_dir.join("src_test"), "source", "test"),
        target_train: manifest_path(&out_dir.join("tgt_train"), "target", "train"),
        target_test: manifest_path(&out_dir.join("tgt_test"), "target", "test"),
    })
}

fn base_pool(data: &DataSpec) -> Result<Vec<Tensor>> {
    if let Some(dir) = &data.base_image_dir {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::FileIo { path: dir.clone(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no PNGs found in {}", dir.display())));
        }
        return paths.iter().map(|p| rainsynth::load_png(p)).collect();
    }
    let base_seed =
        rainsynth::derive_seed(data.source.seed ^ data.target.seed.rotate_left(17), 0x5ce4e);
    Ok((0..data.n_base_textures)
        .map(|i| {
            procedural_texture(data.base_texture_size, rainsynth::derive_seed(base_seed, i as u64))
        })
        .collect())
}

/// Train per the spec: requires `data.labeled_manifest` (and the unlabeled
/// one when the GP is on); evaluates on `data.eval_manifests` each epoch.
pub fn cmd_train(spec: &RunSpec, out_dir: &Path) -> Result<()> {
    let data = &spec.data;
    let labeled_path = data
        .labeled_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.labeled_manifest is not set".into()))?;
    let labeled = Dataset::load(labeled_path)?;
    let unlabeled = match (&data.unlabeled_manifest, spec.train.gp_mode) {
        (_, GpMode::Off) => None,
        (Some(p), _) => Some(Dataset::load(p)?),
        (None, _) => {
            return Err(Error::Config(
                "data.unlabeled_manifest is required unless gp_mode is off".into(),
            ))
        }
    };
    let evals: Vec<Dataset> =
        data.eval_manifests.iter().map(|p| Dataset::load(p)).collect::<Result<_>>()?;
    let eval_refs: Vec<&Dataset> = evals.iter().collect();

    spec.write_snapshot(out_dir)?;
    let (_model, _log) = trainer::train(
        spec.model,
        spec.train,
        &labeled,
        unlabeled.as_ref(),
        &eval_refs,
        out_dir,
    )?;
    Ok(())
}

/// Evaluation report written by `cmd_eval`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub summary: EvalSummary,
}

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out_dir: &Path) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    let ds = Dataset::load(manifest)?;
    let summary = trainer::evaluate(&model, &ds)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::FileIo { path: out_dir.to_path_buf(), source: e })?;
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        manifest: manifest.to_path_buf(),
        summary,
    };
    let path = out_dir.join("eval_report.json");
    let file =
        std::fs::File::create(&path).map_err(|e| Error::FileIo { path, source: e })?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    Ok(report)
}

/// Derain one PNG with tiled full-image inference and write the result.
pub fn cmd_derain(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let img = rainsynth::load_png(input)?;
    let out = trainer::derain_full(&model, &img)?.clamp(0.0, 1.0);
    rainsynth::save_png(output, &out)?;
    Ok(())
}

/// What `gp-inspect` reports for one image against a bank dump.
#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub mode: GpMode,
    pub kernel: KernelSpec,
    pub neighbors: Vec<InspectNeighbor>,
    /// Whole-latent combination weights, when applicable.
    pub alpha: Option<Vec<f64>>,
    pub sigma_eig_min: f64,
    pub sigma_eig_max: f64,
    pub unsup_loss: f64,
}

#[derive(Debug, Serialize)]
pub struct InspectNeighbor {
    pub index: usize,
    pub image_id: String,
    pub score: f64,
}

/// Inspect the GP pathway for one image: nearest bank entries with their
/// similarity scores, the whole-latent combination weights, the covariance
/// eigenvalue range, and the unsupervised loss value.
pub fn cmd_gp_inspect(
    checkpoint: &Path,
    bank_path: &Path,
    input: &Path,
    mode_override: Option<GpMode>,
    n_neighbors: usize,
    sigma_eps2: f64,
) -> Result<InspectReport> {
    let model = Model::load(checkpoint)?;
    let bank = trainer::load_bank(bank_path)?;
    if let Some(mode) = mode_override {
        if mode != bank.mode {
            return Err(Error::BankModeMismatch {
                dump_mode: bank.mode.to_string(),
                requested: mode.to_string(),
            });
        }
    }
    let img = rainsynth::load_png(input)?;
    let crop = model.config.crop;
    if img.shape[1] != crop || img.shape[2] != crop {
        return Err(Error::Config(format!(
            "gp-inspect expects a {crop}x{crop} image, got {}x{}",
            img.shape[1], img.shape[2]
        )));
    }
    let z = model.encode_tap_batch(&[&img])?.remove(0);
    let n_n = n_neighbors.min(bank.len());
    let neighbors = gp::nearest(&z, &bank, n_n)?;
    let spec = KernelSpec::resolve(KernelKind::Lin, bank.length_scale_heuristic());
    let refs: Vec<(usize, &LatentMatrix)> =
        neighbors.iter().map(|nb| (nb.index, &bank.entries[nb.index].latent)).collect();
    let post = gp::posterior(&z, &refs, &spec, sigma_eps2, bank.mode)?;
    let eig = sym_eigenvalues(&post.sigma);

    let mut tape = Tape::new();
    let zt = match bank.mode {
        GpMode::WholeLatent => Tensor::new(vec![1, z.rows * z.cols], z.data.clone()),
        _ => Tensor::new(vec![z.rows, z.cols], z.data.clone()),
    };
    let zid = tape.leaf(&zt);
    let loss = objective::unsup_loss(&mut tape, zid, &post)?;

    Ok(InspectReport {
        mode: bank.mode,
        kernel: spec,
        neighbors: neighbors
            .iter()
            .map(|nb| InspectNeighbor {
                index: nb.index,
                image_id: bank.entries[nb.index].image_id.clone(),
                score: nb.score,
            })
            .collect(),
        alpha: post.alpha.clone(),
        sigma_eig_min: eig[0],
        sigma_eig_max: *eig.last().unwrap(),
        unsup_loss: tape.value(loss),
    })
}

impl InspectReport {
    pub fn print(&self) {
        println!("mode: {}", self.mode);
        println!("kernel: {:?}", self.kernel);
        println!("nearest neighbors (index, id, cosine score):");
        for nb in &self.neighbors {
            println!("  {:4}  {}  {:.6}", nb.index, nb.image_id, nb.score);
        }
        if let Some(alpha) = &self.alpha {
            let preview: Vec<String> = alpha.iter().take(8).map(|a| format!("{:.4}", a)).collect();
            println!("alpha[0..{}]: [{}{}]", alpha.len(), preview.join(", "),
                if alpha.len() > 8 { ", ..." } else { "" });
        }
        println!("sigma eigenvalues: min {:.6} max {:.6}", self.sigma_eig_min, self.sigma_eig_max);
        println!("unsup loss: {:.6}", self.unsup_loss);
    }
}

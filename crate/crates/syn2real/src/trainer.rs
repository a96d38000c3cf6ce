//! Alternating labeled/unlabeled training with Adam, plus evaluation.
//!
//! Each epoch: rebuild the feature bank from the labeled set with the
//! current encoder, then interleave supervised steps with GP-supervised
//! unlabeled steps (`unlabeled_ratio` of them after every labeled step),
//! then evaluate, checkpoint and append to the run log. Everything is
//! deterministic per seed: data order, crops, initialization.
//!
//! Unlabeled steps update encoder parameters only. The decoder has no path
//! into the latent loss, and keeping it out of the optimizer call prevents
//! stale momentum from drifting it.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{self, FeatureBank, GpMode, KernelKind, KernelSpec};
use crate::model::{stack_images, LatentMatrix, Model, ModelConfig, ParamId, ParamStore};
use crate::objective::{self, FeatureExtractor, LossWeights, MetricRow};
use crate::rainsynth::{self, DatasetManifest};
use crate::tensor::{Tape, Tensor};

/// Optimization and GP-supervision settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Learning rate is multiplied by `lr_decay_factor` every
    /// `lr_decay_every` epochs: lr(e) = lr * factor^(e / every).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub n_neighbors: usize,
    pub lambda_unsup: f64,
    pub lambda_p: f64,
    pub kernel: KernelKind,
    pub gp_mode: GpMode,
    pub sigma_eps2: f64,
    pub seed: u64,
    pub bank_max_entries: usize,
    /// Unlabeled steps taken after every labeled step.
    pub unlabeled_ratio: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch: 4,
            epochs: 60,
            lr_decay_every: 30,
            lr_decay_factor: 0.5,
            n_neighbors: 32,
            lambda_unsup: 1.5e-3,
            lambda_p: 0.04,
            kernel: KernelKind::Lin,
            gp_mode: GpMode::PerFeatureMap,
            sigma_eps2: 1.0,
            seed: 0,
            bank_max_entries: 256,
            unlabeled_ratio: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.lr_decay_factor <= 0.0 || self.sigma_eps2 <= 0.0 {
            return Err(Error::Config("rates and noise variance must be positive".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("batch, epochs and lr_decay_every must be positive".into()));
        }
        if self.n_neighbors == 0 {
            return Err(Error::Config("n_neighbors must be positive".into()));
        }
        if self.lambda_unsup < 0.0 || self.lambda_p < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_p: self.lambda_p, lambda_unsup: self.lambda_unsup }
    }
}

// ── Data ────────────────────────────────────────────────────────────────

/// One loaded record: the rainy input and, when labeled, its clean target.
#[derive(Debug, Clone)]
pub struct LoadedExample {
    pub id: String,
    pub rainy: Tensor,
    pub clean: Option<Tensor>,
}

/// An in-memory dataset loaded from a manifest.
#[derive(Debug)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<LoadedExample>,
    pub image_size: usize,
    /// Records whose files were missing at load time.
    pub skipped: usize,
}

impl Dataset {
    /// Load every record of a manifest; records with missing files are
    /// skipped with a warning and counted.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(manifest.records.len());
        let mut skipped = 0;
        for rec in &manifest.records {
            let rainy_path = base.join(&rec.rainy);
            let rainy = match rainsynth::load_png(&rainy_path) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("skipping record {}: {}", rec.rainy, e);
                    skipped += 1;
                    continue;
                }
            };
            let clean = match &rec.clean {
                Some(name) => match rainsynth::load_png(&base.join(name)) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        log::warn!("skipping record {}: {}", name, e);
                        skipped += 1;
                        continue;
                    }
                },
                None => None,
            };
            let id = rec.rainy.trim_end_matches(".png").to_string();
            examples.push(LoadedExample { id, rainy, clean });
        }
        Ok(Dataset {
            name: format!("{}-{}", manifest.domain, manifest.split),
            examples,
            image_size: manifest.image_size,
            skipped,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Standard Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
            t: 0,
        }
    }

    /// One update over the listed parameters, using the gradients stored on
    /// their tensors. Missing gradients are treated as zero.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in ids {
            let i = id.index();
            let tensor = &mut store.tensors[i];
            let Some(grad) = tensor.grad.as_ref() else { continue };
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; grad.len()];
                self.v[i] = vec![0.0; grad.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), mi), vi) in
                tensor.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ── Run log ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub name: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: usize,
    pub skipped: usize,
}

/// One appended record per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub bank_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub length_scale: Option<f64>,
    pub eval: Vec<EvalEntry>,
    pub wall_time_s: f64,
}

// ── Trainer ─────────────────────────────────────────────────────────────

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub extractor: FeatureExtractor,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::init(model_config, config.seed)?;
        let n = model.params.len();
        Ok(Trainer {
            extractor: FeatureExtractor::new(rainsynth::derive_seed(config.seed, 0x0fee)),
            config,
            model,
            adam: Adam::new(n),
            step: 0,
        })
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let n = model.params.len();
        Ok(Trainer {
            extractor: FeatureExtractor::new(rainsynth::derive_seed(config.seed, 0x0fee)),
            config,
            model,
            adam: Adam::new(n),
            step: 0,
        })
    }

    /// One supervised step on a paired batch: forward, supervised loss,
    /// backward, Adam update of all parameters. Returns the loss value.
    pub fn labeled_step(&mut self, batch: &[(String, Tensor, Tensor)], lr: f64) -> Result<f64> {
        self.step += 1;
        let xs: Vec<&Tensor> = batch.iter().map(|(_, x, _)| x).collect();
        let ys: Vec<&Tensor> = batch.iter().map(|(_, _, y)| y).collect();
        let xb = stack_images(&xs)?;
        let yb = stack_images(&ys)?;

        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape);
        let xid = tape.constant(xb.shape.clone(), xb.data);
        let yid = tape.constant(yb.shape.clone(), yb.data);
        let (y_pred, _r, _tap) = self.model.derain(&mut tape, &binding, xid)?;
        let loss =
            objective::sup_loss(&mut tape, &self.extractor, y_pred, yid, &self.config.loss_weights())?;
        let value = tape.value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch_id: batch.iter().map(|(id, _, _)| id.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        tape.backward(loss)?;
        self.model.collect_grads(&tape, &binding);
        let ids = self.model.param_ids();
        self.adam.step(&mut self.model.params, &ids, lr);
        Ok(value)
    }

    /// One GP-supervised step on an unlabeled batch: encode, retrieve
    /// neighbors, condition the GP, minimize the variance-weighted latent
    /// loss. Updates encoder parameters only; returns the
    /// `lambda_unsup`-scaled batch-mean loss. A no-op returning 0 when the
    /// GP is off.
    pub fn unlabeled_step(
        &mut self,
        batch: &[(String, Tensor)],
        bank: &FeatureBank,
        spec: &KernelSpec,
        lr: f64,
    ) -> Result<f64> {
        if self.config.gp_mode == GpMode::Off {
            return Ok(0.0);
        }
        if bank.len() < self.config.n_neighbors {
            return Err(Error::NotEnoughNeighbors {
                requested: self.config.n_neighbors,
                available: bank.len(),
            });
        }
        self.step += 1;
        let xs: Vec<&Tensor> = batch.iter().map(|(_, x)| x).collect();
        let xb = stack_images(&xs)?;

        let mut tape = Tape::new();
        let binding = self.model.bind(&mut tape);
        let xid = tape.constant(xb.shape.clone(), xb.data);
        let (_latent, tap) = self.model.encode(&mut tape, &binding, xid)?;

        let m = self.model.config.bank_channels();
        let d = self.model.config.bank_dim();
        let mut total = None;
        for i in 0..batch.len() {
            let tap_i = tape.index_batch(tap, i)?;
            let z_pred = match self.config.gp_mode {
                GpMode::WholeLatent => tape.reshape(tap_i, vec![1, m * d])?,
                _ => tape.reshape(tap_i, vec![m, d])?,
            };
            let z_lat = LatentMatrix { rows: m, cols: d, data: tape.data(tap_i).to_vec() };
            let neighbors = gp::nearest(&z_lat, bank, self.config.n_neighbors)?;
            let refs: Vec<(usize, &LatentMatrix)> = neighbors
                .iter()
                .map(|nb| (nb.index, &bank.entries[nb.index].latent))
                .collect();
            let post =
                gp::posterior(&z_lat, &refs, spec, self.config.sigma_eps2, self.config.gp_mode)?;
            let li = objective::unsup_loss(&mut tape, z_pred, &post)?;
            total = Some(match total {
                None => li,
                Some(t) => tape.add(t, li)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty unlabeled batch".into()))?;
        let mean = tape.scalar_mul(total, 1.0 / batch.len() as f64);
        let scaled = tape.scalar_mul(mean, self.config.lambda_unsup);
        let value = tape.value(scaled);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch_id: batch.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        tape.backward(scaled)?;
        self.model.collect_grads(&tape, &binding);
        let encoder_ids = self.model.encoder_param_ids().to_vec();
        self.adam.step(&mut self.model.params, &encoder_ids, lr);
        Ok(value)
    }
}

/// Crop an example to `crop`x`crop` at a seeded random offset (applied to
/// rainy and clean jointly). Identity when the image already matches.
fn crop_pair(ex: &LoadedExample, crop: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Option<Tensor>)> {
    let (h, w) = (ex.rainy.shape[1], ex.rainy.shape[2]);
    if h == crop && w == crop {
        return Ok((ex.rainy.clone(), ex.clean.clone()));
    }
    if h < crop || w < crop {
        return Err(Error::Config(format!(
            "image {} is {}x{}, smaller than crop {}",
            ex.id, h, w, crop
        )));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let cut = |t: &Tensor| {
        let mut data = Vec::with_capacity(3 * crop * crop);
        for c in 0..3 {
            for y in 0..crop {
                let row = (c * h + y0 + y) * w + x0;
                data.extend_from_slice(&t.data[row..row + crop]);
            }
        }
        Tensor::new(vec![3, crop, crop], data)
    };
    Ok((cut(&ex.rainy), ex.clean.as_ref().map(cut)))
}

/// Train a fresh model over the manifests. Per epoch: bank rebuild (when the
/// GP is on), interleaved labeled/unlabeled steps, evaluation on every eval
/// dataset, a checkpoint and a run-log line under `out_dir`. On a failed
/// step the error propagates and the last epoch's checkpoint stays on disk.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    labeled: &Dataset,
    unlabeled: Option<&Dataset>,
    evals: &[&Dataset],
    out_dir: &Path,
) -> Result<(Model, Vec<EpochRecord>)> {
    if labeled.is_empty() {
        return Err(Error::Config("labeled dataset is empty".into()));
    }
    if labeled.examples.iter().any(|e| e.clean.is_none()) {
        return Err(Error::Config("labeled dataset has records without clean images".into()));
    }
    let gp_on = config.gp_mode != GpMode::Off;
    let unlabeled_set = match (gp_on, unlabeled) {
        (true, None) => {
            return Err(Error::Config("gp_mode requires an unlabeled dataset".into()))
        }
        (true, Some(u)) if u.is_empty() => {
            return Err(Error::Config("unlabeled dataset is empty".into()))
        }
        (true, Some(u)) => Some(u),
        (false, _) => None,
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::FileIo { path: out_dir.to_path_buf(), source: e })?;
    let mut trainer = Trainer::new(model_config, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rainsynth::derive_seed(config.seed, 0xda7a));
    let mut log_records = Vec::with_capacity(config.epochs);
    let runlog_path = out_dir.join("runlog.jsonl");
    let _ = std::fs::remove_file(&runlog_path);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = config.lr_at_epoch(epoch);

        // Bank refresh at the start of the unlabeled phase, from the current
        // encoder with a per-epoch derived seed.
        let (bank, spec) = if gp_on {
            let bank_inputs: Vec<(String, Tensor)> = labeled
                .examples
                .iter()
                .map(|e| {
                    center_crop(&e.rainy, trainer.model.config.crop)
                        .map(|img| (e.id.clone(), img))
                })
                .collect::<Result<_>>()?;
            let bank = gp::rebuild_bank(
                &bank_inputs,
                &trainer.model,
                config.gp_mode,
                config.bank_max_entries,
                rainsynth::derive_seed(config.seed, 0xba2c ^ epoch as u64),
                epoch,
            )?;
            let spec = KernelSpec::resolve(config.kernel, bank.length_scale_heuristic());
            (Some(bank), Some(spec))
        } else {
            (None, None)
        };

        let mut labeled_order: Vec<usize> = (0..labeled.len()).collect();
        labeled_order.shuffle(&mut rng);
        let mut unlabeled_order: Vec<usize> = unlabeled_set
            .map(|u| {
                let mut v: Vec<usize> = (0..u.len()).collect();
                v.shuffle(&mut rng);
                v
            })
            .unwrap_or_default();
        let mut unlabeled_cursor = 0usize;

        let mut sup_sum = 0.0;
        let mut sup_n = 0usize;
        let mut unsup_sum = 0.0;
        let mut unsup_n = 0usize;

        for chunk in labeled_order.chunks(config.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &labeled.examples[i];
                let (x, y) = crop_pair(ex, trainer.model.config.crop, &mut rng)?;
                batch.push((ex.id.clone(), x, y.expect("labeled example")));
            }
            sup_sum += trainer.labeled_step(&batch, lr)?;
            sup_n += 1;

            if let (Some(bank), Some(spec), Some(uset)) = (&bank, &spec, unlabeled_set) {
                for _ in 0..config.unlabeled_ratio {
                    let mut ubatch = Vec::with_capacity(config.batch);
                    for _ in 0..config.batch {
                        if unlabeled_cursor == unlabeled_order.len() {
                            unlabeled_order.shuffle(&mut rng);
                            unlabeled_cursor = 0;
                        }
                        let ex = &uset.examples[unlabeled_order[unlabeled_cursor]];
                        unlabeled_cursor += 1;
                        let (x, _) = crop_pair(ex, trainer.model.config.crop, &mut rng)?;
                        ubatch.push((ex.id.clone(), x));
                    }
                    unsup_sum += trainer.unlabeled_step(&ubatch, bank, spec, lr)?;
                    unsup_n += 1;
                }
            }
        }

        let mut eval_entries = Vec::with_capacity(evals.len());
        for ds in evals {
            let summary = evaluate(&trainer.model, ds)?;
            eval_entries.push(EvalEntry {
                name: ds.name.clone(),
                mean_psnr: summary.mean_psnr,
                mean_ssim: summary.mean_ssim,
                images: summary.rows.len(),
                skipped: summary.skipped,
            });
        }

        trainer.model.save(&out_dir.join("checkpoint.json"))?;
        write_samples(&trainer.model, evals.first().copied(), out_dir, epoch)?;

        let record = EpochRecord {
            epoch,
            lr,
            sup_loss: if sup_n > 0 { sup_sum / sup_n as f64 } else { 0.0 },
            unsup_loss: if unsup_n > 0 { unsup_sum / unsup_n as f64 } else { 0.0 },
            bank_size: bank.as_ref().map(|b| b.len()).unwrap_or(0),
            length_scale: bank.as_ref().map(|b| b.length_scale_heuristic()),
            eval: eval_entries,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        append_runlog(&runlog_path, &record)?;
        log::info!(
            "epoch {}: sup {:.5} unsup {:.6} lr {:.2e}{}",
            epoch,
            record.sup_loss,
            record.unsup_loss,
            lr,
            record
                .eval
                .iter()
                .map(|e| format!(" {}={:.2}dB", e.name, e.mean_psnr))
                .collect::<String>()
        );
        log_records.push(record);

        if let Some(bank) = &bank {
            if epoch + 1 == trainer.config.epochs {
                save_bank(bank, &out_dir.join("bank.json"))?;
            }
        }
    }
    Ok((trainer.model, log_records))
}

fn append_runlog(path: &Path, record: &EpochRecord) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
    writeln!(file, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Bank dump for the CLI inspector; same JSON container family as
/// checkpoints.
pub fn save_bank(bank: &FeatureBank, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
    serde_json::to_writer(std::io::BufWriter::new(file), bank)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<FeatureBank> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path)
        .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn write_samples(model: &Model, eval: Option<&Dataset>, out_dir: &Path, epoch: usize) -> Result<()> {
    let Some(ds) = eval else { return Ok(()) };
    let Some(ex) = ds.examples.iter().find(|e| e.clean.is_some()) else { return Ok(()) };
    let dir = out_dir.join("samples");
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::FileIo { path: dir.clone(), source: e })?;
    let derained = derain_full(model, &ex.rainy)?.clamp(0.0, 1.0);
    rainsynth::save_png(&dir.join(format!("epoch{:03}_rainy.png", epoch)), &ex.rainy)?;
    rainsynth::save_png(&dir.join(format!("epoch{:03}_derained.png", epoch)), &derained)?;
    rainsynth::save_png(
        &dir.join(format!("epoch{:03}_clean.png", epoch)),
        ex.clean.as_ref().unwrap(),
    )?;
    Ok(())
}

fn center_crop(img: &Tensor, crop: usize) -> Result<Tensor> {
    let (h, w) = (img.shape[1], img.shape[2]);
    if h == crop && w == crop {
        return Ok(img.clone());
    }
    if h < crop || w < crop {
        return Err(Error::Config(format!("image {}x{} smaller than crop {}", h, w, crop)));
    }
    let (y0, x0) = ((h - crop) / 2, (w - crop) / 2);
    let mut data = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        for y in 0..crop {
            let row = (c * h + y0 + y) * w + x0;
            data.extend_from_slice(&img.data[row..row + crop]);
        }
    }
    Ok(Tensor::new(vec![3, crop, crop], data))
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub skipped: usize,
}

/// Derain and score every labeled record: full-image inference (tiled when
/// larger than the crop), clamp to [0,1], PSNR and SSIM against the clean
/// image. Records without ground truth are skipped and counted.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(ds.len());
    let mut skipped = ds.skipped;
    for ex in &ds.examples {
        let Some(clean) = &ex.clean else {
            log::warn!("eval record {} has no clean image; skipped", ex.id);
            skipped += 1;
            continue;
        };
        let derained = derain_full(model, &ex.rainy)?.clamp(0.0, 1.0);
        rows.push(MetricRow {
            image_id: ex.id.clone(),
            psnr: objective::psnr(&derained, clean),
            ssim: objective::ssim(&derained, clean)?,
        });
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalSummary {
        name: ds.name.clone(),
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        skipped,
    })
}

/// Derain a full `[3,H,W]` image. Images matching the crop run in one shot;
/// larger images are covered by crop-sized tiles at 50% overlap, blended
/// with linear border-flattened weights and normalized by the total weight.
pub fn derain_full(model: &Model, rainy: &Tensor) -> Result<Tensor> {
    let crop = model.config.crop;
    let s = &rainy.shape;
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "derain_full",
            detail: format!("expected [3,H,W], got {:?}", s),
        });
    }
    let (h, w) = (s[1], s[2]);
    if h == crop && w == crop {
        let out = model.derain_batch(&stack_images(&[rainy])?)?;
        return Ok(Tensor::new(vec![3, crop, crop], out.data));
    }
    if h < crop || w < crop {
        return Err(Error::Config(format!(
            "image {}x{} is smaller than the model crop {}; re-synthesize or use a smaller crop",
            h, w, crop
        )));
    }

    let origins = |extent: usize| -> Vec<usize> {
        let stride = crop / 2;
        let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + crop < extent).collect();
        v.push(extent - crop);
        v
    };
    let ys = origins(h);
    let xs = origins(w);

    let half = (crop / 2) as f64;
    let profile = |r: usize, at_low: bool, at_high: bool| -> f64 {
        let a = if at_low { half } else { (r + 1) as f64 };
        let b = if at_high { half } else { (crop - r) as f64 };
        a.min(b).min(half)
    };

    let mut acc = vec![0.0f64; 3 * h * w];
    let mut weight = vec![0.0f64; h * w];
    for &y0 in &ys {
        for &x0 in &xs {
            let tile = crop_at(rainy, y0, x0, crop);
            let out = model.derain_batch(&stack_images(&[&tile])?)?;
            for ty in 0..crop {
                let wy = profile(ty, y0 == 0, y0 + crop == h);
                for tx in 0..crop {
                    let wx = profile(tx, x0 == 0, x0 + crop == w);
                    let wv = wy * wx;
                    weight[(y0 + ty) * w + x0 + tx] += wv;
                    for c in 0..3 {
                        acc[(c * h + y0 + ty) * w + x0 + tx] +=
                            wv * out.data[(c * crop + ty) * crop + tx];
                    }
                }
            }
        }
    }
    let mut data = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            data[c * h * w + i] = acc[c * h * w + i] / weight[i];
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

fn crop_at(img: &Tensor, y0: usize, x0: usize, crop: usize) -> Tensor {
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut data = Vec::with_capacity(3 * crop * crop);
    for c in 0..3 {
        for y in 0..crop {
            let row = (c * h + y0 + y) * w + x0;
            data.extend_from_slice(&img.data[row..row + crop]);
        }
    }
    Tensor::new(vec![3, crop, crop], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rainsynth::{procedural_texture, RainParams};

    fn small_model() -> ModelConfig {
        ModelConfig { crop: 16, n_downsamples: 2, ..Default::default() }
    }

    fn tiny_dataset(n: usize, size: usize, labeled: bool, seed: u64) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let clean = procedural_texture(size, seed + i as u64);
                let params = RainParams {
                    seed: rainsynth::derive_seed(seed, i as u64),
                    ..Default::default()
                };
                let (rainy, _) = crate::rainsynth::render_rain(&clean, &params).unwrap();
                LoadedExample {
                    id: format!("ex{}", i),
                    rainy,
                    clean: labeled.then_some(clean),
                }
            })
            .collect();
        Dataset { name: "tiny".into(), examples, image_size: size, skipped: 0 }
    }

    #[test]
    fn adam_matches_hand_computed_trace() {
        // One scalar parameter, lr 0.1, gradients 0.5, -0.2, 0.1. Expected
        // values computed by hand from the standard update rule.
        let mut store = ParamStore::test_single(Tensor::param(vec![1], vec![1.0]));
        let id = ParamId::test_new(0);
        let mut adam = Adam::new(1);

        store.tensors[0].grad = Some(vec![0.5]);
        adam.step(&mut store, &[id], 0.1);
        assert!((store.tensors[0].data[0] - 0.900000002).abs() < 1e-12);

        store.tensors[0].grad = Some(vec![-0.2]);
        adam.step(&mut store, &[id], 0.1);
        assert!((store.tensors[0].data[0] - 0.8654394181165108).abs() < 1e-12);

        store.tensors[0].grad = Some(vec![0.1]);
        adam.step(&mut store, &[id], 0.1);
        assert!((store.tensors[0].data[0] - 0.8275002408356956).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_halves_every_interval() {
        let config = TrainConfig { lr: 2e-4, lr_decay_every: 30, ..Default::default() };
        assert_eq!(config.lr_at_epoch(0), 2e-4);
        assert_eq!(config.lr_at_epoch(29), 2e-4);
        assert_eq!(config.lr_at_epoch(30), 1e-4);
        assert_eq!(config.lr_at_epoch(60), 5e-5);
    }

    #[test]
    fn params_change_iff_grads_nonzero_on_first_step() {
        let config = TrainConfig { seed: 5, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let before: Vec<Vec<f64>> =
            trainer.model.params.tensors.iter().map(|t| t.data.clone()).collect();
        let ds = tiny_dataset(2, 16, true, 31);
        let batch: Vec<(String, Tensor, Tensor)> = ds
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.rainy.clone(), e.clean.clone().unwrap()))
            .collect();
        trainer.labeled_step(&batch, 2e-4).unwrap();
        for (i, t) in trainer.model.params.tensors.iter().enumerate() {
            let grad_zero = t.grad.as_ref().unwrap().iter().all(|g| *g == 0.0);
            let unchanged = t.data == before[i];
            assert_eq!(grad_zero, unchanged, "param {}", i);
        }
    }

    #[test]
    fn overfitting_one_batch_reduces_sup_loss() {
        let config = TrainConfig { seed: 7, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let ds = tiny_dataset(4, 16, true, 11);
        let batch: Vec<(String, Tensor, Tensor)> = ds
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.rainy.clone(), e.clean.clone().unwrap()))
            .collect();
        let first = trainer.labeled_step(&batch, 2e-4).unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = trainer.labeled_step(&batch, 2e-4).unwrap();
        }
        assert!(
            last < 0.25 * first,
            "sup loss {} did not fall below 25% of initial {}",
            last,
            first
        );
    }

    #[test]
    fn unlabeled_step_is_noop_when_gp_off() {
        let config = TrainConfig { gp_mode: GpMode::Off, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let before: Vec<Vec<f64>> =
            trainer.model.params.tensors.iter().map(|t| t.data.clone()).collect();
        let bank_entries = vec![crate::gp::BankEntry {
            image_id: "b".into(),
            latent: LatentMatrix { rows: 1, cols: 1, data: vec![1.0] },
        }];
        let bank = FeatureBank::new(bank_entries, GpMode::PerFeatureMap, 0).unwrap();
        let ds = tiny_dataset(2, 16, false, 17);
        let batch: Vec<(String, Tensor)> =
            ds.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let v = trainer.unlabeled_step(&batch, &bank, &KernelSpec::Lin, 2e-4).unwrap();
        assert_eq!(v, 0.0);
        for (i, t) in trainer.model.params.tensors.iter().enumerate() {
            assert_eq!(t.data, before[i]);
        }
    }

    #[test]
    fn unlabeled_step_errors_when_bank_too_small() {
        let config = TrainConfig { n_neighbors: 4, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let bank_entries = vec![crate::gp::BankEntry {
            image_id: "b".into(),
            latent: LatentMatrix { rows: 1, cols: 1, data: vec![1.0] },
        }];
        let bank = FeatureBank::new(bank_entries, GpMode::PerFeatureMap, 0).unwrap();
        let ds = tiny_dataset(1, 16, false, 19);
        let batch: Vec<(String, Tensor)> =
            ds.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let err = trainer.unlabeled_step(&batch, &bank, &KernelSpec::Lin, 2e-4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains('1'), "{}", msg);
    }

    #[test]
    fn unlabeled_step_never_mutates_decoder() {
        let config = TrainConfig { n_neighbors: 2, seed: 3, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let labeled = tiny_dataset(4, 16, true, 23);
        let bank_inputs: Vec<(String, Tensor)> =
            labeled.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let bank = gp::rebuild_bank(
            &bank_inputs,
            &trainer.model,
            GpMode::PerFeatureMap,
            256,
            0,
            0,
        )
        .unwrap();
        let dec_before: Vec<Vec<f64>> = trainer
            .model
            .decoder_param_ids()
            .iter()
            .map(|id| trainer.model.params.tensor(*id).data.clone())
            .collect();
        let enc_before: Vec<Vec<f64>> = trainer
            .model
            .encoder_param_ids()
            .iter()
            .map(|id| trainer.model.params.tensor(*id).data.clone())
            .collect();
        let uds = tiny_dataset(2, 16, false, 29);
        let batch: Vec<(String, Tensor)> =
            uds.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let spec = KernelSpec::resolve(KernelKind::Lin, bank.length_scale_heuristic());
        trainer.unlabeled_step(&batch, &bank, &spec, 2e-4).unwrap();
        for (id, before) in trainer.model.decoder_param_ids().iter().zip(&dec_before) {
            assert_eq!(&trainer.model.params.tensor(*id).data, before);
        }
        // Pre-tap encoder parameters did move.
        let moved = trainer
            .model
            .encoder_param_ids()
            .iter()
            .zip(&enc_before)
            .any(|(id, before)| &trainer.model.params.tensor(*id).data != before);
        assert!(moved, "unlabeled step changed no encoder parameter");
    }

    #[test]
    fn unlabeled_step_value_matches_manual_composition() {
        let config = TrainConfig { n_neighbors: 2, seed: 13, batch: 1, ..Default::default() };
        let mut trainer = Trainer::new(small_model(), config).unwrap();
        let labeled = tiny_dataset(4, 16, true, 37);
        let bank_inputs: Vec<(String, Tensor)> =
            labeled.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let bank =
            gp::rebuild_bank(&bank_inputs, &trainer.model, GpMode::PerFeatureMap, 256, 0, 0)
                .unwrap();
        let spec = KernelSpec::resolve(KernelKind::Lin, bank.length_scale_heuristic());
        let uds = tiny_dataset(1, 16, false, 41);
        let ex = &uds.examples[0];

        // Manual composition with the same (pre-step) encoder.
        let z = trainer.model.encode_tap_batch(&[&ex.rainy]).unwrap().remove(0);
        let neighbors = gp::nearest(&z, &bank, 2).unwrap();
        let refs: Vec<(usize, &LatentMatrix)> =
            neighbors.iter().map(|nb| (nb.index, &bank.entries[nb.index].latent)).collect();
        let post = gp::posterior(&z, &refs, &spec, 1.0, GpMode::PerFeatureMap).unwrap();
        let mut tape = Tape::new();
        let zt = Tensor::new(vec![z.rows, z.cols], z.data.clone());
        let zid = tape.leaf(&zt);
        let manual = objective::unsup_loss(&mut tape, zid, &post).unwrap();
        let expected = tape.value(manual) * trainer.config.lambda_unsup;

        let batch = vec![(ex.id.clone(), ex.rainy.clone())];
        let got = trainer.unlabeled_step(&batch, &bank, &spec, 2e-4).unwrap();
        assert_eq!(got.to_bits(), expected.to_bits());
    }

    #[test]
    fn gp_modes_share_history_until_the_first_unlabeled_step() {
        let mk = |mode: GpMode| {
            let config =
                TrainConfig { gp_mode: mode, seed: 9, n_neighbors: 3, ..Default::default() };
            Trainer::new(small_model(), config).unwrap()
        };
        let mut off = mk(GpMode::Off);
        let mut gpp = mk(GpMode::PerFeatureMap);
        let ds = tiny_dataset(4, 16, true, 91);
        let batch: Vec<(String, Tensor, Tensor)> = ds
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.rainy.clone(), e.clean.clone().unwrap()))
            .collect();

        // Identical before any unlabeled step...
        let l_off = off.labeled_step(&batch, 2e-4).unwrap();
        let l_gpp = gpp.labeled_step(&batch, 2e-4).unwrap();
        assert_eq!(l_off.to_bits(), l_gpp.to_bits());

        // ...and diverging right after one.
        let bank_inputs: Vec<(String, Tensor)> =
            ds.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        let bank =
            gp::rebuild_bank(&bank_inputs, &gpp.model, GpMode::PerFeatureMap, 256, 0, 0).unwrap();
        let spec = KernelSpec::resolve(KernelKind::Lin, bank.length_scale_heuristic());
        let uds = tiny_dataset(2, 16, false, 93);
        let ubatch: Vec<(String, Tensor)> =
            uds.examples.iter().map(|e| (e.id.clone(), e.rainy.clone())).collect();
        gpp.unlabeled_step(&ubatch, &bank, &spec, 2e-4).unwrap();

        let l_off2 = off.labeled_step(&batch, 2e-4).unwrap();
        let l_gpp2 = gpp.labeled_step(&batch, 2e-4).unwrap();
        assert_ne!(l_off2.to_bits(), l_gpp2.to_bits());
    }

    #[test]
    fn sup_loss_is_batch_order_invariant() {
        let config = TrainConfig { seed: 2, ..Default::default() };
        let ds = tiny_dataset(3, 16, true, 97);
        let batch: Vec<(String, Tensor, Tensor)> = ds
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.rainy.clone(), e.clean.clone().unwrap()))
            .collect();
        let mut reversed = batch.clone();
        reversed.reverse();

        let loss_of = |b: &[(String, Tensor, Tensor)]| {
            let mut trainer = Trainer::new(small_model(), config).unwrap();
            trainer.labeled_step(b, 2e-4).unwrap()
        };
        let a = loss_of(&batch);
        let b = loss_of(&reversed);
        assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn train_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let labeled = tiny_dataset(6, 16, true, 51);
        let unlabeled = tiny_dataset(6, 16, false, 53);
        let evals = tiny_dataset(2, 16, true, 55);
        let config = TrainConfig {
            epochs: 2,
            batch: 2,
            n_neighbors: 3,
            bank_max_entries: 8,
            seed: 99,
            ..Default::default()
        };
        let run = |out: &Path| {
            train(small_model(), config, &labeled, Some(&unlabeled), &[&evals], out).unwrap()
        };
        let (_m1, log1) = run(dir.path());
        let dir2 = tempfile::tempdir().unwrap();
        let (_m2, log2) = run(dir2.path());
        assert_eq!(log1.len(), 2);
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.sup_loss.to_bits(), b.sup_loss.to_bits());
            assert_eq!(a.unsup_loss.to_bits(), b.unsup_loss.to_bits());
        }
        assert!(dir.path().join("checkpoint.json").exists());
        assert!(dir.path().join("runlog.jsonl").exists());
        assert!(dir.path().join("bank.json").exists());
    }

    #[test]
    fn gp_off_never_builds_bank() {
        let dir = tempfile::tempdir().unwrap();
        let labeled = tiny_dataset(4, 16, true, 61);
        let config = TrainConfig {
            epochs: 1,
            batch: 2,
            gp_mode: GpMode::Off,
            seed: 1,
            ..Default::default()
        };
        let (_m, log) = train(small_model(), config, &labeled, None, &[], dir.path()).unwrap();
        assert_eq!(log[0].bank_size, 0);
        assert_eq!(log[0].unsup_loss, 0.0);
        assert!(!dir.path().join("bank.json").exists());
    }

    #[test]
    fn identity_model_eval_reports_input_psnr() {
        let mut model = Model::init(small_model(), 3).unwrap();
        for t in model.params.tensors.iter_mut() {
            t.data.fill(0.0);
        }
        let ds = tiny_dataset(3, 16, true, 71);
        let summary = evaluate(&model, &ds).unwrap();
        for (row, ex) in summary.rows.iter().zip(&ds.examples) {
            let direct = objective::psnr(
                &ex.rainy.clamp(0.0, 1.0),
                ex.clean.as_ref().unwrap(),
            );
            assert_eq!(row.psnr.to_bits(), direct.to_bits());
        }
    }

    #[test]
    fn oracle_residue_scores_at_cap() {
        // Evaluating clean-vs-clean is the perfect-reconstruction limit.
        let ds = tiny_dataset(1, 16, true, 73);
        let clean = ds.examples[0].clean.clone().unwrap();
        assert_eq!(objective::psnr(&clean, &clean), 100.0);
    }

    #[test]
    fn tiled_equals_untiled_at_crop_size() {
        let model = Model::init(small_model(), 5).unwrap();
        let ds = tiny_dataset(1, 16, true, 75);
        let full = derain_full(&model, &ds.examples[0].rainy).unwrap();
        let direct = model
            .derain_batch(&stack_images(&[&ds.examples[0].rainy]).unwrap())
            .unwrap();
        assert!(full.data.iter().zip(&direct.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tiled_inference_covers_larger_images() {
        let mut model = Model::init(small_model(), 6).unwrap();
        for t in model.params.tensors.iter_mut() {
            t.data.fill(0.0);
        }
        // Zero model: tiling any image must reproduce it exactly after
        // weight normalization.
        let img = procedural_texture(40, 77);
        let out = derain_full(&model, &img).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_reload_is_metric_identical() {
        let dir = tempfile::tempdir().unwrap();
        let labeled = tiny_dataset(4, 16, true, 81);
        let config = TrainConfig {
            epochs: 1,
            batch: 2,
            gp_mode: GpMode::Off,
            seed: 8,
            ..Default::default()
        };
        let (model, _log) =
            train(small_model(), config, &labeled, None, &[], dir.path()).unwrap();
        let eval_ds = tiny_dataset(2, 16, true, 83);
        let before = evaluate(&model, &eval_ds).unwrap();
        let reloaded = Model::load(&dir.path().join("checkpoint.json")).unwrap();
        let after = evaluate(&reloaded, &eval_ds).unwrap();
        assert_eq!(before.mean_psnr.to_bits(), after.mean_psnr.to_bits());
        assert_eq!(before.mean_ssim.to_bits(), after.mean_ssim.to_bits());
    }
}

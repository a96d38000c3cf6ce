//! Encoder/decoder for rain-residue prediction, built from Res2 blocks on a
//! U-shaped channel plan.
//!
//! With base channel count `b` (default 16) the encoder runs
//! `Conv3x3(3,b) - Res2(b,2b) - Down - Res2(2b,2b) - Down - Res2(2b,2b) -
//! Down - Res2(2b,4b) - Res2(4b,4b) - Res2(4b,4b)` and the decoder mirrors it
//! back up to a final `Conv3x3(b,3)` with no output activation (the residue
//! may be negative).
//!
//! The feature bank taps the `2b`-channel activation right after the last
//! downsample (spatial side `crop / 2^n_downsamples`). That view has M = 2b
//! rows of dimension D = side^2 - the `32 x 1024` bank geometry at paper
//! scale and `32 x 64` at the desk default - while the `4b`-channel interior
//! stays inside the encoder. The tap placement is configurable only through
//! the channel plan; it is an interpretation, since the bank row count and
//! the encoder's final width disagree in the source material.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Network geometry. `crop` must be divisible by `2^n_downsamples`, and
/// channel widths (`2*base_channels` down to `base_channels`) by
/// `res2_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub crop: usize,
    pub res2_scale: usize,
    pub n_downsamples: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            crop: 64,
            res2_scale: 4,
            n_downsamples: 3,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.base_channels;
        let s = self.res2_scale;
        if b == 0 || s == 0 || self.n_downsamples == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.crop % (1 << self.n_downsamples) != 0 {
            return Err(Error::Config(format!(
                "crop {} is not divisible by 2^{}",
                self.crop, self.n_downsamples
            )));
        }
        if self.crop >> self.n_downsamples == 0 {
            return Err(Error::Config(format!(
                "crop {} collapses after {} downsamples",
                self.crop, self.n_downsamples
            )));
        }
        for width in [b, 2 * b, 4 * b] {
            if width % s != 0 {
                return Err(Error::Config(format!(
                    "channel width {} is not divisible by res2_scale {}",
                    width, s
                )));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must be in (0,1)".into()));
        }
        Ok(())
    }

    /// Channels of the encoder output fed to the decoder.
    pub fn latent_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// Feature-map rows M of the bank view.
    pub fn bank_channels(&self) -> usize {
        2 * self.base_channels
    }

    /// Spatial side of the latent (and of the bank view).
    pub fn latent_side(&self) -> usize {
        self.crop >> self.n_downsamples
    }

    /// Row dimension D of the bank view.
    pub fn bank_dim(&self) -> usize {
        self.latent_side() * self.latent_side()
    }
}

/// The encoder tap viewed as a matrix: M feature-map rows, each the
/// row-major flattening of one feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl LatentMatrix {
    /// View `[M, side, side]` data as `M x side^2`. The reshape is lossless:
    /// row-major `[M,s,s]` is exactly M contiguous rows of length `s*s`.
    pub fn from_chw(channels: usize, side: usize, data: Vec<f64>) -> LatentMatrix {
        assert_eq!(data.len(), channels * side * side);
        LatentMatrix { rows: channels, cols: side * side, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Invert the matrix view back to a `[M, side, side]` tensor.
    pub fn to_chw(&self, side: usize) -> Tensor {
        assert_eq!(side * side, self.cols);
        Tensor::new(vec![self.rows, side, side], self.data.clone())
    }
}

/// Index into the model's parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn test_new(i: usize) -> ParamId {
        ParamId(i)
    }
}

/// Ordered, named parameter tensors. The order is the binding order on the
/// tape and the serialization order in checkpoints.
#[derive(Debug)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn total_weights(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    #[cfg(test)]
    pub(crate) fn test_single(t: Tensor) -> ParamStore {
        ParamStore { names: vec!["p".into()], tensors: vec![t] }
    }
}

/// Tape bindings of every parameter for one forward pass.
pub struct Binding {
    ids: Vec<TensorId>,
    frozen: bool,
}

impl Binding {
    /// Build a binding from leaf ids bound in parameter-store order, for
    /// external gradient harnesses that manage the tape themselves.
    pub fn from_ids(ids: Vec<TensorId>) -> Binding {
        Binding { ids, frozen: false }
    }

    #[inline]
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    pub fn all(&self) -> &[TensorId] {
        &self.ids
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    padding: usize,
}

#[derive(Debug, Clone)]
struct Res2Block {
    out_channels: usize,
    scale: usize,
    entry: ConvLayer,
    branches: Vec<ConvLayer>,
    exit: ConvLayer,
    skip: Option<ConvLayer>,
}

/// Encoder/decoder pair with its parameter store.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    stem: ConvLayer,
    enc_blocks: Vec<Res2Block>,
    dec_blocks: Vec<Res2Block>,
    final_conv: ConvLayer,
    /// Parameter ids owned by the encoder (stem + encoder blocks).
    encoder_param_ids: Vec<ParamId>,
    decoder_param_ids: Vec<ParamId>,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    leaky_slope: f64,
}

/// Uniform init bound: U[-a, a] with a = gain * sqrt(3 / fan_in), where the
/// gain compensates the leaky-ReLU shrinkage so activation magnitudes stay
/// stable through depth.
pub fn init_bound(fan_in: usize, leaky_slope: f64) -> f64 {
    let gain2 = 2.0 / (1.0 + leaky_slope * leaky_slope);
    (3.0 * gain2 / fan_in as f64).sqrt()
}

impl Builder {
    /// Fan-in-scaled uniform weights damped by `damp`, zero biases.
    /// Deterministic per seed.
    fn conv_damped(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        damp: f64,
    ) -> ConvLayer {
        let fan_in = cin * k * k;
        let a = init_bound(fan_in, self.leaky_slope);
        let wdata =
            (0..cout * cin * k * k).map(|_| damp * self.rng.gen_range(-a..a)).collect();
        let w = self.store.push(format!("{}.w", name), Tensor::param(vec![cout, cin, k, k], wdata));
        let b = self.store.push(format!("{}.b", name), Tensor::param(vec![cout], vec![0.0; cout]));
        ConvLayer { w, b, padding: (k - 1) / 2 }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvLayer {
        self.conv_damped(name, cin, cout, k, 1.0)
    }

    fn res2(&mut self, name: &str, cin: usize, cout: usize, scale: usize) -> Res2Block {
        let width = cout / scale;
        let entry = self.conv(&format!("{}.entry", name), cin, cout, 1);
        let branches = (1..scale)
            .map(|i| self.conv(&format!("{}.branch{}", name, i), width, width, 3))
            .collect();
        // Damping the exit conv keeps the residual additions from doubling
        // activation variance at every block.
        let exit = self.conv_damped(&format!("{}.exit", name), cout, cout, 1, 0.5);
        let skip =
            (cin != cout).then(|| self.conv(&format!("{}.skip", name), cin, cout, 1));
        Res2Block { out_channels: cout, scale, entry, branches, exit, skip }
    }
}

impl Model {
    /// Build a model with fresh fan-in-scaled parameters. Same seed, same
    /// parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let b = config.base_channels;
        let nd = config.n_downsamples;
        let mut builder = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            leaky_slope: config.leaky_slope,
        };

        let stem = builder.conv("enc.stem", 3, b, 3);
        let mut enc_blocks = Vec::new();
        enc_blocks.push(builder.res2("enc.block0", b, 2 * b, config.res2_scale));
        for i in 1..nd {
            enc_blocks.push(builder.res2(&format!("enc.block{}", i), 2 * b, 2 * b, config.res2_scale));
        }
        enc_blocks.push(builder.res2(&format!("enc.block{}", nd), 2 * b, 4 * b, config.res2_scale));
        enc_blocks.push(builder.res2(&format!("enc.block{}", nd + 1), 4 * b, 4 * b, config.res2_scale));
        enc_blocks.push(builder.res2(&format!("enc.block{}", nd + 2), 4 * b, 4 * b, config.res2_scale));
        let encoder_end = builder.store.len();

        let mut dec_blocks = Vec::new();
        for i in 0..nd {
            let cin = if i == 0 { 4 * b } else { 2 * b };
            let cout = if i + 1 == nd { b } else { 2 * b };
            dec_blocks.push(builder.res2(&format!("dec.block{}", i), cin, cout, config.res2_scale));
        }
        // Strongly damped output conv: the fresh model starts from a
        // near-zero residue, close to the identity mapping.
        let final_conv = builder.conv_damped("dec.final", b, 3, 3, 0.05);

        let n_params = builder.store.len();
        Ok(Model {
            config,
            params: builder.store,
            stem,
            enc_blocks,
            dec_blocks,
            final_conv,
            encoder_param_ids: (0..encoder_end).map(ParamId).collect(),
            decoder_param_ids: (encoder_end..n_params).map(ParamId).collect(),
        })
    }

    pub fn encoder_param_ids(&self) -> &[ParamId] {
        &self.encoder_param_ids
    }

    pub fn decoder_param_ids(&self) -> &[ParamId] {
        &self.decoder_param_ids
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    /// Bind all parameters onto a tape as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding { ids: self.params.tensors.iter().map(|t| tape.leaf(t)).collect(), frozen: false }
    }

    /// Bind all parameters as constants (no gradient tracking); for bank
    /// rebuilds and evaluation.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        Binding {
            ids: self
                .params
                .tensors
                .iter()
                .map(|t| tape.constant(t.shape.clone(), t.data.clone()))
                .collect(),
            frozen: true,
        }
    }

    /// Pull gradients off the tape back into `params[i].grad`. Parameters the
    /// loss never touched get a zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &Binding) {
        assert!(!binding.frozen, "cannot collect gradients from a frozen binding");
        for (i, id) in binding.ids.iter().enumerate() {
            let n = self.params.tensors[i].numel();
            self.params.tensors[i].grad =
                Some(tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]));
        }
    }

    fn conv_forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: &ConvLayer,
        x: TensorId,
    ) -> Result<TensorId> {
        tape.conv2d(x, binding.id(layer.w), binding.id(layer.b), layer.padding)
    }

    fn res2_forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        block: &Res2Block,
        x: TensorId,
    ) -> Result<TensorId> {
        let slope = self.config.leaky_slope;
        let h = self.conv_forward(tape, binding, &block.entry, x)?;
        let h = tape.leaky_relu(h, slope);
        let width = block.out_channels / block.scale;

        // Group 0 passes through; group i >= 1 goes through a 3x3 conv, with
        // the previous branch output added in from group 2 on.
        let mut outs = Vec::with_capacity(block.scale);
        outs.push(tape.slice_channels(h, 0, width)?);
        for i in 1..block.scale {
            let gi = tape.slice_channels(h, i * width, (i + 1) * width)?;
            let inp = if i == 1 { gi } else { tape.add(gi, outs[i - 1])? };
            let c = self.conv_forward(tape, binding, &block.branches[i - 1], inp)?;
            outs.push(tape.leaky_relu(c, slope));
        }
        let mut cat = outs[0];
        for o in &outs[1..] {
            cat = tape.concat_channels(cat, *o)?;
        }
        let body = self.conv_forward(tape, binding, &block.exit, cat)?;

        let base = match &block.skip {
            Some(skip) => self.conv_forward(tape, binding, skip, x)?,
            None => x,
        };
        tape.add(base, body)
    }

    /// Encoder forward. Returns `(latent, tap)`: the `4b`-channel latent fed
    /// to the decoder and the `2b`-channel bank view right after the last
    /// downsample.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.crop || s[3] != self.config.crop {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!("expected [N,3,{c},{c}], got {:?}", s, c = self.config.crop),
            });
        }
        let nd = self.config.n_downsamples;
        let mut h = self.conv_forward(tape, binding, &self.stem, x)?;
        h = tape.leaky_relu(h, self.config.leaky_slope);
        for i in 0..nd {
            h = self.res2_forward(tape, binding, &self.enc_blocks[i], h)?;
            h = tape.avg_pool2(h)?;
        }
        let tap = h;
        for block in &self.enc_blocks[nd..] {
            h = self.res2_forward(tape, binding, block, h)?;
        }
        Ok((h, tap))
    }

    /// Decoder forward: latent `[N,4b,s,s]` to residue `[N,3,crop,crop]`.
    pub fn decode(&self, tape: &mut Tape, binding: &Binding, z: TensorId) -> Result<TensorId> {
        let s = tape.shape(z).to_vec();
        let side = self.config.latent_side();
        if s.len() != 4 || s[1] != self.config.latent_channels() || s[2] != side || s[3] != side {
            return Err(Error::ShapeMismatch {
                op: "decode",
                detail: format!(
                    "expected [N,{},{},{}], got {:?}",
                    self.config.latent_channels(),
                    side,
                    side,
                    s
                ),
            });
        }
        let mut h = z;
        for block in &self.dec_blocks {
            h = self.res2_forward(tape, binding, block, h)?;
            h = tape.upsample_nearest2(h)?;
        }
        self.conv_forward(tape, binding, &self.final_conv, h)
    }

    /// Full pass: predicted clean image `y = x - r` with
    /// `r = decode(encode(x))`. Returns `(y_pred, residue, tap)`. No clamping
    /// here; clamp only at evaluation time.
    pub fn derain(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let (latent, tap) = self.encode(tape, binding, x)?;
        let r = self.decode(tape, binding, latent)?;
        let y = tape.sub(x, r)?;
        Ok((y, r, tap))
    }

    /// Encode images without gradient tracking and return their bank views.
    /// Each input is `[3, crop, crop]`.
    pub fn encode_tap_batch(&self, images: &[&Tensor]) -> Result<Vec<LatentMatrix>> {
        let batch = stack_images(images)?;
        let mut tape = Tape::new();
        let binding = self.bind_frozen(&mut tape);
        let xid = tape.leaf(&batch);
        let (_, tap) = self.encode(&mut tape, &binding, xid)?;
        let m = self.config.bank_channels();
        let side = self.config.latent_side();
        let per = m * side * side;
        let tap_data = tape.data(tap);
        Ok((0..images.len())
            .map(|i| {
                LatentMatrix::from_chw(m, side, tap_data[i * per..(i + 1) * per].to_vec())
            })
            .collect())
    }

    /// Derain a batch without gradient tracking: `[N,3,crop,crop]` in,
    /// unclamped predictions out.
    pub fn derain_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind_frozen(&mut tape);
        let xid = tape.leaf(batch);
        let (y, _, _) = self.derain(&mut tape, &binding, xid)?;
        Ok(tape.tensor(y))
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config,
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
                .collect(),
        };
        let file = std::fs::File::create(path)
            .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::FileIo { path: path.to_path_buf(), source: e })?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        let mut model = Model::init(ckpt.config, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameter tensors in file, model defines {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (i, saved) in ckpt.params.iter().enumerate() {
            if saved.name != model.params.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {} named {:?}, expected {:?}",
                    i, saved.name, model.params.names[i]
                )));
            }
            if saved.shape != model.params.tensors[i].shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?} in file, model expects {:?}",
                    saved.name, saved.shape, model.params.tensors[i].shape
                )));
            }
            model.params.tensors[i].data = saved.data.clone();
        }
        Ok(model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

/// Stack `[3,H,W]` images into a `[N,3,H,W]` batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Config("cannot stack an empty image list".into()));
    }
    let s = images[0].shape.clone();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "stack_images",
            detail: format!("expected [C,H,W], got {:?}", s),
        });
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape != s {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                detail: format!("{:?} vs {:?}", img.shape, s),
            });
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(vec![images.len(), s[0], s[1], s[2]], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { crop: 16, n_downsamples: 2, ..Default::default() }
    }

    fn rand_batch(n: usize, crop: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * crop * crop).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 3, crop, crop], data)
    }

    #[test]
    fn shapes_at_desk_default() {
        let config = ModelConfig::default();
        assert_eq!(config.latent_channels(), 64);
        assert_eq!(config.bank_channels(), 32);
        assert_eq!(config.latent_side(), 8);
        assert_eq!(config.bank_dim(), 64);

        let model = Model::init(config, 1).unwrap();
        let x = rand_batch(1, 64, 2);
        let mut tape = Tape::new();
        let binding = model.bind_frozen(&mut tape);
        let xid = tape.leaf(&x);
        let (latent, tap) = model.encode(&mut tape, &binding, xid).unwrap();
        assert_eq!(tape.shape(latent), &[1, 64, 8, 8]);
        assert_eq!(tape.shape(tap), &[1, 32, 8, 8]);
        let r = model.decode(&mut tape, &binding, latent).unwrap();
        assert_eq!(tape.shape(r), &[1, 3, 64, 64]);
    }

    #[test]
    fn paper_scale_bank_view_is_32_by_1024() {
        let config = ModelConfig { crop: 256, ..Default::default() };
        assert_eq!(config.bank_channels(), 32);
        assert_eq!(config.bank_dim(), 1024);
    }

    #[test]
    fn config_rejects_indivisible_crop() {
        let config = ModelConfig { crop: 60, ..Default::default() };
        assert!(config.validate().is_err());
        assert!(Model::init(config, 0).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_latent_and_bias_residue() {
        let config = small_config();
        let mut model = Model::init(config, 3).unwrap();
        for t in model.params.tensors.iter_mut() {
            t.data.fill(0.0);
        }
        let x = Tensor::zeros(vec![1, 3, 16, 16]);
        let mut tape = Tape::new();
        let binding = model.bind_frozen(&mut tape);
        let xid = tape.leaf(&x);
        let (latent, tap) = model.encode(&mut tape, &binding, xid).unwrap();
        assert!(tape.data(latent).iter().all(|v| *v == 0.0));
        assert!(tape.data(tap).iter().all(|v| *v == 0.0));
        // All-zero weights: the decoder output is the (zero) bias broadcast.
        let r = model.decode(&mut tape, &binding, latent).unwrap();
        assert!(tape.data(r).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_residue_model_is_identity_derain() {
        let config = small_config();
        let mut model = Model::init(config, 4).unwrap();
        for t in model.params.tensors.iter_mut() {
            t.data.fill(0.0);
        }
        let x = rand_batch(2, 16, 5);
        let y = model.derain_batch(&x).unwrap();
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn derain_identity_x_minus_y_equals_residue() {
        let model = Model::init(small_config(), 6).unwrap();
        let x = rand_batch(1, 16, 7);
        let mut tape = Tape::new();
        let binding = model.bind_frozen(&mut tape);
        let xid = tape.leaf(&x);
        let (y, r, _) = model.derain(&mut tape, &binding, xid).unwrap();
        // y is defined as x - r: recomputing the subtraction is bitwise equal.
        let y2: Vec<f64> =
            tape.data(xid).iter().zip(tape.data(r)).map(|(a, b)| a - b).collect();
        assert!(y2.iter().zip(tape.data(y)).all(|(a, b)| a.to_bits() == b.to_bits()));
        // The rearranged identity x - y == r holds to rounding, not bitwise.
        let diff: Vec<f64> =
            tape.data(xid).iter().zip(tape.data(y)).map(|(a, b)| a - b).collect();
        assert!(diff
            .iter()
            .zip(tape.data(r))
            .all(|(a, b)| (a - b).abs() <= 1e-15 * (1.0 + b.abs())));
    }

    #[test]
    fn res2_identity_with_zero_body_weights() {
        // in == out: no skip projection; zeroing the body leaves the input.
        let config = small_config();
        let mut model = Model::init(config, 8).unwrap();
        let block = model.enc_blocks[1].clone();
        assert!(block.skip.is_none());
        for layer in [&block.entry, &block.exit].into_iter().chain(block.branches.iter()) {
            model.params.tensors[layer.w.0].data.fill(0.0);
            model.params.tensors[layer.b.0].data.fill(0.0);
        }
        let cin = model.params.tensor(block.entry.w).shape[1];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(
            vec![1, cin, 4, 4],
            (0..cin * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let mut tape = Tape::new();
        let binding = model.bind_frozen(&mut tape);
        let xid = tape.leaf(&x);
        let out = model.res2_forward(&mut tape, &binding, &block, xid).unwrap();
        assert_eq!(tape.data(out), x.data.as_slice());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::init(small_config(), 42).unwrap();
        let b = Model::init(small_config(), 42).unwrap();
        let c = Model::init(small_config(), 43).unwrap();
        for (ta, tb) in a.params.tensors.iter().zip(&b.params.tensors) {
            assert_eq!(ta.data, tb.data);
        }
        assert!(a
            .params
            .tensors
            .iter()
            .zip(&c.params.tensors)
            .any(|(ta, tc)| ta.data != tc.data));
    }

    #[test]
    fn init_weight_magnitude_tracks_fan_in_scale() {
        // For U[-a, a], E|w| = a/2; check the sample mean lands within +-50%.
        let model = Model::init(ModelConfig::default(), 10).unwrap();
        for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
            if !name.ends_with(".w") || t.numel() < 1000 || name.contains("exit") {
                continue;
            }
            let fan_in = t.shape[1] * t.shape[2] * t.shape[3];
            let a = init_bound(fan_in, model.config.leaky_slope);
            let mean_abs = t.data.iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
            assert!(
                mean_abs > 0.25 * a && mean_abs < 0.75 * a,
                "{}: mean |w| = {}, scale a = {}",
                name,
                mean_abs,
                a
            );
        }
    }

    #[test]
    fn latent_matrix_roundtrip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lm = LatentMatrix::from_chw(3, 4, data.clone());
        assert_eq!(lm.rows, 3);
        assert_eq!(lm.cols, 16);
        let back = lm.to_chw(4);
        assert_eq!(back.shape, vec![3, 4, 4]);
        assert_eq!(back.data, data);
        assert_eq!(lm.row(1), &data[16..32]);
    }

    #[test]
    fn full_model_gradients_match_finite_differences_at_crop_16() {
        use crate::tensor::testutil::grad_check;
        let model = Model::init(small_config(), 12).unwrap();
        let x = rand_batch(1, 16, 13);
        let y_target = rand_batch(1, 16, 14);
        let params = model.params.tensors.clone();
        grad_check(
            &|tape, p| {
                // Bind in store order so leaf ids equal parameter indices.
                let ids: Vec<_> = p.iter().map(|t| tape.leaf(t)).collect();
                let binding = Binding { ids, frozen: false };
                let xid = tape.constant(x.shape.clone(), x.data.clone());
                let (y, _, _) = model.derain(tape, &binding, xid).unwrap();
                let tid = tape.constant(y_target.shape.clone(), y_target.data.clone());
                let d = tape.sub(y, tid).unwrap();
                let sq = tape.square(d);
                tape.mean(sq)
            },
            &params,
            100,
            1e-5,
            1e-3,
            15,
        );
    }




    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = Model::init(small_config(), 16).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for (a, b) in model.params.tensors.iter().zip(&loaded.params.tensors) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = Model::init(small_config(), 17).unwrap();
        model.save(&path).unwrap();
        // Corrupt one shape in the file.
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("enc.stem.w", "enc.stem.x");
        std::fs::write(&path, text).unwrap();
        assert!(Model::load(&path).is_err());
    }
}

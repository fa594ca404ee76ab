//! Gated cross-attention transformer.
//!
//! A transformer encoder runs self-attention over the backbone grid tokens.
//! Its output is projected to the auxiliary-token width and refined by a
//! stack of two-branch decoder blocks: the left branch queries the auxiliary
//! patch tokens with the encoder tokens, the right branch does the reverse.
//! Each branch output is add-normed, squeezed to half width by a 1x1
//! convolution (a per-token linear map) and passed through the gate
//! activation; the two halves are concatenated into a multiplicative gate on
//! the encoder tokens. An output head maps tokens to the feature width and the
//! tokens are averaged into one gesture feature.
//!
//! The summary token (index 0) of the auxiliary grid is dropped before
//! decoding so both branches see the same number of tokens.

use ndarray::{s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::nn::{permutation, Adam, AdamConfig, Bound, LayerNorm, Linear, Mlp, ParamStore};
use crate::providers::{ProviderDims, VisualProvider};
use crate::tape::{Mat, Tape, Unary, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Gelu,
    Elu,
    Relu,
    Sigmoid,
    Silu,
}

impl GateActivation {
    pub const ALL: [GateActivation; 5] = [
        GateActivation::Gelu,
        GateActivation::Elu,
        GateActivation::Relu,
        GateActivation::Sigmoid,
        GateActivation::Silu,
    ];

    pub fn unary(self) -> Unary {
        match self {
            GateActivation::Gelu => Unary::Gelu,
            GateActivation::Elu => Unary::Elu,
            GateActivation::Relu => Unary::Relu,
            GateActivation::Sigmoid => Unary::Sigmoid,
            GateActivation::Silu => Unary::Silu,
        }
    }

    /// Pre-activation `b` with `act(b) = 1`, if one exists.
    pub fn unit_preimage(self) -> Option<f64> {
        let f = |x: f64| self.unary().apply(x) - 1.0;
        match self {
            GateActivation::Sigmoid => None,
            GateActivation::Relu | GateActivation::Elu => Some(1.0),
            GateActivation::Gelu | GateActivation::Silu => {
                // both are increasing on [0, 4] and cross 1 inside it
                let (mut lo, mut hi) = (0.0_f64, 4.0_f64);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(0.5 * (lo + hi))
            }
        }
    }
}

impl std::str::FromStr for GateActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Self::Gelu),
            "elu" => Ok(Self::Elu),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "silu" => Ok(Self::Silu),
            other => Err(Error::config(
                "gcat.gate_activation",
                format!("{other:?} is not one of gelu, elu, relu, sigmoid, silu"),
            )),
        }
    }
}

/// How the two branch outputs modulate the encoder tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// `O ∘ concat(g(A_L), g(A_R))`
    Gated,
    /// `O ∘ (A_L + A_R)` without the gate convolutions.
    UngatedSum,
}

/// Which part of the network produces features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Decoder bypassed: projected encoder tokens go straight to the output head.
    EncoderOnly,
    /// No transformer at all: spatially averaged backbone features.
    BackboneOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcatConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    /// Hidden width of the encoder FFN as a multiple of the model width.
    pub encoder_ffn_mult: usize,
    pub gate_activation: GateActivation,
    pub fusion: Fusion,
    pub variant: Variant,
    pub init_seed: u64,
}

impl Default for GcatConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 3,
            decoder_blocks: 3,
            heads: 8,
            encoder_ffn_mult: 4,
            gate_activation: GateActivation::Gelu,
            fusion: Fusion::Gated,
            variant: Variant::Full,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig::adamw(self.lr, self.weight_decay)
    }
}

/// Fixed 2-D sinusoidal positional embedding, token-major `(H·W) x C`.
///
/// The first half of the channels encodes the row coordinate, the second half
/// the column coordinate, as interleaved sine/cosine pairs of geometrically
/// spaced frequencies over coordinates normalized to `(0, 2π]`.
pub fn positional_embedding(channels: usize, grid_h: usize, grid_w: usize) -> Mat {
    let half = channels.div_ceil(2);
    let mut pos = Mat::zeros((grid_h * grid_w, channels));
    for i in 0..grid_h {
        for j in 0..grid_w {
            let y = (i + 1) as f64 / grid_h as f64 * std::f64::consts::TAU;
            let x = (j + 1) as f64 / grid_w as f64 * std::f64::consts::TAU;
            for c in 0..channels {
                let (coord, k, width) = if c < half {
                    (y, c, half)
                } else {
                    (x, c - half, channels - half)
                };
                let freq = 10000f64.powf(-((2 * (k / 2)) as f64) / width.max(1) as f64);
                let arg = coord * freq;
                pos[[i * grid_w + j, c]] = if k % 2 == 0 { arg.sin() } else { arg.cos() };
            }
        }
    }
    pos
}

#[derive(Clone, Copy, Debug)]
struct AttentionProj {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttentionProj {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
        }
    }

    /// Returns the output projection and the raw attention node.
    fn forward(&self, tape: &Tape, p: &Bound, query: Var, context: Var, batch: usize, heads: usize) -> (Var, Var) {
        let q = self.q.forward(tape, p, query);
        let k = self.k.forward(tape, p, context);
        let v = self.v.forward(tape, p, context);
        let att = tape.attention(q, k, v, batch, heads);
        (self.o.forward(tape, p, att), att)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    attn: AttentionProj,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
struct Branch {
    attn: AttentionProj,
    ln: LayerNorm,
    gate: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    left: Branch,
    right: Branch,
    ffn: Option<(Mlp, LayerNorm)>,
}

/// Intermediate tensors of one decoder block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub input: Var,
    pub a_left: Var,
    pub a_right: Var,
    pub g_left: Option<Var>,
    pub g_right: Option<Var>,
    pub fused_gate: Var,
    pub fused: Var,
    pub left_attention: Var,
    pub right_attention: Var,
    pub output: Var,
}

/// Everything a forward pass exposes for inspection.
#[derive(Clone, Debug)]
pub struct Trace {
    pub batch: usize,
    pub encoder_out: Option<Var>,
    pub projected: Option<Var>,
    pub blocks: Vec<BlockTrace>,
    pub tokens: Option<Var>,
    /// `batch x feature_dim`
    pub features: Var,
}

/// The gesture feature extractor.
#[derive(Clone, Debug)]
pub struct Gcat {
    pub config: GcatConfig,
    pub dims: ProviderDims,
    pub params: ParamStore,
    pos: Mat,
    encoder: Vec<EncoderBlock>,
    proj: Linear,
    decoder: Vec<DecoderBlock>,
    head: Mlp,
}

/// A labeled 512-d (or configured width) gesture feature.
#[derive(Clone, Debug, PartialEq)]
pub struct GestureFeature {
    pub data: Array1<f64>,
    pub sample_id: String,
    pub class_id: Option<usize>,
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}

impl Gcat {
    pub fn new(config: GcatConfig, dims: ProviderDims) -> Result<Self> {
        dims.validate()?;
        let n = dims.grid_tokens();
        let c = dims.backbone_channels;
        let dc = dims.clip_channels;
        if config.heads == 0 || c % config.heads != 0 || dc % config.heads != 0 {
            return Err(Error::config(
                "gcat.heads",
                format!("{} heads must divide both {c} and {dc}", config.heads),
            ));
        }
        if dc % 2 != 0 {
            return Err(Error::config("provider.dims.clip_channels", "must be even for the half-width gates"));
        }
        if dims.clip_tokens - 1 != n {
            return Err(Error::config(
                "provider.dims.clip_tokens",
                format!("{} patch tokens do not match the {n}-cell backbone grid", dims.clip_tokens - 1),
            ));
        }
        if config.variant == Variant::Full && config.decoder_blocks == 0 {
            return Err(Error::config("gcat.decoder_blocks", "the full variant needs at least one block"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let hidden = c * config.encoder_ffn_mult.max(1);
        for i in 0..config.encoder_blocks {
            let name = format!("encoder.{i}");
            encoder.push(EncoderBlock {
                attn: AttentionProj::new(&mut store, &mut rng, &format!("{name}.attn"), c),
                ln1: LayerNorm::new(&mut store, &format!("{name}.ln1"), c),
                ffn: Mlp::new(&mut store, &mut rng, &format!("{name}.ffn"), (c, hidden, c), Unary::Gelu),
                ln2: LayerNorm::new(&mut store, &format!("{name}.ln2"), c),
            });
        }
        let proj = Linear::new(&mut store, &mut rng, "proj", c, dc);
        let blocks = if config.variant == Variant::Full { config.decoder_blocks } else { 0 };
        for i in 0..blocks {
            let name = format!("decoder.{i}");
            let branch = |side: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| Branch {
                attn: AttentionProj::new(store, rng, &format!("{name}.{side}.attn"), dc),
                ln: LayerNorm::new(store, &format!("{name}.{side}.ln"), dc),
                gate: Linear::new(store, rng, &format!("{name}.{side}.gate"), dc, dc / 2),
            };
            let left = branch("left", &mut store, &mut rng);
            let right = branch("right", &mut store, &mut rng);
            let ffn = (i + 1 < blocks).then(|| {
                (
                    Mlp::new(&mut store, &mut rng, &format!("{name}.ffn"), (dc, dc, dc), Unary::Gelu),
                    LayerNorm::new(&mut store, &format!("{name}.ffn_ln"), dc),
                )
            });
            decoder.push(DecoderBlock { left, right, ffn });
        }
        let head = Mlp::new(&mut store, &mut rng, "head", (dc, dc, dims.semantic_dim), Unary::Gelu);
        Ok(Self {
            pos: positional_embedding(c, dims.grid_h, dims.grid_w),
            config,
            dims,
            params: store,
            encoder,
            proj,
            decoder,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        match self.config.variant {
            Variant::BackboneOnly => self.dims.backbone_channels,
            _ => self.dims.semantic_dim,
        }
    }

    pub fn positional(&self) -> &Mat {
        &self.pos
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.dims.grid_tokens()
    }

    /// Whether the variant has anything to train.
    pub fn trainable(&self) -> bool {
        self.config.variant != Variant::BackboneOnly
    }

    /// Sets every gate convolution so that the gate output is exactly one.
    pub fn set_identity_gates(&mut self) -> Result<()> {
        let b = self.config.gate_activation.unit_preimage().ok_or_else(|| {
            Error::config("gcat.gate_activation", "sigmoid cannot produce a unit gate")
        })?;
        for blk in self.decoder.clone() {
            for br in [blk.left, blk.right] {
                self.params.get_mut(br.gate.w).fill(0.0);
                self.params.get_mut(br.gate.b).fill(b);
            }
        }
        Ok(())
    }

    /// Encoder over `(batch·N) x C'` backbone tokens (positional embedding added here).
    pub fn encode(&self, tape: &Tape, p: &Bound, backbone_tokens: Var, batch: usize) -> Result<Var> {
        let n = self.tokens_per_sample();
        let expect = (batch * n, self.dims.backbone_channels);
        if tape.shape(backbone_tokens) != expect {
            let got = tape.shape(backbone_tokens);
            return Err(Error::Shape {
                context: "encoder input".into(),
                expected: vec![expect.0, expect.1],
                got: vec![got.0, got.1],
            });
        }
        let mut pos = Mat::zeros(expect);
        for b in 0..batch {
            pos.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&self.pos);
        }
        let mut x = tape.add(backbone_tokens, tape.leaf(pos));
        for (i, blk) in self.encoder.iter().enumerate() {
            let (att, _) = blk.attn.forward(tape, p, x, x, batch, self.config.heads);
            x = blk.ln1.forward(tape, p, tape.add(x, att));
            let f = blk.ffn.forward(tape, p, x);
            x = blk.ln2.forward(tape, p, tape.add(x, f));
            check_finite(tape, x, &format!("encoder block {i}"))?;
        }
        Ok(x)
    }

    /// Full forward pass. `clip_patches` is `(batch·N) x C''` with the summary
    /// tokens already removed.
    pub fn forward(&self, tape: &Tape, p: &Bound, backbone_tokens: Var, clip_patches: Var, batch: usize) -> Result<Trace> {
        let n = self.tokens_per_sample();
        if self.config.variant == Variant::BackboneOnly {
            let features = tape.group_mean(backbone_tokens, n);
            return Ok(Trace {
                batch,
                encoder_out: None,
                projected: None,
                blocks: Vec::new(),
                tokens: None,
                features,
            });
        }
        let encoded = self.encode(tape, p, backbone_tokens, batch)?;
        let projected = self.proj.forward(tape, p, encoded);
        let mut o = projected;
        let mut blocks = Vec::with_capacity(self.decoder.len());
        if !self.decoder.is_empty() {
            let expect = (batch * n, self.dims.clip_channels);
            if tape.shape(clip_patches) != expect {
                let got = tape.shape(clip_patches);
                return Err(Error::Shape {
                    context: "decoder auxiliary tokens".into(),
                    expected: vec![expect.0, expect.1],
                    got: vec![got.0, got.1],
                });
            }
        }
        let heads = self.config.heads;
        for (i, blk) in self.decoder.iter().enumerate() {
            let input = o;
            let (att_l, raw_l) = blk.left.attn.forward(tape, p, o, clip_patches, batch, heads);
            let a_left = blk.left.ln.forward(tape, p, tape.add(o, att_l));
            let (att_r, raw_r) = blk.right.attn.forward(tape, p, clip_patches, o, batch, heads);
            let a_right = blk.right.ln.forward(tape, p, tape.add(clip_patches, att_r));
            let (g_left, g_right, fused_gate) = match self.config.fusion {
                Fusion::Gated => {
                    let act = self.config.gate_activation.unary();
                    let gl = tape.unary(blk.left.gate.forward(tape, p, a_left), act);
                    let gr = tape.unary(blk.right.gate.forward(tape, p, a_right), act);
                    (Some(gl), Some(gr), tape.concat_cols(&[gl, gr]))
                }
                Fusion::UngatedSum => (None, None, tape.add(a_left, a_right)),
            };
            let fused = tape.mul(o, fused_gate);
            o = fused;
            if let Some((ffn, ln)) = &blk.ffn {
                let f = ffn.forward(tape, p, o);
                o = ln.forward(tape, p, tape.add(o, f));
            }
            check_finite(tape, o, &format!("decoder block {i}"))?;
            blocks.push(BlockTrace {
                input,
                a_left,
                a_right,
                g_left,
                g_right,
                fused_gate,
                fused,
                left_attention: raw_l,
                right_attention: raw_r,
                output: o,
            });
        }
        let tokens = self.head.forward(tape, p, o);
        let features = tape.group_mean(tokens, n);
        check_finite(tape, features, "output head")?;
        Ok(Trace {
            batch,
            encoder_out: Some(encoded),
            projected: Some(projected),
            blocks,
            tokens: Some(tokens),
            features,
        })
    }

    /// Provider inputs for a batch, stacked row-wise.
    pub fn batch_inputs(&self, provider: &dyn VisualProvider, records: &[&SampleRecord]) -> Result<(Mat, Mat)> {
        let n = self.tokens_per_sample();
        let mut backbone = Mat::zeros((records.len() * n, self.dims.backbone_channels));
        let need_clip = self.config.variant == Variant::Full;
        let mut clip = Mat::zeros((if need_clip { records.len() * n } else { 0 }, self.dims.clip_channels));
        for (b, r) in records.iter().enumerate() {
            let fm = provider.backbone_features(r)?;
            if fm.data.dim() != (self.dims.backbone_channels, n) {
                return Err(Error::Shape {
                    context: format!("backbone features of {}", r.sample_id),
                    expected: vec![self.dims.backbone_channels, self.dims.grid_h, self.dims.grid_w],
                    got: vec![fm.data.nrows(), fm.data.ncols()],
                });
            }
            backbone.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&fm.data.t());
            if need_clip {
                let ct = provider.clip_image_tokens(r)?;
                if ct.data.dim() != (self.dims.clip_tokens, self.dims.clip_channels) {
                    return Err(Error::Shape {
                        context: format!("clip tokens of {}", r.sample_id),
                        expected: vec![self.dims.clip_tokens, self.dims.clip_channels],
                        got: vec![ct.data.nrows(), ct.data.ncols()],
                    });
                }
                clip.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&ct.without_summary());
            }
        }
        Ok((backbone, clip))
    }

    /// Features for a batch without recording gradients beyond this call.
    pub fn infer_batch(&self, provider: &dyn VisualProvider, records: &[&SampleRecord]) -> Result<Mat> {
        let (backbone, clip) = self.batch_inputs(provider, records)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let b = tape.leaf(backbone);
        let c = tape.leaf(clip);
        let trace = self.forward(&tape, &p, b, c, records.len())?;
        let out = tape.value(trace.features).clone();
        Ok(out)
    }
}

/// Batch size used for inference. Fixed so results never depend on how work
/// is divided between workers.
pub const INFERENCE_CHUNK: usize = 16;

/// One feature per record, in record order.
pub fn extract_features(
    model: &Gcat,
    provider: &dyn VisualProvider,
    records: &[SampleRecord],
    workers: usize,
) -> Result<Vec<GestureFeature>> {
    let chunks: Vec<&[SampleRecord]> = records.chunks(INFERENCE_CHUNK).collect();
    let run = |chunk: &&[SampleRecord]| -> Result<Vec<GestureFeature>> {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let feats = model.infer_batch(provider, &refs)?;
        Ok(chunk
            .iter()
            .zip(feats.axis_iter(Axis(0)))
            .map(|(r, f)| GestureFeature {
                data: f.to_owned(),
                sample_id: r.sample_id.clone(),
                class_id: Some(r.class_id),
            })
            .collect())
    };
    let parts: Vec<Result<Vec<GestureFeature>>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(run).collect())
    } else {
        chunks.iter().map(run).collect()
    };
    let mut out = Vec::with_capacity(records.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Linear classifier over gesture features whose columns start as the seen
/// class semantics.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub params: ParamStore,
    pub linear: Linear,
}

impl SemanticHead {
    /// `semantics` holds one row per seen class, in label order.
    pub fn from_semantics(semantics: &Mat) -> Self {
        let mut params = ParamStore::new();
        let (n, d) = semantics.dim();
        let w = params.add("phi_c.w", semantics.t().to_owned());
        let b = params.add("phi_c.b", Mat::zeros((1, n)));
        Self {
            params,
            linear: Linear {
                w,
                b,
                fan_in: d,
                fan_out: n,
            },
        }
    }

    pub fn logits(&self, features: &Mat) -> Mat {
        self.linear.apply(&self.params, features)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub epoch_losses: Vec<f64>,
    pub final_epoch_loss: f64,
    pub train_accuracy: f64,
    pub steps: u64,
}

/// Stage-1 loss on one batch: cross-entropy of the semantic head over GCAT features.
pub fn stage1_loss(
    tape: &Tape,
    model: &Gcat,
    pm: &Bound,
    head: &SemanticHead,
    ph: &Bound,
    backbone: Mat,
    clip: Mat,
    labels: &[usize],
) -> Result<(Var, Var)> {
    let b = tape.leaf(backbone);
    let c = tape.leaf(clip);
    let trace = model.forward(tape, pm, b, c, labels.len())?;
    let logits = head.linear.forward(tape, ph, trace.features);
    Ok((tape.cross_entropy(logits, labels), logits))
}

/// Trains GCAT jointly with the semantic head by cross-entropy on seen-class
/// samples. `labels[i]` indexes the rows of the head's semantics.
pub fn stage1_train(
    model: &mut Gcat,
    head: &mut SemanticHead,
    provider: &dyn VisualProvider,
    records: &[SampleRecord],
    labels: &[usize],
    config: &Stage1Config,
) -> Result<Stage1Report> {
    if records.is_empty() {
        return Err(Error::Invalid("stage-1 training set is empty".into()));
    }
    assert_eq!(records.len(), labels.len());
    if !model.trainable() {
        return Err(Error::Invalid("the backbone-only variant has nothing to train".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::config("stage1.batch_size", "must be positive"));
    }
    let mut opt_model = Adam::new(config.optimizer(), &model.params);
    let mut opt_head = Adam::new(config.optimizer(), &head.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = Stage1Report::default();
    for epoch in 0..config.epochs {
        let order = permutation(&mut rng, records.len());
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (backbone, clip) = model.batch_inputs(provider, &batch)?;
            let tape = Tape::new();
            let pm = model.params.bind(&tape);
            let ph = head.params.bind(&tape);
            let (loss, logits) = stage1_loss(&tape, model, &pm, head, &ph, backbone, clip, &y)?;
            let l = tape.scalar_value(loss);
            if !l.is_finite() {
                return Err(Error::Numerical(format!("stage-1 loss is {l} in epoch {epoch}")));
            }
            loss_sum += l * y.len() as f64;
            correct += argmax_rows(&tape.value(logits))
                .iter()
                .zip(&y)
                .filter(|(a, b)| a == b)
                .count();
            let grads = tape.backward(loss);
            let gm = pm.grads(&model.params, &grads);
            opt_model.step(&mut model.params, &gm);
            let gh = ph.grads(&head.params, &grads);
            opt_head.step(&mut head.params, &gh);
            report.steps += 1;
        }
        let mean = loss_sum / records.len() as f64;
        log::info!(
            "stage1 epoch {epoch}: loss {mean:.5} train acc {:.3}",
            correct as f64 / records.len() as f64
        );
        report.epoch_losses.push(mean);
        report.final_epoch_loss = mean;
        report.train_accuracy = correct as f64 / records.len() as f64;
    }
    Ok(report)
}

pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Left-branch decoder attention of one sample, per block.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    /// Head-averaged `queries x keys` attention, one per block.
    pub raw: Vec<Mat>,
    /// Attention mass received by each grid cell, `grid_h x grid_w`, one per block.
    pub maps: Vec<Mat>,
}

/// Decoder attention over the grid for `record`.
///
/// Each map averages the left-branch attention over heads and over query
/// tokens, giving the share of attention each auxiliary patch (grid cell)
/// receives; every map sums to one.
pub fn attention_maps(model: &Gcat, provider: &dyn VisualProvider, record: &SampleRecord) -> Result<AttentionMaps> {
    if model.config.variant != Variant::Full {
        return Err(Error::Invalid("attention maps need the decoder".into()));
    }
    let (backbone, clip) = model.batch_inputs(provider, &[record])?;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let b = tape.leaf(backbone);
    let c = tape.leaf(clip);
    let trace = model.forward(&tape, &p, b, c, 1)?;
    let (gh, gw) = (model.dims.grid_h, model.dims.grid_w);
    let mut raw = Vec::new();
    let mut maps = Vec::new();
    for blk in &trace.blocks {
        let probs = tape.attention_probs(blk.left_attention).expect("attention node");
        let mut avg = Mat::zeros(probs.probs[0].dim());
        for ph in probs.probs.iter() {
            avg += ph;
        }
        avg /= probs.heads as f64;
        let received = avg.mean_axis(Axis(0)).expect("nonempty");
        maps.push(received.into_shape_with_order((gh, gw)).expect("grid shape"));
        raw.push(avg);
    }
    Ok(AttentionMaps { raw, maps })
}

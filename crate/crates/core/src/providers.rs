//! External representations consumed by the pipeline: backbone feature maps,
//! auxiliary image tokens, and prompt-templated class semantics.
//!
//! Two implementations ship with the crate. [`SyntheticProvider`] generates
//! class-structured data from a seed so the whole pipeline can run and be
//! tested without images or pretrained weights. [`PrecomputedProvider`] reads
//! tensors exported by an external extractor (for example a ResNet-50 and CLIP
//! run over the real dataset) from [`TensorStore`] directories.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GestureClass, SampleRecord};
use crate::error::{Error, Result};
use crate::tape::Mat;
use crate::tensor_io::TensorStore;

/// Prompt wrapped around a class name before text encoding.
pub const PROMPT_PREFIX: &str = "A photo of a diver gesturing";

pub fn prompt_template(class_name: &str) -> String {
    format!("{PROMPT_PREFIX} {class_name}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDims {
    /// Backbone channels C'.
    pub backbone_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Auxiliary token count k, including the summary token at index 0.
    pub clip_tokens: usize,
    /// Auxiliary token width C''.
    pub clip_channels: usize,
    pub semantic_dim: usize,
}

impl Default for ProviderDims {
    fn default() -> Self {
        Self {
            backbone_channels: 256,
            grid_h: 7,
            grid_w: 7,
            clip_tokens: 50,
            clip_channels: 768,
            semantic_dim: 512,
        }
    }
}

impl ProviderDims {
    pub fn grid_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("provider.dims.backbone_channels", self.backbone_channels),
            ("provider.dims.grid_h", self.grid_h),
            ("provider.dims.grid_w", self.grid_w),
            ("provider.dims.clip_channels", self.clip_channels),
            ("provider.dims.semantic_dim", self.semantic_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.clip_tokens < 2 {
            return Err(Error::config("provider.dims.clip_tokens", "need a summary token plus at least one patch"));
        }
        Ok(())
    }
}

/// Backbone spatial features, stored channels-first as `C' x (H'·W')`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Mat,
    pub grid: (usize, usize),
    pub source_sample: String,
}

impl FeatureMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.data.nrows(), self.grid.0, self.grid.1)
    }

    /// Token-major view: `(H'·W') x C'`.
    pub fn tokens(&self) -> Mat {
        self.data.t().to_owned()
    }
}

/// Auxiliary image tokens, `k x C''`, token 0 being the class-summary token.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTokenGrid {
    pub data: Mat,
    pub source_sample: String,
}

impl ClipTokenGrid {
    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// The patch tokens with the summary token removed: `(k-1) x C''`.
    pub fn without_summary(&self) -> Mat {
        self.data.slice(s![1.., ..]).to_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVector {
    pub data: Array1<f64>,
    pub class_id: usize,
}

/// Visual inputs for one sample.
pub trait VisualProvider: Send + Sync {
    fn dims(&self) -> ProviderDims;

    /// Stable identifier of the provider and its settings.
    fn fingerprint(&self) -> String;

    fn backbone_features(&self, record: &SampleRecord) -> Result<FeatureMap>;

    fn clip_image_tokens(&self, record: &SampleRecord) -> Result<ClipTokenGrid>;
}

/// Class semantics from a prompt-templated class name.
pub trait SemanticProvider: Send + Sync {
    fn semantic_dim(&self) -> usize;

    fn class_semantics(&self, class: &GestureClass) -> Result<SemanticVector>;
}

fn ensure_finite(m: &Mat, sample: &str, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Provider {
            sample: sample.to_string(),
            msg: format!("{what} contains non-finite values"),
        })
    }
}

pub fn l2_normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v.mapv_inplace(|x| x / n);
    }
}

fn seed_from(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Mat {
    Mat::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    /// Dimension of the latent space class identities live in. Semantics and
    /// visual anchors are both linear images of the class latent, so unseen
    /// classes are reachable from seen ones.
    pub latent_rank: usize,
    /// Per-entry Gaussian noise on backbone features.
    pub sigma: f64,
    /// Auxiliary-token noise relative to `sigma`.
    pub clip_noise_ratio: f64,
    /// Per-sample offset shared by all positions (nuisance, not class related).
    pub nuisance: f64,
    /// Weight of the negatively signed region of the backbone spatial mask;
    /// 1.0 cancels the class signal under plain spatial averaging.
    pub mask_balance: f64,
    /// Class-specific component of the semantics outside the shared latent.
    pub semantic_residual: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            latent_rank: 8,
            sigma: 1.0,
            clip_noise_ratio: 0.5,
            nuisance: 0.5,
            mask_balance: 0.7,
            semantic_residual: 0.1,
        }
    }
}

/// Deterministic class-structured generator.
///
/// Each class name maps (through a hash of its prompt) to a unit latent `u_c`.
/// Backbone features at grid cell `p` are `mask_b[p] · M_b u_c + nuisance + noise`,
/// auxiliary patch tokens are `mask_c[p] · M_c u_c + noise`, and the summary
/// token is `M_c u_c + noise`. Semantics are `normalize(P u_c + residual)`.
#[derive(Clone, Debug)]
pub struct SyntheticProvider {
    dims: ProviderDims,
    params: SyntheticParams,
    seed: u64,
    backbone_map: Mat,
    clip_map: Mat,
    semantic_map: Mat,
    backbone_mask: Vec<f64>,
    clip_mask: Vec<f64>,
    latents: Vec<Array1<f64>>,
    classes: Vec<GestureClass>,
}

impl SyntheticProvider {
    pub fn new(dims: ProviderDims, params: SyntheticParams, seed: u64, classes: &[GestureClass]) -> Result<Self> {
        dims.validate()?;
        if params.latent_rank == 0 {
            return Err(Error::config("provider.synthetic.latent_rank", "must be positive"));
        }
        if !(params.sigma >= 0.0 && params.nuisance >= 0.0 && params.clip_noise_ratio >= 0.0) {
            return Err(Error::config("provider.synthetic.sigma", "noise scales must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"maps", &seed.to_le_bytes()]));
        let r = params.latent_rank;
        let backbone_map = gaussian(&mut rng, (dims.backbone_channels, r));
        let clip_map = gaussian(&mut rng, (dims.clip_channels, r));
        let semantic_map = gaussian(&mut rng, (dims.semantic_dim, r));
        let (gh, gw) = (dims.grid_h, dims.grid_w);
        let mut backbone_mask = vec![0.0; gh * gw];
        let mut clip_mask = vec![0.3; gh * gw];
        for i in 0..gh {
            for j in 0..gw {
                let p = i * gw + j;
                // "hands": a block left of centre; "torso": a block on the right
                let rows = 2 * i >= gh.saturating_sub(1) / 2 && 4 * i < 3 * gh;
                if rows && 2 * j < gw && 4 * j + 4 > gw {
                    backbone_mask[p] = 1.0;
                    clip_mask[p] = 1.0;
                } else if rows && 2 * j > gw {
                    backbone_mask[p] = -params.mask_balance;
                }
            }
        }
        if backbone_mask.iter().all(|&m| m == 0.0) {
            backbone_mask.iter_mut().for_each(|m| *m = 1.0);
        }
        let latents = classes
            .iter()
            .map(|c| Self::latent(seed, r, &c.name))
            .collect();
        Ok(Self {
            dims,
            params,
            seed,
            backbone_map,
            clip_map,
            semantic_map,
            backbone_mask,
            clip_mask,
            latents,
            classes: classes.to_vec(),
        })
    }

    fn latent(seed: u64, rank: usize, name: &str) -> Array1<f64> {
        let prompt = prompt_template(name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"latent", &seed.to_le_bytes(), prompt.as_bytes()]));
        let mut u: Array1<f64> = Array1::from_shape_fn(rank, |_| StandardNormal.sample(&mut rng));
        l2_normalize(&mut u);
        u
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    /// Standard deviation of each backbone entry around its class mean.
    pub fn backbone_std(&self) -> f64 {
        (self.params.sigma.powi(2) + self.params.nuisance.powi(2)).sqrt()
    }

    /// Mean backbone tensor of class `class_id`, channels-first.
    pub fn backbone_class_mean(&self, class_id: usize) -> Mat {
        let anchor = self.backbone_map.dot(&self.latents[class_id]);
        Mat::from_shape_fn((self.dims.backbone_channels, self.dims.grid_tokens()), |(ch, p)| {
            anchor[ch] * self.backbone_mask[p]
        })
    }

    pub fn clip_class_mean(&self, class_id: usize) -> Mat {
        let anchor = self.clip_map.dot(&self.latents[class_id]);
        let k = self.dims.clip_tokens;
        Mat::from_shape_fn((k, self.dims.clip_channels), |(t, ch)| {
            if t == 0 {
                anchor[ch]
            } else {
                let p = (t - 1) % self.clip_mask.len();
                anchor[ch] * self.clip_mask[p]
            }
        })
    }

    fn parse_ref(&self, record: &SampleRecord) -> Result<(usize, u64)> {
        let bad = |msg: &str| Error::Provider {
            sample: record.sample_id.clone(),
            msg: format!("{msg}: {:?}", record.image_ref),
        };
        let rest = record
            .image_ref
            .strip_prefix("synthetic:")
            .ok_or_else(|| bad("not a synthetic image reference"))?;
        let (class, index) = rest.split_once(':').ok_or_else(|| bad("malformed synthetic reference"))?;
        let class: usize = class.parse().map_err(|_| bad("malformed class in synthetic reference"))?;
        let index: u64 = index.parse().map_err(|_| bad("malformed index in synthetic reference"))?;
        if class >= self.classes.len() {
            return Err(bad("class out of range"));
        }
        Ok((class, index))
    }

    fn sample_rng(&self, what: &[u8], class: usize, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed_from(&[
            what,
            &self.seed.to_le_bytes(),
            &(class as u64).to_le_bytes(),
            &index.to_le_bytes(),
        ]))
    }
}

impl VisualProvider for SyntheticProvider {
    fn dims(&self) -> ProviderDims {
        self.dims
    }

    fn fingerprint(&self) -> String {
        format!(
            "synthetic:v1:seed={}:dims={:?}:params={}",
            self.seed,
            self.dims,
            serde_json::to_string(&self.params).unwrap_or_default()
        )
    }

    fn backbone_features(&self, record: &SampleRecord) -> Result<FeatureMap> {
        let (class, index) = self.parse_ref(record)?;
        let mut rng = self.sample_rng(b"backbone", class, index);
        let mut data = self.backbone_class_mean(class);
        let offset: Vec<f64> = (0..data.nrows())
            .map(|_| self.params.nuisance * normal(&mut rng))
            .collect();
        for ((ch, _), v) in data.indexed_iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += offset[ch] + self.params.sigma * e;
        }
        ensure_finite(&data, &record.sample_id, "backbone features")?;
        Ok(FeatureMap {
            data,
            grid: (self.dims.grid_h, self.dims.grid_w),
            source_sample: record.sample_id.clone(),
        })
    }

    fn clip_image_tokens(&self, record: &SampleRecord) -> Result<ClipTokenGrid> {
        let (class, index) = self.parse_ref(record)?;
        let mut rng = self.sample_rng(b"clip", class, index);
        let sigma = self.params.sigma * self.params.clip_noise_ratio;
        let mut data = self.clip_class_mean(class);
        data.mapv_inplace(|v| v + sigma * normal(&mut rng));
        ensure_finite(&data, &record.sample_id, "clip tokens")?;
        Ok(ClipTokenGrid {
            data,
            source_sample: record.sample_id.clone(),
        })
    }
}

impl SemanticProvider for SyntheticProvider {
    fn semantic_dim(&self) -> usize {
        self.dims.semantic_dim
    }

    fn class_semantics(&self, class: &GestureClass) -> Result<SemanticVector> {
        if class.name.trim().is_empty() {
            return Err(Error::Invalid("empty class name".into()));
        }
        let prompt = prompt_template(&class.name);
        let u = Self::latent(self.seed, self.params.latent_rank, &class.name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from(&[b"residual", &self.seed.to_le_bytes(), prompt.as_bytes()]));
        let mut a = self.semantic_map.dot(&u) / (self.params.latent_rank as f64).sqrt();
        let scale = self.params.semantic_residual;
        a.mapv_inplace(|v| v + scale * normal(&mut rng));
        l2_normalize(&mut a);
        Ok(SemanticVector { data: a, class_id: class.id })
    }
}

/// Reads provider outputs exported by an external extractor.
///
/// `root/backbone`, `root/clip` are [`TensorStore`]s keyed by sample id
/// holding `C' x (H'·W')` and `k x C''` tensors; `root/semantics` is keyed by
/// class name and holds `1 x d` vectors (normalized on read).
pub struct PrecomputedProvider {
    root: PathBuf,
    dims: ProviderDims,
    backbone: TensorStore,
    clip: TensorStore,
    semantics: TensorStore,
}

impl PrecomputedProvider {
    pub fn open(root: &Path, dims: ProviderDims) -> Result<Self> {
        let open = |name: &str| {
            let dir = root.join(name);
            if !TensorStore::exists(&dir) {
                return Err(Error::config("provider.path", format!("{} is not a tensor store", dir.display())));
            }
            TensorStore::load(&dir)
        };
        Ok(Self {
            root: root.to_path_buf(),
            dims,
            backbone: open("backbone")?,
            clip: open("clip")?,
            semantics: open("semantics")?,
        })
    }

    fn lookup<'a>(&self, store: &'a TensorStore, record: &SampleRecord, shape: (usize, usize)) -> Result<&'a Mat> {
        let t = store.get(&record.sample_id).ok_or_else(|| Error::Provider {
            sample: record.sample_id.clone(),
            msg: "not present in the precomputed store".into(),
        })?;
        if t.dim() != shape {
            return Err(Error::Provider {
                sample: record.sample_id.clone(),
                msg: format!("expected shape {shape:?}, found {:?}", t.dim()),
            });
        }
        ensure_finite(t, &record.sample_id, "precomputed tensor")?;
        Ok(t)
    }
}

impl VisualProvider for PrecomputedProvider {
    fn dims(&self) -> ProviderDims {
        self.dims
    }

    fn fingerprint(&self) -> String {
        format!(
            "precomputed:{}:{}:{}",
            self.root.display(),
            self.backbone.fingerprint,
            self.clip.fingerprint
        )
    }

    fn backbone_features(&self, record: &SampleRecord) -> Result<FeatureMap> {
        let d = self.dims;
        let t = self.lookup(&self.backbone, record, (d.backbone_channels, d.grid_tokens()))?;
        Ok(FeatureMap {
            data: t.clone(),
            grid: (d.grid_h, d.grid_w),
            source_sample: record.sample_id.clone(),
        })
    }

    fn clip_image_tokens(&self, record: &SampleRecord) -> Result<ClipTokenGrid> {
        let d = self.dims;
        let t = self.lookup(&self.clip, record, (d.clip_tokens, d.clip_channels))?;
        Ok(ClipTokenGrid {
            data: t.clone(),
            source_sample: record.sample_id.clone(),
        })
    }
}

impl SemanticProvider for PrecomputedProvider {
    fn semantic_dim(&self) -> usize {
        self.dims.semantic_dim
    }

    fn class_semantics(&self, class: &GestureClass) -> Result<SemanticVector> {
        let t = self.semantics.get(&class.name).ok_or_else(|| {
            Error::Invalid(format!("no precomputed semantics for class {:?}", class.name))
        })?;
        if t.len() != self.dims.semantic_dim {
            return Err(Error::Invalid(format!(
                "semantics for {:?} have {} entries, expected {}",
                class.name,
                t.len(),
                self.dims.semantic_dim
            )));
        }
        let mut a = Array1::from_iter(t.iter().copied());
        l2_normalize(&mut a);
        Ok(SemanticVector { data: a, class_id: class.id })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderKind {
    Synthetic,
    /// Tensors exported ahead of time by an external extractor.
    Precomputed { path: PathBuf },
    /// A named adapter registered at runtime.
    PretrainedAdapter { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    #[serde(flatten)]
    pub kind: ProviderKind,
    pub dims: ProviderDims,
    pub seed: u64,
    pub synthetic: SyntheticParams,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Synthetic,
            dims: ProviderDims::default(),
            seed: 0,
            synthetic: SyntheticParams::default(),
        }
    }
}

/// A provider supplying both visual inputs and semantics.
pub trait Provider: VisualProvider + SemanticProvider {}

impl<T: VisualProvider + SemanticProvider> Provider for T {}

pub type AdapterFactory = Box<dyn Fn(&ProviderConfig, &[GestureClass]) -> Result<Arc<dyn Provider>> + Send + Sync>;

/// Named pretrained adapters. The library registers none; integrations that
/// wrap real backbone and text encoders register themselves here.
#[derive(Default)]
pub struct AdapterRegistry {
    factories: HashMap<String, AdapterFactory>,
}

impl AdapterRegistry {
    pub fn register(&mut self, name: impl Into<String>, factory: AdapterFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn build(&self, config: &ProviderConfig, classes: &[GestureClass]) -> Result<Arc<dyn Provider>> {
        config.dims.validate()?;
        match &config.kind {
            ProviderKind::Synthetic => Ok(Arc::new(SyntheticProvider::new(
                config.dims,
                config.synthetic,
                config.seed,
                classes,
            )?)),
            ProviderKind::Precomputed { path } => Ok(Arc::new(PrecomputedProvider::open(path, config.dims)?)),
            ProviderKind::PretrainedAdapter { name } => {
                let factory = self.factories.get(name).ok_or_else(|| {
                    Error::config("provider.name", format!("no pretrained adapter named {name:?} is registered"))
                })?;
                factory(config, classes)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::caddy_classes;

    fn record(class: usize, index: usize) -> SampleRecord {
        SampleRecord {
            sample_id: format!("s{class}_{index}"),
            image_ref: format!("synthetic:{class}:{index}"),
            class_id: class,
        }
    }

    fn provider() -> SyntheticProvider {
        SyntheticProvider::new(ProviderDims::default(), SyntheticParams::default(), 11, &caddy_classes()).unwrap()
    }

    #[test]
    fn default_shapes() {
        let p = provider();
        let fm = p.backbone_features(&record(3, 0)).unwrap();
        assert_eq!(fm.shape(), (256, 7, 7));
        assert_eq!(fm.tokens().dim(), (49, 256));
        let ct = p.clip_image_tokens(&record(3, 0)).unwrap();
        assert_eq!(ct.shape(), (50, 768));
        assert_eq!(ct.without_summary().dim(), (49, 768));
        let a = p.class_semantics(&caddy_classes()[3]).unwrap();
        assert_eq!(a.data.len(), 512);
    }

    #[test]
    fn synthetic_outputs_are_deterministic() {
        let (p, q) = (provider(), provider());
        let r = record(5, 17);
        assert_eq!(p.backbone_features(&r).unwrap(), q.backbone_features(&r).unwrap());
        assert_eq!(p.clip_image_tokens(&r).unwrap(), q.clip_image_tokens(&r).unwrap());
        let c = &caddy_classes()[5];
        assert_eq!(p.class_semantics(c).unwrap(), q.class_semantics(c).unwrap());
        assert_ne!(
            p.backbone_features(&r).unwrap().data,
            p.backbone_features(&record(5, 18)).unwrap().data
        );
    }

    #[test]
    fn backbone_sample_mean_matches_class_mean() {
        let p = provider();
        let class = 7;
        let mu = p.backbone_class_mean(class);
        let mut mean = Mat::zeros(mu.dim());
        for i in 0..100 {
            mean += &p.backbone_features(&record(class, i)).unwrap().data;
        }
        mean /= 100.0;
        // the per-sample offset is shared across positions, so check the
        // entry-wise mean against a 3σ/√100 band on a spread of entries
        let band = 3.0 * p.backbone_std() / 10.0;
        let mut outside = 0;
        for (m, t) in mean.iter().zip(mu.iter()) {
            if (m - t).abs() > band {
                outside += 1;
            }
        }
        // 3σ excursions occur for ~0.27% of entries
        assert!(outside as f64 <= 0.01 * mean.len() as f64, "{outside} of {} outside", mean.len());
    }

    #[test]
    fn semantics_are_unit_and_distinct() {
        let p = provider();
        let classes = caddy_classes();
        let sem: Vec<_> = classes.iter().map(|c| p.class_semantics(c).unwrap().data).collect();
        for (i, a) in sem.iter().enumerate() {
            assert!((a.dot(a) - 1.0).abs() < 1e-12);
            for b in &sem[i + 1..] {
                assert!(a.dot(b) < 0.99);
            }
        }
    }

    #[test]
    fn prompt_is_templated() {
        assert_eq!(prompt_template("boat"), "A photo of a diver gesturing boat");
    }

    #[test]
    fn non_synthetic_reference_is_a_provider_error() {
        let p = provider();
        let r = SampleRecord {
            sample_id: "img1".into(),
            image_ref: "/data/img1.png".into(),
            class_id: 0,
        };
        match p.backbone_features(&r) {
            Err(Error::Provider { sample, .. }) => assert_eq!(sample, "img1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_adapter_is_a_config_error() {
        let cfg = ProviderConfig {
            kind: ProviderKind::PretrainedAdapter { name: "resnet50".into() },
            ..ProviderConfig::default()
        };
        let err = AdapterRegistry::default().build(&cfg, &caddy_classes()).err().unwrap();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn precomputed_provider_reads_exported_tensors() {
        let dims = ProviderDims {
            backbone_channels: 4,
            grid_h: 2,
            grid_w: 2,
            clip_tokens: 5,
            clip_channels: 6,
            semantic_dim: 3,
        };
        let classes = caddy_classes();
        let synth = SyntheticProvider::new(dims, SyntheticParams::default(), 1, &classes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = record(2, 0);
        let mut b = TensorStore::new("ext", vec![4, 2, 2], false);
        b.insert(&r.sample_id, Some(2), synth.backbone_features(&r).unwrap().data).unwrap();
        b.save(&dir.path().join("backbone")).unwrap();
        let mut c = TensorStore::new("ext", vec![5, 6], false);
        c.insert(&r.sample_id, Some(2), synth.clip_image_tokens(&r).unwrap().data).unwrap();
        c.save(&dir.path().join("clip")).unwrap();
        let mut s = TensorStore::new("ext", vec![3], false);
        s.insert("up", Some(2), Mat::from_shape_vec((1, 3), vec![3.0, 0.0, 4.0]).unwrap()).unwrap();
        s.save(&dir.path().join("semantics")).unwrap();

        let p = PrecomputedProvider::open(dir.path(), dims).unwrap();
        assert_eq!(p.backbone_features(&r).unwrap(), synth.backbone_features(&r).unwrap());
        let a = p.class_semantics(&classes[2]).unwrap();
        assert!((a.data[0] - 0.6).abs() < 1e-12 && (a.data[2] - 0.8).abs() < 1e-12);
        assert!(p.backbone_features(&record(2, 1)).is_err());
        assert!(p.class_semantics(&classes[0]).is_err());
    }
}

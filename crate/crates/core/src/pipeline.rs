//! Stage orchestration. Every stage writes into `<outdir>/<split>/<stage>/`
//! together with a `manifest.json` recording the hash of the configuration
//! it ran under, the output hashes of the upstream stages it consumed, and
//! hashes of its own files. A stage whose manifest still matches is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::config::{config_hash, RunConfig};
use crate::dataset::{
    caddy_classes, class_vocabulary, generate_splits, load_manifest, split_seed, synthetic_manifest, validate_split,
    GestureClass, Manifest, SampleRecord, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_splits, audit_predictions, baseline_cosine_predict, evaluate_split, pairs, render_table,
    AggregateReport, ConfusionMatrix, EvalReport,
};
use crate::featgen::{synthesize, train_gan, GanConfig, GanTrainingSet};
use crate::gcat::{attention_maps, extract_features, Gcat, GcatConfig, GestureFeature, SemanticHead, Stage1Config, Variant};
use crate::providers::{AdapterRegistry, Provider};
use crate::tape::Mat;
use crate::tensor_io::{write_atomic, TensorStore};
use crate::zsl::{
    build_training_set, predict, read_predictions, train_classifier, write_predictions, CzslHead, PredictionSet,
    Roster, ZslMode,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Split,
    Gcat,
    Features,
    Gan,
    Synthetic,
    Classifier,
    Eval,
    Visualize,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Gcat => "gcat",
            Stage::Features => "features",
            Stage::Gan => "gan",
            Stage::Synthetic => "synthetic",
            Stage::Classifier => "classifier",
            Stage::Eval => "eval",
            Stage::Visualize => "visualize",
        }
    }

    /// The command that produces this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Split => "split",
            Stage::Gcat => "train-gcat",
            Stage::Features => "extract",
            Stage::Gan => "train-gan",
            Stage::Synthetic => "synthesize",
            Stage::Classifier => "train-classifier",
            Stage::Eval => "eval",
            Stage::Visualize => "visualize",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Split => &[],
            Stage::Gcat => &[Stage::Split],
            Stage::Features => &[Stage::Split, Stage::Gcat],
            Stage::Gan => &[Stage::Features],
            Stage::Synthetic => &[Stage::Split, Stage::Gan],
            Stage::Classifier => &[Stage::Split, Stage::Features, Stage::Synthetic],
            Stage::Eval => &[Stage::Split, Stage::Features, Stage::Classifier],
            Stage::Visualize => &[Stage::Split, Stage::Gcat],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    /// Upstream stage name to the output hash consumed.
    pub inputs: BTreeMap<String, String>,
    /// File name (relative to the stage directory) to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub output_hash: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        let rel = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
        let path = e.path();
        if path.is_dir() {
            files_under(&path, &rel, out)?;
        } else if rel != MANIFEST_FILE {
            out.push(rel);
        }
    }
    Ok(())
}

fn hash_outputs(outputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in outputs {
        h.update(k.as_bytes());
        h.update(b":");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl StageManifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Whether every recorded file is still present and unchanged.
    pub fn verify(&self, dir: &Path) -> bool {
        self.outputs
            .iter()
            .all(|(name, hash)| sha256_file(&dir.join(name)).map(|h| &h == hash).unwrap_or(false))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Derives a stage seed from the split seed.
pub fn stage_seed(split: &SplitSpec, tag: usize, configured: u64) -> u64 {
    split_seed(split.rng_seed ^ configured, tag)
}

const TAG_GCAT_INIT: usize = 11;
const TAG_STAGE1: usize = 12;
const TAG_GAN: usize = 13;
const TAG_SYNTH: usize = 14;

fn features_to_store(features: &[GestureFeature], fingerprint: &str, synthetic: bool) -> Result<TensorStore> {
    let dim = features.first().map(|f| f.data.len()).unwrap_or(0);
    let mut store = TensorStore::new(fingerprint, vec![dim], synthetic);
    for f in features {
        let n = f.data.len();
        store.insert(
            f.sample_id.clone(),
            f.class_id,
            f.data.clone().into_shape_with_order((1, n)).expect("row"),
        )?;
    }
    Ok(store)
}

fn store_to_features(store: &TensorStore) -> Vec<GestureFeature> {
    store
        .iter()
        .map(|(k, c, t)| GestureFeature {
            data: t.row(0).to_owned(),
            sample_id: k.to_string(),
            class_id: c,
        })
        .collect()
}

/// `(H x W)` map to an image, `cell` pixels per grid cell, scaled to its maximum.
pub fn heat_image(map: &Mat, cell: u32) -> RgbImage {
    let (h, w) = map.dim();
    let max = map.iter().cloned().fold(0.0_f64, f64::max);
    let mut img = RgbImage::new(w as u32 * cell, h as u32 * cell);
    for ((i, j), &v) in map.indexed_iter() {
        let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let px = heat(t);
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, px);
            }
        }
    }
    img
}

/// Black, red, yellow, white.
fn heat(t: f64) -> Rgb<u8> {
    let c = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)])
}

/// Loaded configuration plus everything derived from it.
pub struct Pipeline {
    pub config: RunConfig,
    pub classes: Vec<GestureClass>,
    pub manifest: Manifest,
    pub provider: Arc<dyn Provider>,
    pub force: bool,
    manifest_hash: Option<String>,
}

#[derive(Serialize)]
struct SplitKey<'a> {
    dataset: &'a crate::config::DatasetSection,
    manifest_hash: &'a Option<String>,
    classes: Vec<&'a str>,
    split: &'a crate::dataset::SplitParams,
    seed: u64,
}

impl Pipeline {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        Self::with_registry(config, force, &AdapterRegistry::default())
    }

    pub fn with_registry(config: RunConfig, force: bool, registry: &AdapterRegistry) -> Result<Self> {
        config.validate()?;
        let classes = match &config.dataset.classes {
            Some(names) => class_vocabulary(names)?,
            None => caddy_classes(),
        };
        let (manifest, manifest_hash) = match &config.dataset.manifest {
            Some(path) => (load_manifest(path, &classes)?, Some(sha256_file(path)?)),
            None => {
                let counts = match &config.dataset.counts {
                    Some(c) if c.len() != classes.len() => {
                        return Err(Error::config(
                            "dataset.counts",
                            format!("{} counts for {} classes", c.len(), classes.len()),
                        ))
                    }
                    Some(c) => c.clone(),
                    None => vec![config.dataset.samples_per_class; classes.len()],
                };
                (synthetic_manifest(&classes, &counts), None)
            }
        };
        let provider = registry.build(&config.provider, &classes)?;
        Ok(Self {
            config,
            classes,
            manifest,
            provider,
            force,
            manifest_hash,
        })
    }

    pub fn outdir(&self) -> &Path {
        &self.config.run.outdir
    }

    pub fn stage_dir(&self, split: usize, stage: Stage) -> PathBuf {
        self.outdir().join(split.to_string()).join(stage.dir_name())
    }

    pub fn split_indices(&self) -> Vec<usize> {
        (0..self.config.split.n_splits).collect()
    }

    fn expected_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        match stage {
            Stage::Split => config_hash(&SplitKey {
                dataset: &c.dataset,
                manifest_hash: &self.manifest_hash,
                classes: self.classes.iter().map(|k| k.name.as_str()).collect(),
                split: &c.split,
                seed: c.run.seed,
            }),
            Stage::Gcat => config_hash(&(&c.provider, &c.gcat, &c.stage1)),
            Stage::Features => config_hash(&(&c.provider, "features")),
            Stage::Gan => config_hash(&(&c.provider, &c.gan, "gan")),
            Stage::Synthetic => config_hash(&(c.gan.n_syn_per_class, c.gan.seed, "synthetic")),
            Stage::Classifier => config_hash(&(&c.classifier, "classifier")),
            Stage::Eval => config_hash(&(&c.classifier.czsl_head, "eval")),
            Stage::Visualize => config_hash(&(&c.provider, "visualize")),
        }
    }

    fn manifest_of(&self, split: usize, stage: Stage) -> Result<StageManifest> {
        let dir = self.stage_dir(split, stage);
        StageManifest::read(&dir)?.ok_or_else(|| Error::MissingArtifact {
            path: dir.clone(),
            command: stage.command().into(),
        })
    }

    /// Current output hashes of the upstream stages, refusing stale ones.
    fn gather_inputs(&self, split: usize, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut inputs = BTreeMap::new();
        for &up in stage.upstream() {
            let m = self.manifest_of(split, up)?;
            let want = self.expected_hash(up)?;
            if m.config_hash != want {
                let msg = format!(
                    "split {split}: {} artifacts were produced under a different configuration; rerun `{}`",
                    up.dir_name(),
                    up.command()
                );
                if self.force {
                    log::warn!("{msg}");
                } else {
                    return Err(Error::MixedInputs(msg));
                }
            }
            inputs.insert(up.dir_name().to_string(), m.output_hash);
        }
        Ok(inputs)
    }

    fn up_to_date(&self, split: usize, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<bool> {
        if self.force {
            return Ok(false);
        }
        let dir = self.stage_dir(split, stage);
        Ok(match StageManifest::read(&dir)? {
            Some(m) => m.config_hash == self.expected_hash(stage)? && &m.inputs == inputs && m.verify(&dir),
            None => false,
        })
    }

    fn fresh_dir(&self, split: usize, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(split, stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn seal(&self, split: usize, stage: Stage, inputs: BTreeMap<String, String>) -> Result<StageManifest> {
        let dir = self.stage_dir(split, stage);
        let mut names = Vec::new();
        files_under(&dir, "", &mut names)?;
        let mut outputs = BTreeMap::new();
        for n in names {
            outputs.insert(n.clone(), sha256_file(&dir.join(&n))?);
        }
        let m = StageManifest {
            stage: stage.dir_name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.expected_hash(stage)?,
            output_hash: hash_outputs(&outputs),
            inputs,
            outputs,
        };
        write_json(&dir.join(MANIFEST_FILE), &m)?;
        Ok(m)
    }

    fn record_index(&self) -> BTreeMap<&str, &SampleRecord> {
        self.manifest.records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
    }

    fn records(&self, ids: &[String]) -> Result<Vec<SampleRecord>> {
        let index = self.record_index();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|r| (*r).clone())
                    .ok_or_else(|| Error::Invalid(format!("split names unknown sample {id}")))
            })
            .collect()
    }

    /// One row per class id.
    pub fn semantic_matrix(&self) -> Result<Mat> {
        let d = self.provider.semantic_dim();
        let mut m = Mat::zeros((self.classes.len(), d));
        for c in &self.classes {
            let s = self.provider.class_semantics(c)?;
            if s.data.len() != d {
                return Err(Error::Shape {
                    context: format!("semantics of {}", c.name),
                    expected: vec![d],
                    got: vec![s.data.len()],
                });
            }
            m.row_mut(c.id).assign(&s.data);
        }
        Ok(m)
    }

    // ---- commands ----

    /// Generates every split and writes `<outdir>/<i>/split/split.json`.
    pub fn split(&self) -> Result<Vec<SplitSpec>> {
        let inputs = BTreeMap::new();
        if self.split_indices().iter().all(|&i| self.up_to_date(i, Stage::Split, &inputs).unwrap_or(false)) {
            log::info!("splits are up to date");
            return self.split_indices().iter().map(|&i| self.load_split(i)).collect();
        }
        let (splits, warnings) = generate_splits(&self.manifest, &self.config.split, self.config.run.seed)?;
        for w in warnings {
            log::warn!("{w}");
        }
        for s in &splits {
            let problems = validate_split(s, &self.manifest);
            if !problems.is_empty() {
                return Err(Error::Invalid(format!("split {} is inconsistent: {}", s.split_index, problems.join("; "))));
            }
            let dir = self.fresh_dir(s.split_index, Stage::Split)?;
            let mut text = s.to_json()?;
            text.push('\n');
            write_atomic(&dir.join("split.json"), text.as_bytes())?;
            self.seal(s.split_index, Stage::Split, BTreeMap::new())?;
            log::info!(
                "split {}: {} seen / {} unseen classes, {} train, {} seen test, {} unseen test",
                s.split_index,
                s.seen_classes.len(),
                s.unseen_classes.len(),
                s.seen_train_ids.len(),
                s.seen_test_ids.len(),
                s.unseen_test_ids.len()
            );
        }
        Ok(splits)
    }

    pub fn load_split(&self, split: usize) -> Result<SplitSpec> {
        self.manifest_of(split, Stage::Split)?;
        let path = self.stage_dir(split, Stage::Split).join("split.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        SplitSpec::from_json(&text)
    }

    fn gcat_config(&self, spec: &SplitSpec) -> GcatConfig {
        GcatConfig {
            init_seed: stage_seed(spec, TAG_GCAT_INIT, self.config.gcat.init_seed),
            ..self.config.gcat.clone()
        }
    }

    pub fn train_gcat(&self, split: usize) -> Result<()> {
        let inputs = self.gather_inputs(split, Stage::Gcat)?;
        if self.up_to_date(split, Stage::Gcat, &inputs)? {
            log::info!("split {split}: gcat is up to date");
            return Ok(());
        }
        let spec = self.load_split(split)?;
        let sem = self.semantic_matrix()?;
        let seen_sem = sem.select(ndarray::Axis(0), &spec.seen_classes);
        let mut model = Gcat::new(self.gcat_config(&spec), self.provider.dims())?;
        let mut head = SemanticHead::from_semantics(&seen_sem);
        let dir = self.fresh_dir(split, Stage::Gcat)?;
        if model.trainable() {
            let records = self.records(&spec.seen_train_ids)?;
            let label_of: BTreeMap<usize, usize> = spec.seen_classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            let labels: Vec<usize> = records.iter().map(|r| label_of[&r.class_id]).collect();
            let cfg = Stage1Config {
                seed: stage_seed(&spec, TAG_STAGE1, self.config.stage1.seed),
                ..self.config.stage1.clone()
            };
            let report = crate::gcat::stage1_train(&mut model, &mut head, self.provider.as_ref(), &records, &labels, &cfg)?;
            write_json(&dir.join("stage1_report.json"), &report)?;
        }
        archive::save_gcat(&dir.join("gcat.json"), &model, &head)?;
        self.seal(split, Stage::Gcat, inputs)?;
        Ok(())
    }

    pub fn extract(&self, split: usize) -> Result<()> {
        let inputs = self.gather_inputs(split, Stage::Features)?;
        if self.up_to_date(split, Stage::Features, &inputs)? {
            log::info!("split {split}: features are up to date");
            return Ok(());
        }
        let spec = self.load_split(split)?;
        let (model, _) = archive::load_gcat(&self.stage_dir(split, Stage::Gcat).join("gcat.json"))?;
        let fingerprint = format!("{}|gcat={}", self.provider.fingerprint(), inputs["gcat"]);
        let dir = self.fresh_dir(split, Stage::Features)?;
        for (name, ids) in [
            ("seen_train", &spec.seen_train_ids),
            ("seen_test", &spec.seen_test_ids),
            ("unseen_test", &spec.unseen_test_ids),
        ] {
            let records = self.records(ids)?;
            let feats = extract_features(&model, self.provider.as_ref(), &records, self.config.run.workers)?;
            features_to_store(&feats, &fingerprint, false)?.save(&dir.join(name))?;
        }
        self.seal(split, Stage::Features, inputs)?;
        Ok(())
    }

    fn load_features(&self, split: usize, stage: Stage, name: &str) -> Result<Vec<GestureFeature>> {
        let dir = self.stage_dir(split, stage).join(name);
        if !TensorStore::exists(&dir) {
            return Err(Error::MissingArtifact {
                path: dir,
                command: stage.command().into(),
            });
        }
        Ok(store_to_features(&TensorStore::load(&dir)?))
    }

    pub fn train_gan(&self, split: usize) -> Result<()> {
        let inputs = self.gather_inputs(split, Stage::Gan)?;
        if self.up_to_date(split, Stage::Gan, &inputs)? {
            log::info!("split {split}: generator is up to date");
            return Ok(());
        }
        let spec = self.load_split(split)?;
        let real = self.load_features(split, Stage::Features, "seen_train")?;
        let refs: Vec<&GestureFeature> = real.iter().collect();
        let features = crate::zsl::stack_features(&refs)?;
        let class_ids: Vec<usize> = real.iter().map(|f| f.class_id.unwrap_or(usize::MAX)).collect();
        if class_ids.iter().any(|c| !spec.seen_classes.contains(c)) {
            return Err(Error::Invalid("generator training features include a non-seen class".into()));
        }
        let semantics = self.semantic_matrix()?;
        let cfg = GanConfig {
            seed: stage_seed(&spec, TAG_GAN, self.config.gan.seed),
            ..self.config.gan.clone()
        };
        let (bundle, report) = train_gan(
            &GanTrainingSet {
                features: &features,
                class_ids: &class_ids,
                semantics: &semantics,
            },
            &cfg,
        )?;
        let dir = self.fresh_dir(split, Stage::Gan)?;
        archive::save_gan(&dir.join("gan.json"), &bundle)?;
        write_json(&dir.join("gan_report.json"), &report)?;
        self.seal(split, Stage::Gan, inputs)?;
        Ok(())
    }

    pub fn synthesize(&self, split: usize) -> Result<()> {
        let inputs = self.gather_inputs(split, Stage::Synthetic)?;
        if self.up_to_date(split, Stage::Synthetic, &inputs)? {
            log::info!("split {split}: synthetic features are up to date");
            return Ok(());
        }
        let spec = self.load_split(split)?;
        let bundle = archive::load_gan(&self.stage_dir(split, Stage::Gan).join("gan.json"))?;
        let sem = self.semantic_matrix()?;
        let classes: Vec<(usize, Array1<f64>)> = spec.unseen_classes.iter().map(|&c| (c, sem.row(c).to_owned())).collect();
        let seed = stage_seed(&spec, TAG_SYNTH, self.config.gan.seed);
        let feats = synthesize(&bundle, &classes, self.config.gan.n_syn_per_class, seed)?;
        let dir = self.fresh_dir(split, Stage::Synthetic)?;
        features_to_store(&feats, &format!("gan={}", inputs["gan"]), true)?.save(&dir.join("unseen"))?;
        self.seal(split, Stage::Synthetic, inputs)?;
        Ok(())
    }

    pub fn train_classifier(&self, split: usize) -> Result<()> {
        let inputs = self.gather_inputs(split, Stage::Classifier)?;
        if self.up_to_date(split, Stage::Classifier, &inputs)? {
            log::info!("split {split}: classifier is up to date");
            return Ok(());
        }
        let spec = self.load_split(split)?;
        let real = self.load_features(split, Stage::Features, "seen_train")?;
        let syn = self.load_features(split, Stage::Synthetic, "unseen")?;
        let dir = self.fresh_dir(split, Stage::Classifier)?;
        let gzsl = build_training_set(&real, &syn, &spec.seen_classes, &spec.unseen_classes, ZslMode::Gzsl, &self.classes)?;
        archive::save_classifier(&dir.join("gzsl.json"), &train_classifier(&gzsl, &self.config.classifier)?)?;
        if self.config.classifier.czsl_head == CzslHead::Dedicated {
            let czsl = build_training_set(&[], &syn, &spec.seen_classes, &spec.unseen_classes, ZslMode::Czsl, &self.classes)?;
            archive::save_classifier(&dir.join("czsl.json"), &train_classifier(&czsl, &self.config.classifier)?)?;
        }
        self.seal(split, Stage::Classifier, inputs)?;
        Ok(())
    }

    /// Checks that every stage feeding the classifier matches the current
    /// configuration and saw the artifacts that exist now.
    pub fn check_lineage(&self, split: usize) -> Result<()> {
        let mut problems = Vec::new();
        for stage in [Stage::Gcat, Stage::Features, Stage::Gan, Stage::Synthetic, Stage::Classifier] {
            let m = self.manifest_of(split, stage)?;
            if m.config_hash != self.expected_hash(stage)? {
                problems.push(format!("{} was built under a different configuration", stage.dir_name()));
            }
            for (up, hash) in &m.inputs {
                let current = StageManifest::read(&self.outdir().join(split.to_string()).join(up))?;
                match current {
                    Some(c) if &c.output_hash == hash => {}
                    _ => problems.push(format!("{} was built from a different {up}", stage.dir_name())),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::MixedInputs(format!("split {split}: {}", problems.join("; "))))
        }
    }

    pub fn eval_split(&self, split: usize) -> Result<EvalReport> {
        let inputs = self.gather_inputs(split, Stage::Eval)?;
        if let Err(e) = self.check_lineage(split) {
            if self.force {
                log::warn!("{e}");
            } else {
                return Err(e);
            }
        }
        let dir = self.stage_dir(split, Stage::Eval);
        if self.up_to_date(split, Stage::Eval, &inputs)? {
            log::info!("split {split}: evaluation is up to date");
            return read_json(&dir.join("report.json"));
        }
        let spec = self.load_split(split)?;
        let cdir = self.stage_dir(split, Stage::Classifier);
        let gzsl_w = archive::load_classifier(&cdir.join("gzsl.json"))?;
        let czsl_w = match self.config.classifier.czsl_head {
            CzslHead::Dedicated => archive::load_classifier(&cdir.join("czsl.json"))?,
            CzslHead::Combined => gzsl_w.clone(),
        };
        let seen_test = self.load_features(split, Stage::Features, "seen_test")?;
        let unseen_test = self.load_features(split, Stage::Features, "unseen_test")?;
        let all = spec.all_classes();
        let sets = vec![
            PredictionSet {
                mode: ZslMode::Czsl,
                roster: Roster::UnseenTest,
                label_space: spec.unseen_classes.clone(),
                results: predict(&czsl_w, &unseen_test, &spec.unseen_classes)?,
            },
            PredictionSet {
                mode: ZslMode::Gzsl,
                roster: Roster::SeenTest,
                label_space: all.clone(),
                results: predict(&gzsl_w, &seen_test, &all)?,
            },
            PredictionSet {
                mode: ZslMode::Gzsl,
                roster: Roster::UnseenTest,
                label_space: all.clone(),
                results: predict(&gzsl_w, &unseen_test, &all)?,
            },
        ];
        let dir = self.fresh_dir(split, Stage::Eval)?;
        let pred_path = dir.join("predictions.csv");
        let mut buf = Vec::new();
        write_predictions(&mut buf, &sets, &self.classes)?;
        write_atomic(&pred_path, &buf)?;
        let problems = audit_predictions(&read_predictions(&buf[..])?, &spec, &self.classes);
        if !problems.is_empty() {
            return Err(Error::Invalid(format!("prediction audit failed: {}", problems.join("; "))));
        }

        let czsl = pairs(&sets[0].results)?;
        let gs = pairs(&sets[1].results)?;
        let gu = pairs(&sets[2].results)?;
        let report = evaluate_split(split, &spec.seen_classes, &spec.unseen_classes, &czsl, &gs, &gu, &self.classes)?;
        write_json(&dir.join("report.json"), &report)?;
        let agg = aggregate_splits(std::slice::from_ref(&report))?;
        write_atomic(&dir.join("table.txt"), render_table(std::slice::from_ref(&report), &agg).as_bytes())?;

        let gzsl_pairs: Vec<(usize, usize)> = gs.iter().chain(&gu).copied().collect();
        let cm = ConfusionMatrix::new(&gzsl_pairs, &all)?;
        write_atomic(&dir.join("confusion_gzsl.csv"), cm.to_csv(&self.classes).as_bytes())?;
        cm.save_heatmap(&dir.join("confusion_gzsl.png"))?;
        let cm = ConfusionMatrix::new(&czsl, &spec.unseen_classes)?;
        write_atomic(&dir.join("confusion_czsl.csv"), cm.to_csv(&self.classes).as_bytes())?;
        cm.save_heatmap(&dir.join("confusion_czsl.png"))?;

        let sem = self.semantic_matrix()?;
        if unseen_test.first().map(|f| f.data.len()) == Some(sem.ncols()) {
            let probe = baseline_cosine_predict(&unseen_test, &sem, &spec.unseen_classes)?;
            let pairs: Vec<(usize, usize)> = probe.iter().filter_map(|p| p.true_class.map(|t| (t, p.predicted))).collect();
            let top = crate::eval::per_class_top1(&pairs, &spec.unseen_classes)?;
            write_json(&dir.join("baseline_cosine.json"), &top)?;
        }
        self.seal(split, Stage::Eval, inputs)?;
        log::info!(
            "split {split}: U_czsl {:.2}  S {:.2}  U {:.2}  H {:.2}",
            report.u_czsl,
            report.s_gzsl,
            report.u_gzsl,
            report.h
        );
        Ok(report)
    }

    /// Evaluates the given splits and writes `<outdir>/aggregate/`.
    pub fn eval(&self, splits: &[usize]) -> Result<AggregateReport> {
        let reports: Vec<EvalReport> = splits.iter().map(|&i| self.eval_split(i)).collect::<Result<_>>()?;
        let agg = aggregate_splits(&reports)?;
        let dir = self.outdir().join("aggregate");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("aggregate.json"), &agg)?;
        write_atomic(&dir.join("table.txt"), render_table(&reports, &agg).as_bytes())?;
        let mut inputs = BTreeMap::new();
        for &i in splits {
            inputs.insert(format!("{i}/eval"), self.manifest_of(i, Stage::Eval)?.output_hash);
        }
        let mut outputs = BTreeMap::new();
        for name in ["aggregate.json", "table.txt"] {
            outputs.insert(name.to_string(), sha256_file(&dir.join(name))?);
        }
        write_json(
            &dir.join(MANIFEST_FILE),
            &StageManifest {
                stage: "aggregate".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_hash: config_hash(&splits)?,
                output_hash: hash_outputs(&outputs),
                inputs,
                outputs,
            },
        )?;
        Ok(agg)
    }

    /// Attention heat maps for `samples`, or for the first unseen-test sample
    /// of each unseen class when none are given.
    pub fn visualize(&self, split: usize, samples: &[String]) -> Result<Vec<PathBuf>> {
        let inputs = self.gather_inputs(split, Stage::Visualize)?;
        let spec = self.load_split(split)?;
        let (model, _) = archive::load_gcat(&self.stage_dir(split, Stage::Gcat).join("gcat.json"))?;
        if model.config.variant != Variant::Full {
            return Err(Error::Invalid(format!(
                "split {split}: the {:?} variant has no decoder attention to show",
                model.config.variant
            )));
        }
        let ids: Vec<String> = if samples.is_empty() {
            let index = self.record_index();
            let mut done = BTreeSet::new();
            spec.unseen_test_ids
                .iter()
                .filter(|id| done.insert(index[id.as_str()].class_id))
                .cloned()
                .collect()
        } else {
            samples.to_vec()
        };
        let records = self.records(&ids)?;
        let dir = self.fresh_dir(split, Stage::Visualize)?;
        let mut raw = TensorStore::new(format!("gcat={}", inputs["gcat"]), vec![model.dims.grid_h, model.dims.grid_w], false);
        let mut written = Vec::new();
        for r in &records {
            let maps = attention_maps(&model, self.provider.as_ref(), r)?;
            for (b, (map, full)) in maps.maps.iter().zip(&maps.raw).enumerate() {
                let path = dir.join(format!("{}_block{b}.png", r.sample_id));
                heat_image(map, 32).save(&path)?;
                written.push(path);
                raw.insert(format!("{}/block{b}/map", r.sample_id), Some(r.class_id), map.clone())?;
                raw.insert(format!("{}/block{b}/attention", r.sample_id), Some(r.class_id), full.clone())?;
            }
        }
        raw.save(&dir.join("raw"))?;
        self.seal(split, Stage::Visualize, inputs)?;
        Ok(written)
    }

    /// Every stage for every split, then the aggregate.
    pub fn run_all(&self) -> Result<AggregateReport> {
        self.split()?;
        let splits = self.split_indices();
        for &i in &splits {
            self.train_gcat(i)?;
            self.extract(i)?;
            self.train_gan(i)?;
            self.synthesize(i)?;
            self.train_classifier(i)?;
            self.eval_split(i)?;
        }
        self.eval(&splits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    pub(crate) fn tiny_config(outdir: &Path) -> RunConfig {
        let mut c = Preset::Desk.config();
        c.run.outdir = outdir.to_path_buf();
        c.dataset.samples_per_class = 12;
        c.split.n_splits = 1;
        c.provider.dims = crate::providers::ProviderDims {
            backbone_channels: 8,
            grid_h: 2,
            grid_w: 2,
            clip_tokens: 5,
            clip_channels: 8,
            semantic_dim: 8,
        };
        c.gcat.heads = 2;
        c.gcat.encoder_blocks = 1;
        c.gcat.decoder_blocks = 1;
        c.stage1.epochs = 1;
        c.gan.iterations = 5;
        c.gan.hidden_dim = 8;
        c.gan.noise_dim = 4;
        c.gan.n_syn_per_class = 10;
        c.classifier.epochs = 5;
        c
    }

    #[test]
    fn stages_require_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(dir.path()), false).unwrap();
        match p.train_gcat(0) {
            Err(Error::MissingArtifact { command, .. }) => assert_eq!(command, "split"),
            other => panic!("{other:?}"),
        }
        p.split().unwrap();
        match p.train_gan(0) {
            Err(Error::MissingArtifact { command, .. }) => assert_eq!(command, "extract"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_all_then_rerun_is_cached_and_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(dir.path()), false).unwrap();
        let a = p.run_all().unwrap();
        let before = StageManifest::read(&p.stage_dir(0, Stage::Eval)).unwrap().unwrap();
        let b = p.run_all().unwrap();
        assert_eq!(a, b);
        assert_eq!(StageManifest::read(&p.stage_dir(0, Stage::Eval)).unwrap().unwrap(), before);
        assert!(p.stage_dir(0, Stage::Eval).join("confusion_gzsl.png").is_file());
        let shots = p.visualize(0, &[]).unwrap();
        assert_eq!(shots.len(), p.config.split.n_unseen * p.config.gcat.decoder_blocks);
    }

    #[test]
    fn eval_refuses_mixed_lineage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(dir.path()), false).unwrap();
        p.run_all().unwrap();
        // regenerate the features under a different gcat without rerunning downstream stages
        let mut cfg = tiny_config(dir.path());
        cfg.stage1.lr *= 2.0;
        let q = Pipeline::new(cfg.clone(), false).unwrap();
        q.train_gcat(0).unwrap();
        q.extract(0).unwrap();
        let p = Pipeline::new(cfg.clone(), false).unwrap();
        let err = p.eval_split(0).unwrap_err();
        assert!(matches!(err, Error::MixedInputs(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
        let forced = Pipeline::new(cfg, true).unwrap();
        forced.eval_split(0).unwrap();
    }

    #[test]
    fn stale_upstream_config_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(dir.path()), false).unwrap();
        p.split().unwrap();
        p.train_gcat(0).unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.gcat.gate_activation = crate::gcat::GateActivation::Relu;
        let q = Pipeline::new(cfg, false).unwrap();
        assert!(matches!(q.extract(0), Err(Error::MixedInputs(_))));
    }
}

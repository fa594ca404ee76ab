//! Run configuration: a TOML document layered over a preset, then
//! `ZSUGR_<SECTION>_<KEY>` environment variables, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SplitParams;
use crate::error::{Error, Result};
use crate::featgen::GanConfig;
use crate::gcat::{Fusion, GateActivation, GcatConfig, Stage1Config, Variant};
use crate::providers::{ProviderConfig, ProviderDims, ProviderKind};
use crate::zsl::ClassifierConfig;

pub const ENV_PREFIX: &str = "ZSUGR_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub outdir: PathBuf,
    /// Threads for feature extraction; output order never depends on it.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            outdir: PathBuf::from("runs"),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// CSV manifest (`sample_id,image_ref,class`). Without one, a synthetic
    /// manifest is generated for the synthetic provider.
    pub manifest: Option<PathBuf>,
    /// Class vocabulary; defaults to the 16 CADDY gestures.
    pub classes: Option<Vec<String>>,
    pub samples_per_class: usize,
    /// Per-class counts of the synthetic manifest, overriding `samples_per_class`.
    pub counts: Option<Vec<usize>>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: None,
            classes: None,
            samples_per_class: 200,
            counts: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub provider: ProviderConfig,
    pub split: SplitParams,
    pub gcat: GcatConfig,
    pub stage1: Stage1Config,
    pub gan: GanConfig,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::Full.config()
    }
}

/// Starting points for a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size dimensions and schedules.
    Full,
    /// Narrow widths and short schedules that finish on a laptop CPU.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::config("preset", format!("expected full or desk, got {s:?}"))),
        }
    }
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let full = RunConfig {
            run: RunSection::default(),
            dataset: DatasetSection::default(),
            provider: ProviderConfig::default(),
            split: SplitParams::default(),
            gcat: GcatConfig::default(),
            stage1: Stage1Config::default(),
            gan: GanConfig::default(),
            classifier: ClassifierConfig::default(),
        };
        match self {
            Preset::Full => full,
            Preset::Desk => RunConfig {
                provider: ProviderConfig {
                    dims: ProviderDims {
                        backbone_channels: 32,
                        grid_h: 7,
                        grid_w: 7,
                        clip_tokens: 50,
                        clip_channels: 32,
                        semantic_dim: 32,
                    },
                    ..full.provider
                },
                gcat: GcatConfig {
                    encoder_blocks: 2,
                    decoder_blocks: 2,
                    heads: 4,
                    encoder_ffn_mult: 2,
                    ..full.gcat
                },
                stage1: Stage1Config {
                    epochs: 3,
                    batch_size: 32,
                    lr: 1e-3,
                    ..full.stage1
                },
                gan: GanConfig {
                    noise_dim: 32,
                    hidden_dim: 64,
                    iterations: 600,
                    lr: 1e-3,
                    ..full.gan
                },
                ..full
            },
        }
    }
}

fn table_error(e: impl std::fmt::Display) -> Error {
    Error::config("config", e.to_string())
}

fn to_table(config: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(config).map_err(table_error)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Resolves `parts` (lower-case, underscore-split) against the table tree,
/// preferring the longest key at each level that exists.
fn resolve_path(table: &toml::Table, parts: &[&str]) -> Option<Vec<String>> {
    for take in (1..=parts.len()).rev() {
        let key = parts[..take].join("_");
        match table.get(&key) {
            Some(toml::Value::Table(sub)) if take < parts.len() => {
                if let Some(mut rest) = resolve_path(sub, &parts[take..]) {
                    rest.insert(0, key);
                    return Some(rest);
                }
            }
            Some(_) if take == parts.len() => return Some(vec![key]),
            _ => {}
        }
    }
    None
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) {
    if path.len() == 1 {
        table.insert(path[0].clone(), value);
    } else if let Some(toml::Value::Table(sub)) = table.get_mut(&path[0]) {
        set_path(sub, &path[1..], value);
    }
}

/// Applies `ZSUGR_<SECTION>_<KEY>=value` pairs. Unknown keys are config errors.
pub fn apply_env<I: IntoIterator<Item = (String, String)>>(table: &mut toml::Table, vars: I) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "ZSUGR_LOG")
        .collect();
    vars.sort();
    for (k, v) in vars {
        let lower = k[ENV_PREFIX.len()..].to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('_').collect();
        let path = resolve_path(table, &parts).ok_or_else(|| Error::config(k.clone(), "no such configuration key"))?;
        let value = match (parse_value(&v), lookup(table, &path)) {
            // keep strings as strings even when they look like numbers
            (parsed, Some(toml::Value::String(_))) if !parsed.is_str() => toml::Value::String(v.clone()),
            (parsed, _) => parsed,
        };
        set_path(table, &path, value);
    }
    Ok(())
}

fn lookup<'a>(table: &'a toml::Table, path: &[String]) -> Option<&'a toml::Value> {
    let v = table.get(&path[0])?;
    if path.len() == 1 {
        Some(v)
    } else {
        v.as_table().and_then(|t| lookup(t, &path[1..]))
    }
}

/// Flag-level overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub outdir: Option<PathBuf>,
    pub n_seen: Option<usize>,
    pub n_unseen: Option<usize>,
    pub gate_activation: Option<String>,
    pub ablate: Vec<String>,
    pub workers: Option<usize>,
}

/// Applies one `component=on|off` ablation switch.
pub fn apply_ablation(gcat: &mut GcatConfig, spec: &str) -> Result<()> {
    let (what, state) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("ablate", format!("expected component=on|off, got {spec:?}")))?;
    let on = match state {
        "on" => true,
        "off" => false,
        _ => return Err(Error::config("ablate", format!("expected on or off, got {state:?}"))),
    };
    match (what, on) {
        ("decoder", false) => gcat.variant = Variant::EncoderOnly,
        ("gcat", false) => gcat.variant = Variant::BackboneOnly,
        ("decoder" | "gcat", true) => gcat.variant = Variant::Full,
        ("gate", false) => gcat.fusion = Fusion::UngatedSum,
        ("gate", true) => gcat.fusion = Fusion::Gated,
        _ => {
            return Err(Error::config(
                "ablate",
                format!("unknown component {what:?}; expected decoder, gcat or gate"),
            ))
        }
    }
    Ok(())
}

impl RunConfig {
    /// Preset, then the optional file, then the environment.
    pub fn load<I>(preset: Preset, file: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = to_table(&preset.config())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: toml::Table = text.parse().map_err(table_error)?;
            merge(&mut table, over);
        }
        apply_env(&mut table, env)?;
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(table_error)?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.run.seed = s;
        }
        if let Some(d) = &o.outdir {
            self.run.outdir = d.clone();
        }
        if let Some(n) = o.n_seen {
            self.split.n_seen = n;
        }
        if let Some(n) = o.n_unseen {
            self.split.n_unseen = n;
        }
        if let Some(g) = &o.gate_activation {
            self.gcat.gate_activation = g.parse::<GateActivation>()?;
        }
        for a in &o.ablate {
            apply_ablation(&mut self.gcat, a)?;
        }
        if let Some(w) = o.workers {
            self.run.workers = w;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.provider.dims.validate()?;
        if let Some(m) = &self.dataset.manifest {
            if !m.is_file() {
                return Err(Error::config("dataset.manifest", format!("{} does not exist", m.display())));
            }
        }
        if let ProviderKind::Precomputed { path } = &self.provider.kind {
            if !path.is_dir() {
                return Err(Error::config("provider.path", format!("{} is not a directory", path.display())));
            }
        }
        if self.dataset.manifest.is_none() && self.dataset.counts.is_none() && self.dataset.samples_per_class == 0 {
            return Err(Error::config("dataset.samples_per_class", "must be positive"));
        }
        if self.run.workers == 0 {
            return Err(Error::config("run.workers", "must be at least 1"));
        }
        if self.stage1.batch_size == 0 {
            return Err(Error::config("stage1.batch_size", "must be positive"));
        }
        if self.gan.n_syn_per_class == 0 {
            return Err(Error::config("gan.n_syn_per_class", "must be positive"));
        }
        if !(self.classifier.lr > 0.0) {
            return Err(Error::config("classifier.lr", "must be positive"));
        }
        self.gan.validate()?;
        crate::gcat::Gcat::new(self.gcat.clone(), self.provider.dims)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(table_error)
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(canonical_json(&v).as_bytes())))
}

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(m) => {
            let sorted: BTreeMap<&String, String> = m.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let parts: Vec<String> = sorted
                .iter()
                .map(|(k, v)| format!("{}:{v}", serde_json::Value::String((*k).clone())))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

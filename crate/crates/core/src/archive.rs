//! Single-file JSON checkpoints: a config echo plus named tensors stored as
//! base64 little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array1;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featgen::{GanBundle, GanConfig};
use crate::gcat::{Gcat, GcatConfig, SemanticHead};
use crate::nn::ParamStore;
use crate::providers::ProviderDims;
use crate::tape::Mat;
use crate::tensor_io::write_atomic;
use crate::zsl::ClassifierWeights;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: (usize, usize),
    pub data: String,
}

impl TensorBlob {
    pub fn encode(m: &Mat) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: m.dim(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> std::result::Result<Mat, String> {
        let bytes = STANDARD.decode(&self.data).map_err(|e| e.to_string())?;
        if bytes.len() != self.shape.0 * self.shape.1 * 8 {
            return Err(format!("{} bytes for shape {:?}", bytes.len(), self.shape));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Mat::from_shape_vec(self.shape, data).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorBlob>,
}

impl Archive {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            version: ARCHIVE_VERSION,
            kind: kind.into(),
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, m: &Mat) {
        self.tensors.insert(name.into(), TensorBlob::encode(m));
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.put(format!("{prefix}{name}"), m);
        }
    }

    pub fn get(&self, name: &str, path: &Path) -> Result<Mat> {
        let blob = self.tensors.get(name).ok_or_else(|| Error::Archive {
            path: path.into(),
            msg: format!("missing tensor {name}"),
        })?;
        blob.decode().map_err(|msg| Error::Archive {
            path: path.into(),
            msg: format!("tensor {name}: {msg}"),
        })
    }

    /// Fills every parameter of `store` from `{prefix}{name}`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore, path: &Path) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let m = self.get(&format!("{prefix}{name}"), path)?;
            store.set(&name, m).map_err(|msg| Error::Archive { path: path.into(), msg })?;
        }
        Ok(())
    }

    pub fn config_as<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Archive {
            path: path.into(),
            msg: format!("config: {e}"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: Archive = serde_json::from_str(&text).map_err(|e| Error::Archive {
            path: path.into(),
            msg: e.to_string(),
        })?;
        if a.version != ARCHIVE_VERSION {
            return Err(Error::Archive {
                path: path.into(),
                msg: format!("unsupported archive version {}", a.version),
            });
        }
        if a.kind != kind {
            return Err(Error::Archive {
                path: path.into(),
                msg: format!("expected a {kind} archive, found {}", a.kind),
            });
        }
        Ok(a)
    }
}

#[derive(Serialize, Deserialize)]
struct GcatEcho {
    gcat: GcatConfig,
    dims: ProviderDims,
    head_classes: usize,
}

pub fn save_gcat(path: &Path, model: &Gcat, head: &SemanticHead) -> Result<()> {
    let echo = GcatEcho {
        gcat: model.config.clone(),
        dims: model.dims.clone(),
        head_classes: head.linear.fan_out,
    };
    let mut a = Archive::new("gcat", serde_json::to_value(echo)?);
    a.put_store("model.", &model.params);
    a.put_store("head.", &head.params);
    a.save(path)
}

pub fn load_gcat(path: &Path) -> Result<(Gcat, SemanticHead)> {
    let a = Archive::load(path, "gcat")?;
    let echo: GcatEcho = a.config_as(path)?;
    let mut model = Gcat::new(echo.gcat, echo.dims.clone())?;
    a.load_store("model.", &mut model.params, path)?;
    let mut head = SemanticHead::from_semantics(&Mat::zeros((echo.head_classes, echo.dims.semantic_dim)));
    a.load_store("head.", &mut head.params, path)?;
    Ok((model, head))
}

#[derive(Serialize, Deserialize)]
struct GanEcho {
    gan: GanConfig,
    feature_dim: usize,
    semantic_dim: usize,
}

pub fn save_gan(path: &Path, bundle: &GanBundle) -> Result<()> {
    let echo = GanEcho {
        gan: bundle.config.clone(),
        feature_dim: bundle.feature_dim,
        semantic_dim: bundle.semantic_dim,
    };
    let mut a = Archive::new("gan", serde_json::to_value(echo)?);
    a.put_store("generator.", &bundle.generator.params);
    a.put_store("critic.", &bundle.critic.params);
    a.save(path)
}

pub fn load_gan(path: &Path) -> Result<GanBundle> {
    let a = Archive::load(path, "gan")?;
    let echo: GanEcho = a.config_as(path)?;
    let mut bundle = GanBundle::new(echo.feature_dim, echo.semantic_dim, &echo.gan)?;
    a.load_store("generator.", &mut bundle.generator.params, path)?;
    a.load_store("critic.", &mut bundle.critic.params, path)?;
    Ok(bundle)
}

#[derive(Serialize, Deserialize)]
struct ClassifierEcho {
    classes: Vec<usize>,
}

pub fn save_classifier(path: &Path, w: &ClassifierWeights) -> Result<()> {
    let mut a = Archive::new(
        "classifier",
        serde_json::to_value(ClassifierEcho {
            classes: w.classes.clone(),
        })?,
    );
    a.put("weights", &w.weights);
    let n = w.bias.len();
    a.put("bias", &w.bias.clone().into_shape_with_order((1, n)).expect("row"));
    a.save(path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierWeights> {
    let a = Archive::load(path, "classifier")?;
    let echo: ClassifierEcho = a.config_as(path)?;
    let weights = a.get("weights", path)?;
    let bias: Array1<f64> = a.get("bias", path)?.row(0).to_owned();
    if weights.nrows() != echo.classes.len() || bias.len() != echo.classes.len() {
        return Err(Error::Archive {
            path: path.into(),
            msg: "classifier shapes disagree with its class table".into(),
        });
    }
    Ok(ClassifierWeights {
        weights,
        bias,
        classes: echo.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcat::GateActivation;

    fn small_dims() -> ProviderDims {
        ProviderDims {
            backbone_channels: 8,
            grid_h: 2,
            grid_w: 2,
            clip_tokens: 5,
            clip_channels: 8,
            semantic_dim: 6,
        }
    }

    #[test]
    fn gcat_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GcatConfig {
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 2,
            gate_activation: GateActivation::Silu,
            init_seed: 3,
            ..GcatConfig::default()
        };
        let model = Gcat::new(cfg, small_dims()).unwrap();
        let head = SemanticHead::from_semantics(&Mat::from_elem((3, 6), 0.25));
        let path = dir.path().join("gcat.json");
        save_gcat(&path, &model, &head).unwrap();
        let (m2, h2) = load_gcat(&path).unwrap();
        assert_eq!(m2.config, model.config);
        for ((n1, a), (n2, b)) in model.params.iter().zip(m2.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        assert_eq!(h2.params.iter().collect::<Vec<_>>(), head.params.iter().collect::<Vec<_>>());
        assert!(matches!(load_gan(&path), Err(Error::Archive { .. })));
    }

    #[test]
    fn gan_and_classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GanConfig {
            noise_dim: 3,
            hidden_dim: 5,
            ..GanConfig::default()
        };
        let bundle = GanBundle::new(4, 2, &cfg).unwrap();
        let path = dir.path().join("gan.json");
        save_gan(&path, &bundle).unwrap();
        let back = load_gan(&path).unwrap();
        let z = Mat::from_elem((2, 3), 0.7);
        let a = Mat::from_elem((2, 2), -0.1);
        assert_eq!(back.generator.generate(&z, &a), bundle.generator.generate(&z, &a));

        let w = ClassifierWeights {
            weights: Mat::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1),
            bias: Array1::from_vec(vec![1.0, -2.0, 0.5]),
            classes: vec![4, 9, 11],
        };
        let path = dir.path().join("cls.json");
        save_classifier(&path, &w).unwrap();
        assert_eq!(load_classifier(&path).unwrap(), w);
    }

    #[test]
    fn blob_rejects_wrong_length() {
        let mut b = TensorBlob::encode(&Mat::ones((2, 2)));
        b.shape = (3, 2);
        assert!(b.decode().is_err());
    }
}

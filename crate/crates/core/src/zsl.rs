//! Final-stage classifier: real seen features plus synthetic unseen features
//! train a linear softmax classifier, which then predicts over a restricted
//! label set.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::GestureClass;
use crate::error::{Error, Result};
use crate::gcat::GestureFeature;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tape::{softmax_rows, Mat, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZslMode {
    Czsl,
    Gzsl,
}

impl fmt::Display for ZslMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZslMode::Czsl => "czsl",
            ZslMode::Gzsl => "gzsl",
        })
    }
}

impl FromStr for ZslMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "czsl" => Ok(ZslMode::Czsl),
            "gzsl" => Ok(ZslMode::Gzsl),
            _ => Err(Error::config("mode", format!("expected czsl or gzsl, got {s:?}"))),
        }
    }
}

/// Which classifier answers CZSL queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CzslHead {
    /// The GZSL classifier restricted to unseen labels.
    #[default]
    Combined,
    /// A separate classifier trained on synthetic unseen features only.
    Dedicated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub czsl_head: CzslHead,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            czsl_head: CzslHead::Combined,
        }
    }
}

/// Feature rows with class ids over a fixed label space.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Mat,
    pub class_ids: Vec<usize>,
    pub sample_ids: Vec<String>,
    /// Sorted class ids the classifier will output.
    pub label_space: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

fn class_name(classes: &[GestureClass], id: usize) -> String {
    classes
        .iter()
        .find(|c| c.id == id)
        .map(|c| c.name.clone())
        .unwrap_or_else(|| format!("#{id}"))
}

/// Stacks features into a matrix. All rows must share one width.
pub fn stack_features(features: &[&GestureFeature]) -> Result<Mat> {
    let d = features.first().map(|f| f.data.len()).unwrap_or(0);
    let mut m = Mat::zeros((features.len(), d));
    for (i, f) in features.iter().enumerate() {
        if f.data.len() != d {
            return Err(Error::Shape {
                context: format!("feature {}", f.sample_id),
                expected: vec![d],
                got: vec![f.data.len()],
            });
        }
        m.row_mut(i).assign(&f.data);
    }
    Ok(m)
}

/// CZSL: synthetic unseen only, labels over `unseen`. GZSL: real seen plus
/// synthetic unseen, labels over `seen ∪ unseen`.
pub fn build_training_set(
    real_seen: &[GestureFeature],
    synthetic_unseen: &[GestureFeature],
    seen: &[usize],
    unseen: &[usize],
    mode: ZslMode,
    classes: &[GestureClass],
) -> Result<LabeledSet> {
    let seen_set: BTreeSet<usize> = seen.iter().copied().collect();
    let unseen_set: BTreeSet<usize> = unseen.iter().copied().collect();
    if let Some(c) = seen_set.intersection(&unseen_set).next() {
        return Err(Error::Invalid(format!(
            "class {} is both seen and unseen",
            class_name(classes, *c)
        )));
    }
    let mut rows: Vec<&GestureFeature> = Vec::new();
    let check = |f: &'_ GestureFeature, allowed: &BTreeSet<usize>, what: &str| -> Result<usize> {
        match f.class_id {
            Some(c) if allowed.contains(&c) => Ok(c),
            Some(c) => Err(Error::Invalid(format!(
                "{what} feature {} has class {} outside its label set",
                f.sample_id,
                class_name(classes, c)
            ))),
            None => Err(Error::Invalid(format!("{what} feature {} has no class", f.sample_id))),
        }
    };
    let mut class_ids = Vec::new();
    if mode == ZslMode::Gzsl {
        for f in real_seen {
            class_ids.push(check(f, &seen_set, "seen")?);
            rows.push(f);
        }
    }
    for f in synthetic_unseen {
        class_ids.push(check(f, &unseen_set, "synthetic")?);
        rows.push(f);
    }
    let label_space: Vec<usize> = match mode {
        ZslMode::Czsl => unseen_set.iter().copied().collect(),
        ZslMode::Gzsl => seen_set.union(&unseen_set).copied().collect(),
    };
    let present: BTreeSet<usize> = class_ids.iter().copied().collect();
    if let Some(missing) = label_space.iter().find(|c| !present.contains(c)) {
        return Err(Error::Invalid(format!(
            "class {} has no training features",
            class_name(classes, *missing)
        )));
    }
    Ok(LabeledSet {
        features: stack_features(&rows)?,
        class_ids,
        sample_ids: rows.iter().map(|f| f.sample_id.clone()).collect(),
        label_space,
    })
}

/// Linear softmax classifier; `weights` is `n_classes x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    pub weights: Mat,
    pub bias: Array1<f64>,
    /// Class id of each output row.
    pub classes: Vec<usize>,
}

impl ClassifierWeights {
    pub fn logits(&self, features: &Mat) -> Mat {
        features.dot(&self.weights.t()) + &self.bias
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Full-batch Adam on cross-entropy from zero weights. Rows are visited in
/// sample-id order so the result does not depend on input order.
pub fn train_classifier(set: &LabeledSet, config: &ClassifierConfig) -> Result<ClassifierWeights> {
    if set.is_empty() {
        return Err(Error::Invalid("classifier training set is empty".into()));
    }
    if !(config.lr > 0.0) {
        return Err(Error::config("classifier.lr", "must be positive"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.sample_ids[a].cmp(&set.sample_ids[b]).then(a.cmp(&b)));
    let x = set.features.select(Axis(0), &order);
    let index: HashMap<usize, usize> = set.label_space.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y: Vec<usize> = order
        .iter()
        .map(|&i| {
            index
                .get(&set.class_ids[i])
                .copied()
                .ok_or_else(|| Error::Invalid(format!("row {} has a label outside the label space", set.sample_ids[i])))
        })
        .collect::<Result<_>>()?;
    let (n_classes, d) = (set.label_space.len(), x.ncols());
    let mut store = ParamStore::new();
    let w = store.add("cls.w", Mat::zeros((n_classes, d)));
    let b = store.add("cls.b", Mat::zeros((1, n_classes)));
    let mut opt = Adam::new(AdamConfig::adam(config.lr), &store);
    let x = std::sync::Arc::new(x);
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.leaf_shared(x.clone());
        let logits = tape.add_row(tape.matmul_bt(xv, p.var(w)), p.var(b));
        let loss = tape.cross_entropy(logits, &y);
        let l = tape.scalar_value(loss);
        if !l.is_finite() {
            return Err(Error::Numerical(format!("classifier loss is {l} in epoch {epoch}")));
        }
        let g = p.grads(&store, &tape.backward(loss));
        opt.step(&mut store, &g);
        log::trace!("classifier epoch {epoch}: loss {l:.5}");
    }
    Ok(ClassifierWeights {
        weights: store.get(w).clone(),
        bias: store.get(b).row(0).to_owned(),
        classes: set.label_space.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub sample_id: String,
    pub true_class: Option<usize>,
    pub predicted: usize,
    /// Aligned with the restriction the prediction was made under.
    pub probabilities: Vec<f64>,
}

/// Argmax over `restrict_to`, with softmax renormalized over that set.
pub fn predict(
    weights: &ClassifierWeights,
    features: &[GestureFeature],
    restrict_to: &[usize],
) -> Result<Vec<PredictionResult>> {
    if restrict_to.is_empty() {
        return Err(Error::Invalid("empty label restriction".into()));
    }
    let cols: Vec<usize> = restrict_to
        .iter()
        .map(|c| {
            weights
                .classes
                .iter()
                .position(|k| k == c)
                .ok_or_else(|| Error::Invalid(format!("class {c} is not in the classifier label space")))
        })
        .collect::<Result<_>>()?;
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&GestureFeature> = features.iter().collect();
    let x = stack_features(&refs)?;
    if x.ncols() != weights.feature_dim() {
        return Err(Error::Shape {
            context: "classifier input".into(),
            expected: vec![weights.feature_dim()],
            got: vec![x.ncols()],
        });
    }
    let logits = weights.logits(&x).select(Axis(1), &cols);
    let probs = softmax_rows(&logits);
    Ok(features
        .iter()
        .zip(probs.rows())
        .map(|(f, p)| {
            let best = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            PredictionResult {
                sample_id: f.sample_id.clone(),
                true_class: f.class_id,
                predicted: restrict_to[best],
                probabilities: p.to_vec(),
            }
        })
        .collect())
}

/// Which test roster a prediction belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Roster {
    SeenTest,
    UnseenTest,
}

impl fmt::Display for Roster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Roster::SeenTest => "seen_test",
            Roster::UnseenTest => "unseen_test",
        })
    }
}

/// Predictions of one roster under one mode, with the label set used.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub mode: ZslMode,
    pub roster: Roster,
    pub label_space: Vec<usize>,
    pub results: Vec<PredictionResult>,
}

/// One flat exported row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub mode: ZslMode,
    pub roster: Roster,
    pub sample_id: String,
    pub true_class: String,
    pub predicted: String,
    pub top1: String,
    pub p1: f64,
    pub top2: String,
    pub p2: f64,
    pub top3: String,
    pub p3: f64,
    pub label_space: String,
}

pub fn export_rows(sets: &[PredictionSet], classes: &[GestureClass]) -> Vec<ExportRow> {
    let mut rows = Vec::new();
    for s in sets {
        let space = s
            .label_space
            .iter()
            .map(|&c| class_name(classes, c))
            .collect::<Vec<_>>()
            .join(";");
        for r in &s.results {
            let mut ranked: Vec<(usize, f64)> = s.label_space.iter().copied().zip(r.probabilities.iter().copied()).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let top = |k: usize| {
                ranked
                    .get(k)
                    .map(|&(c, p)| (class_name(classes, c), p))
                    .unwrap_or_else(|| (String::new(), 0.0))
            };
            let ((t1, p1), (t2, p2), (t3, p3)) = (top(0), top(1), top(2));
            rows.push(ExportRow {
                mode: s.mode,
                roster: s.roster,
                sample_id: r.sample_id.clone(),
                true_class: r.true_class.map(|c| class_name(classes, c)).unwrap_or_default(),
                predicted: class_name(classes, r.predicted),
                top1: t1,
                p1,
                top2: t2,
                p2,
                top3: t3,
                p3,
                label_space: space.clone(),
            });
        }
    }
    rows
}

pub fn write_predictions<W: Write>(writer: W, sets: &[PredictionSet], classes: &[GestureClass]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in export_rows(sets, classes) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn read_predictions<R: Read>(reader: R) -> Result<Vec<ExportRow>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::caddy_classes;

    fn feat(id: &str, class: usize, data: Vec<f64>) -> GestureFeature {
        GestureFeature {
            data: Array1::from_vec(data),
            sample_id: id.into(),
            class_id: Some(class),
        }
    }

    fn features_for(classes: &[usize], n: usize, prefix: &str) -> Vec<GestureFeature> {
        let mut out = Vec::new();
        for &c in classes {
            for i in 0..n {
                let mut v = vec![0.0; 16];
                v[c] = 1.0 + 0.01 * i as f64;
                out.push(feat(&format!("{prefix}{c}_{i}"), c, v));
            }
        }
        out
    }

    #[test]
    fn training_set_sizes() {
        let classes = caddy_classes();
        let seen: Vec<usize> = (0..10).collect();
        let unseen: Vec<usize> = (10..16).collect();
        let real = features_for(&seen, 30, "r");
        let syn = features_for(&unseen, 400, "s");
        let g = build_training_set(&real, &syn, &seen, &unseen, ZslMode::Gzsl, &classes).unwrap();
        assert_eq!(g.len(), 300 + 2400);
        assert_eq!(g.label_space.len(), 16);
        let c = build_training_set(&real, &syn, &seen, &unseen, ZslMode::Czsl, &classes).unwrap();
        assert_eq!(c.len(), 2400);
        assert_eq!(c.label_space, unseen);
        let real_labels: BTreeSet<_> = g.class_ids[..300].iter().collect();
        let syn_labels: BTreeSet<_> = g.class_ids[300..].iter().collect();
        assert!(real_labels.is_disjoint(&syn_labels));
    }

    #[test]
    fn missing_class_is_named() {
        let classes = caddy_classes();
        let unseen: Vec<usize> = (10..16).collect();
        let syn = features_for(&unseen[..5], 3, "s");
        let err = build_training_set(&[], &syn, &[], &unseen, ZslMode::Czsl, &classes).unwrap_err();
        assert!(err.to_string().contains("five"), "{err}");
    }

    #[test]
    fn separable_toy_reaches_full_training_accuracy() {
        let classes = caddy_classes();
        let mut syn = Vec::new();
        for i in 0..20 {
            let x = 1.0 + i as f64 * 0.1;
            syn.push(feat(&format!("a{i}"), 0, vec![x, 0.5]));
            syn.push(feat(&format!("b{i}"), 1, vec![-x, 0.5]));
        }
        let set = build_training_set(&[], &syn, &[], &[0, 1], ZslMode::Czsl, &classes).unwrap();
        let w = train_classifier(
            &set,
            &ClassifierConfig {
                epochs: 300,
                lr: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let preds = predict(&w, &syn, &[0, 1]).unwrap();
        assert!(preds.iter().all(|p| Some(p.predicted) == p.true_class));
    }

    #[test]
    fn gzsl_weight_shape() {
        let classes = caddy_classes();
        let seen: Vec<usize> = (0..10).collect();
        let unseen: Vec<usize> = (10..16).collect();
        let set = build_training_set(
            &features_for(&seen, 2, "r"),
            &features_for(&unseen, 2, "s"),
            &seen,
            &unseen,
            ZslMode::Gzsl,
            &classes,
        )
        .unwrap();
        let w = train_classifier(&set, &ClassifierConfig { epochs: 2, ..Default::default() }).unwrap();
        assert_eq!(w.weights.dim(), (16, 16));
        assert_eq!(w.bias.len(), 16);
    }

    #[test]
    fn row_order_does_not_change_weights() {
        let classes = caddy_classes();
        let unseen: Vec<usize> = (10..16).collect();
        let syn = features_for(&unseen, 5, "s");
        let mut shuffled = syn.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let a = build_training_set(&[], &syn, &[], &unseen, ZslMode::Czsl, &classes).unwrap();
        let b = build_training_set(&[], &shuffled, &[], &unseen, ZslMode::Czsl, &classes).unwrap();
        let cfg = ClassifierConfig::default();
        assert_eq!(train_classifier(&a, &cfg).unwrap(), train_classifier(&b, &cfg).unwrap());
    }

    #[test]
    fn restriction_semantics() {
        let classes = caddy_classes();
        let unseen: Vec<usize> = (10..16).collect();
        let syn = features_for(&unseen, 5, "s");
        let set = build_training_set(&[], &syn, &[], &unseen, ZslMode::Czsl, &classes).unwrap();
        let w = train_classifier(&set, &ClassifierConfig::default()).unwrap();
        let single = predict(&w, &syn, &[12]).unwrap();
        assert!(single.iter().all(|p| p.predicted == 12 && (p.probabilities[0] - 1.0).abs() < 1e-12));
        for p in predict(&w, &syn, &[10, 11, 15]).unwrap() {
            assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!([10, 11, 15].contains(&p.predicted));
        }
        assert!(predict(&w, &syn, &[]).is_err());
        assert!(predict(&w, &syn, &[0]).is_err());
    }

    #[test]
    fn export_round_trip() {
        let classes = caddy_classes();
        let unseen: Vec<usize> = (10..16).collect();
        let syn = features_for(&unseen, 2, "s");
        let set = build_training_set(&[], &syn, &[], &unseen, ZslMode::Czsl, &classes).unwrap();
        let w = train_classifier(&set, &ClassifierConfig::default()).unwrap();
        let sets = vec![PredictionSet {
            mode: ZslMode::Czsl,
            roster: Roster::UnseenTest,
            label_space: unseen.clone(),
            results: predict(&w, &syn, &unseen).unwrap(),
        }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &sets, &classes).unwrap();
        let rows = read_predictions(&buf[..]).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows, export_rows(&sets, &classes));
        assert!(rows.iter().all(|r| r.p1 >= r.p2 && r.p2 >= r.p3 && r.top1 == r.predicted));
    }
}

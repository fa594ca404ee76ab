//! Benchmark scoring: per-class top-1, harmonic mean, split aggregation,
//! confusion matrices and the cosine-similarity baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dataset::{GestureClass, SplitSpec};
use crate::error::{Error, Result};
use crate::gcat::GestureFeature;
use crate::tape::Mat;
use crate::zsl::{ExportRow, PredictionResult, Roster, ZslMode};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub correct: usize,
    pub count: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Top1 {
    pub per_class: Vec<ClassAccuracy>,
    /// Classes of the label set with no samples; left out of the mean.
    pub excluded: Vec<usize>,
    /// Unweighted mean of per-class accuracies, percent.
    pub mean_per_class: f64,
    /// Sample-weighted accuracy, percent.
    pub micro: f64,
}

/// Per-class top-1 over `(true, predicted)` pairs.
pub fn per_class_top1(pairs: &[(usize, usize)], label_set: &[usize]) -> Result<Top1> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no predictions to score".into()));
    }
    let labels: BTreeSet<usize> = label_set.iter().copied().collect();
    let mut counts: BTreeMap<usize, (usize, usize)> = labels.iter().map(|&c| (c, (0, 0))).collect();
    for &(t, p) in pairs {
        let e = counts
            .get_mut(&t)
            .ok_or_else(|| Error::Invalid(format!("true class {t} is outside the label set")))?;
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for (&c, &(correct, count)) in &counts {
        if count == 0 {
            excluded.push(c);
        } else {
            per_class.push(ClassAccuracy {
                class_id: c,
                correct,
                count,
                accuracy: 100.0 * correct as f64 / count as f64,
            });
        }
    }
    let mean_per_class = per_class.iter().map(|c| c.accuracy).sum::<f64>() / per_class.len() as f64;
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(Top1 {
        per_class,
        excluded,
        mean_per_class,
        micro: 100.0 * correct as f64 / pairs.len() as f64,
    })
}

/// Pairs from predictions that carry their true class.
pub fn pairs(predictions: &[PredictionResult]) -> Result<Vec<(usize, usize)>> {
    predictions
        .iter()
        .map(|p| {
            p.true_class
                .map(|t| (t, p.predicted))
                .ok_or_else(|| Error::Invalid(format!("prediction {} has no true class", p.sample_id)))
        })
        .collect()
}

/// `2su/(s+u)`, zero when both are zero.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub u_czsl: f64,
    pub s_gzsl: f64,
    pub u_gzsl: f64,
    pub h: f64,
}

impl Headline {
    pub fn new(u_czsl: f64, s_gzsl: f64, u_gzsl: f64) -> Self {
        Self {
            u_czsl,
            s_gzsl,
            u_gzsl,
            h: harmonic_mean(s_gzsl, u_gzsl),
        }
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [("u_czsl", self.u_czsl), ("s_gzsl", self.s_gzsl), ("u_gzsl", self.u_gzsl), ("h", self.h)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub split_index: usize,
    /// Per-class mean top-1, percent.
    pub u_czsl: f64,
    pub s_gzsl: f64,
    pub u_gzsl: f64,
    pub h: f64,
    /// Sample-weighted counterparts.
    pub micro: Headline,
    /// Class name to CZSL accuracy for unseen classes and GZSL accuracy for seen ones.
    pub per_class: BTreeMap<String, f64>,
    pub per_class_gzsl: BTreeMap<String, f64>,
    pub n_samples: BTreeMap<String, usize>,
    pub excluded_classes: Vec<String>,
}

impl EvalReport {
    pub fn headline(&self) -> Headline {
        Headline {
            u_czsl: self.u_czsl,
            s_gzsl: self.s_gzsl,
            u_gzsl: self.u_gzsl,
            h: self.h,
        }
    }
}

fn name_of(classes: &[GestureClass], id: usize) -> String {
    classes
        .iter()
        .find(|c| c.id == id)
        .map(|c| c.name.clone())
        .unwrap_or_else(|| format!("#{id}"))
}

/// Scores one split. `czsl` holds unseen-test predictions restricted to 𝒰;
/// `gzsl_seen` and `gzsl_unseen` hold seen-test and unseen-test predictions
/// over 𝒮∪𝒰.
pub fn evaluate_split(
    split_index: usize,
    seen: &[usize],
    unseen: &[usize],
    czsl: &[(usize, usize)],
    gzsl_seen: &[(usize, usize)],
    gzsl_unseen: &[(usize, usize)],
    classes: &[GestureClass],
) -> Result<EvalReport> {
    let unseen_set: BTreeSet<usize> = unseen.iter().copied().collect();
    if let Some(&(_, p)) = czsl.iter().find(|(_, p)| !unseen_set.contains(p)) {
        return Err(Error::Invalid(format!(
            "CZSL prediction names class {} outside the unseen set",
            name_of(classes, p)
        )));
    }
    let c = per_class_top1(czsl, unseen)?;
    let s = per_class_top1(gzsl_seen, seen)?;
    let u = per_class_top1(gzsl_unseen, unseen)?;
    let mut per_class = BTreeMap::new();
    let mut per_class_gzsl = BTreeMap::new();
    let mut n_samples = BTreeMap::new();
    for a in &c.per_class {
        per_class.insert(name_of(classes, a.class_id), a.accuracy);
        n_samples.insert(name_of(classes, a.class_id), a.count);
    }
    for a in s.per_class.iter().chain(&u.per_class) {
        per_class_gzsl.insert(name_of(classes, a.class_id), a.accuracy);
        n_samples.insert(name_of(classes, a.class_id), a.count);
    }
    for a in &s.per_class {
        per_class.insert(name_of(classes, a.class_id), a.accuracy);
    }
    let excluded: BTreeSet<String> = c
        .excluded
        .iter()
        .chain(&s.excluded)
        .chain(&u.excluded)
        .map(|&id| name_of(classes, id))
        .collect();
    let head = Headline::new(c.mean_per_class, s.mean_per_class, u.mean_per_class);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split_index,
        u_czsl: head.u_czsl,
        s_gzsl: head.s_gzsl,
        u_gzsl: head.u_gzsl,
        h: head.h,
        micro: Headline::new(c.micro, s.micro, u.micro),
        per_class,
        per_class_gzsl,
        n_samples,
        excluded_classes: excluded.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub n_splits: usize,
    pub split_indices: Vec<usize>,
    pub std_kind: String,
    pub metrics: BTreeMap<String, MeanStd>,
    pub micro: BTreeMap<String, MeanStd>,
}

/// Per-metric mean and population std. `h` is the mean of per-split values.
pub fn aggregate_splits(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("no split reports to aggregate".into()));
    }
    let collect = |get: &dyn Fn(&EvalReport) -> Headline| {
        let heads: Vec<Headline> = reports.iter().map(get).collect();
        let mut out = BTreeMap::new();
        for (i, (name, _)) in Headline::default().fields().iter().enumerate() {
            let vals: Vec<f64> = heads.iter().map(|h| h.fields()[i].1).collect();
            out.insert(name.to_string(), mean_std(&vals));
        }
        out
    };
    Ok(AggregateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_splits: reports.len(),
        split_indices: reports.iter().map(|r| r.split_index).collect(),
        std_kind: "population".into(),
        metrics: collect(&|r| r.headline()),
        micro: collect(&|r| r.micro.clone()),
    })
}

/// Text table with one row per split plus the mean ± std row.
pub fn render_table(reports: &[EvalReport], aggregate: &AggregateReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>14} {:>14} {:>14} {:>14}", "split", "U (CZSL)", "S (GZSL)", "U (GZSL)", "H");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:>14.2} {:>14.2} {:>14.2} {:>14.2}",
            r.split_index, r.u_czsl, r.s_gzsl, r.u_gzsl, r.h
        );
    }
    let cell = |k: &str| {
        let m = &aggregate.metrics[k];
        format!("{:.2} ± {:.2}", m.mean, m.std)
    };
    let _ = writeln!(
        out,
        "{:<10} {:>14} {:>14} {:>14} {:>14}",
        "mean",
        cell("u_czsl"),
        cell("s_gzsl"),
        cell("u_gzsl"),
        cell("h")
    );
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosinePrediction {
    pub sample_id: String,
    pub true_class: Option<usize>,
    pub predicted: usize,
    pub cosine: f64,
}

/// Nearest class by cosine similarity between a feature and the class semantics.
/// `semantics` has one row per class id.
pub fn baseline_cosine_predict(
    features: &[GestureFeature],
    semantics: &Mat,
    label_set: &[usize],
) -> Result<Vec<CosinePrediction>> {
    if label_set.is_empty() {
        return Err(Error::Invalid("empty label set".into()));
    }
    let anchors: Vec<(usize, Array1<f64>)> = label_set
        .iter()
        .map(|&c| {
            if c >= semantics.nrows() {
                return Err(Error::Invalid(format!("no semantic vector for class {c}")));
            }
            let a = semantics.row(c).to_owned();
            let n = a.dot(&a).sqrt();
            if n == 0.0 {
                return Err(Error::Invalid(format!("semantic vector of class {c} has zero norm")));
            }
            Ok((c, a / n))
        })
        .collect::<Result<_>>()?;
    features
        .iter()
        .map(|f| {
            if f.data.len() != semantics.ncols() {
                return Err(Error::Shape {
                    context: format!("feature {}", f.sample_id),
                    expected: vec![semantics.ncols()],
                    got: vec![f.data.len()],
                });
            }
            let n = f.data.dot(&f.data).sqrt();
            if !(n > 0.0) {
                return Err(Error::Invalid(format!("feature {} has zero norm", f.sample_id)));
            }
            let (predicted, cosine) = anchors
                .iter()
                .map(|(c, a)| (*c, f.data.dot(a) / n))
                .fold((label_set[0], f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best });
            Ok(CosinePrediction {
                sample_id: f.sample_id.clone(),
                true_class: f.class_id,
                predicted,
                cosine,
            })
        })
        .collect()
}

/// Counts of (true, predicted) pairs; rows are true classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(pairs: &[(usize, usize)], label_set: &[usize]) -> Result<Self> {
        let labels: Vec<usize> = label_set.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let pos = |c: usize| {
            labels
                .binary_search(&c)
                .map_err(|_| Error::Invalid(format!("class {c} is outside the confusion label set")))
        };
        let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
        for &(t, p) in pairs {
            counts[pos(t)?][pos(p)?] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_csv(&self, classes: &[GestureClass]) -> String {
        let names: Vec<String> = self.labels.iter().map(|&c| name_of(classes, c)).collect();
        let mut out = format!("true\\predicted,{}\n", names.join(","));
        for (name, row) in names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    /// Row-normalized heatmap, `cell` pixels per entry.
    pub fn heatmap(&self, cell: u32) -> RgbImage {
        let n = self.labels.len() as u32;
        let mut img = RgbImage::new((n * cell).max(1), (n * cell).max(1));
        let sums = self.row_sums();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let frac = if sums[i] > 0 { v as f64 / sums[i] as f64 } else { 0.0 };
                let px = blues(frac);
                for y in 0..cell {
                    for x in 0..cell {
                        img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, px);
                    }
                }
            }
        }
        img
    }

    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        self.heatmap(24).save(path)?;
        Ok(())
    }
}

/// White to dark blue.
pub fn blues(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)])
}

/// Checks an exported prediction table against its split: CZSL rows stay
/// inside 𝒰, GZSL rows use 𝒮∪𝒰, and each roster holds exactly the split's
/// test samples. Returns every violation found.
pub fn audit_predictions(rows: &[ExportRow], split: &SplitSpec, classes: &[GestureClass]) -> Vec<String> {
    let names = |ids: &[usize]| -> BTreeSet<String> { ids.iter().map(|&c| name_of(classes, c)).collect() };
    let unseen = names(&split.unseen_classes);
    let all = names(&split.all_classes());
    let mut problems = Vec::new();
    let mut seen_rows: BTreeMap<(ZslMode, Roster), Vec<&str>> = BTreeMap::new();
    for r in rows {
        let space: BTreeSet<String> = r.label_space.split(';').map(str::to_string).collect();
        let expected = match r.mode {
            ZslMode::Czsl => &unseen,
            ZslMode::Gzsl => &all,
        };
        if &space != expected {
            problems.push(format!("{} {}: wrong label space", r.mode, r.sample_id));
        }
        if !expected.contains(&r.predicted) {
            problems.push(format!("{} {}: predicted {} outside the label space", r.mode, r.sample_id, r.predicted));
        }
        if r.mode == ZslMode::Czsl && r.roster != Roster::UnseenTest {
            problems.push(format!("czsl {}: scored on the {} roster", r.sample_id, r.roster));
        }
        seen_rows.entry((r.mode, r.roster)).or_default().push(&r.sample_id);
    }
    fn sorted(ids: &[String]) -> Vec<&str> {
        let mut v: Vec<&str> = ids.iter().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
    for (key, ids) in [
        ((ZslMode::Czsl, Roster::UnseenTest), &split.unseen_test_ids),
        ((ZslMode::Gzsl, Roster::SeenTest), &split.seen_test_ids),
        ((ZslMode::Gzsl, Roster::UnseenTest), &split.unseen_test_ids),
    ] {
        let mut got = seen_rows.remove(&key).unwrap_or_default();
        got.sort_unstable();
        if got != sorted(ids) {
            problems.push(format!("{} {} roster does not match the split ({} rows, {} expected)", key.0, key.1, got.len(), ids.len()));
        }
    }
    for ((mode, roster), ids) in seen_rows {
        problems.push(format!("{} {mode} rows on an unexpected {roster} roster", ids.len()));
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_versus_micro() {
        let mut pairs = vec![(0, 0); 99];
        pairs.push((1, 0));
        let t = per_class_top1(&pairs, &[0, 1]).unwrap();
        assert!((t.mean_per_class - 50.0).abs() < 1e-12);
        assert!((t.micro - 99.0).abs() < 1e-12);
    }

    #[test]
    fn all_correct_and_reorder_invariance() {
        let pairs: Vec<(usize, usize)> = (0..30).map(|i| (i % 3, i % 3)).collect();
        let t = per_class_top1(&pairs, &[0, 1, 2]).unwrap();
        assert_eq!(t.mean_per_class, 100.0);
        assert!(t.per_class.iter().all(|c| c.accuracy == 100.0));
        let mut rev = pairs.clone();
        rev.reverse();
        assert_eq!(per_class_top1(&rev, &[0, 1, 2]).unwrap(), t);
    }

    #[test]
    fn empty_and_zero_count_classes() {
        assert!(per_class_top1(&[], &[0]).is_err());
        let t = per_class_top1(&[(0, 0), (0, 1)], &[0, 1]).unwrap();
        assert_eq!(t.excluded, vec![1]);
        assert_eq!(t.mean_per_class, 50.0);
        assert!(per_class_top1(&[(5, 5)], &[0]).is_err());
    }

    #[test]
    fn harmonic_mean_oracles() {
        for x in [0.0, 1.0, 37.5, 100.0] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-12);
        }
        assert!((harmonic_mean(94.11, 2.58) - 5.02).abs() < 0.01);
        assert_eq!(harmonic_mean(80.0, 0.0), 0.0);
        for (s, u) in [(10.0, 90.0), (3.0, 4.0), (50.0, 50.0)] {
            let h = harmonic_mean(s, u);
            assert!(h <= (s + u) / 2.0 + 1e-12 && h <= 2.0 * f64::min(s, u));
        }
    }

    fn report(split: usize, s: f64, u: f64) -> EvalReport {
        let head = Headline::new(u, s, u);
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            split_index: split,
            u_czsl: head.u_czsl,
            s_gzsl: s,
            u_gzsl: u,
            h: head.h,
            micro: head,
            per_class: BTreeMap::new(),
            per_class_gzsl: BTreeMap::new(),
            n_samples: BTreeMap::new(),
            excluded_classes: vec![],
        }
    }

    #[test]
    fn aggregation_oracles() {
        let one = aggregate_splits(&[report(0, 40.0, 60.0)]).unwrap();
        assert!(one.metrics.values().all(|m| m.std == 0.0));
        let ms = mean_std(&[20.0, 30.0, 40.0]);
        assert!((ms.mean - 30.0).abs() < 1e-12 && (ms.std - 8.1650).abs() < 1e-4);
        let agg = aggregate_splits(&[report(0, 90.0, 10.0), report(1, 10.0, 90.0)]).unwrap();
        assert!((agg.metrics["h"].mean - 18.0).abs() < 1e-9);
        let h_of_means = harmonic_mean(agg.metrics["s_gzsl"].mean, agg.metrics["u_gzsl"].mean);
        assert!((h_of_means - 50.0).abs() < 1e-9);
        let c = mean_std(&[7.0; 4]);
        assert_eq!((c.mean, c.std), (7.0, 0.0));
        assert!(aggregate_splits(&[]).is_err());
    }

    #[test]
    fn split_evaluation_keeps_rosters_apart() {
        let classes = crate::dataset::caddy_classes();
        let seen = [0, 1];
        let unseen = [2, 3];
        let r = evaluate_split(0, &seen, &unseen, &[(2, 2), (3, 2)], &[(0, 0), (1, 3)], &[(2, 2), (3, 3)], &classes).unwrap();
        assert_eq!(r.u_czsl, 50.0);
        assert_eq!(r.s_gzsl, 50.0);
        assert_eq!(r.u_gzsl, 100.0);
        assert!((r.h - 200.0 / 3.0).abs() < 1e-9);
        assert!(evaluate_split(0, &seen, &unseen, &[(2, 0)], &[(0, 0)], &[(2, 2)], &classes).is_err());
    }

    #[test]
    fn cosine_baseline() {
        let sem = Mat::from_shape_vec((3, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = |c: usize, scale: f64| GestureFeature {
            data: sem.row(c).to_owned() * scale + 0.1,
            sample_id: format!("s{c}"),
            class_id: Some(c),
        };
        for c in 0..3 {
            for scale in [0.5, 1.0, 7.0] {
                let p = baseline_cosine_predict(&[f(c, scale)], &sem, &[0, 1, 2]).unwrap();
                assert_eq!(p[0].predicted, c);
            }
        }
        let zero = GestureFeature {
            data: Array1::zeros(3),
            sample_id: "z".into(),
            class_id: None,
        };
        assert!(baseline_cosine_predict(&[zero], &sem, &[0]).is_err());
    }

    #[test]
    fn confusion_properties() {
        let pairs = [(0, 0), (1, 1), (1, 1), (2, 2)];
        let m = ConfusionMatrix::new(&pairs, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.counts[i][j] > 0, i == j);
            }
        }
        let pairs = [(0, 1), (1, 1), (1, 2), (2, 2), (2, 0)];
        let m = ConfusionMatrix::new(&pairs, &[0, 1, 2]).unwrap();
        assert_eq!(m.row_sums(), vec![1, 2, 2]);
        assert_eq!(m.total(), 5);
        let img = m.heatmap(4);
        assert_eq!(img.dimensions(), (12, 12));
        assert_eq!(*img.get_pixel(5, 5), blues(0.5));
    }
}

//! Labeled manifests and seen/unseen class splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::permutation;

/// The 16 CADDIAN diver gestures, in class-id order.
pub const CADDY_CLASS_NAMES: [&str; 16] = [
    "start_comm",
    "end_comm",
    "up",
    "down",
    "photo",
    "backwards",
    "carry",
    "boat",
    "here",
    "mosaic",
    "num_delimiter",
    "one",
    "two",
    "three",
    "four",
    "five",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureClass {
    pub id: usize,
    pub name: String,
}

/// Builds a class vocabulary with contiguous ids, rejecting empty or repeated names.
pub fn class_vocabulary<S: AsRef<str>>(names: &[S]) -> Result<Vec<GestureClass>> {
    let mut seen = HashSet::new();
    names
        .iter()
        .enumerate()
        .map(|(id, n)| {
            let name = n.as_ref().trim();
            if name.is_empty() {
                return Err(Error::Invalid(format!("class {id} has an empty name")));
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::Invalid(format!("duplicate class name {name:?}")));
            }
            Ok(GestureClass {
                id,
                name: name.to_string(),
            })
        })
        .collect()
}

pub fn caddy_classes() -> Vec<GestureClass> {
    class_vocabulary(&CADDY_CLASS_NAMES).expect("static vocabulary is valid")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Image path, or a synthetic seed for the synthetic provider.
    pub image_ref: String,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub classes: Vec<GestureClass>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn class_of(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .map(|r| (r.sample_id.as_str(), r.class_id))
            .collect()
    }

    pub fn record_index(&self) -> HashMap<&str, &SampleRecord> {
        self.records.iter().map(|r| (r.sample_id.as_str(), r)).collect()
    }

    pub fn counts_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.class_id] += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "image_ref", "class_name"])?;
        for r in &self.records {
            w.write_record([&r.sample_id, &r.image_ref, &self.classes[r.class_id].name])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct ManifestRow {
    sample_id: String,
    image_ref: String,
    class_name: String,
}

/// Reads a comma-separated manifest with header `sample_id,image_ref,class_name`.
pub fn load_manifest(path: &Path, classes: &[GestureClass]) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file, classes)
}

pub fn parse_manifest<R: Read>(reader: R, classes: &[GestureClass]) -> Result<Manifest> {
    let by_name: HashMap<&str, usize> = classes.iter().map(|c| (c.name.as_str(), c.id)).collect();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        // data rows are numbered from 1; the header is row 0
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Manifest {
            row: row_no,
            msg: e.to_string(),
        })?;
        let class_id = *by_name
            .get(row.class_name.as_str())
            .ok_or_else(|| Error::Manifest {
                row: row_no,
                msg: format!("unknown class name {:?}", row.class_name),
            })?;
        if !ids.insert(row.sample_id.clone()) {
            return Err(Error::Manifest {
                row: row_no,
                msg: format!("duplicate sample_id {:?}", row.sample_id),
            });
        }
        records.push(SampleRecord {
            sample_id: row.sample_id,
            image_ref: row.image_ref,
            class_id,
        });
    }
    if records.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(Manifest {
        classes: classes.to_vec(),
        records,
    })
}

/// A manifest with `counts[c]` synthetic samples of class `c`. Image refs are
/// `synthetic:<class>:<index>` seeds understood by the synthetic provider.
pub fn synthetic_manifest(classes: &[GestureClass], counts: &[usize]) -> Manifest {
    assert_eq!(classes.len(), counts.len());
    let mut records = Vec::with_capacity(counts.iter().sum());
    for (c, &n) in classes.iter().zip(counts) {
        for i in 0..n {
            records.push(SampleRecord {
                sample_id: format!("{}_{i:05}", c.name),
                image_ref: format!("synthetic:{}:{i}", c.id),
                class_id: c.id,
            });
        }
    }
    Manifest {
        classes: classes.to_vec(),
        records,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub n_splits: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub holdout_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            n_splits: 3,
            n_seen: 10,
            n_unseen: 6,
            holdout_fraction: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split_index: usize,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub seen_train_ids: Vec<String>,
    pub seen_test_ids: Vec<String>,
    pub unseen_test_ids: Vec<String>,
    pub rng_seed: u64,
}

impl SplitSpec {
    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .seen_classes
            .iter()
            .chain(&self.unseen_classes)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Derives the seed of split `index` from the run seed (SplitMix64 finalizer).
pub fn split_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per-class holdout sizes: the total is `round(fraction * sum)` and each
/// class receives the floor or ceiling of its share, largest remainders first.
/// Classes whose own share rounds to zero get nothing.
pub fn stratified_holdout_sizes(counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = round_half_up(fraction * total as f64);
    let eligible: Vec<bool> = counts
        .iter()
        .map(|&n| round_half_up(fraction * n as f64) > 0)
        .collect();
    let mut sizes: Vec<usize> = counts
        .iter()
        .zip(&eligible)
        .map(|(&n, &e)| if e { (fraction * n as f64).floor() as usize } else { 0 })
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&c| eligible[c]).collect();
    order.sort_by(|&a, &b| {
        let ra = fraction * counts[a] as f64 - sizes[a] as f64;
        let rb = fraction * counts[b] as f64 - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    let extra = target.saturating_sub(assigned).min(order.len());
    for &c in order.iter().take(extra) {
        sizes[c] += 1;
    }
    sizes
}

/// Random seen/unseen class splits with a stratified seen-class holdout.
///
/// Returns the splits together with warnings for seen classes too small to
/// contribute a holdout sample.
pub fn generate_splits(
    manifest: &Manifest,
    params: &SplitParams,
    seed: u64,
) -> Result<(Vec<SplitSpec>, Vec<String>)> {
    let n_classes = manifest.classes.len();
    if params.n_seen + params.n_unseen != n_classes {
        return Err(Error::config(
            "split.n_seen",
            format!(
                "n_seen + n_unseen = {} but the manifest has {n_classes} classes",
                params.n_seen + params.n_unseen
            ),
        ));
    }
    if params.n_seen == 0 || params.n_unseen == 0 {
        return Err(Error::config("split.n_seen", "both class sets must be nonempty"));
    }
    if !(params.holdout_fraction > 0.0 && params.holdout_fraction < 1.0) {
        return Err(Error::config("split.holdout_fraction", "must lie in (0, 1)"));
    }
    if manifest.records.is_empty() {
        return Err(Error::NoRecords);
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, r) in manifest.records.iter().enumerate() {
        by_class[r.class_id].push(i);
    }

    let mut splits = Vec::with_capacity(params.n_splits);
    let mut warnings = Vec::new();
    for index in 0..params.n_splits {
        let sub_seed = split_seed(seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let order = permutation(&mut rng, n_classes);
        let mut seen: Vec<usize> = order[..params.n_seen].to_vec();
        let mut unseen: Vec<usize> = order[params.n_seen..].to_vec();
        seen.sort_unstable();
        unseen.sort_unstable();

        let counts: Vec<usize> = seen.iter().map(|&c| by_class[c].len()).collect();
        let sizes = stratified_holdout_sizes(&counts, params.holdout_fraction);
        let mut holdout = vec![false; manifest.records.len()];
        for ((&c, &k), &n) in seen.iter().zip(&sizes).zip(&counts) {
            if k == 0 && n > 0 {
                warnings.push(format!(
                    "split {index}: seen class {} has {n} samples, too few for a holdout; it contributes none",
                    manifest.classes[c].name
                ));
            }
            let perm = permutation(&mut rng, n);
            for &p in perm.iter().take(k) {
                holdout[by_class[c][p]] = true;
            }
        }

        let is_seen: Vec<bool> = (0..n_classes).map(|c| seen.binary_search(&c).is_ok()).collect();
        let mut spec = SplitSpec {
            split_index: index,
            seen_classes: seen,
            unseen_classes: unseen,
            seen_train_ids: Vec::new(),
            seen_test_ids: Vec::new(),
            unseen_test_ids: Vec::new(),
            rng_seed: sub_seed,
        };
        for (i, r) in manifest.records.iter().enumerate() {
            let id = r.sample_id.clone();
            if !is_seen[r.class_id] {
                spec.unseen_test_ids.push(id);
            } else if holdout[i] {
                spec.seen_test_ids.push(id);
            } else {
                spec.seen_train_ids.push(id);
            }
        }
        splits.push(spec);
    }
    Ok((splits, warnings))
}

/// Every way `split` breaks the split invariants against `manifest`.
pub fn validate_split(split: &SplitSpec, manifest: &Manifest) -> Vec<String> {
    let mut violations = Vec::new();
    let n_classes = manifest.classes.len();
    let seen: BTreeSet<usize> = split.seen_classes.iter().copied().collect();
    let unseen: BTreeSet<usize> = split.unseen_classes.iter().copied().collect();

    for c in seen.intersection(&unseen) {
        violations.push(format!("class overlap: id {c}"));
    }
    for &c in seen.union(&unseen) {
        if c >= n_classes {
            violations.push(format!("unknown class id {c}"));
        }
    }
    for c in 0..n_classes {
        if !seen.contains(&c) && !unseen.contains(&c) {
            violations.push(format!("class {c} is neither seen nor unseen"));
        }
    }

    let class_of = manifest.class_of();
    let mut roster_of: BTreeMap<&str, &str> = BTreeMap::new();
    let rosters: [(&str, &Vec<String>); 3] = [
        ("seen_train", &split.seen_train_ids),
        ("seen_test", &split.seen_test_ids),
        ("unseen_test", &split.unseen_test_ids),
    ];
    for (roster, ids) in rosters {
        for id in ids {
            if let Some(prev) = roster_of.insert(id.as_str(), roster) {
                violations.push(format!("duplicate sample {id} in {prev} and {roster}"));
            }
            let Some(&c) = class_of.get(id.as_str()) else {
                violations.push(format!("unknown sample {id} in {roster}"));
                continue;
            };
            let expect_unseen = roster == "unseen_test";
            if expect_unseen && !unseen.contains(&c) {
                violations.push(format!("leakage: {roster} sample {id} has non-unseen class {c}"));
            }
            if !expect_unseen && !seen.contains(&c) {
                violations.push(format!("leakage: {roster} sample {id} has non-seen class {c}"));
            }
        }
    }
    for r in &manifest.records {
        if !roster_of.contains_key(r.sample_id.as_str()) {
            violations.push(format!("sample {} missing from every roster", r.sample_id));
        }
    }
    violations
}

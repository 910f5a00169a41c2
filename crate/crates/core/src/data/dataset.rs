use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];
}

/// One examination (case).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub class: String,
    pub sex: String,
    pub age: String,
    /// Empty until the split is decided.
    pub subset: Option<Subset>,
    /// Source raster for ingestion, or the patch directory of a synthetic
    /// case.
    pub image_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    let mut seen = BTreeSet::new();
    for row in &rows {
        if !seen.insert(row.case_id.clone()) {
            return Err(AsrError::Config(format!("duplicate case_id `{}` in {}", row.case_id, path.display())));
        }
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| AsrError::io(path, e))
}

/// Splits `n` items by integer `ratios` using largest remainders; ties go
/// to the earlier subset.
pub fn apportion(n: usize, ratios: [usize; 3]) -> [usize; 3] {
    let total: usize = ratios.iter().sum();
    let mut counts = ratios.map(|r| n * r / total);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((n * ratios[i]) % total));
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Examination-level stratified split: within each class the cases are
/// shuffled with `seed` and apportioned to train/val/test by `ratios`.
pub fn split_dataset(rows: &[ManifestRow], ratios: [usize; 3], seed: u64) -> Result<BTreeMap<String, Subset>> {
    if ratios.iter().any(|&r| r == 0) {
        return Err(AsrError::Config(format!("split ratios {ratios:?} must all be positive")));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in rows {
        by_class.entry(&r.class).or_default().push(&r.case_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (class, mut cases) in by_class {
        cases.sort_unstable();
        cases.shuffle(&mut rng);
        let counts = apportion(cases.len(), ratios);
        if counts.iter().any(|&c| c == 0) {
            return Err(AsrError::Config(format!(
                "class `{class}` has {} cases; ratios {ratios:?} leave a subset empty",
                cases.len()
            )));
        }
        let mut it = cases.into_iter();
        for (subset, count) in Subset::ALL.into_iter().zip(counts) {
            for case in it.by_ref().take(count) {
                out.insert(case.to_string(), subset);
            }
        }
    }
    Ok(out)
}

/// Sixteen (by default) distinct patches of one case.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: String,
    pub case_id: String,
    pub label: String,
    /// Indices into the case's patch list, ascending.
    pub members: Vec<usize>,
}

/// Draws `bags_per_case` bags per case, each without replacement. Cases
/// with fewer than `bag_size` patches are skipped with a warning.
///
/// `cases` maps case id to `(label, patch count)`.
pub fn make_bags(cases: &BTreeMap<String, (String, usize)>, bag_size: usize, bags_per_case: usize, seed: u64) -> Result<Vec<Bag>> {
    if bag_size == 0 {
        return Err(AsrError::Config("bag size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::new();
    for (case, (label, n)) in cases {
        if *n < bag_size {
            warn!("case {case} has {n} patches, fewer than the bag size {bag_size}; skipped");
            continue;
        }
        for k in 0..bags_per_case {
            let mut members = sample(&mut rng, *n, bag_size).into_vec();
            members.sort_unstable();
            bags.push(Bag {
                bag_id: format!("{case}-{k:03}"),
                case_id: case.clone(),
                label: label.clone(),
                members,
            });
        }
    }
    Ok(bags)
}

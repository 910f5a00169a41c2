use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, Impurity, Samples, Tree, TreeParams};
use crate::error::{AsrError, Result};

/// Hyperparameter grid searched by cross-validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub impurity: Vec<Impurity>,
    /// `None` is unlimited depth, written `"none"` in configuration files.
    #[serde(with = "depth_list")]
    pub max_depth: Vec<Option<usize>>,
    pub min_samples_leaf: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

mod depth_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Depth {
        Limit(usize),
        Name(String),
    }

    pub fn serialize<S: Serializer>(v: &[Option<usize>], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|d| d.map_or(Depth::Name("none".into()), Depth::Limit))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<usize>>, D::Error> {
        Vec::<Depth>::deserialize(d)?
            .into_iter()
            .map(|x| match x {
                Depth::Limit(n) => Ok(Some(n)),
                Depth::Name(n) if n == "none" => Ok(None),
                Depth::Name(n) => Err(serde::de::Error::custom(format!("max_depth entries are integers or \"none\", got `{n}`"))),
            })
            .collect()
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            impurity: vec![Impurity::Gini, Impurity::Entropy],
            max_depth: vec![Some(3), Some(4), Some(5), Some(7), None],
            min_samples_leaf: vec![5, 10, 20],
            folds: 5,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn combinations(&self) -> Vec<TreeParams> {
        let mut out = Vec::new();
        for &impurity in &self.impurity {
            for &max_depth in &self.max_depth {
                for &min_samples_leaf in &self.min_samples_leaf {
                    out.push(TreeParams {
                        impurity,
                        max_depth,
                        min_samples_leaf,
                    });
                }
            }
        }
        out
    }
}

/// Selection preference among equally accurate combinations: shallower,
/// then larger leaves, then gini.
fn simplicity_key(p: &TreeParams) -> (usize, std::cmp::Reverse<usize>, u8) {
    (
        p.max_depth.unwrap_or(usize::MAX),
        std::cmp::Reverse(p.min_samples_leaf),
        match p.impurity {
            Impurity::Gini => 0,
            Impurity::Entropy => 1,
        },
    )
}

/// Seeded stratified fold assignment; each class is shuffled and dealt
/// round-robin. Falls back to fewer folds when a class is too small.
pub fn stratified_folds(y: &[usize], n_classes: usize, folds: usize, seed: u64) -> Result<(usize, Vec<usize>)> {
    let groups: Vec<usize> = (0..y.len()).collect();
    group_folds(y, &groups, n_classes, folds, seed)
}

/// Stratified fold assignment of whole groups: the groups of each class
/// are shuffled and dealt round-robin, and every row follows its group.
/// Falls back to fewer folds when a class has too few groups.
pub fn group_folds(y: &[usize], groups: &[usize], n_classes: usize, folds: usize, seed: u64) -> Result<(usize, Vec<usize>)> {
    if y.len() < 2 {
        return Err(AsrError::Config("cross-validation needs at least two rows".into()));
    }
    let mut class_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (&g, &c) in groups.iter().zip(y) {
        if *class_of.entry(g).or_insert(c) != c {
            return Err(AsrError::Contract(format!("group {g} mixes classes")));
        }
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (&g, &c) in &class_of {
        per_class[c].push(g);
    }
    let smallest = per_class.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
    let k = if smallest < folds {
        let k = smallest.max(2).min(class_of.len());
        warn!("smallest class has {smallest} groups; using {k} folds instead of {folds}");
        k
    } else {
        folds
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut offset = 0;
    for members in &mut per_class {
        members.shuffle(&mut rng);
        for (j, &g) in members.iter().enumerate() {
            fold_of.insert(g, (offset + j) % k);
        }
        offset += members.len();
    }
    Ok((k, groups.iter().map(|g| fold_of[g]).collect()))
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Mean k-fold accuracy of one combination.
pub fn cross_validate(data: &Samples, params: TreeParams, folds: &[usize], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..data.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..data.len()).filter(|&i| folds[i] == f).collect();
        let tree = fit_tree(&data.subset(&train), params)?;
        let held = data.subset(&test);
        total += accuracy(&held.y, &tree.predict_all(&held.x));
    }
    Ok(total / k as f64)
}

/// Accuracy with support-weighted precision, recall and F1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

/// Weighted metrics from a confusion matrix; undefined ratios count as 0.
pub fn metrics_from_confusion(m: &[Vec<usize>]) -> ClassMetrics {
    let n_classes = m.len();
    let total: usize = m.iter().flatten().sum();
    let (mut p_w, mut r_w, mut f_w) = (0.0, 0.0, 0.0);
    let mut correct = 0;
    for c in 0..n_classes {
        let tp = m[c][c];
        correct += tp;
        let support: usize = m[c].iter().sum();
        let predicted: usize = (0..n_classes).map(|r| m[r][c]).sum();
        let p = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let r = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let w = support as f64 / total.max(1) as f64;
        p_w += w * p;
        r_w += w * r;
        f_w += w * f;
    }
    ClassMetrics {
        accuracy: correct as f64 / total.max(1) as f64,
        precision: p_w,
        recall: r_w,
        f1: f_w,
        confusion: m.to_vec(),
    }
}

pub fn class_metrics(truth: &[usize], pred: &[usize], n_classes: usize) -> ClassMetrics {
    metrics_from_confusion(&confusion_matrix(truth, pred, n_classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: TreeParams,
    pub cv_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub grid: Vec<GridScore>,
    pub folds_used: usize,
    pub best: TreeParams,
    pub ccp_alpha: f64,
    pub val_accuracy: f64,
    pub tree: Tree,
    pub test: ClassMetrics,
    pub importances: Vec<f64>,
}

/// Grid search by stratified k-fold CV on `train` (folds keep groups
/// together when `train` has them), refit of the best
/// combination, cost-complexity alpha chosen on `val` (ties go to the
/// larger alpha), and evaluation of the pruned tree on `test`.
pub fn select_and_evaluate(train: &Samples, val: &Samples, test: &Samples, grid: &GridSpec) -> Result<Selection> {
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(AsrError::Config("train, validation and test rows must all be present".into()));
    }
    let (k, folds) = match &train.groups {
        Some(g) => group_folds(&train.y, g, train.n_classes, grid.folds, grid.seed)?,
        None => stratified_folds(&train.y, train.n_classes, grid.folds, grid.seed)?,
    };
    let mut scores = Vec::new();
    for params in grid.combinations() {
        scores.push(GridScore {
            params,
            cv_accuracy: cross_validate(train, params, &folds, k)?,
        });
    }
    let best = scores
        .iter()
        .max_by(|a, b| {
            a.cv_accuracy
                .total_cmp(&b.cv_accuracy)
                .then_with(|| simplicity_key(&b.params).cmp(&simplicity_key(&a.params)))
        })
        .ok_or_else(|| AsrError::Config("empty hyperparameter grid".into()))?
        .params;
    let full = fit_tree(train, best)?;
    let mut chosen: Option<(f64, f64, Tree)> = None;
    for (alpha, tree) in full.ccp_path() {
        let acc = accuracy(&val.y, &tree.predict_all(&val.x));
        if chosen.as_ref().map_or(true, |(_, a, _)| acc >= *a) {
            chosen = Some((alpha, acc, tree));
        }
    }
    let (ccp_alpha, val_accuracy, tree) = chosen.expect("path is never empty");
    let test_metrics = class_metrics(&test.y, &tree.predict_all(&test.x), test.n_classes);
    let importances = tree.importances();
    Ok(Selection {
        grid: scores,
        folds_used: k,
        best,
        ccp_alpha,
        val_accuracy,
        tree,
        test: test_metrics,
        importances,
    })
}

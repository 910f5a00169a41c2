//! Brute-force reference for tree induction and pruning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use asr::classify::{fit_tree, Impurity, Samples, Tree, TreeParams};

const TIE: f64 = 1e-12;

pub fn impurity(kind: Impurity, counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let ps = counts.iter().map(|&c| c as f64 / n as f64);
    match kind {
        Impurity::Gini => 1.0 - ps.map(|p| p * p).sum::<f64>(),
        Impurity::Entropy => ps.filter(|&p| p > 0.0).map(|p| -p * p.ln() / std::f64::consts::LN_2).sum(),
    }
}

fn counts(data: &Samples, rows: &[usize]) -> Vec<usize> {
    let mut c = vec![0; data.n_classes];
    rows.iter().for_each(|&r| c[data.y[r]] += 1);
    c
}

/// Exhaustive search over every attribute and every midpoint between
/// consecutive distinct values, scanned in ascending order so the first
/// strictly better gain wins.
pub fn oracle_split(data: &Samples, rows: &[usize], kind: Impurity, min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = rows.len() as f64;
    let parent = impurity(kind, &counts(data, rows));
    let mut best: Option<(usize, f64, f64)> = None;
    for a in 0..data.n_attributes() {
        let mut values: Vec<f64> = rows.iter().map(|&r| data.x[r][a]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let mut t = (w[0] + w[1]) / 2.0;
            if t >= w[1] {
                t = w[0];
            }
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.x[i][a] <= t);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let child = (l.len() as f64 * impurity(kind, &counts(data, &l)) + r.len() as f64 * impurity(kind, &counts(data, &r))) / n;
            let gain = parent - child;
            if best.map_or(true, |(_, _, g)| gain > g + TIE) {
                best = Some((a, t, gain));
            }
        }
    }
    best
}

/// Random dataset with at most 200 rows and 8 attributes. Odd seeds draw
/// from a few integer levels so that exact ties are common.
pub fn random_dataset(seed: u64) -> (Samples, TreeParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.gen_range(2..=200);
    let attrs = rng.gen_range(1..=8);
    let classes = rng.gen_range(2..=4);
    let discrete = seed % 2 == 1;
    let x: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            (0..attrs)
                .map(|_| if discrete { rng.gen_range(0..5) as f64 } else { rng.gen_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    // labels loosely tied to the first attribute plus noise
    let y: Vec<usize> = x
        .iter()
        .map(|r| if rng.gen_bool(0.3) { rng.gen_range(0..classes) } else { ((r[0].abs() * 3.0) as usize) % classes })
        .collect();
    let params = TreeParams {
        impurity: if rng.gen_bool(0.5) { Impurity::Gini } else { Impurity::Entropy },
        max_depth: [None, Some(2), Some(4), Some(8)][rng.gen_range(0..4)],
        min_samples_leaf: [1, 1, 2, 5][rng.gen_range(0..4)],
    };
    (Samples::new(x, y, classes).expect("valid dataset"), params)
}

/// Every node of `tree` against the oracle; returns one message per
/// disagreement.
pub fn check_tree(data: &Samples, tree: &Tree) -> Vec<String> {
    let mut errors = Vec::new();
    let p = &tree.params;
    let mut stack = vec![(0usize, (0..data.len()).collect::<Vec<_>>())];
    while let Some((id, rows)) = stack.pop() {
        let node = &tree.nodes[id];
        if node.counts != counts(data, &rows) {
            errors.push(format!("node {id}: counts {:?} vs routed {:?}", node.counts, counts(data, &rows)));
            continue;
        }
        let depth_ok = p.max_depth.map_or(true, |d| node.depth < d);
        let pure = node.counts.iter().filter(|&&c| c > 0).count() <= 1;
        let expect = if depth_ok && !pure { oracle_split(data, &rows, p.impurity, p.min_samples_leaf.max(1)) } else { None };
        match (&node.split, expect) {
            (None, None) => {}
            (Some(s), Some((a, t, _))) if s.attribute == a && s.threshold == t => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| data.x[i][a] <= t);
                stack.push((s.left, l));
                stack.push((s.right, r));
            }
            (got, want) => errors.push(format!(
                "node {id}: split {:?} vs oracle {:?}",
                got.as_ref().map(|s| (s.attribute, s.threshold)),
                want.map(|(a, t, _)| (a, t))
            )),
        }
    }
    errors
}

fn leaves_below(tree: &Tree, id: usize) -> Vec<usize> {
    match tree.active_split(id) {
        None => vec![id],
        Some(s) => {
            let mut v = leaves_below(tree, s.left);
            v.extend(leaves_below(tree, s.right));
            v
        }
    }
}

/// Weakest-link strength of the current subtree, from node counts alone.
pub fn weakest_link(tree: &Tree) -> Option<f64> {
    let risk = |id: usize| {
        let n = &tree.nodes[id];
        n.n_samples as f64 / tree.n_train as f64 * impurity(tree.params.impurity, &n.counts)
    };
    tree.reachable()
        .into_iter()
        .filter(|&i| tree.active_split(i).is_some())
        .map(|i| {
            let leaves = leaves_below(tree, i);
            let sub: f64 = leaves.iter().map(|&l| risk(l)).sum();
            (risk(i) - sub) / (leaves.len() - 1) as f64
        })
        .reduce(f64::min)
}

/// Pruning path checks: strictly increasing alphas, each alpha equal to the
/// weakest link of the previous subtree, nested subtrees, root last.
pub fn check_path(tree: &Tree) -> Vec<String> {
    let mut errors = Vec::new();
    let path = tree.ccp_path();
    if path.is_empty() {
        return vec!["empty path".into()];
    }
    for w in path.windows(2) {
        let ((a0, t0), (a1, t1)) = (&w[0], &w[1]);
        if a1 <= a0 {
            errors.push(format!("alphas not increasing: {a0} then {a1}"));
        }
        match weakest_link(t0) {
            Some(g) if (g - a1).abs() <= 1e-9 => {}
            other => errors.push(format!("alpha {a1} vs weakest link {other:?}")),
        }
        let outer = t0.reachable();
        if t1.reachable().iter().any(|i| !outer.contains(i)) {
            errors.push(format!("subtree at alpha {a1} is not nested"));
        }
    }
    let last = &path.last().unwrap().1;
    if last.n_leaves() != 1 {
        errors.push(format!("path ends with {} leaves", last.n_leaves()));
    }
    errors
}

pub struct OracleSummary {
    pub datasets: usize,
    pub nodes_checked: usize,
    pub errors: Vec<String>,
}

/// Fits one tree per seed and runs every check.
pub fn run_oracle(seeds: std::ops::Range<u64>) -> OracleSummary {
    let mut s = OracleSummary { datasets: 0, nodes_checked: 0, errors: Vec::new() };
    for seed in seeds {
        let (data, params) = random_dataset(seed);
        let tree = fit_tree(&data, params).expect("fit");
        s.datasets += 1;
        s.nodes_checked += tree.nodes.len();
        s.errors.extend(check_tree(&data, &tree).into_iter().map(|e| format!("seed {seed}: {e}")));
        s.errors.extend(check_path(&tree).into_iter().map(|e| format!("seed {seed}: {e}")));
    }
    s
}

/// `(truth, predicted, classes, precision, recall, f1)` with hand-computed
/// weighted scores; classes with no predictions score zero.
pub fn metric_fixtures() -> Vec<(Vec<usize>, Vec<usize>, usize, f64, f64, f64)> {
    vec![
        (vec![0, 0, 0, 1, 1, 2], vec![0, 0, 1, 1, 2, 2], 3, 0.75, 2.0 / 3.0, 0.4 + 1.0 / 6.0 + 1.0 / 9.0),
        (vec![0, 0, 1, 1], vec![0, 0, 0, 0], 2, 0.25, 0.5, 1.0 / 3.0),
        (vec![0, 1, 1], vec![2, 1, 1], 3, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
        (vec![2, 2, 2, 2], vec![2, 2, 2, 2], 3, 1.0, 1.0, 1.0),
    ]
}

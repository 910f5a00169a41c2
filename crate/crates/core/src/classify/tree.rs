use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impurity {
    Gini,
    Entropy,
}

impl Impurity {
    pub fn of(self, counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let n = n as f64;
        match self {
            Impurity::Gini => 1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>(),
            Impurity::Entropy => -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p.log2()
                })
                .sum::<f64>(),
        }
    }
}

/// Rows of attribute values with class indices `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub n_classes: usize,
    /// Group (examination) of each row; cross-validation keeps a group
    /// inside one fold.
    pub groups: Option<Vec<usize>>,
}

impl Samples {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(AsrError::dim("samples", "rows", x.len(), y.len()));
        }
        let width = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != width) {
            return Err(AsrError::shape("samples", "rows differ in length"));
        }
        if y.iter().any(|&c| c >= n_classes) {
            return Err(AsrError::Config(format!("class index outside 0..{n_classes}")));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AsrError::NonFinite("attribute values".into()));
        }
        Ok(Self {
            x,
            y,
            n_classes,
            groups: None,
        })
    }

    pub fn with_groups(mut self, groups: Vec<usize>) -> Result<Self> {
        if groups.len() != self.y.len() {
            return Err(AsrError::dim("samples", "groups", self.y.len(), groups.len()));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_attributes(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            groups: self.groups.as_ref().map(|g| idx.iter().map(|&i| g[i]).collect()),
        }
    }

    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub attribute: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub counts: Vec<usize>,
    pub impurity: f64,
    pub n_samples: usize,
    pub depth: usize,
    pub split: Option<Split>,
}

impl Node {
    /// Majority class, lowest index on ties.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (k, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub impurity: Impurity,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

/// A fitted tree. Pruning marks internal nodes as collapsed instead of
/// rebuilding, so every subtree on a pruning path shares node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub collapsed: Vec<bool>,
    pub params: TreeParams,
    pub n_attributes: usize,
    pub n_train: usize,
}

/// Best split of the rows `idx`, or `None` when no admissible split
/// exists. Gains are compared with a `1e-12` tolerance so exact ties fall
/// to the lowest attribute and then the lowest threshold.
pub fn best_split(data: &Samples, idx: &[usize], params: &TreeParams) -> Option<(usize, f64, f64)> {
    let n = idx.len();
    let min_leaf = params.min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let total = data.counts(idx);
    let parent = params.impurity.of(&total);
    let mut best: Option<(usize, f64, f64)> = None;
    let mut order = idx.to_vec();
    for a in 0..data.n_attributes() {
        order.sort_by(|&i, &j| data.x[i][a].total_cmp(&data.x[j][a]).then(i.cmp(&j)));
        let mut left = vec![0usize; data.n_classes];
        for k in 0..n - 1 {
            left[data.y[order[k]]] += 1;
            let (lo, hi) = (data.x[order[k]][a], data.x[order[k + 1]][a]);
            let n_left = k + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let child = (n_left as f64 * params.impurity.of(&left) + (n - n_left) as f64 * params.impurity.of(&right)) / n as f64;
            let gain = parent - child;
            let mut threshold = (lo + hi) / 2.0;
            if threshold >= hi {
                threshold = lo;
            }
            if best.map_or(true, |(_, _, g)| gain > g + 1e-12) {
                best = Some((a, threshold, gain));
            }
        }
    }
    best
}

/// Greedy CART induction. Impure nodes are split whenever an admissible
/// split exists, even at zero gain.
pub fn fit_tree(data: &Samples, params: TreeParams) -> Result<Tree> {
    if data.is_empty() {
        return Err(AsrError::Config("cannot fit a tree to zero rows".into()));
    }
    let mut nodes = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    grow(data, &params, idx, 0, &mut nodes);
    let collapsed = vec![false; nodes.len()];
    Ok(Tree {
        nodes,
        collapsed,
        params,
        n_attributes: data.n_attributes(),
        n_train: data.len(),
    })
}

fn grow(data: &Samples, params: &TreeParams, idx: Vec<usize>, depth: usize, nodes: &mut Vec<Node>) -> usize {
    let counts = data.counts(&idx);
    let impurity = params.impurity.of(&counts);
    let id = nodes.len();
    nodes.push(Node {
        counts,
        impurity,
        n_samples: idx.len(),
        depth,
        split: None,
    });
    let depth_ok = params.max_depth.map_or(true, |d| depth < d);
    if impurity <= 0.0 || !depth_ok {
        return id;
    }
    if let Some((a, t, _)) = best_split(data, &idx, params) {
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| data.x[i][a] <= t);
        let left = grow(data, params, l, depth + 1, nodes);
        let right = grow(data, params, r, depth + 1, nodes);
        nodes[id].split = Some(Split {
            attribute: a,
            threshold: t,
            left,
            right,
        });
    }
    id
}

impl Tree {
    /// Split of node `id` in the current (possibly pruned) tree.
    pub fn active_split(&self, id: usize) -> Option<Split> {
        if self.collapsed[id] {
            None
        } else {
            self.nodes[id].split
        }
    }

    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut id = 0;
        while let Some(s) = self.active_split(id) {
            id = if row[s.attribute] <= s.threshold { s.left } else { s.right };
        }
        id
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        self.nodes[self.leaf_of(row)].predicted()
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Vec<usize> {
        x.iter().map(|r| self.predict(r)).collect()
    }

    /// Node ids reachable in the current tree, pre-order.
    pub fn reachable(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some(s) = self.active_split(id) {
                stack.push(s.right);
                stack.push(s.left);
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.reachable().into_iter().filter(|&i| self.active_split(i).is_none()).count()
    }

    pub fn n_splits(&self) -> usize {
        self.reachable().into_iter().filter(|&i| self.active_split(i).is_some()).count()
    }

    pub fn depth(&self) -> usize {
        self.reachable().into_iter().map(|i| self.nodes[i].depth).max().unwrap_or(0)
    }

    /// Weighted impurity `n_t / N * impurity(t)`.
    fn risk(&self, id: usize) -> f64 {
        self.nodes[id].n_samples as f64 / self.n_train as f64 * self.nodes[id].impurity
    }

    /// Sum of leaf risks and leaf count below `id`.
    fn subtree_risk(&self, id: usize) -> (f64, usize) {
        match self.active_split(id) {
            None => (self.risk(id), 1),
            Some(s) => {
                let (rl, nl) = self.subtree_risk(s.left);
                let (rr, nr) = self.subtree_risk(s.right);
                (rl + rr, nl + nr)
            }
        }
    }

    /// Effective alpha of every internal node of the current tree.
    fn link_strengths(&self) -> Vec<(usize, f64)> {
        self.reachable()
            .into_iter()
            .filter(|&i| self.active_split(i).is_some())
            .map(|i| {
                let (r_sub, leaves) = self.subtree_risk(i);
                (i, (self.risk(i) - r_sub) / (leaves - 1) as f64)
            })
            .collect()
    }

    /// Minimal cost-complexity pruning path: `(alpha, subtree)` pairs with
    /// strictly increasing alphas, from the tree at alpha 0 down to the root
    /// alone. All links tied at the weakest strength collapse together.
    pub fn ccp_path(&self) -> Vec<(f64, Tree)> {
        const TIE: f64 = 1e-12;
        let mut current = self.clone();
        let mut path = Vec::new();
        let mut alpha = 0.0f64;
        loop {
            let links = current.link_strengths();
            let weakest = links.iter().map(|&(_, g)| g).fold(f64::INFINITY, f64::min);
            if links.is_empty() || weakest > alpha + TIE {
                path.push((alpha, current.clone()));
                if links.is_empty() {
                    break;
                }
                alpha = weakest;
            }
            for (id, g) in links {
                if g <= alpha + TIE {
                    current.collapsed[id] = true;
                }
            }
        }
        path
    }

    /// Total weighted impurity decrease per attribute, normalised to sum to
    /// one (all zeros for a single leaf).
    pub fn importances(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_attributes];
        for id in self.reachable() {
            if let Some(s) = self.active_split(id) {
                imp[s.attribute] += self.risk(id) - self.risk(s.left) - self.risk(s.right);
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }

    /// Indented text rendering.
    pub fn to_text(&self, names: &[String], classes: &[String]) -> String {
        let mut out = String::new();
        self.text_node(0, 0, names, classes, &mut out);
        out
    }

    fn text_node(&self, id: usize, level: usize, names: &[String], classes: &[String], out: &mut String) {
        let indent = "|   ".repeat(level);
        match self.active_split(id) {
            None => {
                let n = &self.nodes[id];
                let _ = writeln!(out, "{indent}|--- class: {} {:?}", classes[n.predicted()], n.counts);
            }
            Some(s) => {
                let name = &names[s.attribute];
                let _ = writeln!(out, "{indent}|--- {name} <= {:.6}", s.threshold);
                self.text_node(s.left, level + 1, names, classes, out);
                let _ = writeln!(out, "{indent}|--- {name} >  {:.6}", s.threshold);
                self.text_node(s.right, level + 1, names, classes, out);
            }
        }
    }

    /// Graphviz DOT rendering.
    pub fn to_dot(&self, names: &[String], classes: &[String]) -> String {
        let crit = match self.params.impurity {
            Impurity::Gini => "gini",
            Impurity::Entropy => "entropy",
        };
        let mut out = String::from("digraph Tree {\nnode [shape=box, fontname=\"helvetica\"];\n");
        for id in self.reachable() {
            let n = &self.nodes[id];
            let head = match self.active_split(id) {
                Some(s) => format!("{} <= {:.6}\\n", names[s.attribute], s.threshold),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{id} [label=\"{head}{crit} = {:.4}\\nsamples = {}\\nvalue = {:?}\\nclass = {}\"];",
                n.impurity,
                n.n_samples,
                n.counts,
                classes[n.predicted()]
            );
            if let Some(s) = self.active_split(id) {
                let _ = writeln!(out, "{id} -> {} [label=\"yes\"];\n{id} -> {} [label=\"no\"];", s.left, s.right);
            }
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(max_depth: Option<usize>, min_leaf: usize) -> TreeParams {
        TreeParams {
            impurity: Impurity::Gini,
            max_depth,
            min_samples_leaf: min_leaf,
        }
    }

    #[test]
    fn impurity_definitions() {
        assert_eq!(Impurity::Gini.of(&[5, 5]), 0.5);
        assert_eq!(Impurity::Entropy.of(&[5, 5]), 1.0);
        assert_eq!(Impurity::Gini.of(&[4, 0]), 0.0);
    }

    #[test]
    fn separable_threshold() {
        let x: Vec<Vec<f64>> = (1..=10).map(|v| vec![v as f64]).collect();
        let y = (1..=10).map(|v| usize::from(v > 5)).collect();
        let t = fit_tree(&Samples::new(x, y, 2).unwrap(), params(None, 1)).unwrap();
        let s = t.nodes[0].split.unwrap();
        assert_eq!((s.attribute, s.threshold), (0, 5.5));
        assert_eq!(t.nodes[s.left].impurity, 0.0);
        assert_eq!(t.nodes[s.right].impurity, 0.0);
    }

    #[test]
    fn single_class_is_a_leaf() {
        let t = fit_tree(&Samples::new(vec![vec![1.0], vec![2.0]], vec![1, 1], 2).unwrap(), params(None, 1)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict(&[0.0]), 1);
        assert_eq!(t.ccp_path().len(), 1);
    }

    #[test]
    fn xor_needs_zero_gain_root() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![0, 1, 1, 0];
        let t = fit_tree(&Samples::new(x.clone(), y.clone(), 2).unwrap(), params(None, 1)).unwrap();
        assert_eq!(t.predict_all(&x), y);
        let path = t.ccp_path();
        // root strength 0.5/3 is below either child link (0.25), so it goes first
        assert_eq!(path.len(), 2);
        assert_eq!(path.last().unwrap().1.n_leaves(), 1);
    }

    #[test]
    fn depth_and_leaf_limits() {
        let x: Vec<Vec<f64>> = (0..40).map(|v| vec![v as f64, (v * 7 % 13) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|v| (v * 7 % 3) as usize).collect();
        let data = Samples::new(x, y, 3).unwrap();
        let t = fit_tree(&data, params(Some(2), 5)).unwrap();
        assert!(t.depth() <= 2);
        for id in t.reachable() {
            if t.active_split(id).is_none() {
                assert!(t.nodes[id].n_samples >= 5);
            }
        }
    }
}

//! CART regression trees grown level by level on presorted columns.
//!
//! Splits maximize the reduction in squared error (with an optional L2
//! penalty on leaf values, as in regularized boosting). Candidate thresholds
//! are midpoints between consecutive distinct values of a feature; among
//! equal gains the lowest feature index wins, then the lowest threshold.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn constant(value: f64) -> Self {
        Self { nodes: vec![Node::Leaf { value }] }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn leaf_index(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { .. } => return k,
                Node::Split { feature, threshold, left, right } => {
                    k = if row(feature) <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        match self.nodes[self.leaf_index(|j| x[(i, j)])] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.predict_row(x, i)).collect()
    }

    pub(crate) fn scale_leaves(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= factor;
            }
        }
    }

    pub(crate) fn leaf_value(&self, node: usize) -> f64 {
        match self.nodes[node] {
            Node::Leaf { value } => value,
            Node::Split { .. } => panic!("node {node} is not a leaf"),
        }
    }
}

/// Row indices of each column in ascending value order (stable).
#[derive(Debug, Clone)]
pub struct Presorted {
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let order = x
            .column_iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
                idx
            })
            .collect();
        Self { order }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub l2_leaf: f64,
}

/// Output of [`grow`]: the tree and the leaf reached by every row.
pub struct Grown {
    pub tree: Tree,
    pub leaf_of: Vec<usize>,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

const NONE: u32 = u32::MAX;

/// Grows one tree on `target`.
///
/// When `structure` is given only rows flagged `true` choose the splits; leaf
/// values are then fitted on all rows, so the leaf values are the exact
/// penalized least-squares solution for the chosen partition.
pub fn grow(x: &DMatrix<f64>, sorted: &Presorted, target: &[f64], structure: Option<&[bool]>, p: GrowParams) -> Grown {
    let n = x.nrows();
    let in_s = |r: usize| structure.map_or(true, |m| m[r]);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut node_of = vec![0u32; n];
    let mut frontier: Vec<usize> = vec![0];
    let min_leaf = p.min_leaf.max(1);
    let lam = p.l2_leaf.max(0.0);
    let score = |s: f64, c: f64| s * s / (c + lam);

    for _depth in 0..p.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot = vec![NONE; nodes.len()];
        for (k, &id) in frontier.iter().enumerate() {
            slot[id] = k as u32;
        }
        let nf = frontier.len();
        let mut cnt = vec![0usize; nf];
        let mut sum = vec![0.0; nf];
        let mut sq = vec![0.0; nf];
        for r in 0..n {
            if !in_s(r) {
                continue;
            }
            let k = slot[node_of[r] as usize];
            if k != NONE {
                let k = k as usize;
                cnt[k] += 1;
                sum[k] += target[r];
                sq[k] += target[r] * target[r];
            }
        }
        let mut best: Vec<Option<Best>> = vec![None; nf];
        let mut lc = vec![0usize; nf];
        let mut ls = vec![0.0; nf];
        let mut last = vec![f64::NEG_INFINITY; nf];
        for (f, order) in sorted.order.iter().enumerate() {
            lc.iter_mut().for_each(|v| *v = 0);
            ls.iter_mut().for_each(|v| *v = 0.0);
            let col = x.column(f);
            for &r in order {
                let r = r as usize;
                if !in_s(r) {
                    continue;
                }
                let k = slot[node_of[r] as usize];
                if k == NONE {
                    continue;
                }
                let k = k as usize;
                let v = col[r];
                if lc[k] > 0 && v > last[k] {
                    let rc = cnt[k] - lc[k];
                    if lc[k] >= min_leaf && rc >= min_leaf {
                        let gain = score(ls[k], lc[k] as f64) + score(sum[k] - ls[k], rc as f64)
                            - score(sum[k], cnt[k] as f64);
                        if best[k].map_or(true, |b| gain > b.gain) {
                            let mut threshold = last[k] + (v - last[k]) / 2.0;
                            if threshold >= v {
                                threshold = last[k];
                            }
                            best[k] = Some(Best { gain, feature: f, threshold });
                        }
                    }
                }
                lc[k] += 1;
                ls[k] += target[r];
                last[k] = v;
            }
        }
        let mut next = Vec::new();
        for (k, &id) in frontier.iter().enumerate() {
            let Some(b) = best[k] else { continue };
            let node_sse = sq[k] - sum[k] * sum[k] / cnt[k] as f64;
            if !(b.gain > 1e-12 * node_sse.abs().max(1e-300)) {
                continue;
            }
            let left = nodes.len();
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[id] = Node::Split { feature: b.feature, threshold: b.threshold, left, right: left + 1 };
            next.push(left);
            next.push(left + 1);
        }
        for r in 0..n {
            if let Node::Split { feature, threshold, left, right } = nodes[node_of[r] as usize] {
                node_of[r] = if x[(r, feature)] <= threshold { left as u32 } else { right as u32 };
            }
        }
        frontier = next;
    }

    let mut leaf_sum = vec![0.0; nodes.len()];
    let mut leaf_cnt = vec![0usize; nodes.len()];
    for r in 0..n {
        leaf_sum[node_of[r] as usize] += target[r];
        leaf_cnt[node_of[r] as usize] += 1;
    }
    for (id, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf { value } = node {
            let c = leaf_cnt[id] as f64;
            *value = if c + lam > 0.0 { leaf_sum[id] / (c + lam) } else { 0.0 };
        }
    }
    Grown { tree: Tree { nodes }, leaf_of: node_of.into_iter().map(|v| v as usize).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(depth: usize) -> GrowParams {
        GrowParams { max_depth: depth, min_leaf: 1, l2_leaf: 0.0 }
    }

    #[test]
    fn single_split_recovers_cluster_means() {
        let xs = [0.1, 0.2, 0.3, 0.9, 1.0, 1.1];
        let ys = [1.0, 2.0, 3.0, 10.0, 11.0, 12.0];
        let x = DMatrix::from_column_slice(6, 1, &xs);
        let g = grow(&x, &Presorted::new(&x), &ys, None, params(1));
        assert_eq!(g.tree.predict(&x), vec![2.0, 2.0, 2.0, 11.0, 11.0, 11.0]);
        match g.tree.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!((threshold - 0.6).abs() < 1e-12);
            }
            _ => panic!("root should split"),
        }
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        let col = [0.0, 0.0, 1.0, 1.0];
        let x = DMatrix::from_fn(4, 3, |i, _| col[i]);
        let y = [0.0, 0.0, 5.0, 5.0];
        let g = grow(&x, &Presorted::new(&x), &y, None, params(1));
        assert!(matches!(g.tree.nodes()[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn depth_zero_is_the_mean() {
        let x = DMatrix::from_fn(5, 2, |i, j| (i * j) as f64);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let g = grow(&x, &Presorted::new(&x), &y, None, params(0));
        assert_eq!(g.tree.predict(&x), vec![3.0; 5]);
    }

    #[test]
    fn min_leaf_is_respected() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..10).map(|i| if i == 0 { 100.0 } else { 0.0 }).collect();
        let g = grow(&x, &Presorted::new(&x), &y, None, GrowParams { max_depth: 1, min_leaf: 3, l2_leaf: 0.0 });
        let pred = g.tree.predict(&x);
        assert_eq!(pred.iter().filter(|v| **v == pred[0]).count() >= 3, true);
    }

    #[test]
    fn leaf_penalty_shrinks_values() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, 1.0]);
        let y = [0.0, 0.0, 6.0, 6.0];
        let g = grow(&x, &Presorted::new(&x), &y, None, GrowParams { max_depth: 1, min_leaf: 1, l2_leaf: 2.0 });
        assert_eq!(g.tree.predict(&x), vec![0.0, 0.0, 3.0, 3.0]);
        // A penalty this large makes the split unprofitable on a weaker signal.
        let y = [2.0, 2.0, 4.0, 4.0];
        let g = grow(&x, &Presorted::new(&x), &y, None, GrowParams { max_depth: 1, min_leaf: 1, l2_leaf: 2.0 });
        assert_eq!(g.tree.predict(&x), vec![2.0; 4]);
    }
}

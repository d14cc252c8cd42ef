//! Exact binary CART on Gini impurity.
//!
//! Rows are presorted once per feature; each tree then works on per-feature
//! segments of the sorted orders that are stably partitioned at every split,
//! so no node ever sorts. Bootstrap resampling is expressed as integer row
//! weights, and all sample counts (including `min_samples_*`) are weighted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scaler::Columns;
use super::RFHyperParams;
use crate::error::{Error, Result};

/// Gini impurity of a class-count histogram. Empty input gives 0.
pub fn gini(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / n) * (c / n)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        samples: f64,
        /// Weighted impurity decrease `n·G − n_l·G_l − n_r·G_r`.
        impurity_decrease: f64,
    },
    Leaf {
        /// Fraction of (weighted) training samples in the positive class.
        proportion: f64,
        samples: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub n_features: usize,
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    fn leaf_for(&self, x: &[f64]) -> &TreeNode {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                leaf => return leaf,
            }
        }
    }

    /// Positive-class proportion of the leaf reached by `x`.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        match self.leaf_for(x) {
            TreeNode::Leaf { proportion, .. } => *proportion,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    /// Hard prediction: positive iff the leaf proportion exceeds ½.
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.predict_proba(x) > 0.5)
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf {
                proportion,
                samples,
            } => Some((*proportion, *samples)),
            TreeNode::Split { .. } => None,
        })
    }

    /// Unnormalized impurity-decrease importance, each split weighted by
    /// its share of the root's samples.
    pub fn raw_importances(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        let root = match &self.nodes[0] {
            TreeNode::Split { samples, .. } | TreeNode::Leaf { samples, .. } => *samples,
        };
        for node in &self.nodes {
            if let TreeNode::Split {
                feature,
                impurity_decrease,
                ..
            } = node
            {
                out[*feature] += impurity_decrease / root;
            }
        }
        out
    }
}

/// Per-feature row orders sorted by value (ties by row index).
pub(crate) struct Presorted {
    order: Vec<Vec<u32>>,
    /// `rank[f][r]` is the position of row `r` in `order[f]`.
    rank: Vec<Vec<u32>>,
}

impl Presorted {
    pub(crate) fn new(x: &Columns) -> Self {
        let order: Vec<Vec<u32>> = x
            .cols
            .iter()
            .map(|col| {
                let mut o: Vec<u32> = (0..x.n_rows as u32).collect();
                o.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                o
            })
            .collect();
        let rank = order
            .iter()
            .map(|o| {
                let mut rk = vec![0u32; o.len()];
                for (i, &r) in o.iter().enumerate() {
                    rk[r as usize] = i as u32;
                }
                rk
            })
            .collect();
        Self { order, rank }
    }
}

pub(crate) fn check_training_set(x: &Columns, y: &[u8]) -> Result<()> {
    if y.len() != x.n_rows || x.cols.iter().any(|c| c.len() != x.n_rows) {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            y.len(),
            x.n_rows
        )));
    }
    if x.n_rows == 0 || x.n_features() == 0 {
        return Err(Error::EmptyDataset);
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Fits one tree on all rows with unit weights.
pub fn fit_tree<R: Rng>(
    x: &Columns,
    y: &[u8],
    hp: &RFHyperParams,
    rng: &mut R,
) -> Result<DecisionTree> {
    check_training_set(x, y)?;
    let pre = Presorted::new(x);
    Ok(fit_weighted(x, y, &pre, &vec![1; x.n_rows], hp, rng))
}

struct Task {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
    c0: f64,
    c1: f64,
}

#[derive(Clone, Copy)]
struct Cut {
    score: f64,
    pos: usize,
    threshold: f64,
    l0: f64,
    l1: f64,
}

/// How candidate rows are kept in feature order while growing. Both layouts
/// grow identical trees; the forced variants exist for tests.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) enum Layout {
    Auto,
    /// Every feature's presorted order is partitioned at each split.
    Presorted,
    /// Only the sampled features are sorted, node by node.
    NodeSort,
}

#[derive(Default)]
struct ScanBuf {
    l0: Vec<f64>,
    l1: Vec<f64>,
    x: Vec<f64>,
    score: Vec<f64>,
}

/// Best cut of rows `s` (sorted by `col`, ties by row index).
#[allow(clippy::too_many_arguments)]
fn best_cut(
    s: &[u32],
    col: &[f64],
    y: &[u8],
    w: &[f64],
    c0: f64,
    c1: f64,
    min_leaf: f64,
    buf: &mut ScanBuf,
) -> Option<Cut> {
    let m = s.len();
    if m < 2 {
        return None;
    }
    buf.l0.resize(m, 0.0);
    buf.l1.resize(m, 0.0);
    buf.x.resize(m, 0.0);
    buf.score.resize(m - 1, 0.0);
    let (mut l0, mut l1) = (0.0, 0.0);
    for (j, &r) in s.iter().enumerate() {
        let r = r as usize;
        let pos = f64::from(y[r]) * w[r];
        l1 += pos;
        l0 += w[r] - pos;
        buf.l0[j] = l0;
        buf.l1[j] = l1;
        buf.x[j] = col[r];
    }
    let n = c0 + c1;
    let cand = buf.l0[..m - 1]
        .iter()
        .zip(&buf.l1[..m - 1])
        .zip(buf.x[..m - 1].iter().zip(&buf.x[1..]));
    for (out, ((&a, &b), (&xv, &xn))) in buf.score.iter_mut().zip(cand) {
        let nl = a + b;
        let nr = n - nl;
        let (r0, r1) = (c0 - a, c1 - b);
        let score = (a * a + b * b) / nl + (r0 * r0 + r1 * r1) / nr;
        let ok = (xv < xn) & (nl >= min_leaf) & (nr >= min_leaf);
        *out = if ok { score } else { f64::NEG_INFINITY };
    }
    let (mut at, mut score) = (0, f64::NEG_INFINITY);
    for (j, &sc) in buf.score.iter().enumerate() {
        let better = sc > score;
        at = if better { j } else { at };
        score = if better { sc } else { score };
    }
    if score == f64::NEG_INFINITY {
        return None;
    }
    let (xv, xn) = (buf.x[at], buf.x[at + 1]);
    let mid = xv + (xn - xv) / 2.0;
    Some(Cut {
        score,
        pos: at + 1,
        threshold: if mid < xn { mid } else { xv },
        l0: buf.l0[at],
        l1: buf.l1[at],
    })
}

/// Stable in-place partition of `s` by `go_left`; returns the left count.
fn partition(s: &mut [u32], go_left: &[bool], scratch: &mut [u32]) -> usize {
    let (mut li, mut ri) = (0, 0);
    for j in 0..s.len() {
        let r = s[j];
        let left = go_left[r as usize];
        s[li] = r;
        scratch[ri] = r;
        li += usize::from(left);
        ri += usize::from(!left);
    }
    s[li..].copy_from_slice(&scratch[..ri]);
    li
}

/// Fits one tree where row `i` counts `weights[i]` times. Rows with weight 0
/// are ignored.
pub(crate) fn fit_weighted<R: Rng>(
    x: &Columns,
    y: &[u8],
    pre: &Presorted,
    weights: &[u32],
    hp: &RFHyperParams,
    rng: &mut R,
) -> DecisionTree {
    fit_with_layout(x, y, pre, weights, hp, rng, Layout::Auto)
}

pub(crate) fn fit_with_layout<R: Rng>(
    x: &Columns,
    y: &[u8],
    pre: &Presorted,
    weights: &[u32],
    hp: &RFHyperParams,
    rng: &mut R,
    layout: Layout,
) -> DecisionTree {
    let n_features = x.n_features();
    let present = weights.iter().filter(|&&w| w > 0).count();
    let k = hp.max_features.count(n_features);
    // Sorting k features per node beats partitioning all of them when
    // k·log2(rows) is below the feature count.
    let node_sort = match layout {
        Layout::Auto => (k as f64) * (present.max(2) as f64).log2() < n_features as f64,
        Layout::Presorted => false,
        Layout::NodeSort => true,
    };
    let n_lists = if node_sort { 1 } else { n_features };
    // Branch-free filter of the present rows; a write past the end of one
    // list lands on the next list's first slot, which is rewritten when that
    // list is filled.
    let mut seg = vec![0u32; n_lists * present + 1];
    for (f, order) in pre.order.iter().take(n_lists).enumerate() {
        let mut at = f * present;
        for &r in order {
            seg[at] = r;
            at += usize::from(weights[r as usize] > 0);
        }
    }
    seg.truncate(n_lists * present);
    let w: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let min_leaf = hp.min_samples_leaf as f64;
    let min_split = hp.min_samples_split as f64;

    let mut go_left = vec![false; x.n_rows];
    let mut scratch = vec![0u32; present];
    let mut sorted: Vec<u32> = Vec::with_capacity(present);
    let mut buf = ScanBuf::default();
    let mut feats: Vec<usize> = (0..n_features).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);

    let (mut c0, mut c1) = (0.0, 0.0);
    for &r in &seg[..present] {
        if y[r as usize] == 1 {
            c1 += w[r as usize];
        } else {
            c0 += w[r as usize];
        }
    }
    let leaf_like = |depth: usize, c0: f64, c1: f64| {
        depth >= hp.max_depth || c0 + c1 < min_split || c0 == 0.0 || c1 == 0.0
    };

    let mut nodes = vec![TreeNode::Leaf {
        proportion: 0.0,
        samples: 0.0,
    }];
    let mut stack = vec![Task {
        node: 0,
        lo: 0,
        hi: present,
        depth: 0,
        c0,
        c1,
    }];
    while let Some(t) = stack.pop() {
        let n = t.c0 + t.c1;
        let leaf = TreeNode::Leaf {
            proportion: t.c1 / n,
            samples: n,
        };
        if leaf_like(t.depth, t.c0, t.c1) {
            nodes[t.node] = leaf;
            continue;
        }

        // Partial Fisher-Yates over a persistent permutation.
        for i in 0..k {
            let j = rng.random_range(i..n_features);
            feats.swap(i, j);
        }
        chosen.clear();
        chosen.extend_from_slice(&feats[..k]);
        chosen.sort_unstable();

        let mut best: Option<(usize, Cut)> = None;
        for &f in &chosen {
            let col = &x.cols[f];
            let s = if node_sort {
                let (rank, order) = (&pre.rank[f], &pre.order[f]);
                sorted.clear();
                sorted.extend(seg[t.lo..t.hi].iter().map(|&r| rank[r as usize]));
                sorted.sort_unstable();
                for v in sorted.iter_mut() {
                    *v = order[*v as usize];
                }
                &sorted[..]
            } else {
                &seg[f * present + t.lo..f * present + t.hi]
            };
            if let Some(c) = best_cut(s, col, y, &w, t.c0, t.c1, min_leaf, &mut buf) {
                if best.is_none_or(|(_, b)| c.score > b.score) {
                    best = Some((f, c));
                }
            }
        }
        let Some((feature, b)) = best else {
            nodes[t.node] = leaf;
            continue;
        };

        let left = nodes.len();
        let right = left + 1;
        nodes.push(leaf.clone());
        nodes.push(leaf);
        let decrease = (b.score - (t.c0 * t.c0 + t.c1 * t.c1) / n).max(0.0);
        nodes[t.node] = TreeNode::Split {
            feature,
            threshold: b.threshold,
            left,
            right,
            samples: n,
            impurity_decrease: decrease,
        };
        let mid = t.lo + b.pos;
        let (r0, r1) = (t.c0 - b.l0, t.c1 - b.l1);
        let children_need_rows =
            !leaf_like(t.depth + 1, b.l0, b.l1) || !leaf_like(t.depth + 1, r0, r1);
        if children_need_rows {
            let col = &x.cols[feature];
            for &r in &seg[t.lo..t.hi] {
                go_left[r as usize] = col[r as usize] <= b.threshold;
            }
            for g in 0..n_lists {
                let s = &mut seg[g * present + t.lo..g * present + t.hi];
                let n_left = partition(s, &go_left, &mut scratch);
                debug_assert_eq!(n_left, b.pos);
            }
        }
        stack.push(Task {
            node: right,
            lo: mid,
            hi: t.hi,
            depth: t.depth + 1,
            c0: r0,
            c1: r1,
        });
        stack.push(Task {
            node: left,
            lo: t.lo,
            hi: mid,
            depth: t.depth + 1,
            c0: b.l0,
            c1: b.l1,
        });
    }
    DecisionTree { n_features, nodes }
}

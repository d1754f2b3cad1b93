//! CART decision trees and a bagged random forest with Gini splits.
//!
//! The forest is both a black box to explain and, through its impurity
//! bookkeeping, the reference ranking that explanations are scored against.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, CpathRng};
use crate::tabular::{Dataset, LabelVector};

/// Forest hyperparameters. `None` means unbounded depth / `⌈√p⌉` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            max_depth: None,
            mtry: None,
            min_leaf: 1,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
            .clamp(1, p)
    }
}

/// Gini impurity `1 − Σ (c_k / n)²` of a class-count vector.
pub fn gini_impurity(counts: &[u32]) -> f64 {
    let n: u64 = counts.iter().map(|&c| c as u64).sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Index of the largest count; ties go to the lowest index.
fn argmax_lowest(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Class counts of the (bootstrap) samples reaching this node.
    pub counts: Vec<u32>,
    pub impurity: f64,
    pub split: Option<Split>,
    /// Majority class (1-based).
    pub class: u32,
}

impl TreeNode {
    pub fn n_samples(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// A binary tree stored as a flat node array; node 0 is the root.
/// Rows go left when `value <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], at: usize) -> usize {
            match nodes[at].split {
                Some(s) => 1 + go(nodes, s.left).max(go(nodes, s.right)),
                None => 0,
            }
        }
        go(&self.nodes, 0)
    }

    #[inline]
    fn leaf_for(&self, data: &Dataset, row: usize) -> &TreeNode {
        let mut node = &self.nodes[0];
        while let Some(s) = node.split {
            node = if data.value(row, s.feature) <= s.threshold {
                &self.nodes[s.left]
            } else {
                &self.nodes[s.right]
            };
        }
        node
    }

    pub fn predict_row(&self, data: &Dataset, row: usize) -> u32 {
        self.leaf_for(data, row).class
    }

    /// Impurity decrease per feature, weighted by each node's share of the
    /// root sample count.
    pub fn impurity_decrease(&self, p: usize) -> Vec<f64> {
        let mut scores = vec![0.0; p];
        let total = self.root().n_samples() as f64;
        for node in &self.nodes {
            if let Some(s) = node.split {
                let (l, r) = (&self.nodes[s.left], &self.nodes[s.right]);
                let n = node.n_samples() as f64;
                let weighted_children = (l.n_samples() as f64 * l.impurity
                    + r.n_samples() as f64 * r.impurity)
                    / n;
                scores[s.feature] += (node.impurity - weighted_children) * n / total;
            }
        }
        scores
    }

    fn validate(&self, p: usize, g: u32) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidConfig("tree without nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.counts.len() != g as usize || node.class == 0 || node.class > g {
                return Err(Error::InvalidConfig(format!("node {i} has bad class data")));
            }
            match node.split {
                Some(s) => {
                    if s.feature >= p
                        || s.left <= i
                        || s.right <= i
                        || s.left >= self.nodes.len()
                        || s.right >= self.nodes.len()
                    {
                        return Err(Error::InvalidConfig(format!("node {i} has bad split")));
                    }
                }
                None => {
                    if node.n_samples() == 0 {
                        return Err(Error::InvalidConfig(format!("leaf {i} is empty")));
                    }
                }
            }
        }
        Ok(())
    }
}

struct TreeBuilder<'a> {
    data: &'a Dataset,
    labels: &'a [u32],
    n_classes: usize,
    max_depth: Option<usize>,
    mtry: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
    // scratch for sorting candidate columns
    order: Vec<(f64, u32)>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn counts(&self, rows: &[usize]) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_classes];
        for &r in rows {
            counts[self.labels[r] as usize - 1] += 1;
        }
        counts
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut CpathRng) -> usize {
        let counts = self.counts(rows);
        let impurity = gini_impurity(&counts);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            class: argmax_lowest(&counts) as u32 + 1,
            counts,
            impurity,
            split: None,
        });

        let at_depth_cap = self.max_depth.is_some_and(|d| depth >= d);
        if impurity <= 0.0 || at_depth_cap || rows.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(rows, impurity, rng) else {
            return id;
        };

        let (feature, threshold) = (best.feature, best.threshold);
        let data = self.data;
        let mid = partition(rows, |&r| data.value(r, feature) <= threshold);
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[id].split = Some(Split {
            feature,
            threshold,
            left,
            right,
        });
        id
    }

    /// Best Gini split over `mtry` sampled features. Candidates are scanned
    /// in ascending feature then threshold order and only a strictly larger
    /// gain replaces the incumbent, so ties resolve to the lowest feature and
    /// lowest threshold.
    fn best_split(&mut self, rows: &[usize], impurity: f64, rng: &mut CpathRng) -> Option<Candidate> {
        let p = self.data.n_features();
        let mut features = index::sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();

        let n = rows.len();
        let parent = self.counts(rows);
        let mut best: Option<Candidate> = None;
        for feature in features {
            let col = self.data.column(feature);
            self.order.clear();
            self.order
                .extend(rows.iter().map(|&r| (col[r], self.labels[r])));
            self.order.sort_by(|a, b| a.0.total_cmp(&b.0));

            let mut left = vec![0u32; self.n_classes];
            for i in 0..n - 1 {
                left[self.order[i].1 as usize - 1] += 1;
                let (lo, hi) = (self.order[i].0, self.order[i + 1].0);
                if lo == hi {
                    continue;
                }
                let n_left = i + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf || n_right < self.min_leaf {
                    continue;
                }
                let weighted = weighted_child_impurity(&left, &parent, n_left, n_right);
                let gain = impurity - weighted;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(Candidate {
                        gain,
                        feature,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

fn weighted_child_impurity(left: &[u32], parent: &[u32], n_left: usize, n_right: usize) -> f64 {
    let (nl, nr) = (n_left as f64, n_right as f64);
    let mut sq_left = 0.0;
    let mut sq_right = 0.0;
    for (&l, &t) in left.iter().zip(parent) {
        let r = (t - l) as f64;
        sq_left += (l as f64) * (l as f64);
        sq_right += r * r;
    }
    let gl = 1.0 - sq_left / (nl * nl);
    let gr = 1.0 - sq_right / (nr * nr);
    (nl * gl + nr * gr) / (nl + nr)
}

/// Stable-order partition; returns the number of elements satisfying `pred`.
fn partition<T: Copy>(items: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let (yes, no): (Vec<T>, Vec<T>) = items.iter().partition(|x| pred(x));
    let mid = yes.len();
    items[..mid].copy_from_slice(&yes);
    items[mid..].copy_from_slice(&no);
    mid
}

/// Per-feature mean decrease in Gini impurity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniImportance {
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "ForestDump")]
pub struct RandomForest {
    config: ForestConfig,
    n_features: usize,
    n_classes: u32,
    trees: Vec<DecisionTree>,
    #[serde(skip)]
    compiled: Compiled,
}

#[derive(Deserialize)]
struct ForestDump {
    config: ForestConfig,
    n_features: usize,
    n_classes: u32,
    trees: Vec<DecisionTree>,
}

impl From<ForestDump> for RandomForest {
    fn from(d: ForestDump) -> Self {
        RandomForest {
            compiled: Compiled::new(&d.trees),
            config: d.config,
            n_features: d.n_features,
            n_classes: d.n_classes,
            trees: d.trees,
        }
    }
}

impl PartialEq for RandomForest {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.n_features == other.n_features
            && self.n_classes == other.n_classes
            && self.trees == other.trees
    }
}

#[derive(Debug, Clone, Copy)]
struct FlatNode {
    threshold: f64,
    feature: u32,
    /// Left child; the right child follows it. Leaves point at themselves
    /// with an infinite threshold, so descending past a leaf is a no-op.
    next: u32,
}

/// Inference layout: every tree in one array, siblings adjacent.
#[derive(Debug, Clone, Default)]
struct Compiled {
    nodes: Vec<FlatNode>,
    /// Class of each leaf node, 0 for internal nodes.
    class: Vec<u32>,
    roots: Vec<u32>,
    depths: Vec<usize>,
}

const LANES: usize = 4;

impl Compiled {
    fn new(trees: &[DecisionTree]) -> Self {
        let blank = FlatNode {
            threshold: f64::INFINITY,
            feature: 0,
            next: 0,
        };
        let total = trees.iter().map(|t| t.nodes.len()).sum();
        let mut out = Compiled {
            nodes: Vec::with_capacity(total),
            class: Vec::with_capacity(total),
            roots: Vec::with_capacity(trees.len()),
            depths: Vec::with_capacity(trees.len()),
        };
        let mut queue = std::collections::VecDeque::new();
        for tree in trees {
            out.roots.push(out.nodes.len() as u32);
            out.depths.push(tree.depth());
            queue.push_back((0usize, out.nodes.len()));
            out.nodes.push(blank);
            out.class.push(0);
            while let Some((src, dst)) = queue.pop_front() {
                let node = &tree.nodes[src];
                match node.split {
                    Some(s) => {
                        let left = out.nodes.len();
                        out.nodes.extend([blank, blank]);
                        out.class.extend([0, 0]);
                        queue.push_back((s.left, left));
                        queue.push_back((s.right, left + 1));
                        out.nodes[dst] = FlatNode {
                            threshold: s.threshold,
                            feature: s.feature as u32,
                            next: left as u32,
                        };
                    }
                    None => {
                        out.nodes[dst].next = dst as u32;
                        out.class[dst] = node.class;
                    }
                }
            }
        }
        out
    }

    /// Adds one vote per row (row-major `rows`, `p` wide) for tree `t`.
    /// Rows descend in lockstep groups to overlap their memory loads.
    fn vote_tree(&self, t: usize, rows: &[f64], p: usize, g: usize, votes: &mut [u32]) {
        let root = self.roots[t] as usize;
        let depth = self.depths[t];
        let n = rows.len() / p;
        let mut base = 0;
        while base < n {
            let m = LANES.min(n - base);
            let mut at = [root; LANES];
            for _ in 0..depth {
                for (lane, idx) in at.iter_mut().enumerate().take(m) {
                    let node = self.nodes[*idx];
                    let v = rows[(base + lane) * p + node.feature as usize];
                    *idx = node.next as usize + (v > node.threshold) as usize;
                }
            }
            for (lane, &idx) in at.iter().enumerate().take(m) {
                votes[(base + lane) * g + self.class[idx] as usize - 1] += 1;
            }
            base += m;
        }
    }
}

impl RandomForest {
    /// Fits `n_trees` CART trees, each on its own bootstrap sample drawn
    /// from substream `tree_index` of the configured seed.
    pub fn train(data: &Dataset, labels: &LabelVector, config: &ForestConfig) -> Result<Self> {
        if labels.len() != data.n_rows() {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: data.n_rows(),
            });
        }
        if config.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be at least 1".into()));
        }
        if config.min_leaf == 0 {
            return Err(Error::InvalidConfig("min_leaf must be at least 1".into()));
        }
        let p = data.n_features();
        if let Some(m) = config.mtry {
            if m == 0 || m > p {
                return Err(Error::InvalidConfig(format!("mtry {m} outside 1..={p}")));
            }
        }
        let first = labels.labels()[0];
        if labels.labels().iter().all(|&l| l == first) {
            return Err(Error::SingleClass);
        }

        let mtry = config.resolved_mtry(p);
        let n = data.n_rows();
        let trees: Vec<DecisionTree> = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = substream(config.seed, t as u64);
                let mut rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut builder = TreeBuilder {
                    data,
                    labels: labels.labels(),
                    n_classes: labels.n_classes() as usize,
                    max_depth: config.max_depth,
                    mtry,
                    min_leaf: config.min_leaf,
                    nodes: Vec::new(),
                    order: Vec::with_capacity(n),
                };
                builder.grow(&mut rows, 0, &mut rng);
                DecisionTree {
                    nodes: builder.nodes,
                }
            })
            .collect();
        Ok(RandomForest {
            config: config.clone(),
            n_features: p,
            n_classes: labels.n_classes(),
            compiled: Compiled::new(&trees),
            trees,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    fn check_width(&self, data: &Dataset) -> Result<()> {
        if data.n_features() != self.n_features {
            return Err(Error::ColumnCountMismatch {
                expected: self.n_features,
                found: data.n_features(),
            });
        }
        Ok(())
    }

    /// Row-major `n × g` vote counts. Trees form the outer loop so each
    /// tree stays in cache while every row passes through it.
    fn vote_table(&self, data: &Dataset) -> Vec<u32> {
        let (n, p, g) = (data.n_rows(), self.n_features, self.n_classes as usize);
        let mut rows = vec![0.0; n * p];
        for j in 0..p {
            for (i, &v) in data.column(j).iter().enumerate() {
                rows[i * p + j] = v;
            }
        }
        let mut votes = vec![0u32; n * g];
        for t in 0..self.compiled.roots.len() {
            self.compiled.vote_tree(t, &rows, p, g, &mut votes);
        }
        votes
    }

    /// Majority vote over trees; ties go to the lowest class id.
    pub fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        self.check_width(data)?;
        let labels = self
            .vote_table(data)
            .chunks_exact(self.n_classes as usize)
            .map(|tally| argmax_lowest(tally) as u32 + 1)
            .collect();
        LabelVector::new(labels, self.n_classes)
    }

    /// Fraction of trees voting for `classes[row]`, per row.
    pub fn vote_fractions(&self, data: &Dataset, classes: &[u32]) -> Result<Vec<f64>> {
        self.check_width(data)?;
        if classes.len() != data.n_rows() {
            return Err(Error::LengthMismatch {
                left: classes.len(),
                right: data.n_rows(),
            });
        }
        let n_trees = self.trees.len() as f64;
        Ok(self
            .vote_table(data)
            .chunks_exact(self.n_classes as usize)
            .zip(classes)
            .map(|(tally, &c)| {
                tally
                    .get((c as usize).wrapping_sub(1))
                    .map_or(0.0, |&v| v as f64 / n_trees)
            })
            .collect())
    }

    /// Mean over trees of each tree's per-feature impurity decrease.
    pub fn gini_importance(&self) -> GiniImportance {
        let mut scores = vec![0.0; self.n_features];
        for tree in &self.trees {
            for (s, d) in scores.iter_mut().zip(tree.impurity_decrease(self.n_features)) {
                *s += d;
            }
        }
        let n = self.trees.len() as f64;
        scores.iter_mut().for_each(|s| *s /= n);
        GiniImportance { scores }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let forest: RandomForest = serde_json::from_str(text)?;
        if forest.trees.is_empty() || forest.n_features == 0 || forest.n_classes < 2 {
            return Err(Error::InvalidConfig("forest dump is incomplete".into()));
        }
        for tree in &forest.trees {
            tree.validate(forest.n_features, forest.n_classes)?;
        }
        Ok(forest)
    }

    /// Same forest with trees in a different order (prediction and
    /// importance do not depend on it).
    pub fn with_tree_order(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.trees = order.iter().map(|&i| self.trees[i].clone()).collect();
        out.compiled = Compiled::new(&out.trees);
        out
    }
}

//! The concurrent detector: a CART random forest over check signals.
//!
//! Trees store the training error fraction at each leaf and the forest score
//! is the mean of those fractions, so the decision threshold can be moved
//! continuously to trade false positives against missed errors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CcedError, Result};
use crate::fault::RngStream;
use crate::signals::{BalancedDataset, Label};

pub const FOREST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub tree_count: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means `ceil(sqrt(feature_count))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            tree_count: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(CcedError::domain("tree_count must be at least 1"));
        }
        if self.features_per_split == Some(0) {
            return Err(CcedError::domain("features_per_split must be at least 1"));
        }
        Ok(())
    }

    pub fn resolved_features_per_split(&self, feature_count: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (feature_count as f64).sqrt().ceil() as usize)
            .clamp(1, feature_count.max(1))
    }
}

/// Rows with `feature < threshold` go left, `>=` goes right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GiniSplit {
    pub feature: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Node impurity times node size, as the exact fraction `2e(n-e) / n`.
#[derive(Debug, Clone, Copy)]
struct Weighted {
    num: u128,
    den: u128,
}

impl Weighted {
    fn node(n: u64, e: u64) -> Self {
        Self {
            num: 2 * e as u128 * (n - e) as u128,
            den: n.max(1) as u128,
        }
    }

    fn children(nl: u64, el: u64, nr: u64, er: u64) -> Self {
        let (nl, el, nr, er) = (nl as u128, el as u128, nr as u128, er as u128);
        Self {
            num: 2 * (el * (nl - el) * nr + er * (nr - er) * nl),
            den: nl * nr,
        }
    }

    fn lt(self, other: Self) -> bool {
        self.num * other.den < other.num * self.den
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Exhaustive best Gini split of `rows` over `candidate_features`.
///
/// Thresholds are midpoints between consecutive distinct values. Ties go to
/// the lower feature index, then the lower threshold. Returns `None` when no
/// threshold lowers the impurity.
pub fn best_gini_split(
    features: &[Vec<f32>],
    is_error: &[bool],
    rows: &[usize],
    candidate_features: &[usize],
) -> Option<GiniSplit> {
    let n = rows.len() as u64;
    if n < 2 {
        return None;
    }
    let e = rows.iter().filter(|r| is_error[**r]).count() as u64;
    let parent = Weighted::node(n, e);

    let mut candidates = candidate_features.to_vec();
    candidates.sort_unstable();
    candidates.dedup();

    let mut best: Option<(Weighted, usize, f64)> = None;
    let mut column: Vec<(f32, bool)> = Vec::with_capacity(rows.len());
    for &f in &candidates {
        column.clear();
        column.extend(rows.iter().map(|r| (features[*r][f], is_error[*r])));
        column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

        let mut el = 0u64;
        for i in 0..column.len() - 1 {
            if column[i].1 {
                el += 1;
            }
            let (lo, hi) = (column[i].0, column[i + 1].0);
            if lo == hi || lo.is_nan() || hi.is_nan() {
                continue;
            }
            let nl = i as u64 + 1;
            let w = Weighted::children(nl, el, n - nl, e - el);
            if best.as_ref().is_none_or(|b| w.lt(b.0)) {
                best = Some((w, f, (lo as f64 + hi as f64) / 2.0));
            }
        }
    }
    let (w, feature, threshold) = best?;
    if !w.lt(parent) {
        return None;
    }
    Some(GiniSplit {
        feature,
        threshold,
        impurity_decrease: (parent.value() - w.value()) / n as f64,
    })
}

/// Flat tree node. A split sends `x[feature] >= threshold` to `left + 1` and
/// everything else to `left`. A leaf has a NaN threshold and `left` pointing
/// at itself, so traversal can run a fixed number of steps per tree with no
/// data-dependent branches.
#[derive(Debug, Clone, Copy)]
struct Node {
    feature: u32,
    left: u32,
    threshold: f64,
    error_fraction: f64,
    sample_count: u32,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.feature == other.feature
            && self.left == other.left
            && self.threshold.to_bits() == other.threshold.to_bits()
            && self.error_fraction.to_bits() == other.error_fraction.to_bits()
            && self.sample_count == other.sample_count
    }
}

impl Node {
    fn leaf(slot: usize, error_fraction: f64, sample_count: usize) -> Self {
        Node {
            feature: 0,
            left: slot as u32,
            threshold: f64::NAN,
            error_fraction,
            sample_count: sample_count as u32,
        }
    }

    fn split(feature: usize, threshold: f64, left: usize) -> Self {
        Node {
            feature: feature as u32,
            left: left as u32,
            threshold,
            error_fraction: 0.0,
            sample_count: 0,
        }
    }

    fn is_leaf(&self) -> bool {
        self.threshold.is_nan()
    }
}

#[inline]
fn goes_right(x: f32, threshold: f64) -> bool {
    x as f64 >= threshold
}

/// One decision tree, stored flat with the root at index 0 and the two
/// children of every split in adjacent slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    depth: usize,
}

impl Tree {
    fn new(nodes: Vec<Node>) -> Tree {
        fn walk(nodes: &[Node], i: usize) -> usize {
            let n = nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + walk(nodes, n.left as usize).max(walk(nodes, n.left as usize + 1))
            }
        }
        let depth = walk(&nodes, 0);
        Tree { nodes, depth }
    }

    /// Error fraction of the leaf that `x` reaches.
    #[inline]
    pub fn leaf_value(&self, x: &[f32]) -> f64 {
        let mut i = 0usize;
        for _ in 0..self.depth {
            let n = &self.nodes[i];
            i = n.left as usize + goes_right(x[n.feature as usize], n.threshold) as usize;
        }
        self.nodes[i].error_fraction
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Error fractions of every leaf, in node order.
    pub fn leaf_fractions(&self) -> Vec<f64> {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.error_fraction).collect()
    }

    /// Replace leaf error fractions, in node order.
    pub fn with_leaf_fractions(&self, fractions: &[f64]) -> Tree {
        let mut it = fractions.iter();
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                if n.is_leaf() {
                    Node {
                        error_fraction: *it.next().expect("one fraction per leaf"),
                        ..*n
                    }
                } else {
                    *n
                }
            })
            .collect();
        Tree::new(nodes)
    }

    fn to_nested(&self, i: usize) -> TreeNode {
        let n = self.nodes[i];
        if n.is_leaf() {
            TreeNode::Leaf {
                error_fraction: n.error_fraction,
                sample_count: n.sample_count as usize,
            }
        } else {
            TreeNode::Split {
                feature: n.feature as usize,
                threshold: n.threshold,
                left: Box::new(self.to_nested(n.left as usize)),
                right: Box::new(self.to_nested(n.left as usize + 1)),
            }
        }
    }

    fn from_nested(root: &TreeNode, feature_count: usize) -> Result<Tree> {
        let mut nodes = vec![Node::leaf(0, 0.0, 0)];
        let mut stack = vec![(root, 0usize)];
        while let Some((node, slot)) = stack.pop() {
            match node {
                TreeNode::Leaf {
                    error_fraction,
                    sample_count,
                } => {
                    if !(0.0..=1.0).contains(error_fraction) {
                        return Err(CcedError::domain(format!(
                            "leaf error fraction {error_fraction} outside [0, 1]"
                        )));
                    }
                    nodes[slot] = Node::leaf(slot, *error_fraction, *sample_count);
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= feature_count || threshold.is_nan() {
                        return Err(CcedError::domain(format!(
                            "invalid split on feature {feature} at {threshold} ({feature_count} features)"
                        )));
                    }
                    let l = nodes.len();
                    nodes.push(Node::leaf(l, 0.0, 0));
                    nodes.push(Node::leaf(l + 1, 0.0, 0));
                    nodes[slot] = Node::split(*feature, *threshold, l);
                    stack.push((right, l + 1));
                    stack.push((left, l));
                }
            }
        }
        Ok(Tree::new(nodes))
    }
}

/// Nested on-disk form of a tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        error_fraction: f64,
        sample_count: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    config: ForestConfig,
    feature_count: usize,
    scorer: Scorer,
}

impl PartialEq for Forest {
    fn eq(&self, other: &Self) -> bool {
        self.trees == other.trees && self.config == other.config && self.feature_count == other.feature_count
    }
}

/// Trees traversed together in lockstep when scoring.
const LANES: usize = 16;

#[derive(Debug, Clone, Copy)]
struct ScoreNode {
    /// Smallest `f32` not below the split threshold, NaN for leaves. For an
    /// `f32` input `x`, `x >= threshold` and `x >= cut` always agree.
    cut: f32,
    feature: u32,
    left: u32,
}

/// Trees packed into one array and traversed in lockstep.
#[derive(Debug, Clone)]
struct Lockstep {
    nodes: Vec<ScoreNode>,
    leaf_values: Vec<f64>,
    roots: Vec<u32>,
    /// Deepest tree in each group of `LANES` trees.
    group_depths: Vec<usize>,
    feature_count: usize,
}

fn ceil_to_f32(t: f64) -> f32 {
    let mut c = t as f32;
    if (c as f64) < t {
        c = c.next_up();
    }
    c
}

impl Lockstep {
    fn new(trees: &[&Tree], feature_count: usize) -> Lockstep {
        // Lockstep groups run to their deepest member, so group similar depths.
        let mut order: Vec<&Tree> = trees.to_vec();
        order.sort_by_key(|t| t.depth);
        let mut nodes = Vec::new();
        let mut leaf_values = Vec::new();
        let mut roots = Vec::with_capacity(trees.len());
        for tree in &order {
            let base = nodes.len() as u32;
            roots.push(base);
            for n in &tree.nodes {
                nodes.push(ScoreNode {
                    cut: if n.is_leaf() { f32::NAN } else { ceil_to_f32(n.threshold) },
                    feature: n.feature,
                    left: base + n.left,
                });
                leaf_values.push(n.error_fraction);
            }
        }
        assert!(
            nodes
                .iter()
                .all(|n| (n.left as usize) + 1 < nodes.len() + usize::from(n.cut.is_nan())
                    && (n.feature as usize) < feature_count.max(1)),
            "malformed tree"
        );
        let group_depths = order
            .chunks(LANES)
            .map(|g| g.iter().map(|t| t.depth).max().unwrap_or(0))
            .collect();
        Lockstep {
            nodes,
            leaf_values,
            roots,
            group_depths,
            feature_count: feature_count.max(1),
        }
    }

    #[inline]
    /// Caller guarantees `x.len() >= feature_count`.
    fn sum(&self, x: &[f32]) -> f64 {
        debug_assert!(x.len() >= self.feature_count);
        let mut sum = 0.0f64;
        for (roots, &depth) in self.roots.chunks(LANES).zip(&self.group_depths) {
            let mut idx = [0u32; LANES];
            idx[..roots.len()].copy_from_slice(roots);
            let lanes = &mut idx[..roots.len()];
            for _ in 0..depth {
                // leaves loop back to themselves, so an unmoved group is done
                let mut moved = false;
                for i in lanes.iter_mut() {
                    // SAFETY: `Lockstep::new` checked that every `left + 1` is a
                    // valid node index and every feature is below
                    // `feature_count`, and `x` is at least that long.
                    let n = unsafe { self.nodes.get_unchecked(*i as usize) };
                    let v = unsafe { *x.get_unchecked(n.feature as usize) };
                    let next = n.left + (v >= n.cut) as u32;
                    moved |= next != *i;
                    *i = next;
                }
                if !moved {
                    break;
                }
            }
            for i in lanes.iter() {
                sum += self.leaf_values[*i as usize];
            }
        }
        sum
    }
}


/// Leaves a tree may have to be scored by leaf elimination.
const MASK_LEAVES: usize = 64;

const ACCUMULATORS: usize = 4;

#[derive(Debug, Clone, Copy)]
struct MaskEntry {
    cut: f32,
    /// Tree slot within its block.
    tree: u32,
    /// Clears the leaves of the split's left subtree.
    mask: u64,
}

#[derive(Debug, Clone)]
struct MaskBlock {
    /// `entries` range of each feature, `feature_count + 1` offsets.
    feature_starts: Vec<u32>,
    /// Start of each tree's leaves in `leaf_values`.
    leaf_offsets: Vec<u32>,
}

/// Scoring layout for all trees.
///
/// Trees with at most 64 leaves are scored by leaf elimination: a split that
/// sends `x` right rules out every leaf of its left subtree, and the leftmost
/// surviving leaf is the one `x` reaches. Splits are grouped by feature and
/// sorted by cut, so the splits a value sends right form a prefix of its
/// list. Larger trees fall back to lockstep traversal.
#[derive(Debug, Clone)]
struct Scorer {
    blocks: Vec<MaskBlock>,
    entries: Vec<MaskEntry>,
    /// Leaves of the masked trees, left to right.
    leaf_values: Vec<f64>,
    deep: Lockstep,
    feature_count: usize,
}

/// Leaves of the subtree at `i` in left-to-right order; records the leaf
/// range of every split's left subtree.
fn collect_leaves(nodes: &[Node], i: usize, leaves: &mut Vec<f64>, left_ranges: &mut Vec<(usize, usize, usize)>) {
    let n = nodes[i];
    if n.is_leaf() {
        leaves.push(n.error_fraction);
        return;
    }
    let lo = leaves.len();
    collect_leaves(nodes, n.left as usize, leaves, left_ranges);
    left_ranges.push((i, lo, leaves.len()));
    collect_leaves(nodes, n.left as usize + 1, leaves, left_ranges);
}

impl Scorer {
    fn new(trees: &[Tree], feature_count: usize) -> Scorer {
        let (masked, deep): (Vec<&Tree>, Vec<&Tree>) = trees
            .iter()
            .partition(|t| t.nodes.iter().filter(|n| n.is_leaf()).count() <= MASK_LEAVES);

        let mut blocks = Vec::new();
        let mut entries = Vec::new();
        let mut leaf_values = Vec::new();
        for group in masked.chunks(MASK_LEAVES) {
            let mut per_feature: Vec<Vec<MaskEntry>> = vec![Vec::new(); feature_count.max(1)];
            let mut leaf_offsets = Vec::with_capacity(group.len());
            for (slot, tree) in group.iter().enumerate() {
                leaf_offsets.push(leaf_values.len() as u32);
                let mut leaves = Vec::new();
                let mut left_ranges = Vec::new();
                collect_leaves(&tree.nodes, 0, &mut leaves, &mut left_ranges);
                for (i, lo, hi) in left_ranges {
                    let n = tree.nodes[i];
                    // the right subtree keeps at least one leaf, so hi - lo < 64
                    let cleared = ((1u64 << (hi - lo)) - 1) << lo;
                    per_feature[n.feature as usize].push(MaskEntry {
                        cut: ceil_to_f32(n.threshold),
                        tree: slot as u32,
                        mask: !cleared,
                    });
                }
                leaf_values.extend(leaves);
            }
            let mut feature_starts = Vec::with_capacity(per_feature.len() + 1);
            for mut list in per_feature {
                feature_starts.push(entries.len() as u32);
                list.sort_by(|a, b| a.cut.total_cmp(&b.cut));
                entries.extend(list);
            }
            feature_starts.push(entries.len() as u32);
            blocks.push(MaskBlock {
                feature_starts,
                leaf_offsets,
            });
        }
        Scorer {
            blocks,
            entries,
            leaf_values,
            deep: Lockstep::new(&deep, feature_count),
            feature_count: feature_count.max(1),
        }
    }

    /// Sum of the leaf values `x` reaches, over all trees.
    fn sum(&self, x: &[f32]) -> f64 {
        assert!(x.len() >= self.feature_count, "scorer input too short");
        let mut sum = 0.0f64;
        for block in &self.blocks {
            // Consecutive entries often hit the same tree; separate
            // accumulators keep those updates from serializing on one slot.
            let mut alive = [[u64::MAX; MASK_LEAVES]; ACCUMULATORS];
            for (f, &v) in x[..self.feature_count].iter().enumerate() {
                let list = &self.entries[block.feature_starts[f] as usize..block.feature_starts[f + 1] as usize];
                let mut k = 0;
                // cuts ascend, so when the last entry of a run passes all do
                while k + ACCUMULATORS <= list.len() && v >= list[k + ACCUMULATORS - 1].cut {
                    for (lane, e) in list[k..k + ACCUMULATORS].iter().enumerate() {
                        alive[lane][e.tree as usize % MASK_LEAVES] &= e.mask;
                    }
                    k += ACCUMULATORS;
                }
                while k < list.len() && v >= list[k].cut {
                    alive[0][list[k].tree as usize % MASK_LEAVES] &= list[k].mask;
                    k += 1;
                }
            }
            for (t, &offset) in block.leaf_offsets.iter().enumerate() {
                let bits = alive.iter().fold(u64::MAX, |b, a| b & a[t]);
                sum += self.leaf_values[offset as usize + bits.trailing_zeros() as usize];
            }
        }
        sum + self.deep.sum(x)
    }
}

struct Grower<'a> {
    features: &'a [Vec<f32>],
    is_error: &'a [bool],
    cfg: &'a ForestConfig,
    per_split: usize,
    feature_count: usize,
}

impl Grower<'_> {
    fn grow(&self, rng: &mut RngStream) -> Tree {
        let n = self.features.len();
        let rows: Vec<usize> = if self.cfg.bootstrap {
            (0..n).map(|_| rng.rng().gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut nodes = vec![Node::leaf(0, 0.0, 0)];
        // (node slot, rows, depth)
        let mut stack = vec![(0usize, rows, 0usize)];
        let mut all_features: Vec<usize> = (0..self.feature_count).collect();
        while let Some((slot, rows, depth)) = stack.pop() {
            let count = rows.len();
            let errors = rows.iter().filter(|r| self.is_error[**r]).count();
            let leaf = Node::leaf(
                slot,
                if count == 0 { 0.0 } else { errors as f64 / count as f64 },
                count,
            );
            let stop = errors == 0
                || errors == count
                || count < self.cfg.min_samples_split.max(2)
                || self.cfg.max_depth.is_some_and(|d| depth >= d);
            if stop {
                nodes[slot] = leaf;
                continue;
            }
            all_features.shuffle(rng.rng());
            let (first, rest) = all_features.split_at(self.per_split);
            let split = best_gini_split(self.features, self.is_error, &rows, first)
                .or_else(|| best_gini_split(self.features, self.is_error, &rows, rest));
            let Some(split) = split else {
                nodes[slot] = leaf;
                continue;
            };
            let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                .iter()
                .partition(|r| !goes_right(self.features[**r][split.feature], split.threshold));
            let left = nodes.len();
            nodes.push(Node::leaf(left, 0.0, 0));
            nodes.push(Node::leaf(left + 1, 0.0, 0));
            nodes[slot] = Node::split(split.feature, split.threshold, left);
            stack.push((left + 1, right_rows, depth + 1));
            stack.push((left, left_rows, depth + 1));
        }
        Tree::new(nodes)
    }
}

impl Forest {
    /// Fit on raw rows. Tree `i` draws from `RngStream(cfg.seed, i)`.
    pub fn fit(features: &[Vec<f32>], is_error: &[bool], cfg: &ForestConfig) -> Result<Forest> {
        cfg.validate()?;
        if features.is_empty() {
            return Err(CcedError::domain("cannot train a forest on an empty set"));
        }
        if features.len() != is_error.len() {
            return Err(CcedError::shape("feature rows and labels differ in length"));
        }
        let feature_count = features[0].len();
        if feature_count == 0 || features.iter().any(|r| r.len() != feature_count) {
            return Err(CcedError::shape("training rows must share a positive feature count"));
        }
        let grower = Grower {
            features,
            is_error,
            cfg,
            per_split: cfg.resolved_features_per_split(feature_count),
            feature_count,
        };
        let trees: Vec<Tree> = (0..cfg.tree_count)
            .into_par_iter()
            .map(|i| grower.grow(&mut RngStream::new(cfg.seed, i as u64)))
            .collect();
        Ok(Forest {
            scorer: Scorer::new(&trees, feature_count),
            trees,
            config: cfg.clone(),
            feature_count,
        })
    }

    pub fn from_trees(trees: Vec<Tree>, config: ForestConfig, feature_count: usize) -> Result<Forest> {
        if trees.is_empty() {
            return Err(CcedError::domain("a forest needs at least one tree"));
        }
        Ok(Forest {
            scorer: Scorer::new(&trees, feature_count),
            trees,
            config,
            feature_count,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    /// Mean leaf error fraction over all trees, in `[0, 1]`.
    pub fn score(&self, features: &[f32]) -> Result<f64> {
        if features.len() != self.feature_count {
            return Err(CcedError::shape(format!(
                "forest expects {} features, got {}",
                self.feature_count,
                features.len()
            )));
        }
        Ok(self.score_unchecked(features))
    }

    #[inline]
    pub fn score_unchecked(&self, features: &[f32]) -> f64 {
        self.scorer.sum(features) / self.trees.len() as f64
    }

    pub fn nested_trees(&self) -> Vec<TreeNode> {
        self.trees.iter().map(|t| t.to_nested(0)).collect()
    }
}

pub fn train_forest(train: &BalancedDataset, cfg: &ForestConfig) -> Result<Forest> {
    if train.is_empty() {
        return Err(CcedError::domain("cannot train a detector on an empty training set"));
    }
    Forest::fit(&train.features(), &train.error_flags(), cfg)
}

/// Decision rule: flag when `score >= threshold`.
///
/// `fp_budget` and `achieved_fp` are set only once the threshold has been
/// calibrated against clean validation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub threshold: f64,
    pub fp_budget: Option<f64>,
    pub achieved_fp: Option<f64>,
}

impl ThresholdPolicy {
    /// The uncalibrated soft-vote majority rule.
    pub fn default_rule() -> Self {
        Self {
            threshold: 0.5,
            fp_budget: None,
            achieved_fp: None,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.fp_budget.is_some()
    }

    #[inline]
    pub fn flags(&self, score: f64) -> bool {
        score >= self.threshold
    }
}

/// Lowest threshold whose clean flag rate stays within `fp_budget`.
///
/// Candidates are 0, every distinct clean score, and the next double above
/// the largest clean score (which flags no clean sample).
pub fn calibrate_on_scores(clean_scores: &[f64], fp_budget: f64) -> Result<ThresholdPolicy> {
    if clean_scores.is_empty() {
        return Err(CcedError::domain("calibration needs at least one clean sample"));
    }
    if !(0.0..=1.0).contains(&fp_budget) {
        return Err(CcedError::domain(format!("fp budget {fp_budget} outside [0, 1]")));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let allowed = (fp_budget * n as f64 + 1e-9).floor() as usize;

    let flagged_at = |t: f64| n - sorted.partition_point(|s| *s < t);
    let mut candidates = vec![0.0];
    candidates.extend(sorted.iter().copied());
    candidates.push(sorted[n - 1].next_up());
    let threshold = candidates
        .into_iter()
        .find(|t| flagged_at(*t) <= allowed)
        .expect("the last candidate flags nothing");
    Ok(ThresholdPolicy {
        threshold,
        fp_budget: Some(fp_budget),
        achieved_fp: Some(flagged_at(threshold) as f64 / n as f64),
    })
}

pub fn clean_scores(forest: &Forest, ds: &BalancedDataset) -> Result<Vec<f64>> {
    ds.samples
        .iter()
        .filter(|s| s.label == Label::Clean)
        .map(|s| forest.score(&s.features))
        .collect()
}

pub fn calibrate_threshold(forest: &Forest, val: &BalancedDataset, fp_budget: f64) -> Result<ThresholdPolicy> {
    calibrate_on_scores(&clean_scores(forest, val)?, fp_budget)
}

pub fn detect(policy: &ThresholdPolicy, forest: &Forest, features: &[f32]) -> Result<bool> {
    Ok(policy.flags(forest.score(features)?))
}

#[derive(Serialize, Deserialize)]
struct ForestFile {
    version: u32,
    config: ForestConfig,
    feature_count: usize,
    trees: Vec<TreeNode>,
    policy: ThresholdPolicy,
}

pub fn forest_to_json(forest: &Forest, policy: &ThresholdPolicy) -> String {
    let file = ForestFile {
        version: FOREST_FORMAT_VERSION,
        config: forest.config.clone(),
        feature_count: forest.feature_count,
        trees: forest.nested_trees(),
        policy: *policy,
    };
    serde_json::to_string(&file).expect("forest serializes")
}

pub fn forest_from_json(text: &str) -> Result<(Forest, ThresholdPolicy)> {
    let format_err = |message: String| CcedError::Format { offset: 0, message };
    let mut de = serde_json::Deserializer::from_str(text);
    de.disable_recursion_limit();
    let value = serde_json::Value::deserialize(&mut de).map_err(|e| format_err(e.to_string()))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FOREST_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(format_err(format!(
                "unsupported forest file version {v}, expected {FOREST_FORMAT_VERSION}"
            )))
        }
        None => return Err(format_err("missing forest file version".into())),
    }
    let file: ForestFile = serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
    let trees = file
        .trees
        .iter()
        .map(|t| Tree::from_nested(t, file.feature_count))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| format_err(e.to_string()))?;
    let forest = Forest::from_trees(trees, file.config, file.feature_count).map_err(|e| format_err(e.to_string()))?;
    Ok((forest, file.policy))
}

pub fn save_forest(forest: &Forest, policy: &ThresholdPolicy, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, forest_to_json(forest, policy)).map_err(|e| CcedError::io(path, e))
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<(Forest, ThresholdPolicy)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| CcedError::io(path, e))?;
    forest_from_json(&text)
}

//! Random forests over byte-valued feature vectors.
//!
//! Each tree is grown on a bootstrap resample with Gini splits over a random
//! subset of features per node. A forest turns the trees' votes into the class
//! distribution N_c / N_T used by the association and inter-level potentials.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ClassIndex;

/// Labeled feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSet {
    n_features: usize,
    n_classes: usize,
    features: Vec<u8>,
    labels: Vec<ClassIndex>,
}

impl TrainSet {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        TrainSet {
            n_features,
            n_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[u8], label: ClassIndex) -> Result<()> {
        if features.len() != self.n_features {
            return Err(Error::domain(format!(
                "sample has {} features, expected {}",
                features.len(),
                self.n_features
            )));
        }
        if label as usize >= self.n_classes {
            return Err(Error::domain(format!(
                "label {label} outside {} classes",
                self.n_classes
            )));
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn sample(&self, i: usize) -> (&[u8], ClassIndex) {
        (
            &self.features[i * self.n_features..(i + 1) * self.n_features],
            self.labels[i],
        )
    }

    pub fn labels(&self) -> &[ClassIndex] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> TrainSet {
        let mut out = TrainSet::new(self.n_features, self.n_classes);
        out.features.reserve(indices.len() * self.n_features);
        out.labels.reserve(indices.len());
        for &i in indices {
            let (f, l) = self.sample(i);
            out.features.extend_from_slice(f);
            out.labels.push(l);
        }
        out
    }

    /// Exactly `n_per_class` samples of every class; see [`balanced_indices`].
    pub fn balance(&self, n_per_class: usize, seed: u64) -> Result<TrainSet> {
        let idx = balanced_indices(&self.labels, self.n_classes, n_per_class, seed, false)
            .map_err(|c| Error::MissingClass {
                layer: "training".into(),
                class: format!("#{c}"),
            })?;
        Ok(self.subset(&idx))
    }
}

/// Draws `n_per_class` indices per class: without replacement when the class
/// has enough instances, uniformly with replacement otherwise. Output is grouped
/// by ascending class. An absent class is returned as `Err(class)` unless
/// `skip_absent` is set, in which case it contributes no samples.
pub fn balanced_indices(
    labels: &[ClassIndex],
    n_classes: usize,
    n_per_class: usize,
    seed: u64,
    skip_absent: bool,
) -> std::result::Result<Vec<usize>, ClassIndex> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            if skip_absent {
                continue;
            }
            return Err(c as ClassIndex);
        }
        if members.len() >= n_per_class {
            out.extend(index::sample(&mut rng, members.len(), n_per_class).into_iter().map(|k| members[k]));
        } else {
            out.extend((0..n_per_class).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    /// Samples with `features[feature] <= threshold` go left.
    Split {
        feature: u16,
        threshold: u8,
        left: u32,
        right: u32,
    },
    Leaf { class: ClassIndex },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn from_nodes(nodes: Vec<Node>, n_features: usize, n_classes: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Format("tree without nodes".into()));
        }
        for n in &nodes {
            match *n {
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature as usize >= n_features || left as usize >= nodes.len() || right as usize >= nodes.len() {
                        return Err(Error::Format("tree node references out of range".into()));
                    }
                }
                Node::Leaf { class } => {
                    if class as usize >= n_classes {
                        return Err(Error::Format("leaf class out of range".into()));
                    }
                }
            }
        }
        Ok(DecisionTree { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    #[inline]
    pub fn predict(&self, features: &[u8]) -> ClassIndex {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if features[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Number of splits on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Nodes with fewer samples become leaves.
    pub min_samples_split: usize,
    /// Features drawn per split; `None` means ⌈√N_f⌉.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 25,
            min_samples_split: 2,
            features_per_split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionForest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
    n_features: usize,
    seed: u64,
}

impl DecisionForest {
    pub fn from_trees(trees: Vec<DecisionTree>, n_classes: usize, n_features: usize, seed: u64) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Format("forest without trees".into()));
        }
        Ok(DecisionForest {
            trees,
            n_classes,
            n_features,
            seed,
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Vote counts N_c per class.
    pub fn votes(&self, features: &[u8]) -> Result<Vec<u32>> {
        self.check_dims(features)?;
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(features) as usize] += 1;
        }
        Ok(votes)
    }

    /// p(c | f) = N_c / N_T.
    pub fn predict_distribution(&self, features: &[u8]) -> Result<Vec<f64>> {
        let n = self.trees.len() as f64;
        Ok(self.votes(features)?.into_iter().map(|v| v as f64 / n).collect())
    }

    /// Majority vote, lowest class index on ties.
    pub fn predict_class(&self, features: &[u8]) -> Result<ClassIndex> {
        let votes = self.votes(features)?;
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        Ok(best as ClassIndex)
    }

    fn check_dims(&self, features: &[u8]) -> Result<()> {
        if features.len() != self.n_features {
            return Err(Error::domain(format!(
                "feature vector has {} entries, forest expects {}",
                features.len(),
                self.n_features
            )));
        }
        Ok(())
    }
}

/// Trains `params.n_trees` trees, each on its own bootstrap resample and RNG stream.
pub fn train_forest(data: &TrainSet, params: &ForestParams, seed: u64) -> Result<DecisionForest> {
    if params.n_trees == 0 {
        return Err(Error::config("a forest needs at least one tree"));
    }
    if data.n_features == 0 || data.n_features > u16::MAX as usize {
        return Err(Error::config(format!("unsupported feature count {}", data.n_features)));
    }
    let present = data.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::domain(format!(
            "training data holds {present} class(es); at least two are required"
        )));
    }
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (data.n_features as f64).sqrt().ceil() as usize)
        .clamp(1, data.n_features);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let n = data.len();
            let mut sample: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
            let mut grower = Grower::new(data, params, mtry, rng);
            grower.grow(&mut sample, 0);
            DecisionTree { nodes: grower.nodes }
        })
        .collect();
    Ok(DecisionForest {
        trees,
        n_classes: data.n_classes,
        n_features: data.n_features,
        seed,
    })
}

struct Grower<'a> {
    data: &'a TrainSet,
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    order: Vec<usize>,
    pairs: Vec<(u8, ClassIndex)>,
    value_counts: Vec<u32>,
}

struct Candidate {
    feature: usize,
    threshold: u8,
    score: f64,
}

impl<'a> Grower<'a> {
    fn new(data: &'a TrainSet, params: &'a ForestParams, mtry: usize, rng: ChaCha8Rng) -> Self {
        Grower {
            data,
            params,
            mtry,
            rng,
            nodes: Vec::new(),
            order: (0..data.n_features).collect(),
            pairs: Vec::new(),
            value_counts: vec![0; 256],
        }
    }

    fn grow(&mut self, samples: &mut [u32], depth: usize) -> u32 {
        let k = self.data.n_classes;
        let mut counts = vec![0usize; k];
        for &s in samples.iter() {
            counts[self.data.labels[s as usize] as usize] += 1;
        }
        let majority = argmax_lowest(&counts);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { class: majority });

        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || samples.len() < self.params.min_samples_split.max(2) {
            return id;
        }
        let Some(best) = self.best_split(samples, &counts) else {
            return id;
        };

        let nf = self.data.n_features;
        let feats = &self.data.features;
        let mut lo = 0;
        let mut hi = samples.len();
        while lo < hi {
            if feats[samples[lo] as usize * nf + best.feature] <= best.threshold {
                lo += 1;
            } else {
                hi -= 1;
                samples.swap(lo, hi);
            }
        }
        let (left_s, right_s) = samples.split_at_mut(lo);
        let left = self.grow(left_s, depth + 1);
        let right = self.grow(right_s, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature: best.feature as u16,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    /// Lowest weighted Gini impurity among up to `mtry` non-constant features,
    /// drawn in random order. Scores are Σ L_c²/n_L + Σ R_c²/n_R (higher is purer).
    fn best_split(&mut self, samples: &[u32], counts: &[usize]) -> Option<Candidate> {
        let nf = self.data.n_features;
        let n = samples.len();
        let total_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
        let mut best: Option<Candidate> = None;
        let mut evaluated = 0;
        let mut left = vec![0usize; counts.len()];
        for pos in 0..nf {
            if evaluated == self.mtry {
                break;
            }
            let pick = self.rng.random_range(pos..nf);
            self.order.swap(pos, pick);
            let f = self.order[pos];

            self.collect_sorted(samples, f);
            let pairs = &self.pairs;
            if pairs[0].0 == pairs[n - 1].0 {
                continue;
            }
            evaluated += 1;

            left.iter_mut().for_each(|c| *c = 0);
            let (mut sum_l, mut sum_r) = (0.0f64, total_sq);
            for i in 0..n - 1 {
                let (v, c) = pairs[i];
                let c = c as usize;
                let l = left[c];
                let r = counts[c] - l;
                sum_l += (2 * l + 1) as f64;
                sum_r -= (2 * r - 1) as f64;
                left[c] = l + 1;
                if pairs[i + 1].0 == v {
                    continue;
                }
                let nl = (i + 1) as f64;
                let score = sum_l / nl + sum_r / (n as f64 - nl);
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(Candidate {
                        feature: f,
                        threshold: v,
                        score,
                    });
                }
            }
        }
        best
    }

    /// Fills `self.pairs` with (value, class) of feature `f`, sorted by value.
    fn collect_sorted(&mut self, samples: &[u32], f: usize) {
        let nf = self.data.n_features;
        let feats = &self.data.features;
        let labels = &self.data.labels;
        self.pairs.clear();
        if samples.len() < 256 {
            self.pairs
                .extend(samples.iter().map(|&s| (feats[s as usize * nf + f], labels[s as usize])));
            self.pairs.sort_unstable();
            return;
        }
        // counting sort by value; class order inside a value does not matter
        self.value_counts.iter_mut().for_each(|c| *c = 0);
        for &s in samples {
            self.value_counts[feats[s as usize * nf + f] as usize] += 1;
        }
        let mut start = [0u32; 256];
        let mut acc = 0;
        for (v, &c) in self.value_counts.iter().enumerate() {
            start[v] = acc;
            acc += c;
        }
        self.pairs.resize(samples.len(), (0, 0));
        for &s in samples {
            let v = feats[s as usize * nf + f];
            self.pairs[start[v as usize] as usize] = (v, labels[s as usize]);
            start[v as usize] += 1;
        }
    }
}

fn argmax_lowest(counts: &[usize]) -> ClassIndex {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best as ClassIndex
}

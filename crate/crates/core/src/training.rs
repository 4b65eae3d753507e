//! Scene splits, potential fitting and the θ search.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureCube, FeatureSpec};
use crate::forest::{balanced_indices, train_forest, DecisionForest, ForestParams, TrainSet};
use crate::grid::Grid;
use crate::inference::{build_graph_with_distances, map_lbp, EdgeDistances, LbpParams};
use crate::labels::{ClassIndex, LabelDomain, Layer, TwoLayerLabeling};
use crate::potentials::{fit_cooccurrence, CooccurrenceTable, NodePotentials, ThetaParams, EPS_H};
use crate::powell::{powell_search, PowellParams, PowellTrace};

/// Scene ids for potential training, θ tuning and testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub tune: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitPlan {
    /// Shuffles `ids` with `seed`, then cuts round(n·f_train) and round(n·f_tune)
    /// scenes off the front; the rest is the test split.
    pub fn new(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<Self> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (sum - 1.0).abs() > 1e-2 {
            return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
        }
        let n = ids.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_tune = (n as f64 * fractions[1]).round() as usize;
        if n_train == 0 || n_tune == 0 || n_train + n_tune >= n {
            return Err(Error::config(format!(
                "{n} scenes cannot be split into non-empty parts with fractions {fractions:?}"
            )));
        }
        let mut shuffled = ids.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let plan = SplitPlan {
            train: shuffled[..n_train].to_vec(),
            tune: shuffled[n_train..n_train + n_tune].to_vec(),
            test: shuffled[n_train + n_tune..].to_vec(),
            seed,
        };
        plan.validate(ids)?;
        Ok(plan)
    }

    /// Checks that the three lists are disjoint and together cover `ids`.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.tune).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::config(format!("scene `{id}` appears in two splits")));
            }
        }
        let all: BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        if seen != all {
            return Err(Error::config("split plan does not cover exactly the dataset's scenes"));
        }
        Ok(())
    }
}

/// Whether the two layers are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Tcrf,
    /// Each layer is labeled on its own: θ₅ is pinned to 0 and no product forest is trained.
    #[serde(alias = "crf")]
    IndependentCrf,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcrf" => Ok(Mode::Tcrf),
            "crf" | "independent-crf" => Ok(Mode::IndependentCrf),
            other => Err(Error::config(format!("unknown mode `{other}`; expected tcrf or crf"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Tcrf => "tcrf",
            Mode::IndependentCrf => "independent-crf",
        })
    }
}

/// Which layers contribute to Ω.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaLayers {
    #[default]
    Pooled,
    BaseOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingParams {
    /// Balanced samples drawn per class for every forest.
    pub n_samples: usize,
    pub forest: ForestParams,
    pub lbp: LbpParams,
    pub powell: PowellParams,
    pub theta0: [f64; 7],
    pub theta_lower: [f64; 7],
    pub theta_upper: [f64; 7],
    pub omega: OmegaLayers,
    /// Set from the experiment's top-level mode.
    #[serde(skip)]
    pub mode: Mode,
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            n_samples: 100_000,
            forest: ForestParams::default(),
            lbp: LbpParams::default(),
            powell: PowellParams::default(),
            theta0: ThetaParams::default().0,
            theta_lower: ThetaParams::LOWER,
            theta_upper: ThetaParams::UPPER,
            omega: OmegaLayers::Pooled,
            mode: Mode::Tcrf,
        }
    }
}

impl TrainingParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if self.forest.n_trees == 0 || self.forest.max_depth == 0 {
            return Err(Error::config("forests need n_trees > 0 and max_depth > 0"));
        }
        self.lbp.validate()?;
        for i in 0..7 {
            let (l, u) = (self.theta_lower[i], self.theta_upper[i]);
            if !(l <= u) || l < ThetaParams::LOWER[i] || u > ThetaParams::UPPER[i] {
                return Err(Error::config(format!(
                    "bounds of theta{} must lie within [{}, {}]",
                    i + 1,
                    ThetaParams::LOWER[i],
                    ThetaParams::UPPER[i]
                )));
            }
        }
        ThetaParams::new(self.theta0)?;
        Ok(())
    }
}

/// Seeds that feed every random choice of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSeeds {
    pub split: u64,
    pub sampling: u64,
    pub forest: u64,
}

impl TrainingSeeds {
    /// Independent-looking seeds derived from one master seed.
    pub fn derive(master: u64) -> Self {
        let part = |tag: &str| {
            let mut h = Sha256::new();
            h.update(master.to_le_bytes());
            h.update(tag.as_bytes());
            u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
        };
        TrainingSeeds {
            split: master,
            sampling: part("sampling"),
            forest: part("forest"),
        }
    }

    fn for_layer(seed: u64, layer: u64) -> u64 {
        seed.wrapping_add(layer.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TcrfModel {
    pub domain: LabelDomain,
    pub features: FeatureSpec,
    pub site_size: usize,
    pub base_forest: DecisionForest,
    pub occlusion_forest: DecisionForest,
    pub product_forest: Option<DecisionForest>,
    pub base_table: CooccurrenceTable,
    pub occlusion_table: CooccurrenceTable,
    pub theta: ThetaParams,
    pub mode: Mode,
    pub lbp: LbpParams,
    pub seeds: TrainingSeeds,
    /// SHA-256 of the scenes the model was fitted on, hex encoded.
    pub dataset_hash: String,
}

impl TcrfModel {
    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        let nf = self.features.n_features();
        let check = |f: &DecisionForest, n: usize, what: &str| {
            if f.n_classes() != n || f.n_features() != nf {
                Err(Error::Format(format!("{what} forest does not match the domain or feature spec")))
            } else {
                Ok(())
            }
        };
        check(&self.base_forest, d.n_base(), "base")?;
        check(&self.occlusion_forest, d.n_occlusion(), "occlusion")?;
        match (&self.product_forest, self.mode) {
            (Some(f), Mode::Tcrf) => check(f, d.n_product(), "product")?,
            (None, Mode::IndependentCrf) => {}
            _ => return Err(Error::Format("product forest presence does not match the mode".into())),
        }
        if self.base_table.n_classes() != d.n_base() || self.occlusion_table.n_classes() != d.n_occlusion() {
            return Err(Error::Format("co-occurrence tables do not match the domain".into()));
        }
        if self.mode == Mode::IndependentCrf && self.theta.inter() != 0.0 {
            return Err(Error::Format("independent mode requires theta5 = 0".into()));
        }
        self.theta.validate()
    }

    pub fn node_potentials(&self, cube: &FeatureCube) -> Result<NodePotentials> {
        let product = self.product_forest.as_ref().map(|f| (f, self.domain.product_space()));
        NodePotentials::compute(cube, &self.base_forest, &self.occlusion_forest, product)
    }
}

/// One scene reduced to what training needs: its features and node-level reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub id: String,
    pub cube: FeatureCube,
    pub labels: TwoLayerLabeling,
}

impl TrainingScene {
    pub fn new(id: impl Into<String>, cube: FeatureCube, labels: TwoLayerLabeling) -> Result<Self> {
        let id = id.into();
        if cube.node_width() != labels.width() || cube.node_height() != labels.height() {
            return Err(Error::data(&id, "labels and feature cube differ in size"));
        }
        Ok(TrainingScene { id, cube, labels })
    }
}

/// Forests and co-occurrence tables fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPotentials {
    pub base_forest: DecisionForest,
    pub occlusion_forest: DecisionForest,
    pub product_forest: Option<DecisionForest>,
    pub base_table: CooccurrenceTable,
    pub occlusion_table: CooccurrenceTable,
}

fn layer_train_set(
    scenes: &[TrainingScene],
    n_classes: usize,
    label: impl Fn(&TwoLayerLabeling, usize) -> ClassIndex,
) -> (Vec<ClassIndex>, Vec<(usize, usize)>) {
    let mut labels = Vec::new();
    let mut origin = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        for i in 0..scene.cube.n_nodes() {
            let l = label(&scene.labels, i);
            debug_assert!((l as usize) < n_classes);
            labels.push(l);
            origin.push((s, i));
        }
    }
    (labels, origin)
}

fn sample_forest(
    scenes: &[TrainingScene],
    n_classes: usize,
    label: impl Fn(&TwoLayerLabeling, usize) -> ClassIndex,
    params: &TrainingParams,
    seeds: (u64, u64),
    skip_absent: bool,
    name_of: impl Fn(ClassIndex) -> (String, String),
) -> Result<DecisionForest> {
    let nf = scenes[0].cube.n_features();
    let (labels, origin) = layer_train_set(scenes, n_classes, label);
    let picked = balanced_indices(&labels, n_classes, params.n_samples, seeds.0, skip_absent).map_err(|c| {
        let (layer, class) = name_of(c);
        Error::MissingClass { layer, class }
    })?;
    let mut set = TrainSet::new(nf, n_classes);
    for k in picked {
        let (s, i) = origin[k];
        set.push(scenes[s].cube.node(i), labels[k])?;
    }
    train_forest(&set, &params.forest, seeds.1)
}

/// Trains the base, occlusion and (in tCRF mode) product forests on balanced
/// samples and fits both co-occurrence tables over all training sites.
pub fn fit_potentials(
    scenes: &[TrainingScene],
    domain: &LabelDomain,
    params: &TrainingParams,
    seeds: &TrainingSeeds,
) -> Result<FittedPotentials> {
    if scenes.is_empty() {
        return Err(Error::config("no training scenes"));
    }
    for s in scenes {
        s.labels.validate(domain).map_err(|e| Error::data(&s.id, e.to_string()))?;
    }
    let nf = scenes[0].cube.n_features();
    if let Some(s) = scenes.iter().find(|s| s.cube.n_features() != nf) {
        return Err(Error::data(&s.id, "feature count differs from the other scenes"));
    }
    let name = |layer: Layer| move |c: ClassIndex| (layer.to_string(), domain.classes(layer)[c as usize].clone());
    let layer_seeds = |k: u64| {
        (
            TrainingSeeds::for_layer(seeds.sampling, k),
            TrainingSeeds::for_layer(seeds.forest, k),
        )
    };

    let base_forest = sample_forest(
        scenes,
        domain.n_base(),
        |l, i| l.base.as_slice()[i],
        params,
        layer_seeds(0),
        false,
        name(Layer::Base),
    )?;
    let occlusion_forest = sample_forest(
        scenes,
        domain.n_occlusion(),
        |l, i| l.occlusion.as_slice()[i],
        params,
        layer_seeds(1),
        false,
        name(Layer::Occlusion),
    )?;
    let product_forest = match params.mode {
        Mode::Tcrf => {
            let ps = domain.product_space();
            let no = domain.n_occlusion() as ClassIndex;
            // pairs never seen together are simply not sampled
            Some(sample_forest(
                scenes,
                ps.len(),
                move |l, i| l.base.as_slice()[i] * no + l.occlusion.as_slice()[i],
                params,
                layer_seeds(2),
                true,
                |c| ("product".into(), c.to_string()),
            )?)
        }
        Mode::IndependentCrf => None,
    };
    let grids = |layer: Layer| -> Vec<&Grid<ClassIndex>> { scenes.iter().map(|s| s.labels.layer(layer)).collect() };
    Ok(FittedPotentials {
        base_forest,
        occlusion_forest,
        product_forest,
        base_table: fit_cooccurrence(Layer::Base, &grids(Layer::Base), domain.n_base(), EPS_H)?,
        occlusion_table: fit_cooccurrence(Layer::Occlusion, &grids(Layer::Occlusion), domain.n_occlusion(), EPS_H)?,
    })
}

/// A tuning scene with θ-independent quantities precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TuningScene {
    pub id: String,
    pub potentials: NodePotentials,
    pub distances: EdgeDistances,
    pub labels: TwoLayerLabeling,
}

impl TuningScene {
    pub fn prepare(scene: &TrainingScene, fitted: &FittedPotentials, domain: &LabelDomain) -> Result<Self> {
        let product = fitted.product_forest.as_ref().map(|f| (f, domain.product_space()));
        Ok(TuningScene {
            id: scene.id.clone(),
            potentials: NodePotentials::compute(&scene.cube, &fitted.base_forest, &fitted.occlusion_forest, product)?,
            distances: EdgeDistances::from_cube(&scene.cube)?,
            labels: scene.labels.clone(),
        })
    }
}

/// Ω: diagonal count of the confusion matrix over all tuning scenes.
pub fn omega(
    scenes: &[TuningScene],
    fitted: &FittedPotentials,
    theta: &ThetaParams,
    lbp: &LbpParams,
    layers: OmegaLayers,
) -> Result<f64> {
    let counts = scenes
        .par_iter()
        .map(|s| {
            let g = build_graph_with_distances(&s.potentials, &fitted.base_table, &fitted.occlusion_table, &s.distances, theta)?;
            let out = map_lbp(&g, lbp)?.labeling;
            let agree = |a: &Grid<ClassIndex>, b: &Grid<ClassIndex>| {
                a.as_slice().iter().zip(b.as_slice()).filter(|(x, y)| x == y).count() as u64
            };
            let mut n = agree(&out.base, &s.labels.base);
            if layers == OmegaLayers::Pooled {
                n += agree(&out.occlusion, &s.labels.occlusion);
            }
            Ok(n)
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(counts.into_iter().sum::<u64>() as f64)
}

/// Maximizes Ω over θ with Powell's method. Every tuning scene must belong to
/// the tuning split of `plan`.
pub fn tune_theta(
    fitted: &FittedPotentials,
    scenes: &[TuningScene],
    plan: &SplitPlan,
    params: &TrainingParams,
) -> Result<(ThetaParams, PowellTrace)> {
    if scenes.is_empty() {
        return Err(Error::config("no tuning scenes"));
    }
    for s in scenes {
        if plan.test.contains(&s.id) || plan.train.contains(&s.id) || !plan.tune.contains(&s.id) {
            return Err(Error::config(format!(
                "scene `{}` is not in the tuning split; refusing to tune on it",
                s.id
            )));
        }
    }
    let mut x0 = params.theta0;
    let mut free = [true; 7];
    if params.mode == Mode::IndependentCrf {
        x0[4] = 0.0;
        free[4] = false;
    }
    let mut lower = params.theta_lower;
    let mut upper = params.theta_upper;
    if !free[4] {
        lower[4] = 0.0;
        upper[4] = 0.0;
    }
    let objective = |x: &[f64]| -> Result<f64> {
        let theta = ThetaParams(x.try_into().expect("seven parameters"));
        omega(scenes, fitted, &theta, &params.lbp, params.omega)
    };
    let result = powell_search(objective, &x0, &lower, &upper, &free, &params.powell)?;
    let theta = ThetaParams(result.x.as_slice().try_into().expect("seven parameters"));
    log::info!(
        "powell: omega {} -> {} in {} cycles ({} evaluations)",
        result.trace.entries.first().map_or(0.0, |e| e.value),
        result.value,
        result.cycles,
        result.evaluations
    );
    Ok((theta, result.trace))
}

/// SHA-256 over scene ids, feature cubes and labels, in the given order.
pub fn dataset_hash(scenes: &[&TrainingScene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        h.update(s.id.as_bytes());
        h.update((s.cube.node_width() as u64).to_le_bytes());
        h.update((s.cube.node_height() as u64).to_le_bytes());
        h.update(s.cube.as_bytes());
        for g in [&s.labels.base, &s.labels.occlusion] {
            for v in g.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

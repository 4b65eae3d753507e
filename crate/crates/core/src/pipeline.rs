//! End-to-end operations: train, infer, evaluate, synthesize.

use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::dataset::{write_dataset, Dataset, DatasetManifest, Scene, SceneInfo, SplitLists};
use crate::error::{Error, Result};
use crate::evaluation::ConfusionMatrix;
use crate::features::{build_feature_cube, edge_threshold_for, FeatureCube, FeatureSpec, SceneData};
use crate::grid::Grid;
use crate::inference::{build_graph, map_lbp, score};
use crate::labels::{ClassIndex, Layer, TwoLayerLabeling};
use crate::powell::PowellTrace;
use crate::synthetic::{generate_suite, SceneRecipe, Suite, CHANNELS};
use crate::training::{
    dataset_hash, fit_potentials, tune_theta, SplitPlan, TcrfModel, TrainingScene, TrainingSeeds, TuningScene,
};

/// Feature cube of one scene, with errors tagged by scene id.
pub fn scene_features(id: &str, data: &SceneData, spec: &FeatureSpec) -> Result<FeatureCube> {
    build_feature_cube(data, spec).map_err(|e| match e {
        Error::Config(m) => Error::data(id, m),
        other => other,
    })
}

fn training_scenes(scenes: &[&Scene], spec: &FeatureSpec) -> Result<Vec<TrainingScene>> {
    scenes
        .par_iter()
        .map(|s| {
            let labels = s
                .node_labels()
                .ok_or_else(|| Error::data(&s.id, "training needs reference labels"))?;
            TrainingScene::new(&s.id, scene_features(&s.id, &s.data, spec)?, labels)
        })
        .collect()
}

/// The split used for training: the manifest's when allowed and present,
/// otherwise a fresh one over the labeled scenes.
pub fn split_for(config: &ExperimentConfig, dataset: &Dataset) -> Result<SplitPlan> {
    let ids: Vec<String> = dataset
        .scenes
        .iter()
        .filter(|s| s.labels.is_some())
        .map(|s| s.id.clone())
        .collect();
    if let (true, Some(lists)) = (config.dataset.manifest_split, &dataset.manifest.split) {
        let plan = SplitPlan {
            train: lists.train.clone(),
            tune: lists.tune.clone(),
            test: lists.test.clone(),
            seed: config.seed,
        };
        plan.validate(&ids)?;
        if plan.train.is_empty() || plan.tune.is_empty() {
            return Err(Error::config("manifest split has an empty training or tuning list"));
        }
        return Ok(plan);
    }
    SplitPlan::new(&ids, config.dataset.fractions, config.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TcrfModel,
    pub trace: PowellTrace,
    pub plan: SplitPlan,
}

/// Split, fit potentials on the training scenes, tune θ on the tuning scenes.
pub fn train(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let domain = config.resolve_domain(&dataset.domain)?;
    let params = config.training_params();
    let plan = split_for(config, dataset)?;
    let seeds = TrainingSeeds::derive(config.seed);
    let pick = |ids: &[String]| -> Result<Vec<&Scene>> {
        ids.iter()
            .map(|id| dataset.scene(id).ok_or_else(|| Error::config(format!("split names unknown scene `{id}`"))))
            .collect()
    };
    let train_scenes = pick(&plan.train)?;
    let tune_scenes = pick(&plan.tune)?;
    if let Some(s) = train_scenes.iter().chain(&tune_scenes).find(|s| s.data.site_size() != config.site_size) {
        return Err(Error::data(&s.id, format!("scene loaded with site size {}, config says {}", s.data.site_size(), config.site_size)));
    }

    let mut spec = config.features.clone();
    if spec.params.edge_threshold.is_none() {
        spec.params.edge_threshold = Some(edge_threshold_for(train_scenes.iter().map(|s| &s.data))?);
    }
    log::info!("extracting {} features for {} + {} scenes", spec.n_features(), train_scenes.len(), tune_scenes.len());
    let train_set = training_scenes(&train_scenes, &spec)?;
    let tune_set = training_scenes(&tune_scenes, &spec)?;

    log::info!("fitting potentials ({} mode)", params.mode);
    let fitted = fit_potentials(&train_set, &domain, &params, &seeds)?;
    let tuning = tune_set
        .par_iter()
        .map(|s| TuningScene::prepare(s, &fitted, &domain))
        .collect::<Result<Vec<_>>>()?;
    log::info!("tuning theta on {} scenes", tuning.len());
    let (theta, trace) = tune_theta(&fitted, &tuning, &plan, &params)?;

    let hashed: Vec<&TrainingScene> = train_set.iter().chain(&tune_set).collect();
    let model = TcrfModel {
        domain,
        features: spec,
        site_size: config.site_size,
        base_forest: fitted.base_forest,
        occlusion_forest: fitted.occlusion_forest,
        product_forest: fitted.product_forest,
        base_table: fitted.base_table,
        occlusion_table: fitted.occlusion_table,
        theta,
        mode: params.mode,
        lbp: params.lbp,
        seeds,
        dataset_hash: dataset_hash(&hashed),
    };
    model.validate()?;
    Ok(TrainOutcome { model, trace, plan })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub labeling: TwoLayerLabeling,
    pub iterations: usize,
    pub last_delta: f64,
    pub converged: bool,
    pub score: f64,
}

/// MAP labeling of one scene at node resolution.
pub fn infer_scene(model: &TcrfModel, id: &str, data: &SceneData) -> Result<Inference> {
    if data.site_size() != model.site_size {
        return Err(Error::data(id, format!("scene uses site size {}, model expects {}", data.site_size(), model.site_size)));
    }
    let missing = model.features.missing_channels(data);
    if !missing.is_empty() {
        return Err(Error::data(id, format!("model needs channels the scene lacks: {}", missing.join(", "))));
    }
    let cube = scene_features(id, data, &model.features)?;
    let pots = model.node_potentials(&cube)?;
    let graph = build_graph(&pots, &model.base_table, &model.occlusion_table, &cube, &model.theta)?;
    let out = map_lbp(&graph, &model.lbp)?;
    let score = score(&graph, &out.labeling)?;
    Ok(Inference {
        labeling: out.labeling,
        iterations: out.messages.iterations,
        last_delta: out.messages.last_delta,
        converged: out.messages.converged,
        score,
    })
}

const VOID_INDEX: ClassIndex = 0;

/// Confusion matrices over labeled scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub base: ConfusionMatrix,
    pub occlusion: ConfusionMatrix,
    /// Base layer restricted to sites whose reference occlusion is not `void`.
    pub base_occluded: ConfusionMatrix,
}

impl Evaluation {
    pub fn new(n_base: usize, n_occlusion: usize) -> Self {
        Evaluation {
            base: ConfusionMatrix::new(Layer::Base, n_base),
            occlusion: ConfusionMatrix::new(Layer::Occlusion, n_occlusion),
            base_occluded: ConfusionMatrix::new(Layer::Base, n_base),
        }
    }

    pub fn add(&mut self, reference: &TwoLayerLabeling, predicted: &TwoLayerLabeling) -> Result<()> {
        self.base.accumulate(&reference.base, &predicted.base, None)?;
        self.occlusion.accumulate(&reference.occlusion, &predicted.occlusion, None)?;
        let occluded: Grid<bool> = reference.occlusion.map(|&o| o != VOID_INDEX);
        self.base_occluded.accumulate(&reference.base, &predicted.base, Some(&occluded))
    }

    pub fn merge(&mut self, other: &Evaluation) -> Result<()> {
        self.base.merge(&other.base)?;
        self.occlusion.merge(&other.occlusion)?;
        self.base_occluded.merge(&other.base_occluded)
    }
}

/// Infers every labeled scene and accumulates confusion matrices.
/// Returns the evaluation and the per-scene inferences in input order.
pub fn evaluate(model: &TcrfModel, scenes: &[&Scene]) -> Result<(Evaluation, Vec<Inference>)> {
    let labeled: Vec<&&Scene> = scenes.iter().filter(|s| s.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::config("no labeled scenes to evaluate"));
    }
    let results = labeled
        .par_iter()
        .map(|s| {
            let inf = infer_scene(model, &s.id, &s.data)?;
            let mut e = Evaluation::new(model.domain.n_base(), model.domain.n_occlusion());
            e.add(&s.node_labels().expect("filtered to labeled"), &inf.labeling)?;
            Ok((e, inf))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Evaluation::new(model.domain.n_base(), model.domain.n_occlusion());
    let mut inferences = Vec::with_capacity(results.len());
    for (e, inf) in results {
        total.merge(&e)?;
        inferences.push(inf);
    }
    Ok((total, inferences))
}

/// Generates the configured synthetic suite as an in-memory dataset.
pub fn synthesize(recipe: &SceneRecipe, n: usize, seed: u64, fractions: [f64; 3]) -> Result<(Dataset, Suite)> {
    let suite = generate_suite(recipe, n, seed, fractions)?;
    let domain = SceneRecipe::domain();
    let mut manifest = DatasetManifest::for_domain(&domain, CHANNELS.iter().map(|c| c.to_string()).collect());
    manifest.split = Some(SplitLists {
        train: suite.split.train.clone(),
        tune: suite.split.tune.clone(),
        test: suite.split.test.clone(),
    });
    manifest.scenes = suite
        .scenes
        .iter()
        .zip(&suite.reports)
        .zip(&suite.seeds)
        .map(|((s, r), &seed)| SceneInfo {
            id: s.id.clone(),
            seed: Some(seed),
            occlusion_fraction: Some(r.occlusion_fraction),
        })
        .collect();
    let dataset = Dataset {
        manifest,
        domain,
        scenes: suite.scenes.clone(),
    };
    Ok((dataset, suite))
}

/// Generates and writes a synthetic suite under `root`.
pub fn synthesize_to(root: &Path, recipe: &SceneRecipe, n: usize, seed: u64, fractions: [f64; 3]) -> Result<Dataset> {
    let (dataset, _) = synthesize(recipe, n, seed, fractions)?;
    write_dataset(root, &dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occluded_matrix_counts_only_occluded_sites() {
        let reference = TwoLayerLabeling {
            base: Grid::from_fn(3, 1, |x, _| x as u16),
            occlusion: Grid::from_fn(3, 1, |x, _| (x == 1) as u16),
        };
        let predicted = TwoLayerLabeling {
            base: Grid::from_fn(3, 1, |_, _| 1),
            occlusion: Grid::from_fn(3, 1, |_, _| 0),
        };
        let mut e = Evaluation::new(4, 3);
        e.add(&reference, &predicted).unwrap();
        assert_eq!(e.base.total(), 3);
        assert_eq!(e.base_occluded.total(), 1);
        assert_eq!(e.base_occluded.trace(), 1);
        assert_eq!(e.occlusion.trace(), 2);
    }
}

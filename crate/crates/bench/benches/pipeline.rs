use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tcrf::features::{build_feature_cube, FeatureSpec};
use tcrf::forest::{train_forest, ForestParams, TrainSet};
use tcrf::inference::{build_graph, map_lbp, LbpParams};
use tcrf::potentials::{fit_cooccurrence, NodePotentials, ThetaParams, EPS_H};
use tcrf::synthetic::{generate, SceneRecipe};
use tcrf::training::{TrainingParams, TrainingScene};
use tcrf::Layer;

fn scene(size: usize) -> tcrf::synthetic::GeneratedScene {
    generate(&SceneRecipe {
        width: size,
        height: size,
        seed: 7,
        ..Default::default()
    })
    .unwrap()
}

fn features(c: &mut Criterion) {
    let g = scene(128);
    let spec = FeatureSpec::aerial();
    c.bench_function("feature_cube_128", |b| b.iter(|| build_feature_cube(black_box(&g.data), &spec).unwrap()));
}

fn forest(c: &mut Criterion) {
    let g = scene(96);
    let cube = build_feature_cube(&g.data, &FeatureSpec::aerial()).unwrap();
    let mut set = TrainSet::new(cube.n_features(), 4);
    for (i, &l) in g.labels.base.as_slice().iter().enumerate().step_by(3) {
        set.push(cube.node(i), l).unwrap();
    }
    let params = ForestParams {
        n_trees: 10,
        ..Default::default()
    };
    c.bench_function("forest_train_10_trees", |b| b.iter(|| train_forest(black_box(&set), &params, 1).unwrap()));
    let f = train_forest(&set, &params, 1).unwrap();
    c.bench_function("forest_predict_node", |b| b.iter(|| f.predict_distribution(black_box(cube.node(500))).unwrap()));
}

fn lbp(c: &mut Criterion) {
    let g = scene(64);
    let spec = FeatureSpec::aerial();
    let cube = build_feature_cube(&g.data, &spec).unwrap();
    let ts = TrainingScene::new("s", cube.clone(), g.labels.clone()).unwrap();
    let domain = SceneRecipe::domain();
    let params = TrainingParams {
        n_samples: 300,
        forest: ForestParams {
            n_trees: 10,
            ..Default::default()
        },
        ..Default::default()
    };
    let seeds = tcrf::training::TrainingSeeds::derive(1);
    let fitted = tcrf::training::fit_potentials(&[ts], &domain, &params, &seeds).unwrap();
    let pots = NodePotentials::compute(
        &cube,
        &fitted.base_forest,
        &fitted.occlusion_forest,
        fitted.product_forest.as_ref().map(|f| (f, domain.product_space())),
    )
    .unwrap();
    let tb = fit_cooccurrence(Layer::Base, &[&g.labels.base], 4, EPS_H).unwrap();
    let to = fit_cooccurrence(Layer::Occlusion, &[&g.labels.occlusion], 3, EPS_H).unwrap();
    let graph = build_graph(&pots, &tb, &to, &cube, &ThetaParams::default()).unwrap();
    let lp = LbpParams {
        max_iters: 20,
        ..Default::default()
    };
    c.bench_function("lbp_64x64_20_iters", |b| b.iter(|| map_lbp(black_box(&graph), &lp).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = features, forest, lbp
}
criterion_main!(benches);

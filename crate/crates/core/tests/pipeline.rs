use mergelab::checkpoint::{read_checkpoint, read_dataset, write_checkpoint, write_dataset};
use mergelab::merge::{
    ens_features, evaluate_ensemble, greedy_ensemble, greedy_soup, uniform_soup, EnsembleLevel, FeatureHead,
};
use mergelab::model::{forward, init_model};
use mergelab::synth::{class_means, generate};
use mergelab::tensor::sample_gaussian;
use mergelab::train::{evaluate, gradient_check, train, Loss};
use mergelab::{Activation, DatasetSpec, ModelPool, RngStream, TrainConfig};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_classes: 4,
        height: 6,
        width: 6,
        train_per_class: 20,
        val_per_class: 10,
        test_per_class: 10,
        noise_std: 0.8,
        brightness_jitter: 0.3,
        seed,
        ..DatasetSpec::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

fn trained_pool(seed: u64, size: usize) -> (ModelPool, mergelab::synth::SyntheticData) {
    let data = generate(&small_spec(seed)).unwrap();
    let models = (0..size)
        .map(|i| {
            let m = init_model(&[36, 8, 4], Activation::Relu, &mut RngStream::new(seed, i as u64)).unwrap();
            train(&m, &data.train, &data.val, &TrainConfig { seed, ..quick_train() }).unwrap().0
        })
        .collect();
    (ModelPool::new(models).unwrap(), data)
}

#[test]
fn class_means_concentrate_around_prototypes() {
    let spec = DatasetSpec::default();
    let data = generate(&spec).unwrap();
    let means = class_means(&data.train).unwrap();
    let se = spec.noise_std / (spec.train_per_class as f64).sqrt();
    let (mut outside3, mut total) = (0usize, 0usize);
    for k in 0..spec.n_classes {
        for (m, p) in means.row(k).iter().zip(data.prototypes.row(k)) {
            let z = (m - p).abs() / se;
            assert!(z <= 5.0, "class {k}: {z} standard errors off");
            outside3 += usize::from(z > 3.0);
            total += 1;
        }
    }
    assert!((outside3 as f64) / (total as f64) <= 0.01, "{outside3}/{total} pixels beyond 3 SE");
}

#[test]
fn greedy_methods_never_lose_to_the_best_member() {
    for seed in 0..3 {
        let (pool, data) = trained_pool(seed, 4);
        let best = pool
            .models()
            .iter()
            .map(|m| evaluate(m, &data.val).unwrap().accuracy)
            .fold(0.0, f64::max);
        let (soup, sel) = greedy_soup(&pool, &data.val).unwrap();
        assert!(sel.val_accuracy >= best);
        assert_eq!(evaluate(&soup, &data.val).unwrap().accuracy, sel.val_accuracy);
        for level in [EnsembleLevel::Logits, EnsembleLevel::Features] {
            let g = greedy_ensemble(&pool, &data.val, level).unwrap();
            assert!(g.val_accuracy >= best);
            assert_eq!(g, greedy_ensemble(&pool, &data.val, level).unwrap());
        }
    }
}

#[test]
fn identical_pool_makes_every_method_agree() {
    let (pool, data) = trained_pool(5, 1);
    let m = pool.models()[0].clone();
    let same = ModelPool::new(vec![m.clone(), m.clone(), m.clone()]).unwrap();
    let refs = same.refs();
    let single = evaluate(&m, &data.test).unwrap().accuracy;
    let soup = uniform_soup(&refs, None).unwrap();
    assert_eq!(evaluate(&soup, &data.test).unwrap().accuracy, single);
    for level in [EnsembleLevel::Logits, EnsembleLevel::Features] {
        assert_eq!(evaluate_ensemble(&refs, &data.test, level).unwrap().accuracy, single);
    }
    let x = data.test.images().unwrap();
    let merged = ens_features(&refs, &x, FeatureHead::Merged).unwrap();
    let first = ens_features(&refs, &x, FeatureHead::FirstModel).unwrap();
    assert!(merged.bit_eq(&first));
    assert_eq!(greedy_soup(&same, &data.val).unwrap().1.selected, vec![0, 1, 2]);
}

#[test]
fn trained_models_and_datasets_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, data) = trained_pool(2, 2);
    let soup = uniform_soup(&pool.refs(), None).unwrap();
    let path = dir.path().join("soup.mrgl");
    write_checkpoint(&soup, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, soup.quantized_f32());
    assert_eq!(back.meta.constituents, vec![0, 1]);

    let dpath = dir.path().join("train.mrgl");
    write_dataset(&data.train, &dpath).unwrap();
    let set = read_dataset(&dpath).unwrap();
    assert_eq!(set.labels(), data.train.labels());
    assert_eq!(set.len(), data.train.len());

    let missing = dir.path().join("nope.mrgl");
    assert!(matches!(read_checkpoint(&missing), Err(mergelab::Error::Io { .. })));
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..8 {
        let m = init_model(&[6, 8, 5, 3], Activation::Relu, &mut RngStream::new(seed, 0)).unwrap();
        let m = m.map_params(|v| v + 0.01);
        let x = sample_gaussian(&mut RngStream::new(seed, 1), &[4, 6], 0.0, 1.0).unwrap();
        let trace = forward(&m, &x).unwrap();
        let nearest_kink = trace
            .pre_activations
            .iter()
            .take(m.depth() - 1)
            .flat_map(|z| z.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min);
        if nearest_kink < 1e-3 {
            continue;
        }
        let err = gradient_check(&m, &x, &[0, 1, 2, 1], Loss::CrossEntropy).unwrap();
        assert!(err <= 1e-4, "seed {seed}: {err}");
        checked += 1;
    }
    assert!(checked >= 4, "only {checked} seeds were away from kinks");
}

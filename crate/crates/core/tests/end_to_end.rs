//! Library-level runs: data generation, training, prediction and the exact
//! GP on small problems.

use gfsvi_core::data::{gen_sin, gen_two_moons, kfold, SplitPlan};
use gfsvi_core::eval::{accuracy, pointwise_w2, predict_gp};
use gfsvi_core::gp_oracle::{gp_fit_dataset, gp_predict};
use gfsvi_core::kernels::{KernelFamily, KernelSpec, PriorSpec};
use gfsvi_core::network::{Activation, Architecture};
use gfsvi_core::numerics::{seeded_rng, Matrix};
use gfsvi_core::objective::{LikelihoodParams, RegKlConfig};
use gfsvi_core::trainer::{
    train, MeasurementSampler, Method, Model, ModelPrior, TrainOutcome, TrainerConfig,
};
use gfsvi_core::variational::{Checkpoint, VariationalPosterior, WeightPrior};

fn rbf_prior() -> PriorSpec {
    PriorSpec::new(KernelSpec::new(KernelFamily::Rbf, 1.0, 0.3), 0.1)
}

fn sin_run(method: Method, prior: ModelPrior, steps: usize, seed: u64) -> TrainOutcome {
    let mut rng = seeded_rng(seed);
    let train_set = gen_sin(60, 0.1, &mut rng).unwrap();
    let val = gen_sin(20, 0.1, &mut rng).unwrap();
    let arch = Architecture::new(1, vec![16], 1, Activation::Tanh);
    let posterior = VariationalPosterior::initialize(&arch, &mut rng);
    let model = Model {
        arch,
        posterior,
        prior,
        likelihood: LikelihoodParams::gaussian(0.1),
    };
    let cfg = TrainerConfig {
        batch_size: 30,
        steps,
        learning_rate: 1e-2,
        check_every: 20,
        seed,
        ..Default::default()
    };
    let sampler = MeasurementSampler::new(vec![-2.0], vec![2.0], 20).unwrap();
    train(
        model,
        &train_set,
        &val,
        &cfg,
        &sampler,
        &RegKlConfig::default(),
        method,
    )
    .unwrap()
}

#[test]
fn gfsvi_training_improves_validation_loss() {
    let out = sin_run(Method::Gfsvi, ModelPrior::Function(rbf_prior()), 400, 1);
    assert!(
        out.best_val_loss < out.initial_val_loss - 0.3,
        "{} vs {}",
        out.best_val_loss,
        out.initial_val_loss
    );
    let best = out
        .trace
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best, out.best_val_loss);
}

#[test]
fn training_is_deterministic_per_seed() {
    let a = sin_run(Method::Gfsvi, ModelPrior::Function(rbf_prior()), 60, 4);
    let b = sin_run(Method::Gfsvi, ModelPrior::Function(rbf_prior()), 60, 4);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.model.posterior.mean, b.model.posterior.mean);
    let c = sin_run(Method::Gfsvi, ModelPrior::Function(rbf_prior()), 60, 5);
    assert_ne!(a.trace, c.trace);
}

#[test]
fn every_method_trains_on_regression() {
    let wp = WeightPrior::new(1.0).unwrap();
    for (method, prior) in [
        (Method::Gfsvi, ModelPrior::Function(rbf_prior())),
        (Method::Tfsvi, ModelPrior::Weight(wp)),
        (Method::Mfvi, ModelPrior::Weight(wp)),
    ] {
        let out = sin_run(method, prior, 200, 2);
        assert!(out.best_val_loss.is_finite());
        assert!(out.best_val_loss < out.initial_val_loss, "{method:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let out = sin_run(Method::Gfsvi, ModelPrior::Function(rbf_prior()), 40, 3);
    let ck = out.model.checkpoint();
    let text = serde_json::to_string(&ck).unwrap();
    let back: Checkpoint = serde_json::from_str(&text).unwrap();
    assert_eq!(back, ck);
    let mut restored = out.model.clone();
    restored.posterior = back.posterior().unwrap();
    let xs = Matrix::from_fn(9, 1, |i, _| -2.0 + 0.5 * i as f64);
    let a = out
        .model
        .predict(Method::Gfsvi, &xs, &mut seeded_rng(0))
        .unwrap();
    let b = restored
        .predict(Method::Gfsvi, &xs, &mut seeded_rng(0))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn gfsvi_classifies_two_moons() {
    let mut rng = seeded_rng(6);
    let train_set = gen_two_moons(80, 0.1, &mut rng).unwrap();
    let val = gen_two_moons(40, 0.1, &mut rng).unwrap();
    let test = gen_two_moons(200, 0.1, &mut rng).unwrap();
    let arch = Architecture::new(2, vec![16], 2, Activation::Tanh);
    let posterior = VariationalPosterior::initialize(&arch, &mut rng);
    let prior = PriorSpec::new(KernelSpec::new(KernelFamily::Rbf, 2.0, 0.5), 0.0);
    let model = Model {
        arch,
        posterior,
        prior: ModelPrior::Function(prior),
        likelihood: LikelihoodParams::categorical(4),
    };
    let cfg = TrainerConfig {
        batch_size: 40,
        steps: 400,
        learning_rate: 2e-2,
        ..Default::default()
    };
    let sampler = MeasurementSampler::for_data(&train_set, 20).unwrap();
    let out = train(
        model,
        &train_set,
        &val,
        &cfg,
        &sampler,
        &RegKlConfig::default(),
        Method::Gfsvi,
    )
    .unwrap();
    let s = out
        .model
        .predict(Method::Gfsvi, &test.features, &mut rng)
        .unwrap();
    let acc = accuracy(
        s.class_probs.as_ref().unwrap(),
        test.targets.as_labels().unwrap(),
    )
    .unwrap();
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn exact_gp_summary_matches_its_marginals() {
    let mut rng = seeded_rng(8);
    let data = gen_sin(50, 0.1, &mut rng).unwrap();
    let post = gp_fit_dataset(&rbf_prior(), &data, None).unwrap();
    let xs = Matrix::from_fn(30, 1, |i, _| -2.0 + 4.0 * i as f64 / 29.0);
    let exact = gp_predict(&post, &xs).unwrap();
    let s = predict_gp(&post, &xs).unwrap();
    assert!(pointwise_w2(&s, &exact).unwrap() < 1e-12);
}

#[test]
fn kfold_partitions_generated_data() {
    let plan = SplitPlan {
        n_folds: 4,
        val_fraction: 0.2,
        seed: 3,
    };
    let folds = kfold(50, &plan).unwrap();
    let mut seen = vec![0usize; 50];
    for f in &folds {
        for &i in &f.test {
            seen[i] += 1;
        }
        assert!(f.train.iter().chain(&f.val).all(|i| !f.test.contains(i)));
    }
    assert!(seen.iter().all(|&c| c == 1));
}

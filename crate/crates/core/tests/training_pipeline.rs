//! Trained-model behavior on synthetic data: mean recovery, variance
//! recovery, shape recovery of disentangled components, translation
//! consistency, and dependence-model accuracy on the closed-form toy.

use atlas_core::atlas::{fit_atlas, AtlasConfig, MonotonePrior};
use atlas_core::data::synthetic::gen_toy_dependent;
use atlas_core::data::{Dataset, Record};
use atlas_core::dependence::{fit_dependence, DependenceConfig};
use atlas_core::nn::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn dataset_from(
    n: usize,
    seed: u64,
    names: &[&str],
    mut gen: impl FnMut(&mut ChaCha8Rng) -> (Vec<f64>, f64),
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(names.iter().map(|s| s.to_string()).collect(), false);
    for i in 0..n {
        let (covariates, y) = gen(&mut rng);
        ds.records.push(Record {
            subject_id: format!("s{i:05}"),
            time: 0,
            covariates: covariates.into_iter().map(Some).collect(),
            x: None,
            response: y,
        });
    }
    ds
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    num / (da * db).sqrt()
}

#[test]
fn additive_mean_recovers_a_planar_response() {
    // y = c1 + c2 + N(0, 0.01); the learned mean must be within 0.05 of
    // c1 + c2 on a held-out grid.
    let ds = dataset_from(3000, 1, &["c1", "c2"], |rng| {
        let c1: f64 = rng.random_range(0.0..1.0);
        let c2: f64 = rng.random_range(0.0..1.0);
        let eps: f64 = StandardNormal.sample(rng);
        (vec![c1, c2], c1 + c2 + 0.1 * eps)
    });
    let cfg = AtlasConfig {
        train: TrainConfig { seed: 2, ..TrainConfig::default() },
        ..AtlasConfig::default()
    };
    let fit = fit_atlas(&ds, &cfg, &[MonotonePrior::None; 2]).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..20 {
        for b in 0..20 {
            let c1 = 0.1 + 0.8 * a as f64 / 19.0;
            let c2 = 0.1 + 0.8 * b as f64 / 19.0;
            let p = fit.model.predict_complete(&[c1, c2], None).unwrap();
            worst = worst.max((p.mean - (c1 + c2)).abs());
        }
    }
    assert!(worst < 0.05, "worst grid error {worst}");
}

#[test]
fn homoscedastic_variance_is_recovered_within_band() {
    // True variance 0.04 everywhere; the mean learned variance over the test
    // grid must stay within [0.02, 0.08].
    let ds = dataset_from(4000, 3, &["c1", "c2"], |rng| {
        let c1: f64 = rng.random_range(0.0..1.0);
        let c2: f64 = rng.random_range(0.0..1.0);
        let eps: f64 = StandardNormal.sample(rng);
        (vec![c1, c2], c1 * c1 + 0.2 * c2 + 0.2 * eps)
    });
    let cfg = AtlasConfig {
        train: TrainConfig { seed: 4, ..TrainConfig::default() },
        ..AtlasConfig::default()
    };
    let fit = fit_atlas(&ds, &cfg, &[MonotonePrior::None; 2]).unwrap();
    let mut acc = 0.0;
    let mut count = 0;
    for a in 0..20 {
        for b in 0..20 {
            let c1 = 0.05 + 0.9 * a as f64 / 19.0;
            let c2 = 0.05 + 0.9 * b as f64 / 19.0;
            acc += fit.model.predict_complete(&[c1, c2], None).unwrap().variance;
            count += 1;
        }
    }
    let mean_var = acc / count as f64;
    assert!(
        (0.02..=0.08).contains(&mean_var),
        "mean learned variance {mean_var} outside [0.02, 0.08]"
    );
}

#[test]
fn disentangled_component_recovers_the_sine_shape() {
    // Independent covariates: the c1 subnetwork must recover sin(c1) up to a
    // constant (correlation > 0.99 on a grid).
    let ds = dataset_from(4000, 5, &["c1", "c2"], |rng| {
        let c1: f64 = rng.random_range(-2.0..2.0);
        let c2: f64 = rng.random_range(-1.0..1.0);
        let eps: f64 = StandardNormal.sample(rng);
        (vec![c1, c2], c1.sin() + c2 + 0.1 * eps)
    });
    let cfg = AtlasConfig {
        train: TrainConfig { seed: 6, ..TrainConfig::default() },
        ..AtlasConfig::default()
    };
    let fit = fit_atlas(&ds, &cfg, &[MonotonePrior::None; 2]).unwrap();
    let mut learned = Vec::new();
    let mut truth = Vec::new();
    for k in 0..200 {
        let c1 = -2.0 + 4.0 * k as f64 / 199.0;
        learned.push(fit.model.disentangle(0, c1, None).unwrap().0);
        truth.push(c1.sin());
    }
    let corr = pearson(&learned, &truth);
    assert!(corr > 0.99, "shape correlation {corr}");
}

#[test]
fn translating_responses_translates_predictions() {
    let make = |shift: f64| {
        dataset_from(800, 7, &["c1", "c2"], |rng| {
            let c1: f64 = rng.random_range(0.0..1.0);
            let c2: f64 = rng.random_range(0.0..1.0);
            let eps: f64 = StandardNormal.sample(rng);
            (vec![c1, c2], 0.7 * c1 - 0.4 * c2 + 0.15 * eps + shift)
        })
    };
    let cfg = AtlasConfig {
        hidden_width: 64,
        train: TrainConfig {
            seed: 8,
            max_epochs: 120,
            ..TrainConfig::default()
        },
        ..AtlasConfig::default()
    };
    let k = 5.0;
    let base = fit_atlas(&make(0.0), &cfg, &[MonotonePrior::None; 2]).unwrap();
    let moved = fit_atlas(&make(k), &cfg, &[MonotonePrior::None; 2]).unwrap();
    let mut shift_err: f64 = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut count = 0;
    for a in 0..10 {
        for b in 0..10 {
            let c = [0.1 + 0.8 * a as f64 / 9.0, 0.1 + 0.8 * b as f64 / 9.0];
            let pa = base.model.predict_complete(&c, None).unwrap();
            let pb = moved.model.predict_complete(&c, None).unwrap();
            shift_err = shift_err.max(((pb.mean - pa.mean) - k).abs());
            var_a += pa.variance;
            var_b += pb.variance;
            count += 1;
        }
    }
    assert!(shift_err < 0.05, "shift error {shift_err}");
    let ratio = (var_b / count as f64) / (var_a / count as f64);
    assert!(
        (0.8..=1.25).contains(&ratio),
        "variances should be statistically unchanged, ratio {ratio}"
    );
}

#[test]
fn dependence_model_tracks_the_exponential_conditional() {
    // c2 = exp(c1) + N(0, 0.01): the learned conditional mean must track
    // exp(c1) within 10% relative over [-2, 2], with a small conditional
    // variance.
    let ds = gen_toy_dependent(5000, 9).unwrap();
    let fit = fit_dependence(&ds, &DependenceConfig {
        train: TrainConfig { seed: 10, ..DependenceConfig::default().train },
        ..DependenceConfig::default()
    })
    .unwrap();
    let mut worst_rel: f64 = 0.0;
    for k in 0..41 {
        let c1 = -2.0 + 4.0 * k as f64 / 40.0;
        let p = fit.model.conditional_1d(0, 1, c1).unwrap();
        let rel = (p.mean - c1.exp()).abs() / c1.exp();
        worst_rel = worst_rel.max(rel);
        assert!(
            p.variance < 0.15,
            "conditional variance {} at c1 = {c1} should be small",
            p.variance
        );
    }
    assert!(worst_rel < 0.10, "worst relative error {worst_rel}");
}

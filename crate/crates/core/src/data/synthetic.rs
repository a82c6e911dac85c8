//! Synthetic generators that make every test in this repository
//! self-contained, with ground-truth functions exported for recovery tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Record};
use crate::error::{Error, Result};

/// Two strongly dependent covariates: `c1 ~ U[-2, 2]`,
/// `c2 = exp(c1) + N(0, 0.01)`, and `y = sin(c1) + c2 + N(0, 0.04)`.
/// Non-spatial; one record per subject. The closed-form marginal mean of the
/// response given `c1` is `sin(c1) + exp(c1)` ([`toy_marginal_mean`]).
pub fn gen_toy_dependent(n: usize, seed: u64) -> Result<Dataset> {
    if n < 100 {
        return Err(Error::Config(format!("toy generator needs n >= 100, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(vec!["c1".into(), "c2".into()], false);
    for i in 0..n {
        let c1: f64 = rng.random_range(-2.0..2.0);
        let n2: f64 = StandardNormal.sample(&mut rng);
        let c2 = c1.exp() + 0.1 * n2;
        let ny: f64 = StandardNormal.sample(&mut rng);
        let y = c1.sin() + c2 + 0.2 * ny;
        ds.records.push(Record {
            subject_id: format!("s{i:05}"),
            time: 0,
            covariates: vec![Some(c1), Some(c2)],
            x: None,
            response: y,
        });
    }
    Ok(ds)
}

/// Closed-form marginal mean of the toy response given `c1` (the other
/// covariate integrated out under its conditional law).
pub fn toy_marginal_mean(c1: f64) -> f64 {
    c1.sin() + c1.exp()
}

/// Ground truth of the spatial population generator: three monotone mean
/// components, two dependent covariates, and a heteroscedastic noise scale
/// that grows with the first covariate at every location.
#[derive(Debug, Clone, Copy)]
pub struct SpatialTruth;

impl SpatialTruth {
    /// Mean contribution of covariate `i`; non-decreasing in the covariate at
    /// every location by construction.
    pub fn mean_component(&self, i: usize, c: f64, x: f64) -> f64 {
        match i {
            0 => (0.8 + 0.4 * x) * c,
            1 => 1.2 * crate::math::softplus(2.0 * c - 1.0) * (0.7 + 0.3 * x),
            2 => 0.5 * (2.0 * c).tanh() * (1.0 + 0.3 * x),
            _ => panic!("spatial truth has 3 covariates"),
        }
    }

    /// Noise standard deviation; increasing in `c1` at every location.
    pub fn noise_sd(&self, c1: f64, x: f64) -> f64 {
        0.08 + 0.12 * c1 * (0.5 + 0.5 * x)
    }

    /// Conditional means of `c2` and `c3` given `c1`.
    pub fn dependent_mean(&self, target: usize, c1: f64) -> f64 {
        match target {
            1 => 0.2 + 0.6 * c1 + 0.05 * (3.0 * c1).sin(),
            2 => 0.1 + 0.5 * c1.powi(3) + 0.3 * c1,
            _ => panic!("covariates 1 and 2 depend on covariate 0"),
        }
    }

    /// Conditional noise standard deviations of `c2` and `c3` given `c1`.
    pub fn dependent_sd(&self, target: usize) -> f64 {
        match target {
            1 => 0.07,
            2 => 0.09,
            _ => panic!("covariates 1 and 2 depend on covariate 0"),
        }
    }
}

/// A spatial population with three dependent covariates (`c2`, `c3` are
/// monotone noisy functions of `c1`), 50 depths per subject, monotone mean
/// components per covariate, and noise whose scale grows with `c1`:
/// `y(x) = Σ_i m_i(c_i, x) + σ(c1, x)·ε`. See [`SpatialTruth`] for the exact
/// functional forms.
pub fn gen_spatial_population(n_subjects: usize, seed: u64) -> Result<Dataset> {
    if n_subjects < 50 {
        return Err(Error::Config(format!(
            "spatial generator needs at least 50 subjects, got {n_subjects}"
        )));
    }
    const DEPTHS: usize = 50;
    let truth = SpatialTruth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(vec!["c1".into(), "c2".into(), "c3".into()], true);
    for s in 0..n_subjects {
        let c1: f64 = rng.random_range(0.0..1.0);
        let e2: f64 = StandardNormal.sample(&mut rng);
        let e3: f64 = StandardNormal.sample(&mut rng);
        let c2 = truth.dependent_mean(1, c1) + truth.dependent_sd(1) * e2;
        let c3 = truth.dependent_mean(2, c1) + truth.dependent_sd(2) * e3;
        for d in 0..DEPTHS {
            let x = d as f64 / (DEPTHS - 1) as f64;
            let mean = truth.mean_component(0, c1, x)
                + truth.mean_component(1, c2, x)
                + truth.mean_component(2, c3, x);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let y = mean + truth.noise_sd(c1, x) * eps;
            ds.records.push(Record {
                subject_id: format!("s{s:05}"),
                time: 0,
                covariates: vec![Some(c1), Some(c2), Some(c3)],
                x: Some(x),
                response: y,
            });
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    #[test]
    fn toy_mean_at_origin_matches_closed_form() {
        // E[y | c1 = 0] = sin(0) + exp(0) = 1.
        let ds = gen_toy_dependent(10_000, 3).unwrap();
        let near: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| r.covariates[0].unwrap().abs() < 0.1)
            .map(|r| r.response)
            .collect();
        assert!(near.len() > 100);
        let m = math::mean(&near);
        // The closed form varies slightly over the bin; 3 SE plus bin width slack.
        assert!((m - 1.0).abs() < 3.0 * math::std_error_of_mean(&near) + 0.12, "bin mean {m}");
    }

    #[test]
    fn toy_conditional_variance_is_noise_composition() {
        // Var(y | c1) = 0.04 + 0.01 = 0.05 (response noise plus c2 noise).
        let ds = gen_toy_dependent(50_000, 5).unwrap();
        let bin: Vec<f64> = ds
            .records
            .iter()
            .filter(|r| (r.covariates[0].unwrap() - 0.5).abs() < 0.05)
            .map(|r| r.response)
            .collect();
        assert!(bin.len() > 500);
        let var = math::population_variance(&bin);
        // sin + exp drift across the narrow bin adds a little extra variance.
        assert!((var - 0.05).abs() < 0.012, "bin variance {var}");
    }

    #[test]
    fn toy_moments_match_closed_forms() {
        // E[c2] = E[exp(c1)] = (e^2 - e^-2)/4; E[y] = E[sin(c1)] + E[c2] = E[c2].
        let ds = gen_toy_dependent(10_000, 11).unwrap();
        let c2: Vec<f64> = ds.records.iter().map(|r| r.covariates[1].unwrap()).collect();
        let y: Vec<f64> = ds.records.iter().map(|r| r.response).collect();
        let expect = (2.0_f64.exp() - (-2.0_f64).exp()) / 4.0;
        assert!((math::mean(&c2) - expect).abs() < 3.0 * math::std_error_of_mean(&c2));
        assert!((math::mean(&y) - expect).abs() < 3.0 * math::std_error_of_mean(&y));
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let a = gen_toy_dependent(200, 7).unwrap();
        let b = gen_toy_dependent(200, 7).unwrap();
        assert_eq!(a.records, b.records);
        let c = gen_spatial_population(50, 7).unwrap();
        let d = gen_spatial_population(50, 7).unwrap();
        assert_eq!(c.records, d.records);
        let e = gen_toy_dependent(200, 8).unwrap();
        assert_ne!(a.records, e.records);
    }

    #[test]
    fn spatial_truth_components_are_monotone_and_noise_grows() {
        let truth = SpatialTruth;
        for i in 0..3 {
            for xi in 0..5 {
                let x = xi as f64 / 4.0;
                let mut prev = f64::NEG_INFINITY;
                for ci in 0..200 {
                    let c = -0.5 + 2.0 * ci as f64 / 199.0;
                    let v = truth.mean_component(i, c, x);
                    assert!(v >= prev - 1e-12, "component {i} not monotone at ({c}, {x})");
                    prev = v;
                }
            }
        }
        for xi in 0..5 {
            let x = xi as f64 / 4.0;
            assert!(truth.noise_sd(0.9, x) > truth.noise_sd(0.1, x));
        }
    }

    #[test]
    fn spatial_covariate_moments_match_closed_forms() {
        let ds = gen_spatial_population(200, 13).unwrap();
        // One covariate draw per subject; dedupe by subject.
        let mut c2 = Vec::new();
        let mut c3 = Vec::new();
        let mut last = String::new();
        for r in &ds.records {
            if r.subject_id != last {
                c2.push(r.covariates[1].unwrap());
                c3.push(r.covariates[2].unwrap());
                last = r.subject_id.clone();
            }
        }
        // E[c2] = 0.2 + 0.6*0.5 + 0.05*E[sin(3 c1)], E[sin(3u)] = (1 - cos 3)/3.
        let e_c2 = 0.2 + 0.3 + 0.05 * (1.0 - 3.0_f64.cos()) / 3.0;
        // E[c3] = 0.1 + 0.5*E[c1^3] + 0.3*0.5 = 0.1 + 0.125 + 0.15.
        let e_c3 = 0.375;
        assert!((math::mean(&c2) - e_c2).abs() < 4.0 * math::std_error_of_mean(&c2));
        assert!((math::mean(&c3) - e_c3).abs() < 4.0 * math::std_error_of_mean(&c3));
    }

    #[test]
    fn generator_preconditions_are_enforced() {
        assert!(gen_toy_dependent(50, 0).is_err());
        assert!(gen_spatial_population(10, 0).is_err());
    }
}

//! Single-covariate marginalization: the distribution of the response given
//! one covariate and a location, with the remaining covariates integrated out
//! under their conditional law.
//!
//! For an additive model the marginal is Gaussian with
//!
//! - mean  μ̃ = β + f^m_i(c_i, x) + Σ_{k≠i} E[f^m_k(c_k, x) | c_i]   (total expectation)
//! - variance  σ̃² = σ̃²_E + σ̃²_V                                   (total variance)
//!   - σ̃²_E = f^v_i(c_i, x) + Σ_{k≠i} E[f^v_k(c_k, x) | c_i]
//!   - σ̃²_V = Σ_{k≠i} Var(f^m_k | c_i) + ΣΣ_{K1≠K2≠i} Cov(f^m_{K1}, f^m_{K2} | c_i)
//!
//! The 1-D integrals are approximated by antithetic Monte Carlo draws from
//! `p(c_k | c_i)` (or 64-node Gauss–Hermite quadrature), the covariance terms
//! from pairwise draws from `p(c_{K1}, c_{K2} | c_i)`. Curve evaluation draws
//! joint conditional samples once per grid point, which keeps the per-point
//! cost at O(L·N); the covariance structure of the joint draws realizes the
//! same decomposition. A joint-sampling brute-force estimator doubles as the
//! independent test oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::atlas::{AtlasModel, EvalScratch, GaussianParams};
use crate::dependence::{BivariateGaussian, ConditionalGaussian, DependenceModel};
use crate::error::{Error, Result};
use crate::math::{self, derive_seed, GaussHermite};
use crate::parallel::try_map_indexed;

/// Monte Carlo sample count and seed for one marginalization call.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Samples per conditional (L). At least 100.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            samples: 2048,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::Config(format!(
                "sample count {} is below the minimum of 100",
                self.samples
            )));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            samples: self.samples,
            seed,
        }
    }
}

/// How the 1-D conditional expectations are integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    MonteCarlo,
    /// 64-node Gauss–Hermite quadrature for the 1-D integrals; the pairwise
    /// covariance terms stay Monte Carlo.
    GaussHermite,
}

const GAUSS_HERMITE_NODES: usize = 64;

/// Unconditional per-covariate Gaussian marginals, used when covariate
/// dependence is deliberately ignored ("dependence off").
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependentMarginals {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl IndependentMarginals {
    pub fn new(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::Config("means/variances length mismatch".into()));
        }
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("marginal variances must be non-negative".into()));
        }
        Ok(IndependentMarginals { means, variances })
    }

    /// The training-data covariate moments frozen in the atlas normalization.
    pub fn from_atlas(atlas: &AtlasModel) -> Self {
        IndependentMarginals {
            means: atlas.norm.covariate_means.clone(),
            variances: atlas.norm.covariate_variances.clone(),
        }
    }
}

/// The covariate law to marginalize under: the trained conditional
/// dependence model, or unconditional marginals that ignore dependence.
#[derive(Debug, Clone, Copy)]
pub enum CovariateLaw<'a> {
    Conditional(&'a DependenceModel),
    Independent(&'a IndependentMarginals),
}

impl<'a> CovariateLaw<'a> {
    fn num_covariates(&self) -> usize {
        match self {
            CovariateLaw::Conditional(m) => m.num_covariates(),
            CovariateLaw::Independent(m) => m.means.len(),
        }
    }

    fn conditional_full(&self, i: usize, c_i: f64) -> Result<ConditionalGaussian> {
        match self {
            CovariateLaw::Conditional(m) => m.conditional(i, c_i),
            CovariateLaw::Independent(m) => {
                let others: Vec<usize> =
                    (0..m.means.len()).filter(|&k| k != i).collect();
                let means = others.iter().map(|&k| m.means[k]).collect();
                let vars: Vec<f64> = others.iter().map(|&k| m.variances[k]).collect();
                Ok(ConditionalGaussian::diagonal(i, c_i, others, means, &vars))
            }
        }
    }

    fn conditional_1d(&self, i: usize, k: usize, c_i: f64) -> Result<GaussianParams> {
        match self {
            CovariateLaw::Conditional(m) => m.conditional_1d(i, k, c_i),
            CovariateLaw::Independent(m) => {
                if i == k {
                    return Err(Error::Config("conditional of a covariate on itself".into()));
                }
                GaussianParams::new(m.means[k], m.variances[k].max(f64::MIN_POSITIVE))
            }
        }
    }

    fn conditional_2d(&self, i: usize, k1: usize, k2: usize, c_i: f64) -> Result<BivariateGaussian> {
        match self {
            CovariateLaw::Conditional(m) => m.conditional_2d(i, k1, k2, c_i),
            CovariateLaw::Independent(m) => {
                if i == k1 || i == k2 || k1 == k2 {
                    return Err(Error::Config("indices must be pairwise distinct".into()));
                }
                Ok(BivariateGaussian {
                    mean: [m.means[k1], m.means[k2]],
                    covariance: [[m.variances[k1], 0.0], [0.0, m.variances[k2]]],
                })
            }
        }
    }
}

/// A Monte Carlo estimate with its standard error (zero for quadrature).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// One grid point of a marginal curve, with standard errors of the Monte
/// Carlo estimates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginalPoint {
    pub c: f64,
    pub mu: f64,
    pub var_e: f64,
    pub var_v: f64,
    pub var_total: f64,
    pub se_mu: f64,
    pub se_var_e: f64,
    pub se_var_v: f64,
}

/// The marginal response distribution of one covariate over a grid at a
/// fixed location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalCurve {
    pub covariate_index: usize,
    pub covariate_name: String,
    pub x: Option<f64>,
    pub points: Vec<MarginalPoint>,
}

impl MarginalCurve {
    /// CSV columns: `c_i, mu, var_E, var_V, var_total`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["c_i", "mu", "var_E", "var_V", "var_total"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for p in &self.points {
            w.write_record([
                format!("{}", p.c),
                format!("{}", p.mu),
                format!("{}", p.var_e),
                format!("{}", p.var_v),
                format!("{}", p.var_total),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(atlas: &AtlasModel, law: &CovariateLaw, i: usize, c_i: f64) -> Result<()> {
    if law.num_covariates() != atlas.num_covariates() {
        return Err(Error::Untrained(format!(
            "covariate law models {} covariates, atlas has {}",
            law.num_covariates(),
            atlas.num_covariates()
        )));
    }
    if let CovariateLaw::Conditional(dep) = law {
        if dep.covariate_names != atlas.covariate_names {
            return Err(Error::Untrained(
                "dependence model covariates do not match the atlas".into(),
            ));
        }
    }
    if i >= atlas.num_covariates() {
        return Err(Error::Config(format!(
            "covariate index {i} out of range ({} covariates)",
            atlas.num_covariates()
        )));
    }
    if !atlas.norm.covariates[i].contains(c_i) {
        log::warn!(
            "covariate {} value {c_i} is outside the training range [{}, {}]",
            atlas.covariate_names[i],
            atlas.norm.covariates[i].min,
            atlas.norm.covariates[i].max
        );
    }
    Ok(())
}

/// L standard normals in antithetic ± pairs.
fn antithetic_normals<R: rand::Rng + ?Sized>(rng: &mut R, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l);
    while out.len() + 2 <= l {
        let z: f64 = StandardNormal.sample(rng);
        out.push(z);
        out.push(-z);
    }
    if out.len() < l {
        out.push(StandardNormal.sample(rng));
    }
    out
}

/// Mean contribution of subnetwork `k` at original-unit covariate value `c`.
fn mean_contrib(
    atlas: &AtlasModel,
    k: usize,
    c: f64,
    x: Option<f64>,
    scratch: &mut EvalScratch,
) -> Result<f64> {
    Ok(atlas.disentangle_with(k, c, x, scratch)?.0)
}

fn var_contrib(
    atlas: &AtlasModel,
    k: usize,
    c: f64,
    x: Option<f64>,
    scratch: &mut EvalScratch,
) -> Result<f64> {
    Ok(atlas.disentangle_with(k, c, x, scratch)?.1)
}

/// Marginal mean μ̃(c_i, x): the subnetwork contribution of `c_i` plus the
/// conditional expectations of every other subnetwork (law of total
/// expectation), plus the model intercept.
pub fn marginal_mean(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    c_i: f64,
    x: Option<f64>,
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<McEstimate> {
    sampling.validate()?;
    check_inputs(atlas, &law, i, c_i)?;
    let mut scratch = EvalScratch::default();
    let mut value =
        atlas.intercept_original() + mean_contrib(atlas, i, c_i, x, &mut scratch)?;
    let mut se_sq = 0.0;
    let gh = matches!(integration, Integration::GaussHermite)
        .then(|| GaussHermite::new(GAUSS_HERMITE_NODES));
    for k in (0..atlas.num_covariates()).filter(|&k| k != i) {
        let dist = law.conditional_1d(i, k, c_i)?;
        match &gh {
            Some(rule) => {
                value +=
                    gh_expect_checked(rule, &dist, |c| mean_contrib(atlas, k, c, x, &mut scratch))?;
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    sampling.seed,
                    "marginal-mean",
                    pack(i, k),
                ));
                let zs = antithetic_normals(&mut rng, sampling.samples);
                let sd = dist.variance.sqrt();
                let mut vals = Vec::with_capacity(zs.len());
                for z in zs {
                    vals.push(mean_contrib(atlas, k, dist.mean + sd * z, x, &mut scratch)?);
                }
                value += math::mean(&vals);
                se_sq += math::std_error_of_mean(&vals).powi(2);
            }
        }
    }
    Ok(McEstimate {
        value,
        std_err: se_sq.sqrt(),
    })
}

/// Expected conditional variance σ̃²_E(c_i, x): the variance contribution of
/// `c_i` plus conditional expectations of the other variance heads. Includes
/// the model's variance floor, so it is strictly positive.
pub fn expected_variance(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    c_i: f64,
    x: Option<f64>,
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<McEstimate> {
    sampling.validate()?;
    check_inputs(atlas, &law, i, c_i)?;
    let mut scratch = EvalScratch::default();
    let mut value =
        atlas.variance_floor_original() + var_contrib(atlas, i, c_i, x, &mut scratch)?;
    let mut se_sq = 0.0;
    let gh = matches!(integration, Integration::GaussHermite)
        .then(|| GaussHermite::new(GAUSS_HERMITE_NODES));
    for k in (0..atlas.num_covariates()).filter(|&k| k != i) {
        let dist = law.conditional_1d(i, k, c_i)?;
        match &gh {
            Some(rule) => {
                value +=
                    gh_expect_checked(rule, &dist, |c| var_contrib(atlas, k, c, x, &mut scratch))?;
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    sampling.seed,
                    "expected-variance",
                    pack(i, k),
                ));
                let zs = antithetic_normals(&mut rng, sampling.samples);
                let sd = dist.variance.sqrt();
                let mut vals = Vec::with_capacity(zs.len());
                for z in zs {
                    vals.push(var_contrib(atlas, k, dist.mean + sd * z, x, &mut scratch)?);
                }
                value += math::mean(&vals);
                se_sq += math::std_error_of_mean(&vals).powi(2);
            }
        }
    }
    Ok(McEstimate {
        value,
        std_err: se_sq.sqrt(),
    })
}

/// Variance of the conditional expectation σ̃²_V(c_i, x): per-covariate
/// conditional variances of the mean contributions (from 1-D draws) plus the
/// pairwise conditional covariances (from 2-D draws). Slightly negative
/// estimates within Monte Carlo noise are clamped to zero with a warning;
/// larger negatives signal dependence-model misfit and are an error.
pub fn variance_of_expectation(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    c_i: f64,
    x: Option<f64>,
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<McEstimate> {
    sampling.validate()?;
    check_inputs(atlas, &law, i, c_i)?;
    let others: Vec<usize> = (0..atlas.num_covariates()).filter(|&k| k != i).collect();
    let mut scratch = EvalScratch::default();
    let mut value = 0.0;
    let mut se_sq = 0.0;
    let gh = matches!(integration, Integration::GaussHermite)
        .then(|| GaussHermite::new(GAUSS_HERMITE_NODES));

    // Term (3): Var(f^m_k | c_i) per other covariate.
    for &k in &others {
        let dist = law.conditional_1d(i, k, c_i)?;
        match &gh {
            Some(rule) => {
                let mu_k =
                    gh_expect_checked(rule, &dist, |c| mean_contrib(atlas, k, c, x, &mut scratch))?;
                value += gh_expect_checked(rule, &dist, |c| {
                    mean_contrib(atlas, k, c, x, &mut scratch).map(|f| (f - mu_k) * (f - mu_k))
                })?;
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    sampling.seed,
                    "variance-of-expectation",
                    pack(i, k),
                ));
                let zs = antithetic_normals(&mut rng, sampling.samples);
                let sd = dist.variance.sqrt();
                let mut vals = Vec::with_capacity(zs.len());
                for z in zs {
                    vals.push(mean_contrib(atlas, k, dist.mean + sd * z, x, &mut scratch)?);
                }
                let (var, se) = variance_with_se(&vals);
                value += var;
                se_sq += se * se;
            }
        }
    }

    // Term (4): pairwise covariances from the 2-D conditionals, counted for
    // both orderings of each pair.
    for (a, &k1) in others.iter().enumerate() {
        for &k2 in &others[a + 1..] {
            let biv = law.conditional_2d(i, k1, k2, c_i)?;
            let chol = biv.cholesky();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                sampling.seed,
                "pairwise-covariance",
                pack(i, pack(k1, k2) as usize),
            ));
            let l = sampling.samples;
            let mut f1 = Vec::with_capacity(l);
            let mut f2 = Vec::with_capacity(l);
            let pair_of = |z1: f64, z2: f64| (
                biv.mean[0] + chol[0][0] * z1,
                biv.mean[1] + chol[1][0] * z1 + chol[1][1] * z2,
            );
            let mut drawn = 0;
            while drawn < l {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                // Antithetic pair: (z1, z2) and (-z1, -z2).
                for (s1, s2) in [(z1, z2), (-z1, -z2)] {
                    if drawn >= l {
                        break;
                    }
                    let (c1, c2) = pair_of(s1, s2);
                    f1.push(mean_contrib(atlas, k1, c1, x, &mut scratch)?);
                    f2.push(mean_contrib(atlas, k2, c2, x, &mut scratch)?);
                    drawn += 1;
                }
            }
            let (cov, se) = covariance_with_se(&f1, &f2);
            value += 2.0 * cov;
            se_sq += (2.0 * se) * (2.0 * se);
        }
    }

    let std_err = se_sq.sqrt();
    if value < 0.0 {
        if value >= -3.0 * std_err {
            log::warn!(
                "variance-of-expectation estimate {value} is slightly negative \
                 (within {std_err} Monte Carlo SE); clamping to 0"
            );
            value = 0.0;
        } else {
            return Err(Error::DependenceMisfit(format!(
                "variance-of-expectation estimate {value} is negative beyond \
                 3 Monte Carlo standard errors ({std_err})"
            )));
        }
    }
    Ok(McEstimate { value, std_err })
}

fn gh_expect_checked(
    rule: &GaussHermite,
    dist: &GaussianParams,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let mut err = None;
    let v = rule.expect(dist.mean, dist.variance, |c| match f(c) {
        Ok(v) => v,
        Err(e) => {
            err = Some(e);
            0.0
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

fn pack(i: usize, k: usize) -> u64 {
    ((i as u64) << 32) ^ k as u64
}

/// Population variance of `vals` plus the standard error of that estimate
/// (via the fourth central moment).
fn variance_with_se(vals: &[f64]) -> (f64, f64) {
    let m = math::mean(vals);
    let n = vals.len() as f64;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for v in vals {
        let d = v - m;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m4 /= n;
    let var_of_var = ((m4 - m2 * m2) / n).max(0.0);
    (m2, var_of_var.sqrt())
}

/// Sample covariance of two aligned value vectors plus its standard error.
fn covariance_with_se(f1: &[f64], f2: &[f64]) -> (f64, f64) {
    let m1 = math::mean(f1);
    let m2 = math::mean(f2);
    let n = f1.len() as f64;
    let mut cov = 0.0;
    let mut spread = 0.0;
    for (a, b) in f1.iter().zip(f2) {
        let p = (a - m1) * (b - m2);
        cov += p;
        spread += p * p;
    }
    cov /= n;
    spread /= n;
    let se = ((spread - cov * cov).max(0.0) / n).sqrt();
    (cov, se)
}

/// One marginal point via joint conditional sampling: a single batch of L
/// draws from the full conditional supplies every 1-D expectation and the
/// empirical variance of the summed mean contributions (which equals the
/// per-covariate variance terms plus all pairwise covariances), keeping the
/// cost at O(L·N).
pub fn marginal_point(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    c_i: f64,
    x: Option<f64>,
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<MarginalPoint> {
    sampling.validate()?;
    check_inputs(atlas, &law, i, c_i)?;

    if matches!(integration, Integration::GaussHermite) {
        let mu = marginal_mean(atlas, law, i, c_i, x, sampling, integration)?;
        let var_e = expected_variance(atlas, law, i, c_i, x, sampling, integration)?;
        let var_v = variance_of_expectation(atlas, law, i, c_i, x, sampling, integration)?;
        return Ok(MarginalPoint {
            c: c_i,
            mu: mu.value,
            var_e: var_e.value,
            var_v: var_v.value,
            var_total: var_e.value + var_v.value,
            se_mu: mu.std_err,
            se_var_e: var_e.std_err,
            se_var_v: var_v.std_err,
        });
    }

    let full = law.conditional_full(i, c_i)?;
    let m = full.dim();
    let l = sampling.samples;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(sampling.seed, "marginal-point", pack(i, 0)));

    let mut scratch = EvalScratch::default();
    let base_mean = atlas.intercept_original() + mean_contrib(atlas, i, c_i, x, &mut scratch)?;
    let base_var = atlas.variance_floor_original() + var_contrib(atlas, i, c_i, x, &mut scratch)?;

    // Mean contributions per draw (summed over covariates), variance
    // contributions accumulated directly.
    let mut sum_mean = vec![0.0; m];
    let mut var_vals = vec![0.0; m];
    let mut mean_sums: Vec<f64> = Vec::with_capacity(l);
    let mut se_var_e_sq = 0.0;
    let mut covariates = vec![0.0; m];
    let mut var_samples: Vec<Vec<f64>> = vec![Vec::with_capacity(l); m];
    let mut drawn = 0;
    let mut z = vec![0.0; m];
    while drawn < l {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(&mut rng);
        }
        for sign in [1.0, -1.0] {
            if drawn >= l {
                break;
            }
            // c = mu + L (sign * z): antithetic joint pair.
            for (a, c) in covariates.iter_mut().enumerate() {
                let mut acc = full.mean[a];
                for b in 0..=a {
                    acc += full_chol(&full, a, b) * sign * z[b];
                }
                *c = acc;
            }
            let mut s = 0.0;
            for (pos, &k) in full.other_indices.iter().enumerate() {
                let (fm, fv) = atlas.disentangle_with(k, covariates[pos], x, &mut scratch)?;
                s += fm;
                sum_mean[pos] += fm;
                var_vals[pos] += fv;
                var_samples[pos].push(fv);
            }
            mean_sums.push(s);
            drawn += 1;
        }
    }

    let mu = base_mean + math::mean(&mean_sums);
    let se_mu = math::std_error_of_mean(&mean_sums);
    let mut var_e = base_var;
    for pos in 0..m {
        var_e += var_vals[pos] / l as f64;
        se_var_e_sq += math::std_error_of_mean(&var_samples[pos]).powi(2);
    }
    let (var_v, se_var_v) = variance_with_se(&mean_sums);

    Ok(MarginalPoint {
        c: c_i,
        mu,
        var_e,
        var_v,
        var_total: var_e + var_v,
        se_mu,
        se_var_e: se_var_e_sq.sqrt(),
        se_var_v,
    })
}

// ConditionalGaussian keeps its Cholesky private; expose the entry lookup
// needed by the joint sampler here.
fn full_chol(full: &ConditionalGaussian, a: usize, b: usize) -> f64 {
    full.chol_entry(a, b)
}

/// Marginal curve over a covariate grid at a fixed location. Grid points are
/// evaluated in parallel when the `parallel` feature is enabled; each point
/// derives its own seed from the base seed and the point index, so the
/// result is identical regardless of thread count.
pub fn marginal_curve(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    x: Option<f64>,
    grid: &[f64],
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<MarginalCurve> {
    if grid.is_empty() {
        return Err(Error::Config("marginal grid is empty".into()));
    }
    sampling.validate()?;
    check_inputs(atlas, &law, i, grid[0])?;
    let points = try_map_indexed(grid.len(), |idx| {
        let point_seed = derive_seed(sampling.seed, "curve-point", pack(i, idx));
        marginal_point(
            atlas,
            law,
            i,
            grid[idx],
            x,
            &sampling.with_seed(point_seed),
            integration,
        )
    })?;
    Ok(MarginalCurve {
        covariate_index: i,
        covariate_name: atlas.covariate_names[i].clone(),
        x,
        points,
    })
}

/// Sequential reference implementation of [`marginal_curve`]; output is
/// bit-identical. Used by the benchmark suite and the determinism tests.
pub fn marginal_curve_seq(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    x: Option<f64>,
    grid: &[f64],
    sampling: &SamplingConfig,
    integration: Integration,
) -> Result<MarginalCurve> {
    if grid.is_empty() {
        return Err(Error::Config("marginal grid is empty".into()));
    }
    sampling.validate()?;
    check_inputs(atlas, &law, i, grid[0])?;
    let mut points = Vec::with_capacity(grid.len());
    for idx in 0..grid.len() {
        let point_seed = derive_seed(sampling.seed, "curve-point", pack(i, idx));
        points.push(marginal_point(
            atlas,
            law,
            i,
            grid[idx],
            x,
            &sampling.with_seed(point_seed),
            integration,
        )?);
    }
    Ok(MarginalCurve {
        covariate_index: i,
        covariate_name: atlas.covariate_names[i].clone(),
        x,
        points,
    })
}

/// Empirical moments from joint sampling, the independent oracle for the
/// decomposition: draw full co-covariate vectors from the conditional law,
/// push them through the model, sample the response noise, and take the
/// moments of the resulting response draws.
#[derive(Debug, Clone, Copy)]
pub struct JointMoments {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

pub fn brute_force_marginal(
    atlas: &AtlasModel,
    law: CovariateLaw,
    i: usize,
    c_i: f64,
    x: Option<f64>,
    l_joint: usize,
    seed: u64,
) -> Result<JointMoments> {
    check_inputs(atlas, &law, i, c_i)?;
    if atlas.num_covariates() > 4 {
        return Err(Error::Config(
            "the brute-force oracle is restricted to at most 4 covariates".into(),
        ));
    }
    if l_joint < 2 {
        return Err(Error::Config("need at least 2 joint samples".into()));
    }
    let full = law.conditional_full(i, c_i)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "brute-force", pack(i, 0)));
    let mut scratch = EvalScratch::default();
    let mut others = vec![0.0; full.dim()];
    let mut covariates = vec![0.0; atlas.num_covariates()];
    let mut ys = Vec::with_capacity(l_joint);
    for _ in 0..l_joint {
        full.sample_into(&mut rng, &mut others);
        covariates[i] = c_i;
        for (pos, &k) in full.other_indices.iter().enumerate() {
            covariates[k] = others[pos];
        }
        let p = atlas.predict_with(&covariates, x, &mut scratch)?;
        let eps: f64 = StandardNormal.sample(&mut rng);
        ys.push(p.mean + p.std_dev() * eps);
    }
    let mean = math::mean(&ys);
    let se_mean = math::std_error_of_mean(&ys);
    let (variance, se_variance) = variance_with_se(&ys);
    Ok(JointMoments {
        mean,
        variance,
        se_mean,
        se_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{identity_normalization, AtlasConfig, MonotonePrior};
    use crate::dependence::constant_model;
    use crate::nn::{ActivationKind, DenseNetwork};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn untrained(n: usize, seed: u64) -> AtlasModel {
        AtlasModel::untrained(
            (0..n).map(|i| format!("c{}", i + 1)).collect(),
            false,
            &vec![MonotonePrior::None; n],
            &AtlasConfig {
                hidden_width: 8,
                ..AtlasConfig::default()
            },
            identity_normalization(n, false),
            seed,
        )
        .unwrap()
    }

    /// A model whose subnetwork means are exact single-layer linear maps
    /// `slope·c + 0` and whose variance heads are the constant softplus(0).
    fn linear_model(slopes: &[f64]) -> AtlasModel {
        let mut model = untrained(slopes.len(), 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for (i, &slope) in slopes.iter().enumerate() {
            let mut mean_net = DenseNetwork::new(
                &[1, 1],
                ActivationKind::Linear,
                ActivationKind::Linear,
                &mut rng,
            )
            .unwrap();
            mean_net.write_params(&[slope, 0.0]);
            let mut var_net = DenseNetwork::new(
                &[2, 1],
                ActivationKind::Linear,
                ActivationKind::Softplus,
                &mut rng,
            )
            .unwrap();
            var_net.write_params(&[0.0, 0.0, 0.0]);
            model.subnets[i] = crate::atlas::Subnetwork {
                mean: crate::atlas::MeanBackbone::Plain { net: mean_net },
                var_head: var_net,
            };
        }
        model
    }

    fn independent(n: usize, means: &[f64], vars: &[f64]) -> IndependentMarginals {
        assert_eq!(n, means.len());
        IndependentMarginals::new(means.to_vec(), vars.to_vec()).unwrap()
    }

    #[test]
    fn single_covariate_marginal_mean_is_exact() {
        let model = untrained(1, 3);
        let marginals = independent(1, &[0.5], &[0.1]);
        let est = marginal_mean(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.4,
            None,
            &SamplingConfig::default(),
            Integration::MonteCarlo,
        )
        .unwrap();
        let expect = model.intercept_original() + model.disentangle(0, 0.4, None).unwrap().0;
        assert_eq!(est.value.to_bits(), expect.to_bits());
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn single_covariate_expected_variance_is_the_head_alone() {
        let model = untrained(1, 4);
        let marginals = independent(1, &[0.5], &[0.1]);
        let est = expected_variance(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.7,
            None,
            &SamplingConfig::default(),
            Integration::MonteCarlo,
        )
        .unwrap();
        let expect =
            model.variance_floor_original() + model.disentangle(0, 0.7, None).unwrap().1;
        assert_eq!(est.value.to_bits(), expect.to_bits());
    }

    #[test]
    fn constant_variance_heads_sum_exactly() {
        // Linear model: variance heads are softplus(0) = ln 2 each.
        let model = linear_model(&[0.3, -0.2, 0.9]);
        let marginals = independent(3, &[0.5, 0.5, 0.5], &[0.02, 0.02, 0.02]);
        let est = expected_variance(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.5,
            None,
            &SamplingConfig::default(),
            Integration::MonteCarlo,
        )
        .unwrap();
        let expect = model.variance_floor_original() + 3.0 * std::f64::consts::LN_2;
        assert_abs_diff_eq!(est.value, expect, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_dependence_gives_zero_variance_of_expectation() {
        let model = linear_model(&[0.4, 0.8]);
        let marginals = independent(2, &[0.3, 0.6], &[0.0, 0.0]);
        let est = variance_of_expectation(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.3,
            None,
            &SamplingConfig::default(),
            Integration::MonteCarlo,
        )
        .unwrap();
        // Only floating-point summation residue remains.
        assert!(est.value.abs() < 1e-12, "var_V = {}", est.value);
    }

    #[test]
    fn linear_gaussian_variance_of_expectation_matches_closed_form() {
        // f^m_2(c) = a·c with p(c_2 | c_1) = N(m, s²) gives Var = a²s².
        let a = 1.7;
        let s2 = 0.09;
        let model = linear_model(&[0.4, a]);
        let marginals = independent(2, &[0.3, 0.55], &[0.0, s2]);
        let est = variance_of_expectation(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.3,
            None,
            &SamplingConfig { samples: 4096, seed: 9 },
            Integration::MonteCarlo,
        )
        .unwrap();
        let expect = a * a * s2;
        assert!(
            (est.value - expect).abs() < 3.0 * est.std_err + 1e-9,
            "estimate {} vs closed form {expect} (se {})",
            est.value,
            est.std_err
        );
    }

    #[test]
    fn positive_conditional_covariance_gives_positive_pair_term() {
        // Both slopes positive and strong positive conditional covariance:
        // the pairwise term must push sigma^2_V above the sum of the
        // univariate variance terms.
        let model = linear_model(&[0.0, 1.0, 1.0]);
        // Conditional of (c2, c3) given c1: correlated with rho ~ 0.9.
        let l11 = 0.3;
        let l21 = 0.27;
        let l22 = 0.1;
        let dep = constant_model(
            vec!["c1".into(), "c2".into(), "c3".into()],
            &[
                vec![0.5, 0.5],
                vec![0.5, 0.5],
                vec![0.5, 0.5],
            ],
            &[
                vec![l11, 0.0, l21, l22],
                vec![l11, 0.0, l21, l22],
                vec![l11, 0.0, l21, l22],
            ],
            1e-2,
        );
        let with_cov = variance_of_expectation(
            &model,
            CovariateLaw::Conditional(&dep),
            0,
            0.5,
            None,
            &SamplingConfig { samples: 8192, seed: 5 },
            Integration::MonteCarlo,
        )
        .unwrap();
        // Closed form: Var(c2 + c3) = Var(c2) + Var(c3) + 2 Cov.
        let var2 = l11 * l11;
        let var3 = l21 * l21 + l22 * l22;
        let cov = l11 * l21;
        assert!(cov > 0.0);
        let expect = var2 + var3 + 2.0 * cov;
        assert!(
            (with_cov.value - expect).abs() < 3.0 * with_cov.std_err + 1e-9,
            "estimate {} vs {expect}",
            with_cov.value
        );
        assert!(with_cov.value > var2 + var3, "pair term should be positive");
    }

    #[test]
    fn pairwise_route_agrees_with_joint_sampling_route() {
        let model = untrained(3, 11);
        let dep = constant_model(
            vec!["c1".into(), "c2".into(), "c3".into()],
            &[vec![0.4, 0.6], vec![0.4, 0.6], vec![0.4, 0.6]],
            &[
                vec![0.2, 0.0, -0.12, 0.15],
                vec![0.2, 0.0, -0.12, 0.15],
                vec![0.2, 0.0, -0.12, 0.15],
            ],
            1e-2,
        );
        let law = CovariateLaw::Conditional(&dep);
        let cfg = SamplingConfig { samples: 8192, seed: 21 };
        let pairwise =
            variance_of_expectation(&model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo)
                .unwrap();
        let point =
            marginal_point(&model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo).unwrap();
        let tol = 3.0 * (pairwise.std_err.powi(2) + point.se_var_v.powi(2)).sqrt();
        assert!(
            (pairwise.value - point.var_v).abs() < tol + 1e-9,
            "pairwise {} vs joint {} (tol {tol})",
            pairwise.value,
            point.var_v
        );
    }

    #[test]
    fn quadrature_agrees_with_monte_carlo() {
        let model = untrained(3, 13);
        let marginals = independent(3, &[0.4, 0.5, 0.6], &[0.04, 0.02, 0.05]);
        let law = CovariateLaw::Independent(&marginals);
        let cfg = SamplingConfig { samples: 8192, seed: 17 };
        for op in 0..3 {
            let (mc, gh) = match op {
                0 => (
                    marginal_mean(&model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo)
                        .unwrap(),
                    marginal_mean(&model, law, 0, 0.5, None, &cfg, Integration::GaussHermite)
                        .unwrap(),
                ),
                1 => (
                    expected_variance(&model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo)
                        .unwrap(),
                    expected_variance(&model, law, 0, 0.5, None, &cfg, Integration::GaussHermite)
                        .unwrap(),
                ),
                _ => (
                    variance_of_expectation(
                        &model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo,
                    )
                    .unwrap(),
                    variance_of_expectation(
                        &model, law, 0, 0.5, None, &cfg, Integration::GaussHermite,
                    )
                    .unwrap(),
                ),
            };
            assert!(
                (mc.value - gh.value).abs() < 3.0 * mc.std_err + 1e-9,
                "op {op}: MC {} vs GH {} (se {})",
                mc.value,
                gh.value,
                mc.std_err
            );
        }
    }

    #[test]
    fn curve_total_variance_dominates_expected_variance() {
        let model = untrained(3, 19);
        let marginals = independent(3, &[0.5, 0.5, 0.5], &[0.03, 0.05, 0.02]);
        let grid: Vec<f64> = (0..25).map(|i| i as f64 / 24.0).collect();
        let curve = marginal_curve(
            &model,
            CovariateLaw::Independent(&marginals),
            1,
            None,
            &grid,
            &SamplingConfig { samples: 256, seed: 3 },
            Integration::MonteCarlo,
        )
        .unwrap();
        assert_eq!(curve.points.len(), grid.len());
        for p in &curve.points {
            assert!(p.var_total >= p.var_e, "var_total {} < var_E {}", p.var_total, p.var_e);
            assert!(p.var_e > 0.0);
            assert!(p.var_v >= 0.0);
        }
    }

    #[test]
    fn parallel_and_sequential_curves_are_bit_identical() {
        let model = untrained(3, 23);
        let marginals = independent(3, &[0.5, 0.4, 0.6], &[0.03, 0.02, 0.04]);
        let grid: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let cfg = SamplingConfig { samples: 256, seed: 7 };
        let par = marginal_curve(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            None,
            &grid,
            &cfg,
            Integration::MonteCarlo,
        )
        .unwrap();
        let seq = marginal_curve_seq(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            None,
            &grid,
            &cfg,
            Integration::MonteCarlo,
        )
        .unwrap();
        for (a, b) in par.points.iter().zip(&seq.points) {
            assert_eq!(a.mu.to_bits(), b.mu.to_bits());
            assert_eq!(a.var_e.to_bits(), b.var_e.to_bits());
            assert_eq!(a.var_v.to_bits(), b.var_v.to_bits());
        }
    }

    #[test]
    fn brute_force_on_one_covariate_matches_predict_moments() {
        let model = untrained(1, 29);
        let marginals = independent(1, &[0.5], &[0.1]);
        let p = model.predict_complete(&[0.4], None).unwrap();
        let oracle = brute_force_marginal(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.4,
            None,
            200_000,
            31,
        )
        .unwrap();
        assert!((oracle.mean - p.mean).abs() < 4.0 * oracle.se_mean);
        assert!((oracle.variance - p.variance).abs() < 4.0 * oracle.se_variance);
    }

    #[test]
    fn brute_force_is_reproducible_and_bounded_to_small_n() {
        let model = untrained(2, 31);
        let marginals = independent(2, &[0.5, 0.5], &[0.05, 0.05]);
        let a = brute_force_marginal(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.5,
            None,
            5_000,
            7,
        )
        .unwrap();
        let b = brute_force_marginal(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.5,
            None,
            5_000,
            7,
        )
        .unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.variance.to_bits(), b.variance.to_bits());

        let big = untrained(5, 33);
        let marg5 = independent(5, &[0.5; 5], &[0.05; 5]);
        assert!(brute_force_marginal(
            &big,
            CovariateLaw::Independent(&marg5),
            0,
            0.5,
            None,
            1_000,
            7,
        )
        .is_err());
    }

    #[test]
    fn decomposition_matches_brute_force_on_a_synthetic_model() {
        let model = untrained(3, 37);
        let dep = constant_model(
            vec!["c1".into(), "c2".into(), "c3".into()],
            &[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]],
            &[
                vec![0.15, 0.0, 0.08, 0.12],
                vec![0.15, 0.0, 0.08, 0.12],
                vec![0.15, 0.0, 0.08, 0.12],
            ],
            1e-2,
        );
        let law = CovariateLaw::Conditional(&dep);
        let cfg = SamplingConfig { samples: 8192, seed: 41 };
        let point =
            marginal_point(&model, law, 0, 0.5, None, &cfg, Integration::MonteCarlo).unwrap();
        let oracle = brute_force_marginal(&model, law, 0, 0.5, None, 100_000, 43).unwrap();
        assert!(
            (point.mu - oracle.mean).abs()
                < 3.0 * (point.se_mu.powi(2) + oracle.se_mean.powi(2)).sqrt(),
            "mean {} vs oracle {}",
            point.mu,
            oracle.mean
        );
        let rel = (point.var_total - oracle.variance).abs() / oracle.variance;
        assert!(
            rel < 0.05,
            "variance {} vs oracle {} (rel {rel})",
            point.var_total,
            oracle.variance
        );
    }

    #[test]
    fn sampling_config_minimum_is_enforced() {
        let model = untrained(2, 41);
        let marginals = independent(2, &[0.5, 0.5], &[0.05, 0.05]);
        let err = marginal_mean(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.5,
            None,
            &SamplingConfig { samples: 10, seed: 0 },
            Integration::MonteCarlo,
        );
        assert!(err.is_err());
    }

    #[test]
    fn mismatched_law_is_an_untrained_error() {
        let model = untrained(3, 43);
        let marginals = independent(2, &[0.5, 0.5], &[0.05, 0.05]);
        let err = marginal_mean(
            &model,
            CovariateLaw::Independent(&marginals),
            0,
            0.5,
            None,
            &SamplingConfig::default(),
            Integration::MonteCarlo,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Untrained(_)));
    }

    #[test]
    fn independent_law_keeps_marginal_offset_constant_over_grid() {
        // mu_tilde(c_i) - f^m_i(c_i) must not vary beyond Monte Carlo noise.
        let model = untrained(3, 47);
        let marginals = independent(3, &[0.45, 0.5, 0.55], &[0.04, 0.03, 0.05]);
        let law = CovariateLaw::Independent(&marginals);
        let cfg = SamplingConfig { samples: 4096, seed: 51 };
        let mut offsets = Vec::new();
        let mut ses = Vec::new();
        for step in 0..20 {
            let c = step as f64 / 19.0;
            let est = marginal_mean(
                &model,
                law,
                0,
                c,
                None,
                &cfg.with_seed(derive_seed(cfg.seed, "grid", step as u64)),
                Integration::MonteCarlo,
            )
            .unwrap();
            let f_i = model.intercept_original() + model.disentangle(0, c, None).unwrap().0;
            offsets.push(est.value - f_i);
            ses.push(est.std_err);
        }
        let spread = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_se = ses.iter().cloned().fold(0.0, f64::max);
        assert!(
            spread < 3.0 * max_se * 2.0,
            "offset spread {spread} vs max point SE {max_se}"
        );
    }
}

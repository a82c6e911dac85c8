//! Covariate-dependence networks: for each conditioning covariate `c_i`, a
//! Lipschitz-constrained network maps `c_i` to the mean vector and Cholesky
//! factor of a multivariate Gaussian over the remaining covariates,
//! `p(c_{k≠i} | c_i) = N(μ̂(c_i), Σ̂(c_i))`.
//!
//! The covariance is parameterized through its Cholesky factor with a
//! softplus-plus-shift diagonal, so Σ̂ is positive definite by construction
//! and its diagonal never drops below the variance floor. Networks are
//! trained per conditioning covariate by multivariate Gaussian negative
//! log-likelihood of the observed co-covariate vectors, post-hoc and
//! separately from the atlas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{GaussianParams, MinMax};
use crate::data::{carve_validation, Dataset};
use crate::error::{Error, Result};
use crate::math::{self, derive_seed};
use crate::monotone::normalize_weights_l1;
use crate::nn::{
    train_loop, ActivationKind, DenseNetwork, GradModel, NetGradients, Tape, TrainConfig,
    TrainReport,
};

/// The conditional law of the other covariates given one covariate value,
/// in original units.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    pub conditioning_index: usize,
    pub conditioning_value: f64,
    /// Covariate indices of the entries, ascending, excluding the conditioner.
    pub other_indices: Vec<usize>,
    /// Mean vector, original units.
    pub mean: Vec<f64>,
    /// Row-major covariance, original units.
    pub covariance: Vec<f64>,
    /// Row-major lower Cholesky factor of the covariance.
    chol: Vec<f64>,
}

impl ConditionalGaussian {
    /// A diagonal (independence) conditional: each entry keeps its own
    /// marginal mean and variance regardless of the conditioning value.
    pub fn diagonal(
        conditioning_index: usize,
        conditioning_value: f64,
        other_indices: Vec<usize>,
        mean: Vec<f64>,
        variances: &[f64],
    ) -> Self {
        let m = mean.len();
        debug_assert_eq!(other_indices.len(), m);
        debug_assert_eq!(variances.len(), m);
        let mut covariance = vec![0.0; m * m];
        let mut chol = vec![0.0; m * m];
        for a in 0..m {
            covariance[a * m + a] = variances[a];
            chol[a * m + a] = variances[a].max(0.0).sqrt();
        }
        ConditionalGaussian {
            conditioning_index,
            conditioning_value,
            other_indices,
            mean,
            covariance,
            chol,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Position of covariate `k` inside the conditional vector.
    pub fn position_of(&self, k: usize) -> Result<usize> {
        self.other_indices
            .iter()
            .position(|&j| j == k)
            .ok_or_else(|| {
                Error::Config(format!(
                    "covariate {k} is not part of the conditional given covariate {}",
                    self.conditioning_index
                ))
            })
    }

    pub fn mean_of(&self, k: usize) -> Result<f64> {
        Ok(self.mean[self.position_of(k)?])
    }

    pub fn variance_of(&self, k: usize) -> Result<f64> {
        let p = self.position_of(k)?;
        Ok(self.covariance[p * self.dim() + p])
    }

    pub fn covariance_of(&self, k1: usize, k2: usize) -> Result<f64> {
        let a = self.position_of(k1)?;
        let b = self.position_of(k2)?;
        Ok(self.covariance[a * self.dim() + b])
    }

    /// Entry (a, b) of the lower Cholesky factor, original units.
    pub(crate) fn chol_entry(&self, a: usize, b: usize) -> f64 {
        self.chol[a * self.dim() + b]
    }

    /// Draws one co-covariate vector (original units, ordered like
    /// `other_indices`) using the Cholesky factor: `c = μ + L·z`.
    pub fn sample_into<R: rand::Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        use rand_distr::{Distribution, StandardNormal};
        let m = self.dim();
        debug_assert_eq!(out.len(), m);
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for a in 0..m {
            let mut acc = self.mean[a];
            for b in 0..=a {
                acc += self.chol[a * m + b] * z[b];
            }
            out[a] = acc;
        }
    }
}

/// A bivariate slice of the conditional law (original units).
#[derive(Debug, Clone, Copy)]
pub struct BivariateGaussian {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl BivariateGaussian {
    /// Lower Cholesky factor; the off-diagonal magnitude is clipped just
    /// inside the PSD boundary to absorb rounding.
    pub fn cholesky(&self) -> [[f64; 2]; 2] {
        let a = self.covariance[0][0].max(0.0);
        let b = self.covariance[1][1].max(0.0);
        let c = self.covariance[0][1];
        let l11 = a.sqrt();
        let l21 = if l11 > 0.0 { c / l11 } else { 0.0 };
        let l21 = l21.clamp(-b.sqrt(), b.sqrt());
        let l22 = (b - l21 * l21).max(0.0).sqrt();
        [[l11, 0.0], [l21, l22]]
    }
}

/// One network `g_i`: conditioning covariate in, Gaussian parameters out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceNet {
    net: DenseNetwork,
    /// Lipschitz constant of the backbone, normalized units.
    lambda: f64,
    /// Index of the conditioning covariate.
    conditioning: usize,
    /// Number of modeled covariates (N); the output splits into N-1 means
    /// plus the lower-triangular Cholesky entries.
    n_covariates: usize,
    /// Positions (within the conditional vector) whose mean gets the
    /// monotone residual `λ·c_i`, for declared increasing pair priors.
    monotone_positions: Vec<usize>,
    /// Shift added to the softplus Cholesky diagonal; squares to the
    /// variance floor in normalized units.
    chol_diag_shift: f64,
}

/// Forward outputs of a dependence net in normalized units.
struct RawConditional {
    mu: Vec<f64>,
    /// Row-major lower Cholesky factor (normalized units).
    chol: Vec<f64>,
}

impl DependenceNet {
    fn out_dim(n_covariates: usize) -> usize {
        let m = n_covariates - 1;
        m + m * (m + 1) / 2
    }

    fn m(&self) -> usize {
        self.n_covariates - 1
    }

    /// Builds the normalized-unit conditional from raw network outputs.
    /// Raw layout: means, then lower-triangular Cholesky entries row by row.
    fn assemble(&self, raw: &[f64], c_norm: f64) -> RawConditional {
        let m = self.m();
        let mut mu: Vec<f64> = raw[..m].to_vec();
        for &pos in &self.monotone_positions {
            mu[pos] += self.lambda * c_norm;
        }
        let mut chol = vec![0.0; m * m];
        let mut idx = m;
        for row in 0..m {
            for col in 0..=row {
                let v = raw[idx];
                idx += 1;
                chol[row * m + col] = if row == col {
                    math::softplus(v) + self.chol_diag_shift
                } else {
                    v
                };
            }
        }
        RawConditional { mu, chol }
    }

    fn forward(&self, c_norm: f64) -> Result<RawConditional> {
        let raw = self.net.forward(&[c_norm])?;
        Ok(self.assemble(&raw, c_norm))
    }

    fn normalize_weights(&mut self) {
        normalize_weights_l1(&mut self.net, self.lambda);
    }

    fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.n_covariates < 2 || self.net.out_dim() != Self::out_dim(self.n_covariates) {
            return Err(Error::Config(
                "dependence net output does not match the covariate count".into(),
            ));
        }
        if self.monotone_positions.iter().any(|&p| p >= self.m()) {
            return Err(Error::Config("monotone position out of range".into()));
        }
        Ok(())
    }
}

/// Architecture and training configuration for [`fit_dependence`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceConfig {
    pub hidden_width: usize,
    pub group_size: usize,
    /// Lipschitz constant of the backbones in normalized units; large enough
    /// by default to express steep dependence while still damping abrupt
    /// changes.
    pub lambda: f64,
    /// Softplus diagonal shift; its square is the Σ̂ diagonal floor in
    /// normalized units (1e-4 by default).
    pub chol_diag_shift: f64,
    /// Increasing monotone priors between covariate pairs, as
    /// (conditioning index, target index).
    pub pair_priors: Vec<(usize, usize)>,
    pub train: TrainConfig,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        DependenceConfig {
            hidden_width: 128,
            group_size: 2,
            lambda: 20.0,
            chol_diag_shift: 1e-2,
            pair_priors: Vec::new(),
            // The dependence NLL keeps improving late in the cosine schedule,
            // so by default the full schedule runs (patience = max epochs).
            train: TrainConfig {
                patience: 500,
                ..TrainConfig::default()
            },
        }
    }
}

/// The set of trained `g_i` networks plus the covariate normalization frozen
/// at fit time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceModel {
    pub(crate) nets: Vec<DependenceNet>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<MinMax>,
}

impl DependenceModel {
    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    fn other_indices(&self, i: usize) -> Vec<usize> {
        (0..self.num_covariates()).filter(|&k| k != i).collect()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.num_covariates() {
            return Err(Error::Config(format!(
                "covariate index {i} out of range ({} covariates)",
                self.num_covariates()
            )));
        }
        Ok(())
    }

    /// The full conditional `p(c_{k≠i} | c_i)` in original units.
    pub fn conditional(&self, i: usize, c_i: f64) -> Result<ConditionalGaussian> {
        self.check_index(i)?;
        let net = &self.nets[i];
        let c_norm = self.covariates[i].normalize(c_i);
        let raw = net.forward(c_norm)?;
        let others = self.other_indices(i);
        let m = others.len();

        let mut mean = vec![0.0; m];
        let mut chol = vec![0.0; m * m];
        for (pos, &k) in others.iter().enumerate() {
            mean[pos] = self.covariates[k].denormalize(raw.mu[pos]);
            let range = self.covariates[k].range();
            for col in 0..=pos {
                chol[pos * m + col] = range * raw.chol[pos * m + col];
            }
        }
        let mut covariance = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let mut acc = 0.0;
                for j in 0..=a.min(b) {
                    acc += chol[a * m + j] * chol[b * m + j];
                }
                covariance[a * m + b] = acc;
            }
        }
        Ok(ConditionalGaussian {
            conditioning_index: i,
            conditioning_value: c_i,
            other_indices: others,
            mean,
            covariance,
            chol,
        })
    }

    /// `p(c_k | c_i)`: the 1-D projection of the full conditional.
    pub fn conditional_1d(&self, i: usize, k: usize, c_i: f64) -> Result<GaussianParams> {
        if i == k {
            return Err(Error::Config(format!(
                "conditional of covariate {k} on itself is degenerate"
            )));
        }
        let full = self.conditional(i, c_i)?;
        GaussianParams::new(full.mean_of(k)?, full.variance_of(k)?)
    }

    /// `p(c_{K1}, c_{K2} | c_i)`: the 2-D projection of the full conditional.
    pub fn conditional_2d(
        &self,
        i: usize,
        k1: usize,
        k2: usize,
        c_i: f64,
    ) -> Result<BivariateGaussian> {
        if i == k1 || i == k2 || k1 == k2 {
            return Err(Error::Config(format!(
                "conditional_2d indices must be pairwise distinct (i={i}, K1={k1}, K2={k2})"
            )));
        }
        let full = self.conditional(i, c_i)?;
        Ok(BivariateGaussian {
            mean: [full.mean_of(k1)?, full.mean_of(k2)?],
            covariance: [
                [full.variance_of(k1)?, full.covariance_of(k1, k2)?],
                [full.covariance_of(k2, k1)?, full.variance_of(k2)?],
            ],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.nets.len() != self.num_covariates()
            || self.covariates.len() != self.num_covariates()
        {
            return Err(Error::Config("dependence model schema mismatch".into()));
        }
        for (i, net) in self.nets.iter().enumerate() {
            net.validate()?;
            if net.conditioning != i || net.n_covariates != self.num_covariates() {
                return Err(Error::Config(format!(
                    "dependence net {i} indexes do not match the model"
                )));
            }
        }
        Ok(())
    }
}

/// Training sample for one conditioning covariate, normalized units.
#[derive(Debug, Clone)]
pub struct DependenceSample {
    pub conditioning: f64,
    pub others: Vec<f64>,
}

/// Training wrapper around one dependence net: multivariate Gaussian NLL of
/// the observed co-covariates through the Cholesky parameterization.
pub struct DependenceTrainable {
    pub net: DependenceNet,
    tape: Tape,
}

impl DependenceTrainable {
    pub fn new(net: DependenceNet) -> Self {
        DependenceTrainable {
            net,
            tape: Tape::default(),
        }
    }

    /// NLL of one sample plus its gradient with respect to the raw network
    /// outputs. With r = c − μ, w = L⁻¹r, u = L⁻ᵀw:
    /// NLL = ½‖w‖² + Σ ln L_kk + const, ∂/∂μ = −u, ∂/∂L = −u·wᵀ + diag(1/L_kk).
    fn nll_and_output_grad(
        cond: &RawConditional,
        raw: &[f64],
        others: &[f64],
        grad_out: &mut [f64],
    ) -> f64 {
        let m = cond.mu.len();
        let chol = &cond.chol;

        let mut w = vec![0.0; m];
        for a in 0..m {
            let mut acc = others[a] - cond.mu[a];
            for b in 0..a {
                acc -= chol[a * m + b] * w[b];
            }
            w[a] = acc / chol[a * m + a];
        }
        let mut u = vec![0.0; m];
        for a in (0..m).rev() {
            let mut acc = w[a];
            for b in a + 1..m {
                acc -= chol[b * m + a] * u[b];
            }
            u[a] = acc / chol[a * m + a];
        }

        let mut nll = 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
        for a in 0..m {
            nll += 0.5 * w[a] * w[a] + chol[a * m + a].ln();
        }

        for a in 0..m {
            grad_out[a] = -u[a];
        }
        let mut idx = m;
        for a in 0..m {
            for b in 0..=a {
                let mut g = -u[a] * w[b];
                if a == b {
                    g += 1.0 / chol[a * m + a];
                    // Chain through the softplus diagonal.
                    g *= math::sigmoid(raw[idx]);
                }
                grad_out[idx] = g;
                idx += 1;
            }
        }
        nll
    }
}

impl GradModel for DependenceTrainable {
    type Sample = DependenceSample;

    fn param_count(&self) -> usize {
        self.net.net.param_count()
    }

    fn read_params(&self, out: &mut [f64]) {
        self.net.net.read_params(out);
    }

    fn write_params(&mut self, src: &[f64]) {
        self.net.net.write_params(src);
    }

    fn batch_loss_grad(&mut self, batch: &[&DependenceSample], grad: &mut [f64]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let out_dim = self.net.net.out_dim();
        let mut total = 0.0;
        let mut out_grad = vec![0.0; out_dim];
        let mut grads = NetGradients {
            flat: vec![0.0; grad.len()],
        };
        for sample in batch {
            self.net
                .net
                .forward_cached(&[sample.conditioning], &mut self.tape)?;
            let raw = self.tape.output().to_vec();
            let cond = self.net.assemble(&raw, sample.conditioning);
            total += Self::nll_and_output_grad(&cond, &raw, &sample.others, &mut out_grad);
            for g in out_grad.iter_mut() {
                *g *= scale;
            }
            let mut input_grad = [0.0];
            self.net
                .net
                .backward(&self.tape, &out_grad, &mut grads, &mut input_grad);
        }
        for (g, s) in grad.iter_mut().zip(&grads.flat) {
            *g += s;
        }
        Ok(total * scale)
    }

    fn batch_loss(&mut self, batch: &[&DependenceSample]) -> Result<f64> {
        let mut total = 0.0;
        let mut scratch = vec![0.0; self.net.net.out_dim()];
        for sample in batch {
            let raw = self.net.net.forward(&[sample.conditioning])?;
            let cond = self.net.assemble(&raw, sample.conditioning);
            total += Self::nll_and_output_grad(&cond, &raw, &sample.others, &mut scratch);
        }
        Ok(total / batch.len() as f64)
    }

    fn after_step(&mut self) {
        self.net.normalize_weights();
    }
}

/// Test support: a model whose conditionals are constant in the conditioning
/// value, with the given normalized-unit means and lower Cholesky factors
/// (row-major per conditioning covariate). Identity normalization.
#[cfg(test)]
pub(crate) fn constant_model(
    names: Vec<String>,
    mu: &[Vec<f64>],
    chol: &[Vec<f64>],
    shift: f64,
) -> DependenceModel {
    use rand::SeedableRng as _;
    let n = names.len();
    let m = n - 1;
    let nets = (0..n)
        .map(|i| {
            let out_dim = DependenceNet::out_dim(n);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut net = DenseNetwork::new(
                &[1, out_dim],
                ActivationKind::Linear,
                ActivationKind::Linear,
                &mut rng,
            )
            .unwrap();
            // Zero weights; biases produce the requested parameters.
            let mut params = vec![0.0; net.param_count()];
            for (pos, &v) in mu[i].iter().enumerate() {
                params[out_dim + pos] = v;
            }
            let mut idx = m;
            for row in 0..m {
                for col in 0..=row {
                    let target = chol[i][row * m + col];
                    params[out_dim + idx] = if row == col {
                        // softplus(theta) + shift = target
                        ((target - shift).exp() - 1.0).max(f64::MIN_POSITIVE).ln()
                    } else {
                        target
                    };
                    idx += 1;
                }
            }
            net.write_params(&params);
            DependenceNet {
                net,
                lambda: 1.0,
                conditioning: i,
                n_covariates: n,
                monotone_positions: vec![],
                chol_diag_shift: shift,
            }
        })
        .collect();
    DependenceModel {
        nets,
        covariate_names: names.clone(),
        covariates: vec![MinMax { min: 0.0, max: 1.0 }; n],
    }
}

#[derive(Debug)]
pub struct DependenceFit {
    pub model: DependenceModel,
    /// One training report per conditioning covariate.
    pub reports: Vec<TrainReport>,
}

/// A randomly initialized dependence net for conditioning covariate `i`.
pub fn untrained_net(
    i: usize,
    n_covariates: usize,
    config: &DependenceConfig,
    seed: u64,
) -> Result<DependenceNet> {
    if n_covariates < 2 {
        return Err(Error::Config(
            "dependence modeling needs at least 2 covariates".into(),
        ));
    }
    let monotone_positions: Vec<usize> = config
        .pair_priors
        .iter()
        .filter(|(src, _)| *src == i)
        .map(|(_, target)| {
            (0..n_covariates)
                .filter(|&k| k != i)
                .position(|k| k == *target)
                .ok_or_else(|| Error::Config(format!("pair prior target {target} invalid")))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dependence-init", i as u64));
    let net = DenseNetwork::new(
        &[1, config.hidden_width, DependenceNet::out_dim(n_covariates)],
        ActivationKind::GroupSort {
            group_size: config.group_size,
        },
        ActivationKind::Linear,
        &mut rng,
    )?;
    let mut dep = DependenceNet {
        net,
        lambda: config.lambda,
        conditioning: i,
        n_covariates,
        monotone_positions,
        chol_diag_shift: config.chol_diag_shift,
    };
    dep.normalize_weights();
    Ok(dep)
}

/// Trains all `g_i` on the complete records of `ds`, one conditioning
/// covariate at a time.
pub fn fit_dependence(ds: &Dataset, config: &DependenceConfig) -> Result<DependenceFit> {
    config.train.validate()?;
    let n = ds.num_covariates();
    if n < 2 {
        return Err(Error::Config(
            "dependence modeling needs at least 2 covariates".into(),
        ));
    }
    let complete = ds.complete_records();
    if complete.len() < n + 2 {
        return Err(Error::Data(format!(
            "{} complete records cannot identify a {n}-covariate dependence model (need at least {})",
            complete.len(),
            n + 2
        )));
    }

    let covariates: Vec<MinMax> = (0..n)
        .map(|i| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for r in &complete {
                let v = r.covariates[i].unwrap();
                min = min.min(v);
                max = max.max(v);
            }
            MinMax { min, max }
        })
        .collect();

    let mut complete_ds = Dataset::new(ds.covariate_names.clone(), ds.spatial);
    complete_ds.records = complete.into_iter().cloned().collect();
    let (train_ds, val_ds) = carve_validation(
        &complete_ds,
        config.train.validation_fraction,
        config.train.seed,
    )?;

    let make_samples = |part: &Dataset, i: usize| -> Vec<DependenceSample> {
        part.records
            .iter()
            .map(|r| DependenceSample {
                conditioning: covariates[i].normalize(r.covariates[i].unwrap()),
                others: (0..n)
                    .filter(|&k| k != i)
                    .map(|k| covariates[k].normalize(r.covariates[k].unwrap()))
                    .collect(),
            })
            .collect()
    };

    let mut nets = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let net = untrained_net(i, n, config, config.train.seed)?;
        let train_samples = make_samples(&train_ds, i);
        let val_samples = make_samples(&val_ds, i);
        let mut trainable = DependenceTrainable::new(net);
        let mut cfg = config.train.clone();
        cfg.seed = derive_seed(config.train.seed, "dependence-train", i as u64);
        let report = train_loop(&mut trainable, &train_samples, &val_samples, &cfg)?;
        nets.push(trainable.net);
        reports.push(report);
    }

    Ok(DependenceFit {
        model: DependenceModel {
            nets,
            covariate_names: ds.covariate_names.clone(),
            covariates,
        },
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use crate::nn::sample_refs;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn quick_config() -> DependenceConfig {
        DependenceConfig {
            hidden_width: 32,
            train: TrainConfig {
                max_epochs: 150,
                patience: 15,
                batch_size: 64,
                seed: 3,
                ..TrainConfig::default()
            },
            ..DependenceConfig::default()
        }
    }

    /// Trivariate Gaussian with known conditionals for conditioning oracles:
    /// c2 = 0.3 + 0.8 c1 + N(0, 0.1²), c3 = 0.9 − 0.5 c1 + N(0, 0.15²).
    fn gaussian_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(vec!["c1".into(), "c2".into(), "c3".into()], false);
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let c1 = 0.5 + 0.2 * z;
            let e2: f64 = StandardNormal.sample(&mut rng);
            let e3: f64 = StandardNormal.sample(&mut rng);
            let c2 = 0.3 + 0.8 * c1 + 0.1 * e2;
            let c3 = 0.9 - 0.5 * c1 + 0.15 * e3;
            ds.records.push(Record {
                subject_id: format!("s{i:05}"),
                time: 0,
                covariates: vec![Some(c1), Some(c2), Some(c3)],
                x: None,
                response: 0.0,
            });
        }
        ds
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = untrained_net(0, 3, &quick_config(), 5).unwrap();
        let mut trainable = DependenceTrainable::new(net);
        let samples = vec![
            DependenceSample { conditioning: 0.3, others: vec![0.6, 0.2] },
            DependenceSample { conditioning: 0.8, others: vec![0.1, 0.9] },
        ];
        let refs = sample_refs(&samples);
        let n = trainable.param_count();
        let mut grad = vec![0.0; n];
        trainable.batch_loss_grad(&refs, &mut grad).unwrap();

        let mut params = vec![0.0; n];
        trainable.read_params(&mut params);
        let h = 1e-4;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..60 {
            let idx = rng.random_range(0..n);
            let orig = params[idx];
            params[idx] = orig + h;
            trainable.write_params(&params);
            let up = trainable.batch_loss(&refs).unwrap();
            params[idx] = orig - h;
            trainable.write_params(&params);
            let down = trainable.batch_loss(&refs).unwrap();
            params[idx] = orig;
            trainable.write_params(&params);
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / (grad[idx].abs() + 1e-8);
            assert!(rel < 1e-3, "param {idx}: analytic {} vs fd {fd}", grad[idx]);
        }
    }

    #[test]
    fn learned_conditional_tracks_the_analytic_conditional() {
        let ds = gaussian_dataset(4000, 7);
        let fit = fit_dependence(&ds, &quick_config()).unwrap();
        // Analytic: E[c2 | c1] = 0.3 + 0.8 c1, E[c3 | c1] = 0.9 − 0.5 c1.
        for step in 0..9 {
            let c1 = 0.2 + 0.6 * step as f64 / 8.0;
            let p2 = fit.model.conditional_1d(0, 1, c1).unwrap();
            let p3 = fit.model.conditional_1d(0, 2, c1).unwrap();
            assert!(
                (p2.mean - (0.3 + 0.8 * c1)).abs() < 0.1,
                "E[c2|c1={c1}] = {} vs {}",
                p2.mean,
                0.3 + 0.8 * c1
            );
            assert!(
                (p3.mean - (0.9 - 0.5 * c1)).abs() < 0.1,
                "E[c3|c1={c1}] = {} vs {}",
                p3.mean,
                0.9 - 0.5 * c1
            );
        }
    }

    #[test]
    fn three_covariate_gaussian_recovers_conditional_covariance() {
        // Given c1, the residuals of c2 and c3 are independent, so the
        // conditional covariance between them is 0; conditional variances are
        // 0.01 and 0.0225.
        let ds = gaussian_dataset(4000, 9);
        let fit = fit_dependence(&ds, &quick_config()).unwrap();
        for step in 0..5 {
            let c1 = 0.3 + 0.4 * step as f64 / 4.0;
            let biv = fit.model.conditional_2d(0, 1, 2, c1).unwrap();
            assert!(
                biv.covariance[0][1].abs() < 0.15,
                "conditional cov {} at c1={c1}",
                biv.covariance[0][1]
            );
            assert!((biv.covariance[0][0] - 0.01).abs() < 0.15);
            assert!((biv.covariance[1][1] - 0.0225).abs() < 0.15);
        }
    }

    #[test]
    fn independent_covariates_learn_small_correlations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], false);
        for i in 0..3000 {
            ds.records.push(Record {
                subject_id: format!("s{i:05}"),
                time: 0,
                covariates: vec![
                    Some(rng.random_range(0.0..1.0)),
                    Some(rng.random_range(0.0..1.0)),
                    Some(rng.random_range(0.0..1.0)),
                ],
                x: None,
                response: 0.0,
            });
        }
        let fit = fit_dependence(&ds, &quick_config()).unwrap();
        for step in 0..9 {
            let c = 0.1 + 0.8 * step as f64 / 8.0;
            let biv = fit.model.conditional_2d(0, 1, 2, c).unwrap();
            let rho =
                biv.covariance[0][1] / (biv.covariance[0][0] * biv.covariance[1][1]).sqrt();
            assert!(rho.abs() < 0.1, "rho = {rho} at c1 = {c}");
        }
    }

    #[test]
    fn projections_are_byte_exact_slices_of_the_full_conditional() {
        let ds = gaussian_dataset(500, 13);
        let mut cfg = quick_config();
        cfg.train.max_epochs = 10;
        let fit = fit_dependence(&ds, &cfg).unwrap();
        let full = fit.model.conditional(1, 0.7).unwrap();
        let p = fit.model.conditional_1d(1, 2, 0.7).unwrap();
        assert_eq!(p.mean.to_bits(), full.mean_of(2).unwrap().to_bits());
        assert_eq!(p.variance.to_bits(), full.variance_of(2).unwrap().to_bits());
        let biv = fit.model.conditional_2d(1, 0, 2, 0.7).unwrap();
        assert_eq!(biv.mean[0].to_bits(), full.mean_of(0).unwrap().to_bits());
        assert_eq!(
            biv.covariance[0][1].to_bits(),
            full.covariance_of(0, 2).unwrap().to_bits()
        );
        let p0 = fit.model.conditional_1d(1, 0, 0.7).unwrap();
        assert_eq!(biv.covariance[0][0].to_bits(), p0.variance.to_bits());
    }

    #[test]
    fn covariance_is_psd_and_floored_on_a_grid() {
        let ds = gaussian_dataset(800, 17);
        let mut cfg = quick_config();
        cfg.train.max_epochs = 40;
        let fit = fit_dependence(&ds, &cfg).unwrap();
        for i in 0..3 {
            let range_i = fit.model.covariates[i].range();
            for step in 0..50 {
                let c = fit.model.covariates[i].min + range_i * step as f64 / 49.0;
                let full = fit.model.conditional(i, c).unwrap();
                let m = full.dim();
                let mat = nalgebra::DMatrix::from_row_slice(m, m, &full.covariance);
                let eig = nalgebra::SymmetricEigen::new(mat);
                for ev in eig.eigenvalues.iter() {
                    assert!(*ev >= -1e-8, "eigenvalue {ev} at covariate {i}, value {c}");
                }
                for (pos, &k) in full.other_indices.iter().enumerate() {
                    let floor = 1e-4 * fit.model.covariates[k].range().powi(2);
                    assert!(
                        full.covariance[pos * m + pos] >= floor * (1.0 - 1e-9),
                        "variance below floor"
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_round_trip_recovers_mean_and_covariance() {
        let ds = gaussian_dataset(600, 19);
        let mut cfg = quick_config();
        cfg.train.max_epochs = 30;
        let fit = fit_dependence(&ds, &cfg).unwrap();
        let full = fit.model.conditional(0, 0.5).unwrap();
        let m = full.dim();
        let l = 100_000usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut sums = vec![0.0; m];
        let mut prods = vec![0.0; m * m];
        let mut buf = vec![0.0; m];
        for _ in 0..l {
            full.sample_into(&mut rng, &mut buf);
            for a in 0..m {
                sums[a] += buf[a];
                for b in 0..m {
                    prods[a * m + b] += buf[a] * buf[b];
                }
            }
        }
        for a in 0..m {
            let mean_a = sums[a] / l as f64;
            let se = (full.covariance[a * m + a] / l as f64).sqrt();
            assert!(
                (mean_a - full.mean[a]).abs() < 3.0 * se,
                "mean[{a}] {mean_a} vs {}",
                full.mean[a]
            );
            for b in 0..m {
                let cov_ab = prods[a * m + b] / l as f64 - mean_a * (sums[b] / l as f64);
                let se_cov = ((full.covariance[a * m + a] * full.covariance[b * m + b]
                    + full.covariance[a * m + b].powi(2))
                    / l as f64)
                    .sqrt();
                assert!(
                    (cov_ab - full.covariance[a * m + b]).abs() < 3.0 * se_cov,
                    "cov[{a}][{b}]"
                );
            }
        }
    }

    #[test]
    fn index_collisions_are_rejected() {
        let ds = gaussian_dataset(200, 29);
        let mut cfg = quick_config();
        cfg.train.max_epochs = 5;
        let fit = fit_dependence(&ds, &cfg).unwrap();
        assert!(fit.model.conditional_1d(1, 1, 0.5).is_err());
        assert!(fit.model.conditional_2d(0, 1, 1, 0.5).is_err());
        assert!(fit.model.conditional_2d(0, 0, 2, 0.5).is_err());
    }

    #[test]
    fn too_few_complete_records_are_refused() {
        let ds = gaussian_dataset(4, 31);
        assert!(fit_dependence(&ds, &quick_config()).is_err());
        // Incomplete rows do not count toward identifiability.
        let mut sparse = gaussian_dataset(50, 31);
        for r in sparse.records.iter_mut().take(47) {
            r.covariates[1] = None;
        }
        assert!(fit_dependence(&sparse, &quick_config()).is_err());
    }
}

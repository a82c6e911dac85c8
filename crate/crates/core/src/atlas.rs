//! The additive atlas predictor: one subnetwork per covariate emitting a mean
//! and a strictly positive variance contribution at a location, summed into
//! the parameters of a Gaussian response distribution and trained by negative
//! log-likelihood. A joint (non-additive) MLP baseline trained with the same
//! loss lives here too.
//!
//! Unit conventions: covariates and the location are min-max normalized to
//! [0, 1] from training statistics and the response is standardized;
//! everything a caller sees (predictions, disentangled contributions) is in
//! original units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::math::{self, derive_seed};
use crate::monotone::MonotoneNetwork;
use crate::nn::{
    train_loop, ActivationKind, DenseNetwork, GradModel, NetGradients, Tape, TrainConfig,
    TrainReport,
};

/// Parameters of a univariate Gaussian response distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    /// Strictly positive.
    pub variance: f64,
}

impl GaussianParams {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !mean.is_finite() || !variance.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite Gaussian parameters ({mean}, {variance})"
            )));
        }
        if variance <= 0.0 {
            return Err(Error::Domain(format!("variance {variance} must be positive")));
        }
        Ok(GaussianParams { mean, variance })
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Gaussian negative log-likelihood: `½·log(2π·v) + (y − m)² / (2v)`.
pub fn nll_loss(params: &GaussianParams, y: f64) -> Result<f64> {
    if params.variance <= 0.0 {
        return Err(Error::Domain(format!(
            "NLL needs positive variance, got {}",
            params.variance
        )));
    }
    let r = y - params.mean;
    Ok(0.5 * (2.0 * std::f64::consts::PI * params.variance).ln()
        + r * r / (2.0 * params.variance))
}

/// Prior knowledge about the direction of a covariate's effect on the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonotonePrior {
    None,
    Increasing,
    Decreasing,
}

/// Min-max statistics of one input, mapping the training range onto [0, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        MinMax { min, max }
    }

    pub fn range(&self) -> f64 {
        let r = self.max - self.min;
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.range()
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + u * self.range()
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Input/output normalization statistics frozen at training time, plus the
/// empirical covariate moments used by the independence ("dependence off")
/// marginalization mode and the covariate IQRs used for drift warnings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub covariates: Vec<MinMax>,
    pub x: Option<MinMax>,
    pub y_mean: f64,
    pub y_std: f64,
    pub covariate_means: Vec<f64>,
    pub covariate_variances: Vec<f64>,
    pub covariate_iqr: Vec<f64>,
}

impl Normalization {
    pub fn fit(records: &[&Record], n_covariates: usize, spatial: bool) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let mut covariates = Vec::with_capacity(n_covariates);
        let mut means = Vec::with_capacity(n_covariates);
        let mut vars = Vec::with_capacity(n_covariates);
        let mut iqrs = Vec::with_capacity(n_covariates);
        for i in 0..n_covariates {
            let mut values: Vec<f64> = records
                .iter()
                .map(|r| r.covariates[i].expect("complete records"))
                .collect();
            let mm = MinMax::from_values(values.iter().copied());
            if mm.max - mm.min <= 0.0 {
                log::warn!("covariate {i} is constant in the training data");
            }
            covariates.push(mm);
            means.push(math::mean(&values));
            vars.push(math::population_variance(&values));
            values.sort_by(f64::total_cmp);
            iqrs.push(math::quantile_sorted(&values, 0.75) - math::quantile_sorted(&values, 0.25));
        }
        let x = if spatial {
            Some(MinMax::from_values(
                records.iter().map(|r| r.x.expect("spatial records have x")),
            ))
        } else {
            None
        };
        let ys: Vec<f64> = records.iter().map(|r| r.response).collect();
        let y_mean = math::mean(&ys);
        let y_std = math::population_variance(&ys).sqrt();
        if y_std <= f64::EPSILON {
            return Err(Error::Data("response is constant; nothing to model".into()));
        }
        Ok(Normalization {
            covariates,
            x,
            y_mean,
            y_std,
            covariate_means: means,
            covariate_variances: vars,
            covariate_iqr: iqrs,
        })
    }

    pub fn normalize_x(&self, x: f64) -> f64 {
        match &self.x {
            Some(mm) => mm.normalize(x),
            None => x,
        }
    }

    pub fn standardize_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }
}

/// The mean head of one subnetwork: a free-form GeLU MLP, or a monotone
/// Lipschitz network when a prior applies. Decreasing priors negate the
/// covariate on the way in, reusing the non-decreasing construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub(crate) enum MeanBackbone {
    Plain { net: DenseNetwork },
    Monotone { net: MonotoneNetwork, negate: bool },
}

impl MeanBackbone {
    fn forward_cached(&self, input: &[f64], tape: &mut Tape) -> Result<f64> {
        match self {
            MeanBackbone::Plain { net } => {
                net.forward_cached(input, tape)?;
                Ok(tape.output()[0])
            }
            MeanBackbone::Monotone { net, .. } => net.forward_cached(input, tape),
        }
    }

    fn backward(
        &self,
        tape: &Tape,
        upstream: f64,
        grads: &mut NetGradients,
        input_grad: &mut [f64],
    ) {
        match self {
            MeanBackbone::Plain { net } => net.backward(tape, &[upstream], grads, input_grad),
            MeanBackbone::Monotone { net, .. } => net.backward(tape, upstream, grads, input_grad),
        }
    }

    fn negate(&self) -> bool {
        matches!(self, MeanBackbone::Monotone { negate: true, .. })
    }

    fn param_count(&self) -> usize {
        match self {
            MeanBackbone::Plain { net } => net.param_count(),
            MeanBackbone::Monotone { net, .. } => net.param_count(),
        }
    }

    fn read_params(&self, out: &mut [f64]) {
        match self {
            MeanBackbone::Plain { net } => net.read_params(out),
            MeanBackbone::Monotone { net, .. } => net.read_params(out),
        }
    }

    fn write_params(&mut self, src: &[f64]) {
        match self {
            MeanBackbone::Plain { net } => net.write_params(src),
            MeanBackbone::Monotone { net, .. } => net.write_params(src),
        }
    }

    fn normalize_weights(&mut self) {
        if let MeanBackbone::Monotone { net, .. } = self {
            net.normalize_weights();
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MeanBackbone::Plain { net } => net.validate(),
            MeanBackbone::Monotone { net, .. } => net.validate(),
        }
    }
}

/// One per-covariate subnetwork. The variance head receives the covariate,
/// the location, and the mean output, and ends in a softplus so its
/// contribution is strictly positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Subnetwork {
    pub(crate) mean: MeanBackbone,
    pub(crate) var_head: DenseNetwork,
}

/// Reusable buffers for repeated subnetwork evaluation.
#[derive(Debug, Default)]
pub struct EvalScratch {
    mean_tape: Tape,
    var_tape: Tape,
}

impl Subnetwork {
    /// (mean, variance) contributions in normalized units.
    fn contributions_with(
        &self,
        c_norm: f64,
        x_norm: Option<f64>,
        scratch: &mut EvalScratch,
    ) -> Result<(f64, f64)> {
        let c_in = if self.mean.negate() { -c_norm } else { c_norm };
        let mut buf = [0.0; 3];
        let m = self
            .mean
            .forward_cached(mean_input(c_in, x_norm, &mut buf), &mut scratch.mean_tape)?;
        self.var_head
            .forward_cached(var_input(c_in, x_norm, m, &mut buf), &mut scratch.var_tape)?;
        Ok((m, scratch.var_tape.output()[0]))
    }
}

fn mean_input(c: f64, x: Option<f64>, buf: &mut [f64; 3]) -> &[f64] {
    buf[0] = c;
    match x {
        Some(x) => {
            buf[1] = x;
            &buf[..2]
        }
        None => &buf[..1],
    }
}

fn var_input(c: f64, x: Option<f64>, m: f64, buf: &mut [f64; 3]) -> &[f64] {
    buf[0] = c;
    match x {
        Some(x) => {
            buf[1] = x;
            buf[2] = m;
            &buf[..3]
        }
        None => {
            buf[1] = m;
            &buf[..2]
        }
    }
}

/// Architecture and training configuration for [`fit_atlas`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasConfig {
    pub hidden_width: usize,
    /// GroupSort group size for monotone backbones.
    pub group_size: usize,
    /// Lipschitz constant of monotone backbones, in normalized input units.
    pub monotone_lambda: f64,
    /// Added to the summed variance contributions (normalized units).
    pub variance_floor: f64,
    pub train: TrainConfig,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        AtlasConfig {
            hidden_width: 128,
            group_size: 2,
            monotone_lambda: 1.0,
            variance_floor: 1e-6,
            train: TrainConfig::default(),
        }
    }
}

/// The trained additive predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasModel {
    pub(crate) intercept: f64,
    pub(crate) subnets: Vec<Subnetwork>,
    pub norm: Normalization,
    pub spatial: bool,
    pub covariate_names: Vec<String>,
    pub priors: Vec<MonotonePrior>,
    /// Variance floor in normalized units.
    pub variance_floor: f64,
}

impl AtlasModel {
    /// A randomly initialized, untrained model; the starting point of
    /// [`fit_atlas`] and a building block for synthetic-model tests.
    pub fn untrained(
        covariate_names: Vec<String>,
        spatial: bool,
        priors: &[MonotonePrior],
        config: &AtlasConfig,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        let n = covariate_names.len();
        if n == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        if priors.len() != n {
            return Err(Error::Config(format!(
                "{} priors for {} covariates",
                priors.len(),
                n
            )));
        }
        if config.hidden_width == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "atlas-init", 0));
        let d_in = if spatial { 2 } else { 1 };
        let mut subnets = Vec::with_capacity(n);
        for prior in priors {
            let mean = match prior {
                MonotonePrior::None => MeanBackbone::Plain {
                    net: DenseNetwork::new(
                        &[d_in, config.hidden_width, 1],
                        ActivationKind::GeLU,
                        ActivationKind::Linear,
                        &mut rng,
                    )?,
                },
                MonotonePrior::Increasing | MonotonePrior::Decreasing => MeanBackbone::Monotone {
                    net: MonotoneNetwork::new(
                        &[d_in, config.hidden_width, 1],
                        config.group_size,
                        config.monotone_lambda,
                        vec![0],
                        &mut rng,
                    )?,
                    negate: *prior == MonotonePrior::Decreasing,
                },
            };
            let var_head = DenseNetwork::new(
                &[d_in + 1, config.hidden_width, 1],
                ActivationKind::GeLU,
                ActivationKind::Softplus,
                &mut rng,
            )?;
            subnets.push(Subnetwork { mean, var_head });
        }
        Ok(AtlasModel {
            intercept: 0.0,
            subnets,
            norm,
            spatial,
            covariate_names,
            priors: priors.to_vec(),
            variance_floor: config.variance_floor,
        })
    }

    pub fn num_covariates(&self) -> usize {
        self.subnets.len()
    }

    /// The intercept in response units.
    pub fn intercept_original(&self) -> f64 {
        self.norm.y_mean + self.norm.y_std * self.intercept
    }

    /// The variance floor in response units².
    pub fn variance_floor_original(&self) -> f64 {
        self.norm.y_std * self.norm.y_std * self.variance_floor
    }

    fn check_x(&self, x: Option<f64>) -> Result<Option<f64>> {
        match (self.spatial, x) {
            (true, Some(x)) => {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Domain(format!("location x = {x} outside [0, 1]")));
                }
                Ok(Some(self.norm.normalize_x(x)))
            }
            (true, None) => Err(Error::Config("this model is spatial; x is required".into())),
            (false, None) => Ok(None),
            (false, Some(_)) => Err(Error::Config(
                "this model is non-spatial; x must not be given".into(),
            )),
        }
    }

    /// The i-th subnetwork's (mean, variance) contributions in original units.
    /// Summing the mean parts over i and adding [`Self::intercept_original`]
    /// reproduces [`Self::predict_complete`]'s mean exactly; the predicted
    /// variance additionally includes [`Self::variance_floor_original`].
    pub fn disentangle(&self, i: usize, c_i: f64, x: Option<f64>) -> Result<(f64, f64)> {
        let mut scratch = EvalScratch::default();
        self.disentangle_with(i, c_i, x, &mut scratch)
    }

    /// [`Self::disentangle`] with caller-owned scratch buffers; repeated
    /// calls do not allocate. The workhorse of the marginalization loops.
    pub fn disentangle_with(
        &self,
        i: usize,
        c_i: f64,
        x: Option<f64>,
        scratch: &mut EvalScratch,
    ) -> Result<(f64, f64)> {
        if i >= self.subnets.len() {
            return Err(Error::Config(format!(
                "covariate index {i} out of range ({} covariates)",
                self.subnets.len()
            )));
        }
        let x_norm = self.check_x(x)?;
        let c_norm = self.norm.covariates[i].normalize(c_i);
        let (m, v) = self.subnets[i].contributions_with(c_norm, x_norm, scratch)?;
        Ok((
            self.norm.y_std * m,
            self.norm.y_std * self.norm.y_std * v,
        ))
    }

    /// Prediction from a complete covariate vector (original units).
    pub fn predict_complete(&self, c: &[f64], x: Option<f64>) -> Result<GaussianParams> {
        let mut scratch = EvalScratch::default();
        self.predict_with(c, x, &mut scratch)
    }

    /// [`Self::predict_complete`] with caller-owned scratch buffers.
    pub fn predict_with(
        &self,
        c: &[f64],
        x: Option<f64>,
        scratch: &mut EvalScratch,
    ) -> Result<GaussianParams> {
        if c.len() != self.subnets.len() {
            return Err(Error::Config(format!(
                "{} covariates given, model has {}",
                c.len(),
                self.subnets.len()
            )));
        }
        let mut mean = self.intercept_original();
        let mut variance = self.variance_floor_original();
        for (i, &c_i) in c.iter().enumerate() {
            let (m, v) = self.disentangle_with(i, c_i, x, scratch)?;
            mean += m;
            variance += v;
        }
        GaussianParams::new(mean, variance)
    }

    /// Prediction from a possibly incomplete covariate vector; a missing
    /// entry is an error directing the caller to the imputation path.
    pub fn predict(&self, covariates: &[Option<f64>], x: Option<f64>) -> Result<GaussianParams> {
        let c = self.require_complete(covariates)?;
        self.predict_complete(&c, x)
    }

    pub fn require_complete(&self, covariates: &[Option<f64>]) -> Result<Vec<f64>> {
        if covariates.len() != self.subnets.len() {
            return Err(Error::Config(format!(
                "{} covariates given, model has {}",
                covariates.len(),
                self.subnets.len()
            )));
        }
        covariates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| Error::MissingCovariate {
                    index: i,
                    name: self.covariate_names[i].clone(),
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        1 + self
            .subnets
            .iter()
            .map(|s| s.mean.param_count() + s.var_head.param_count())
            .sum::<usize>()
    }

    /// Flat parameter order: intercept, then per subnetwork the mean backbone
    /// followed by the variance head.
    pub fn read_params(&self, out: &mut [f64]) {
        out[0] = self.intercept;
        let mut offset = 1;
        for s in &self.subnets {
            let n = s.mean.param_count();
            s.mean.read_params(&mut out[offset..offset + n]);
            offset += n;
            let n = s.var_head.param_count();
            s.var_head.read_params(&mut out[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, out.len());
    }

    pub fn write_params(&mut self, src: &[f64]) {
        self.intercept = src[0];
        let mut offset = 1;
        for s in &mut self.subnets {
            let n = s.mean.param_count();
            s.mean.write_params(&src[offset..offset + n]);
            offset += n;
            let n = s.var_head.param_count();
            s.var_head.write_params(&src[offset..offset + n]);
            offset += n;
        }
        debug_assert_eq!(offset, src.len());
    }

    pub fn validate(&self) -> Result<()> {
        if self.subnets.is_empty() {
            return Err(Error::Config("model has no subnetworks".into()));
        }
        if self.covariate_names.len() != self.subnets.len()
            || self.priors.len() != self.subnets.len()
            || self.norm.covariates.len() != self.subnets.len()
        {
            return Err(Error::Config("model schema is inconsistent".into()));
        }
        for s in &self.subnets {
            s.mean.validate()?;
            s.var_head.validate()?;
        }
        if !(self.variance_floor >= 0.0) {
            return Err(Error::Config("variance floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training sample in normalized units.
#[derive(Debug, Clone)]
pub struct AtlasSample {
    pub covariates: Vec<f64>,
    pub x: Option<f64>,
    pub response: f64,
}

/// Converts complete records into normalized training samples for `model`.
pub fn make_samples(model: &AtlasModel, records: &[&Record]) -> Vec<AtlasSample> {
    records
        .iter()
        .map(|r| AtlasSample {
            covariates: r
                .covariates
                .iter()
                .enumerate()
                .map(|(i, c)| model.norm.covariates[i].normalize(c.expect("complete records")))
                .collect(),
            x: r.x.map(|x| model.norm.normalize_x(x)),
            response: model.norm.standardize_y(r.response),
        })
        .collect()
}

/// Owns an [`AtlasModel`] during training and implements the gradient/loss
/// surface for the shared training loop.
pub struct AtlasTrainable {
    pub model: AtlasModel,
    scratch: Vec<(Tape, Tape)>,
}

impl AtlasTrainable {
    pub fn new(model: AtlasModel) -> Self {
        let scratch = model.subnets.iter().map(|_| (Tape::default(), Tape::default())).collect();
        AtlasTrainable { model, scratch }
    }

    pub fn into_model(self) -> AtlasModel {
        self.model
    }

    /// Per-sample forward in normalized units, caching tapes for backprop.
    fn forward_sample(&mut self, sample: &AtlasSample) -> Result<(f64, f64, Vec<f64>)> {
        let mut mean = self.model.intercept;
        let mut variance = self.model.variance_floor;
        let mut mean_outputs = Vec::with_capacity(self.model.subnets.len());
        let mut buf = [0.0; 3];
        for (i, subnet) in self.model.subnets.iter().enumerate() {
            let c_norm = sample.covariates[i];
            let c_in = if subnet.mean.negate() { -c_norm } else { c_norm };
            let (mean_tape, var_tape) = &mut self.scratch[i];
            let m = subnet
                .mean
                .forward_cached(mean_input(c_in, sample.x, &mut buf), mean_tape)?;
            subnet
                .var_head
                .forward_cached(var_input(c_in, sample.x, m, &mut buf), var_tape)?;
            let v = var_tape.output()[0];
            mean += m;
            variance += v;
            mean_outputs.push(m);
        }
        Ok((mean, variance, mean_outputs))
    }
}

impl GradModel for AtlasTrainable {
    type Sample = AtlasSample;

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn read_params(&self, out: &mut [f64]) {
        self.model.read_params(out);
    }

    fn write_params(&mut self, src: &[f64]) {
        self.model.write_params(src);
    }

    fn batch_loss_grad(&mut self, batch: &[&AtlasSample], grad: &mut [f64]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            let (mean, variance, _) = self.forward_sample(sample)?;
            let r = sample.response - mean;
            total += 0.5 * (2.0 * std::f64::consts::PI * variance).ln()
                + r * r / (2.0 * variance);
            let d_mean = scale * (-r / variance);
            let d_var = scale * (0.5 / variance - r * r / (2.0 * variance * variance));

            grad[0] += d_mean;
            let mut offset = 1;
            for (i, subnet) in self.model.subnets.iter().enumerate() {
                let n_mean = subnet.mean.param_count();
                let n_var = subnet.var_head.param_count();
                let (mean_tape, var_tape) = &self.scratch[i];

                // The variance head sees the mean output as an input, so its
                // input gradient feeds back into the mean backbone.
                let mut var_grads = NetGradients {
                    flat: grad[offset + n_mean..offset + n_mean + n_var].to_vec(),
                };
                let var_in_dim = subnet.var_head.in_dim();
                let mut var_input_grad = vec![0.0; var_in_dim];
                subnet
                    .var_head
                    .backward(var_tape, &[d_var], &mut var_grads, &mut var_input_grad);
                grad[offset + n_mean..offset + n_mean + n_var].copy_from_slice(&var_grads.flat);
                let d_mean_total = d_mean + var_input_grad[var_in_dim - 1];

                let mut mean_grads = NetGradients {
                    flat: grad[offset..offset + n_mean].to_vec(),
                };
                let mut mean_input_grad = vec![0.0; if sample.x.is_some() { 2 } else { 1 }];
                subnet.mean.backward(
                    mean_tape,
                    d_mean_total,
                    &mut mean_grads,
                    &mut mean_input_grad,
                );
                grad[offset..offset + n_mean].copy_from_slice(&mean_grads.flat);
                offset += n_mean + n_var;
            }
        }
        Ok(total * scale)
    }

    fn batch_loss(&mut self, batch: &[&AtlasSample]) -> Result<f64> {
        let mut total = 0.0;
        for sample in batch {
            let (mean, variance, _) = self.forward_sample(sample)?;
            let r = sample.response - mean;
            total +=
                0.5 * (2.0 * std::f64::consts::PI * variance).ln() + r * r / (2.0 * variance);
        }
        Ok(total / batch.len() as f64)
    }

    fn after_step(&mut self) {
        for subnet in &mut self.model.subnets {
            subnet.mean.normalize_weights();
        }
    }
}

/// Result of a fit: the trained model and its loss history.
#[derive(Debug)]
pub struct AtlasFit {
    pub model: AtlasModel,
    pub report: TrainReport,
}

fn complete_or_explain<'a>(ds: &'a Dataset) -> Result<Vec<&'a Record>> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    for i in 0..ds.num_covariates() {
        if ds.records.iter().all(|r| r.covariates[i].is_none()) {
            return Err(Error::Data(format!(
                "covariate \"{}\" is missing in every record",
                ds.covariate_names[i]
            )));
        }
    }
    let complete = ds.complete_records();
    if complete.len() != ds.len() {
        return Err(Error::Data(format!(
            "{} of {} records have missing covariates; impute first (see the imputation pipeline)",
            ds.len() - complete.len(),
            ds.len()
        )));
    }
    Ok(complete)
}

use crate::data::carve_validation;

/// Trains the additive atlas on a dataset with complete covariates.
pub fn fit_atlas(ds: &Dataset, config: &AtlasConfig, priors: &[MonotonePrior]) -> Result<AtlasFit> {
    config.train.validate()?;
    let _ = complete_or_explain(ds)?;
    let (train_ds, val_ds) =
        carve_validation(ds, config.train.validation_fraction, config.train.seed)?;
    let norm = Normalization::fit(&train_ds.records.iter().collect::<Vec<_>>(),
        ds.num_covariates(), ds.spatial)?;
    let model = AtlasModel::untrained(
        ds.covariate_names.clone(),
        ds.spatial,
        priors,
        config,
        norm,
        config.train.seed,
    )?;
    let train_samples = make_samples(&model, &train_ds.records.iter().collect::<Vec<_>>());
    let val_samples = make_samples(&model, &val_ds.records.iter().collect::<Vec<_>>());
    let mut trainable = AtlasTrainable::new(model);
    let report = train_loop(&mut trainable, &train_samples, &val_samples, &config.train)?;
    Ok(AtlasFit {
        model: trainable.into_model(),
        report,
    })
}

/// The non-additive baseline: one joint MLP over all covariates (and the
/// location) with a linear mean head and a softplus variance head, trained
/// with the same Gaussian NLL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointGaussianMlp {
    pub(crate) net: DenseNetwork,
    pub norm: Normalization,
    pub spatial: bool,
    pub covariate_names: Vec<String>,
    pub variance_floor: f64,
}

impl JointGaussianMlp {
    pub fn untrained(
        covariate_names: Vec<String>,
        spatial: bool,
        config: &AtlasConfig,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        let n = covariate_names.len();
        if n == 0 {
            return Err(Error::Config("at least one covariate is required".into()));
        }
        let d_in = n + usize::from(spatial);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlp-init", 0));
        let net = DenseNetwork::with_output_heads(
            &[d_in, config.hidden_width, 2],
            ActivationKind::GeLU,
            vec![ActivationKind::Linear, ActivationKind::Softplus],
            &mut rng,
        )?;
        Ok(JointGaussianMlp {
            net,
            norm,
            spatial,
            covariate_names,
            variance_floor: config.variance_floor,
        })
    }

    fn inputs(&self, c: &[f64], x: Option<f64>) -> Result<Vec<f64>> {
        if c.len() != self.covariate_names.len() {
            return Err(Error::Config(format!(
                "{} covariates given, model has {}",
                c.len(),
                self.covariate_names.len()
            )));
        }
        let mut input: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, &v)| self.norm.covariates[i].normalize(v))
            .collect();
        match (self.spatial, x) {
            (true, Some(x)) => input.push(self.norm.normalize_x(x)),
            (true, None) => {
                return Err(Error::Config("this model is spatial; x is required".into()))
            }
            (false, None) => {}
            (false, Some(_)) => {
                return Err(Error::Config(
                    "this model is non-spatial; x must not be given".into(),
                ))
            }
        }
        Ok(input)
    }

    pub fn predict_complete(&self, c: &[f64], x: Option<f64>) -> Result<GaussianParams> {
        let out = self.net.forward(&self.inputs(c, x)?)?;
        let mean = self.norm.y_mean + self.norm.y_std * out[0];
        let variance =
            self.norm.y_std * self.norm.y_std * (out[1] + self.variance_floor);
        GaussianParams::new(mean, variance)
    }

    pub fn predict(&self, covariates: &[Option<f64>], x: Option<f64>) -> Result<GaussianParams> {
        let c: Result<Vec<f64>> = covariates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| Error::MissingCovariate {
                    index: i,
                    name: self.covariate_names[i].clone(),
                })
            })
            .collect();
        self.predict_complete(&c?, x)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()
    }
}

/// Training wrapper for the joint MLP baseline.
pub struct MlpTrainable {
    pub model: JointGaussianMlp,
    tape: Tape,
}

impl MlpTrainable {
    pub fn new(model: JointGaussianMlp) -> Self {
        MlpTrainable {
            model,
            tape: Tape::default(),
        }
    }

    pub fn into_model(self) -> JointGaussianMlp {
        self.model
    }

    fn input_of(&self, sample: &AtlasSample) -> Vec<f64> {
        let mut input = sample.covariates.clone();
        if let Some(x) = sample.x {
            input.push(x);
        }
        input
    }
}

impl GradModel for MlpTrainable {
    type Sample = AtlasSample;

    fn param_count(&self) -> usize {
        self.model.net.param_count()
    }

    fn read_params(&self, out: &mut [f64]) {
        self.model.net.read_params(out);
    }

    fn write_params(&mut self, src: &[f64]) {
        self.model.net.write_params(src);
    }

    fn batch_loss_grad(&mut self, batch: &[&AtlasSample], grad: &mut [f64]) -> Result<f64> {
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            let input = self.input_of(sample);
            self.model.net.forward_cached(&input, &mut self.tape)?;
            let mean = self.tape.output()[0];
            let variance = self.tape.output()[1] + self.model.variance_floor;
            let r = sample.response - mean;
            total +=
                0.5 * (2.0 * std::f64::consts::PI * variance).ln() + r * r / (2.0 * variance);
            let d_mean = scale * (-r / variance);
            let d_var = scale * (0.5 / variance - r * r / (2.0 * variance * variance));
            let mut grads = NetGradients { flat: grad.to_vec() };
            let mut input_grad = vec![0.0; input.len()];
            self.model
                .net
                .backward(&self.tape, &[d_mean, d_var], &mut grads, &mut input_grad);
            grad.copy_from_slice(&grads.flat);
        }
        Ok(total * scale)
    }

    fn batch_loss(&mut self, batch: &[&AtlasSample]) -> Result<f64> {
        let mut total = 0.0;
        for sample in batch {
            let input = self.input_of(sample);
            let out = self.model.net.forward(&input)?;
            let variance = out[1] + self.model.variance_floor;
            let r = sample.response - out[0];
            total +=
                0.5 * (2.0 * std::f64::consts::PI * variance).ln() + r * r / (2.0 * variance);
        }
        Ok(total / batch.len() as f64)
    }
}

#[derive(Debug)]
pub struct MlpFit {
    pub model: JointGaussianMlp,
    pub report: TrainReport,
}

/// Trains the joint MLP baseline on the same schema as [`fit_atlas`].
pub fn fit_mlp_baseline(ds: &Dataset, config: &AtlasConfig) -> Result<MlpFit> {
    config.train.validate()?;
    let _ = complete_or_explain(ds)?;
    let (train_ds, val_ds) =
        carve_validation(ds, config.train.validation_fraction, config.train.seed)?;
    let norm = Normalization::fit(
        &train_ds.records.iter().collect::<Vec<_>>(),
        ds.num_covariates(),
        ds.spatial,
    )?;
    let model = JointGaussianMlp::untrained(
        ds.covariate_names.clone(),
        ds.spatial,
        config,
        norm,
        config.train.seed,
    )?;
    // Atlas samples are model-independent given the normalization; reuse them.
    let probe = AtlasModel::untrained(
        ds.covariate_names.clone(),
        ds.spatial,
        &vec![MonotonePrior::None; ds.num_covariates()],
        config,
        model.norm.clone(),
        config.train.seed,
    )?;
    let train_samples = make_samples(&probe, &train_ds.records.iter().collect::<Vec<_>>());
    let val_samples = make_samples(&probe, &val_ds.records.iter().collect::<Vec<_>>());
    let mut trainable = MlpTrainable::new(model);
    let report = train_loop(&mut trainable, &train_samples, &val_samples, &config.train)?;
    Ok(MlpFit {
        model: trainable.into_model(),
        report,
    })
}

/// Identity normalization for synthetic models built directly in tests and
/// benchmarks: inputs already in [0, 1], response already standardized.
pub fn identity_normalization(n_covariates: usize, spatial: bool) -> Normalization {
    Normalization {
        covariates: vec![MinMax { min: 0.0, max: 1.0 }; n_covariates],
        x: spatial.then_some(MinMax { min: 0.0, max: 1.0 }),
        y_mean: 0.0,
        y_std: 1.0,
        covariate_means: vec![0.5; n_covariates],
        covariate_variances: vec![1.0 / 12.0; n_covariates],
        covariate_iqr: vec![0.5; n_covariates],
    }
}

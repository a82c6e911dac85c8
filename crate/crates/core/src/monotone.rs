//! Lipschitz-constrained networks that are monotonically non-decreasing in
//! designated inputs by construction.
//!
//! The construction: a GroupSort network `g` is kept Lip¹ (|g(a) − g(b)| ≤
//! λ‖a − b‖₁) by rescaling each weight-matrix column so the product of
//! per-layer column-wise L1 norms stays ≤ λ. The monotone output is then
//! `g(x) + λ·Σ_{j∈S} x_j`: since |∂g/∂x_j| ≤ λ, the residual term makes the
//! partial derivative along every j ∈ S non-negative everywhere.
//!
//! A decreasing prior is expressed by negating the covariate before it enters
//! the network, so one construction covers both directions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActivationKind, DenseNetwork, NetGradients, Tape};

/// Rescales each weight-matrix column of `net` by
/// `1 / max(1, λ^{-1/D} · Σ_rows |w|)`, where D is the network depth. After
/// this, the product of per-layer column L1 norms is ≤ λ and the network is
/// Lip¹ with constant ≤ λ (GroupSort and Linear activations are 1-Lipschitz).
/// Total and idempotent; biases are untouched.
pub fn normalize_weights_l1(net: &mut DenseNetwork, lambda: f64) {
    let depth = net.layers().len() as f64;
    let per_layer = lambda.powf(-1.0 / depth);
    for layer in net.layers_mut() {
        let (out_dim, in_dim) = (layer.out_dim, layer.in_dim);
        for col in 0..in_dim {
            let mut norm = 0.0;
            for row in 0..out_dim {
                norm += layer.weights[row * in_dim + col].abs();
            }
            let scale = 1.0 / (per_layer * norm).max(1.0);
            if scale < 1.0 {
                for row in 0..out_dim {
                    layer.weights[row * in_dim + col] *= scale;
                }
            }
        }
    }
}

/// A scalar-output Lipschitz network plus the monotone residual term.
/// With an empty monotone set this is a plain Lip¹ network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonotoneNetwork {
    net: DenseNetwork,
    lambda: f64,
    monotone_inputs: Vec<usize>,
}

impl MonotoneNetwork {
    /// A GroupSort network of the given dimensions (scalar output), weight
    /// normalized at construction so the Lipschitz bound holds from the start.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        group_size: usize,
        lambda: f64,
        monotone_inputs: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Config("Lipschitz constant must be positive".into()));
        }
        if dims.last() != Some(&1) {
            return Err(Error::Config("monotone network output must be scalar".into()));
        }
        let in_dim = dims[0];
        if monotone_inputs.iter().any(|&j| j >= in_dim) {
            return Err(Error::Config("monotone input index out of range".into()));
        }
        let net = DenseNetwork::new(
            dims,
            ActivationKind::GroupSort { group_size },
            ActivationKind::Linear,
            rng,
        )?;
        let mut model = MonotoneNetwork {
            net,
            lambda,
            monotone_inputs,
        };
        model.normalize_weights();
        Ok(model)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn monotone_inputs(&self) -> &[usize] {
        &self.monotone_inputs
    }

    pub fn inner(&self) -> &DenseNetwork {
        &self.net
    }

    /// Renormalizes the weights; applied after every optimizer step so the
    /// constraint holds throughout training.
    pub fn normalize_weights(&mut self) {
        normalize_weights_l1(&mut self.net, self.lambda);
    }

    /// `g(input) + λ·Σ_{j∈S} input_j`.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let g = self.net.forward(input)?[0];
        Ok(g + self.residual(input))
    }

    fn residual(&self, input: &[f64]) -> f64 {
        self.lambda
            * self
                .monotone_inputs
                .iter()
                .map(|&j| input[j])
                .sum::<f64>()
    }

    pub(crate) fn forward_cached(&self, input: &[f64], tape: &mut Tape) -> Result<f64> {
        self.net.forward_cached(input, tape)?;
        Ok(tape.output()[0] + self.residual(input))
    }

    /// Backprop for the scalar output: parameter gradients go to `grads`, and
    /// the input gradient (including the residual's λ on monotone inputs) is
    /// accumulated into `input_grad`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        upstream: f64,
        grads: &mut NetGradients,
        input_grad: &mut [f64],
    ) {
        self.net.backward(tape, &[upstream], grads, input_grad);
        for &j in &self.monotone_inputs {
            input_grad[j] += self.lambda * upstream;
        }
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn zero_gradients(&self) -> NetGradients {
        self.net.zero_gradients()
    }

    pub fn read_params(&self, out: &mut [f64]) {
        self.net.read_params(out);
    }

    pub fn write_params(&mut self, src: &[f64]) {
        self.net.write_params(src);
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lambda > 0.0) {
            return Err(Error::Config("Lipschitz constant must be positive".into()));
        }
        if self.net.out_dim() != 1 {
            return Err(Error::Config("monotone network output must be scalar".into()));
        }
        if self
            .monotone_inputs
            .iter()
            .any(|&j| j >= self.net.in_dim())
        {
            return Err(Error::Config("monotone input index out of range".into()));
        }
        Ok(())
    }
}

//! Minimal dense feedforward networks with hand-rolled reverse-mode
//! gradients. This is the compute substrate for every learned component in
//! the crate: no GPU, no general autograd, just dense layers, the four
//! activations the models need, and exact backprop.

mod train;

pub use train::{sample_refs, train_loop, EpochRecord, GradModel, TrainConfig, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Activation functions available to [`DenseNetwork`].
///
/// `GroupSort` sorts each contiguous group of `group_size` units in ascending
/// order (convention: group k holds units `[k*G, (k+1)*G)`), which is
/// 1-Lipschitz and gradient-preserving, making it the hidden activation for
/// Lipschitz-constrained networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Linear,
    #[serde(rename = "gelu")]
    GeLU,
    Softplus,
    GroupSort {
        group_size: usize,
    },
}

impl ActivationKind {
    fn validate_for_width(&self, width: usize) -> Result<()> {
        if let ActivationKind::GroupSort { group_size } = self {
            if *group_size == 0 || width % group_size != 0 {
                return Err(Error::Config(format!(
                    "GroupSort group size {group_size} must divide layer width {width}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major weights with shape (out_dim, in_dim).
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
}

impl Layer {
    fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        // Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
        let limit = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let biases = (0..out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Layer {
            weights,
            biases,
            in_dim,
            out_dim,
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.resize(self.out_dim, 0.0);
        for o in 0..self.out_dim {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out[o] = acc;
        }
    }
}

/// A dense feedforward network. All hidden layers share one activation; the
/// output layer applies one activation per output unit (e.g. a linear mean
/// head next to a softplus variance head).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNetwork {
    layers: Vec<Layer>,
    hidden_activation: ActivationKind,
    output_activations: Vec<ActivationKind>,
}

/// Per-layer records from a forward pass, consumed by backprop. Buffers are
/// reused across calls, so a long-lived tape makes repeated evaluation
/// allocation-free.
#[derive(Debug, Default)]
pub struct Tape {
    /// Copy of the network input.
    input: Vec<f64>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation values of each layer.
    post: Vec<Vec<f64>>,
    /// GroupSort permutations (output j reads input perm[j]); empty when the
    /// layer's activation is pointwise.
    perms: Vec<Vec<usize>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(Vec::as_slice).unwrap_or(&[])
    }

    fn ensure_layers(&mut self, n: usize) {
        self.pre.resize_with(n, Vec::new);
        self.post.resize_with(n, Vec::new);
        self.perms.resize_with(n, Vec::new);
    }

    fn layer_input(&self, idx: usize) -> &[f64] {
        if idx == 0 {
            &self.input
        } else {
            &self.post[idx - 1]
        }
    }
}

/// Flat gradient buffer matching a network's parameter layout.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub(crate) flat: Vec<f64>,
}

impl NetGradients {
    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }
}

impl DenseNetwork {
    /// A network with the given layer dimensions, e.g. `[1, 128, 2]`, with one
    /// output activation applied to every output unit.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: ActivationKind,
        output: ActivationKind,
        rng: &mut R,
    ) -> Result<Self> {
        let out_dim = *dims.last().ok_or_else(|| {
            Error::Config("network needs at least an input and an output dimension".into())
        })?;
        Self::with_output_heads(dims, hidden, vec![output; out_dim], rng)
    }

    /// As [`DenseNetwork::new`] but with an explicit activation per output unit.
    pub fn with_output_heads<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: ActivationKind,
        output_activations: Vec<ActivationKind>,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "network needs at least an input and an output dimension".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        let out_dim = *dims.last().unwrap();
        if output_activations.len() != out_dim {
            return Err(Error::Config(format!(
                "{} output activations for {} output units",
                output_activations.len(),
                out_dim
            )));
        }
        if output_activations
            .iter()
            .any(|a| matches!(a, ActivationKind::GroupSort { .. }))
        {
            return Err(Error::Config(
                "GroupSort is a hidden activation; use per-unit Linear/Softplus outputs".into(),
            ));
        }
        for win in dims[1..dims.len() - 1].windows(1) {
            hidden.validate_for_width(win[0])?;
        }
        let layers = dims
            .windows(2)
            .map(|w| Layer::new(w[0], w[1], rng))
            .collect();
        Ok(DenseNetwork {
            layers,
            hidden_activation: hidden,
            output_activations,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    pub fn hidden_activation(&self) -> ActivationKind {
        self.hidden_activation
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Checks structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer dimensions do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.in_dim * layer.out_dim
                || layer.biases.len() != layer.out_dim
            {
                return Err(Error::Config(format!("layer {idx} parameter shape mismatch")));
            }
            if idx + 1 < self.layers.len() {
                self.hidden_activation.validate_for_width(layer.out_dim)?;
            }
            if layer
                .weights
                .iter()
                .chain(layer.biases.iter())
                .any(|p| !p.is_finite())
            {
                return Err(Error::Config(format!("layer {idx} has non-finite parameters")));
            }
        }
        if self.output_activations.len() != self.out_dim() {
            return Err(Error::Config("output activation count mismatch".into()));
        }
        Ok(())
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_cached(input, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Forward pass that records what backprop needs. Reuses the tape's
    /// buffers; repeated calls with the same tape do not allocate.
    pub fn forward_cached(&self, input: &[f64], tape: &mut Tape) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Config(format!(
                "input length {} does not match network input dimension {}",
                input.len(),
                self.in_dim()
            )));
        }
        let n_layers = self.layers.len();
        tape.ensure_layers(n_layers);
        tape.input.clear();
        tape.input.extend_from_slice(input);

        for (idx, layer) in self.layers.iter().enumerate() {
            // pre/post/perms are distinct fields, so borrowing the previous
            // layer's output while writing this layer's buffers is fine.
            let (done, rest) = tape.post.split_at_mut(idx);
            let layer_input: &[f64] = if idx == 0 { &tape.input } else { &done[idx - 1] };
            let pre = &mut tape.pre[idx];
            layer.affine(layer_input, pre);

            let post = &mut rest[0];
            let is_output = idx + 1 == n_layers;
            if is_output {
                post.clear();
                post.extend(
                    pre.iter()
                        .zip(&self.output_activations)
                        .map(|(&z, act)| apply_pointwise(*act, z)),
                );
                tape.perms[idx].clear();
            } else {
                apply_hidden_into(self.hidden_activation, pre, post, &mut tape.perms[idx]);
            }
        }
        Ok(())
    }

    /// Reverse-mode pass. `upstream` is dLoss/d(output); parameter gradients
    /// are accumulated into `grads` and the gradient with respect to the
    /// network input is accumulated into `input_grad`.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut NetGradients,
        input_grad: &mut [f64],
    ) {
        assert_eq!(upstream.len(), self.out_dim(), "upstream gradient length");
        let mut d_post = upstream.to_vec();
        let mut offset = grads.flat.len();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.weights.len() + layer.biases.len();
            let pre = &tape.pre[idx];
            let is_output = idx + 1 == self.layers.len();

            // Gradient through the activation.
            let mut d_pre = vec![0.0; pre.len()];
            if is_output {
                for (j, act) in self.output_activations.iter().enumerate() {
                    d_pre[j] = d_post[j] * pointwise_derivative(*act, pre[j]);
                }
            } else {
                match self.hidden_activation {
                    ActivationKind::GroupSort { .. } => {
                        for (j, &src) in tape.perms[idx].iter().enumerate() {
                            d_pre[src] += d_post[j];
                        }
                    }
                    act => {
                        for j in 0..pre.len() {
                            d_pre[j] = d_post[j] * pointwise_derivative(act, pre[j]);
                        }
                    }
                }
            }

            // Gradient of the affine map.
            let input = tape.layer_input(idx);
            let (w_grad, b_grad) =
                grads.flat[offset..offset + layer.weights.len() + layer.biases.len()]
                    .split_at_mut(layer.weights.len());
            let mut d_input = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let g = d_pre[o];
                b_grad[o] += g;
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let w_row = &mut w_grad[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    w_row[i] += g * input[i];
                    d_input[i] += row[i] * g;
                }
            }
            d_post = d_input;
        }
        debug_assert_eq!(offset, 0);
        for (dst, src) in input_grad.iter_mut().zip(&d_post) {
            *dst += src;
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn zero_gradients(&self) -> NetGradients {
        NetGradients {
            flat: vec![0.0; self.param_count()],
        }
    }

    /// Copies parameters into `out` (layer order, weights then biases).
    pub fn read_params(&self, out: &mut [f64]) {
        let mut offset = 0;
        for layer in &self.layers {
            out[offset..offset + layer.weights.len()].copy_from_slice(&layer.weights);
            offset += layer.weights.len();
            out[offset..offset + layer.biases.len()].copy_from_slice(&layer.biases);
            offset += layer.biases.len();
        }
        debug_assert_eq!(offset, out.len());
    }

    pub fn write_params(&mut self, src: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&src[offset..offset + nw]);
            offset += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&src[offset..offset + nb]);
            offset += nb;
        }
        debug_assert_eq!(offset, src.len());
    }
}

fn apply_pointwise(act: ActivationKind, z: f64) -> f64 {
    match act {
        ActivationKind::Linear => z,
        ActivationKind::GeLU => math::gelu(z),
        ActivationKind::Softplus => math::softplus(z),
        ActivationKind::GroupSort { .. } => unreachable!("GroupSort is not pointwise"),
    }
}

fn pointwise_derivative(act: ActivationKind, z: f64) -> f64 {
    match act {
        ActivationKind::Linear => 1.0,
        ActivationKind::GeLU => math::gelu_derivative(z),
        ActivationKind::Softplus => math::sigmoid(z),
        ActivationKind::GroupSort { .. } => unreachable!("GroupSort is not pointwise"),
    }
}

/// Applies a hidden activation to a pre-activation vector, writing the result
/// into `post` and, for GroupSort, the permutation used (output j = input
/// perm[j]) into `perm`.
fn apply_hidden_into(act: ActivationKind, pre: &[f64], post: &mut Vec<f64>, perm: &mut Vec<usize>) {
    match act {
        ActivationKind::GroupSort { group_size } => {
            perm.clear();
            perm.extend(0..pre.len());
            for group in perm.chunks_mut(group_size) {
                group.sort_by(|&a, &b| pre[a].total_cmp(&pre[b]));
            }
            post.clear();
            post.extend(perm.iter().map(|&src| pre[src]));
        }
        act => {
            perm.clear();
            post.clear();
            post.extend(pre.iter().map(|&z| apply_pointwise(act, z)));
        }
    }
}

/// Sorts each contiguous group of `group_size` entries in ascending order.
/// Exposed for direct use and as the reference for the activation's tests.
pub fn group_sort(values: &[f64], group_size: usize) -> Vec<f64> {
    let mut post = Vec::new();
    let mut perm = Vec::new();
    apply_hidden_into(
        ActivationKind::GroupSort { group_size },
        values,
        &mut post,
        &mut perm,
    );
    post
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = DenseNetwork::new(
            &[2, 2],
            ActivationKind::Linear,
            ActivationKind::Linear,
            &mut rng(0),
        )
        .unwrap();
        net.write_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = net.forward(&[3.0, -2.0]).unwrap();
        assert_eq!(out, vec![3.0, -2.0]);
    }

    #[test]
    fn softplus_head_at_zero_is_ln_two() {
        let mut net = DenseNetwork::new(
            &[1, 1],
            ActivationKind::Linear,
            ActivationKind::Softplus,
            &mut rng(0),
        )
        .unwrap();
        net.write_params(&[0.0, 0.0]);
        let out = net.forward(&[5.0]).unwrap();
        assert_abs_diff_eq!(out[0], std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn group_sort_sorts_each_group_ascending() {
        assert_eq!(group_sort(&[2.0, -1.0, 0.0, 5.0], 2), vec![-1.0, 2.0, 0.0, 5.0]);
        assert_eq!(group_sort(&[3.0, 2.0, 1.0], 3), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_configuration_error() {
        let net = DenseNetwork::new(
            &[3, 4, 1],
            ActivationKind::GeLU,
            ActivationKind::Linear,
            &mut rng(1),
        )
        .unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Config(_))));
    }

    #[test]
    fn group_sort_width_must_divide() {
        let err = DenseNetwork::new(
            &[1, 5, 1],
            ActivationKind::GroupSort { group_size: 2 },
            ActivationKind::Linear,
            &mut rng(1),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn single_linear_layer_gradient_matches_chain_rule() {
        // loss = output^2, so d(loss)/dW = 2*output*input.
        let mut net = DenseNetwork::new(
            &[2, 1],
            ActivationKind::Linear,
            ActivationKind::Linear,
            &mut rng(2),
        )
        .unwrap();
        net.write_params(&[0.5, -1.5, 0.25]);
        let input = [2.0, 3.0];
        let mut tape = Tape::default();
        net.forward_cached(&input, &mut tape).unwrap();
        let y = tape.output()[0];

        let mut grads = net.zero_gradients();
        let mut input_grad = vec![0.0; 2];
        net.backward(&tape, &[2.0 * y], &mut grads, &mut input_grad);

        assert_abs_diff_eq!(grads.flat[0], 2.0 * y * input[0], epsilon = 1e-12);
        assert_abs_diff_eq!(grads.flat[1], 2.0 * y * input[1], epsilon = 1e-12);
        assert_abs_diff_eq!(grads.flat[2], 2.0 * y, epsilon = 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let net = DenseNetwork::new(
            &[3, 8, 2],
            ActivationKind::GeLU,
            ActivationKind::Linear,
            &mut rng(3),
        )
        .unwrap();
        let mut tape = Tape::default();
        net.forward_cached(&[0.3, -0.7, 1.1], &mut tape).unwrap();
        let mut grads = net.zero_gradients();
        let mut input_grad = vec![0.0; 3];
        net.backward(&tape, &[0.0, 0.0], &mut grads, &mut input_grad);
        assert!(grads.flat.iter().all(|&g| g == 0.0));
        assert!(input_grad.iter().all(|&g| g == 0.0));
    }

    /// Central finite differences on a random two-layer net; the analytic
    /// gradient of loss = sum(output^2) must agree within relative 1e-3.
    #[test]
    fn random_net_gradients_match_finite_differences() {
        for (hidden, seed) in [
            (ActivationKind::GeLU, 11_u64),
            (ActivationKind::GroupSort { group_size: 2 }, 13),
            (ActivationKind::Softplus, 17),
        ] {
            let mut net = DenseNetwork::with_output_heads(
                &[3, 8, 2],
                hidden,
                vec![ActivationKind::Linear, ActivationKind::Softplus],
                &mut rng(seed),
            )
            .unwrap();
            let input = [0.37, -0.81, 0.55];

            let loss = |net: &DenseNetwork| -> f64 {
                net.forward(&input).unwrap().iter().map(|y| y * y).sum()
            };

            let mut tape = Tape::default();
            net.forward_cached(&input, &mut tape).unwrap();
            let upstream: Vec<f64> = tape.output().iter().map(|y| 2.0 * y).collect();
            let mut grads = net.zero_gradients();
            let mut input_grad = vec![0.0; 3];
            net.backward(&tape, &upstream, &mut grads, &mut input_grad);

            let n = net.param_count();
            let mut params = vec![0.0; n];
            net.read_params(&mut params);
            let h = 1e-4;
            let mut rng = rng(seed ^ 0xABCD);
            for _ in 0..20 {
                let idx = rng.random_range(0..n);
                let orig = params[idx];
                params[idx] = orig + h;
                net.write_params(&params);
                let up = loss(&net);
                params[idx] = orig - h;
                net.write_params(&params);
                let down = loss(&net);
                params[idx] = orig;
                net.write_params(&params);

                let fd = (up - down) / (2.0 * h);
                let analytic = grads.flat[idx];
                let rel = (analytic - fd).abs() / (analytic.abs() + 1e-8);
                assert!(
                    rel < 1e-3,
                    "hidden {hidden:?} param {idx}: analytic {analytic} vs fd {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = DenseNetwork::new(
            &[2, 6, 1],
            ActivationKind::GroupSort { group_size: 3 },
            ActivationKind::Linear,
            &mut rng(5),
        )
        .unwrap();
        let x = [0.4, -0.9];
        let mut tape = Tape::default();
        net.forward_cached(&x, &mut tape).unwrap();
        let mut grads = net.zero_gradients();
        let mut input_grad = vec![0.0; 2];
        net.backward(&tape, &[1.0], &mut grads, &mut input_grad);

        let h = 1e-5;
        for i in 0..2 {
            let mut hi = x;
            hi[i] += h;
            let mut lo = x;
            lo[i] -= h;
            let fd =
                (net.forward(&hi).unwrap()[0] - net.forward(&lo).unwrap()[0]) / (2.0 * h);
            assert_abs_diff_eq!(input_grad[i], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn serialization_round_trips() {
        let net = DenseNetwork::with_output_heads(
            &[2, 4, 2],
            ActivationKind::GroupSort { group_size: 2 },
            vec![ActivationKind::Linear, ActivationKind::Softplus],
            &mut rng(9),
        )
        .unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: DenseNetwork = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(
            net.forward(&[0.1, 0.2]).unwrap(),
            back.forward(&[0.1, 0.2]).unwrap()
        );
    }
}

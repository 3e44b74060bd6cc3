//! Dense feed-forward networks with per-example reverse-mode gradients and Adam.
//!
//! Parameters live in one flat buffer using a canonical order: layers in
//! sequence, each layer's weight matrix first (row-major, `out x in`), then its
//! bias. Gradients use the same layout, so serialized gradients are comparable
//! across runs.

use rand::Rng;

use crate::error::{Error, Result};

/// Element-wise activation applied after the affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation code {other}"
            ))),
        }
    }
}

/// Shape and activation of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Fixed-topology dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<LayerSpec>,
    /// Flat parameters in canonical order (see module docs).
    params: Vec<f64>,
    /// Offset of each layer's block inside `params`.
    offsets: Vec<usize>,
}

impl DenseNet {
    /// Build a zero-initialized net. `dims` lists input dim followed by each
    /// layer's output dim; `activations` has one entry per layer.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "a net needs at least one layer".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::InvalidConfig(format!(
                "expected {} activations, got {}",
                dims.len() - 1,
                activations.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layer dims must be > 0".into()));
        }
        let layers: Vec<LayerSpec> = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation,
            })
            .collect();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for layer in &layers {
            offsets.push(total);
            total += layer.param_count();
        }
        Ok(Self {
            layers,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Build with Xavier-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, activations)?;
        for l in 0..net.layers.len() {
            let spec = net.layers[l];
            let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
            let base = net.offsets[l];
            for i in 0..spec.out_dim * spec.in_dim {
                net.params[base + i] = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Reassemble from a topology and a flat parameter vector (deserialization).
    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("empty topology".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::DimensionMismatch {
                    layer: i + 1,
                    got: w[1].in_dim,
                    expected: w[0].out_dim,
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for layer in &layers {
            offsets.push(total);
            total += layer.param_count();
        }
        if params.len() != total {
            return Err(Error::InvalidConfig(format!(
                "parameter vector length {} does not match topology ({total})",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: "network parameters".into(),
            });
        }
        Ok(Self {
            layers,
            params,
            offsets,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "parameter vector length {} does not match net ({})",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Flat index of weight `[row, col]` in `layer`.
    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        self.offsets[layer] + row * self.layers[layer].in_dim + col
    }

    /// Flat index of bias `row` in `layer`.
    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        let spec = self.layers[layer];
        self.offsets[layer] + spec.out_dim * spec.in_dim + row
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                layer: 0,
                got: input.len(),
                expected: self.input_dim(),
            });
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "network input".into(),
            });
        }
        Ok(())
    }

    /// Evaluate the network on one input.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.into_output())
    }

    /// Evaluate while retaining every layer's post-activation for backprop.
    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for (l, spec) in self.layers.iter().enumerate() {
            let prev = &activations[l];
            let base = self.offsets[l];
            let mut out = Vec::with_capacity(spec.out_dim);
            for o in 0..spec.out_dim {
                let row = base + o * spec.in_dim;
                let mut z = self.params[base + spec.out_dim * spec.in_dim + o];
                for (i, &x) in prev.iter().enumerate() {
                    z = self.params[row + i].mul_add(x, z);
                }
                out.push(spec.activation.apply(z));
            }
            activations.push(out);
        }
        Ok(ForwardTrace { activations })
    }

    /// Reverse-mode sweep from an upstream output gradient.
    ///
    /// Returns the gradient with respect to all parameters (canonical layout)
    /// and with respect to the input.
    pub fn backward(&self, trace: &ForwardTrace, d_output: &[f64]) -> (GradientVector, Vec<f64>) {
        assert_eq!(
            d_output.len(),
            self.output_dim(),
            "output gradient length mismatch"
        );
        assert_eq!(trace.activations.len(), self.layers.len() + 1);
        let mut grad = vec![0.0; self.params.len()];
        let mut d_next = d_output.to_vec();
        for (l, spec) in self.layers.iter().enumerate().rev() {
            let prev = &trace.activations[l];
            let out = &trace.activations[l + 1];
            let base = self.offsets[l];
            let bias_base = base + spec.out_dim * spec.in_dim;
            let mut d_prev = vec![0.0; spec.in_dim];
            for o in 0..spec.out_dim {
                let d_z = d_next[o] * spec.activation.grad_from_output(out[o]);
                grad[bias_base + o] += d_z;
                let row = base + o * spec.in_dim;
                for i in 0..spec.in_dim {
                    grad[row + i] += d_z * prev[i];
                    d_prev[i] = self.params[row + i].mul_add(d_z, d_prev[i]);
                }
            }
            d_next = d_prev;
        }
        (GradientVector::from_values(grad), d_next)
    }

    /// Loss value and parameter gradient for exactly one example.
    pub fn per_example_gradient<L: Loss>(
        &self,
        loss: &L,
        input: &[f64],
        target: &[f64],
    ) -> Result<(f64, GradientVector)> {
        let trace = self.forward_trace(input)?;
        let (value, d_output) = loss.value_and_grad(trace.output(), target);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { example: 0 });
        }
        let (grad, _) = self.backward(&trace, &d_output);
        Ok((value, grad))
    }

    /// Mean loss and mean gradient over a batch; equals the gradient of the
    /// batch-mean loss. Errors carry the index of the offending example.
    pub fn batch_gradient<L: Loss>(
        &self,
        loss: &L,
        examples: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(f64, GradientVector)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut total = GradientVector::zeros(self.parameter_count());
        let mut loss_sum = 0.0;
        for (i, (input, target)) in examples.iter().enumerate() {
            let (value, grad) = self
                .per_example_gradient(loss, input, target)
                .map_err(|e| e.with_example(i))?;
            loss_sum += value;
            total.add_assign(&grad);
        }
        let inv = 1.0 / examples.len() as f64;
        total.scale(inv);
        Ok((loss_sum * inv, total))
    }
}

/// Post-activation values of every layer, input included.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace is never empty")
    }

    fn into_output(mut self) -> Vec<f64> {
        self.activations.pop().expect("trace is never empty")
    }
}

/// Scalar loss over a network output.
pub trait Loss {
    /// Returns the loss value and its gradient with respect to the output.
    fn value_and_grad(&self, output: &[f64], target: &[f64]) -> (f64, Vec<f64>);
}

/// Squared L2 error `||output - target||^2`.
pub struct SquaredError;

impl Loss for SquaredError {
    fn value_and_grad(&self, output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(output.len(), target.len(), "loss dimension mismatch");
        let mut value = 0.0;
        let mut grad = Vec::with_capacity(output.len());
        for (&o, &t) in output.iter().zip(target) {
            let d = o - t;
            value += d * d;
            grad.push(2.0 * d);
        }
        (value, grad)
    }
}

/// Flat gradient in the canonical parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Deterministic little-endian serialization, comparable across runs.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self::with_hyper(parameter_count, learning_rate, 0.9, 0.999, 1e-8)
            .expect("default hyper-parameters are valid")
    }

    pub fn with_hyper(
        parameter_count: usize,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
            return Err(Error::InvalidConfig(
                "adam betas must lie in (0, 1)".into(),
            ));
        }
        if learning_rate <= 0.0 || epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "adam learning rate and epsilon must be positive".into(),
            ));
        }
        Ok(Self {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub(crate) fn from_parts(
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
        step_count: u64,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let mut state = Self::with_hyper(first_moment.len(), learning_rate, beta1, beta2, epsilon)?;
        if second_moment.len() != first_moment.len() {
            return Err(Error::InvalidConfig("adam moment length mismatch".into()));
        }
        state.first_moment = first_moment;
        state.second_moment = second_moment;
        state.step_count = step_count;
        Ok(state)
    }

    /// One bias-corrected Adam update applied in place.
    ///
    /// A NaN anywhere in `grad` is rejected before any state is touched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != self.first_moment.len() || params.len() != grad.len() {
            return Err(Error::InvalidConfig(format!(
                "adam step length mismatch: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        if grad.iter().any(|g| g.is_nan()) {
            return Err(Error::NonFinite {
                context: "gradient passed to adam".into(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Adam update over a whole net.
pub fn adam_step(net: &mut DenseNet, state: &mut AdamState, grad: &GradientVector) -> Result<()> {
    state.step(net.params_mut(), grad.values())
}

/// Sinusoidal timestep embedding with `dim / 2` sine and cosine pairs.
///
/// Frequencies run geometrically from `pi / horizon` (which makes the
/// embedding injective over `0..=horizon`) up to `pi / 2`.
pub fn timestep_embedding(t: u32, dim: usize, horizon: u32) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be positive".into()));
    }
    if t > horizon {
        return Err(Error::TimestepOutOfRange {
            t,
            lo: 0,
            hi: horizon,
        });
    }
    let half = dim / 2;
    let omega_min = std::f64::consts::PI / horizon as f64;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let omega = if half == 1 {
            omega_min
        } else {
            // geometric ramp from pi/horizon to pi/2
            let ratio = (horizon as f64 / 2.0).powf(j as f64 / (half - 1) as f64);
            omega_min * ratio
        };
        let phase = omega * t as f64;
        out[j] = phase.sin();
        out[half + j] = phase.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent per-neuron evaluator used as the forward oracle.
    fn scalar_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        for (l, spec) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; spec.out_dim];
            for o in 0..spec.out_dim {
                let mut z = net.params()[net.bias_index(l, o)];
                for i in 0..spec.in_dim {
                    z += net.params()[net.weight_index(l, o, i)] * current[i];
                }
                next[o] = match spec.activation {
                    Activation::Relu => {
                        if z > 0.0 {
                            z
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                };
            }
            current = next;
        }
        current
    }

    fn identity_layer(dim: usize, activation: Activation) -> DenseNet {
        let mut net = DenseNet::zeros(&[dim, dim], &[activation]).unwrap();
        for i in 0..dim {
            let idx = net.weight_index(0, i, i);
            net.params_mut()[idx] = 1.0;
        }
        net
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_layer(2, Activation::Identity);
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clamps_negatives() {
        let net = identity_layer(2, Activation::Relu);
        assert_eq!(net.forward(&[-1.0, 3.0]).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn zero_input_follows_bias_path() {
        let mut r = rng(7);
        let mut net = DenseNet::init(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], &mut r)
            .unwrap();
        // give the biases something to propagate
        for l in 0..2 {
            for o in 0..net.layers()[l].out_dim {
                let idx = net.bias_index(l, o);
                net.params_mut()[idx] = 0.1 * (o as f64 + 1.0);
            }
        }
        let got = net.forward(&[0.0, 0.0, 0.0]).unwrap();
        let expected = scalar_forward(&net, &[0.0, 0.0, 0.0]);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-15, "got {g}, oracle {e}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = identity_layer(2, Activation::Identity);
        match net.forward(&[1.0]) {
            Err(Error::DimensionMismatch { layer: 0, got: 1, expected: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    fn finite_difference_check(dims: &[usize], activations: &[Activation], seed: u64) {
        let mut r = rng(seed);
        let mut net = DenseNet::init(dims, activations, &mut r).unwrap();
        let input: Vec<f64> = (0..dims[0]).map(|_| r.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..*dims.last().unwrap())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        let (_, grad) = net
            .per_example_gradient(&SquaredError, &input, &target)
            .unwrap();
        let h = 1e-5;
        for p in 0..net.parameter_count() {
            let orig = net.params()[p];
            net.params_mut()[p] = orig + h;
            let (plus, _) = SquaredError.value_and_grad(&net.forward(&input).unwrap(), &target);
            net.params_mut()[p] = orig - h;
            let (minus, _) = SquaredError.value_and_grad(&net.forward(&input).unwrap(), &target);
            net.params_mut()[p] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad.values()[p];
            let scale = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "param {p}: analytic {analytic}, numeric {numeric}"
            );
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        for seed in [1, 2, 3] {
            finite_difference_check(&[2, 2], &[Activation::Identity], seed);
            finite_difference_check(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], seed);
            finite_difference_check(&[4, 6, 6, 3], &[Activation::Relu, Activation::Tanh, Activation::Identity], seed);
        }
    }

    #[test]
    fn single_identity_layer_gradient_known_case() {
        // loss = 1/2 ||out - 0||^2 via SquaredError scaled by 1/2: use raw
        // squared error and compare against 2*out instead.
        let net = identity_layer(2, Activation::Identity);
        let input = [1.0, 0.0];
        let (_, grad) = net
            .per_example_gradient(&SquaredError, &input, &[0.0, 0.0])
            .unwrap();
        // d||Wx||^2/dW[o][i] = 2*out[o]*x[i]; column 1 only
        assert_eq!(grad.values()[net.weight_index(0, 0, 0)], 2.0);
        assert_eq!(grad.values()[net.weight_index(0, 0, 1)], 0.0);
        assert_eq!(grad.values()[net.weight_index(0, 1, 0)], 0.0);
    }

    struct ZeroLoss;
    impl Loss for ZeroLoss {
        fn value_and_grad(&self, output: &[f64], _target: &[f64]) -> (f64, Vec<f64>) {
            (0.0, vec![0.0; output.len()])
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut r = rng(5);
        let net = DenseNet::init(&[3, 4, 2], &[Activation::Tanh, Activation::Identity], &mut r)
            .unwrap();
        let (value, grad) = net
            .per_example_gradient(&ZeroLoss, &[0.2, -0.1, 0.4], &[0.0, 0.0])
            .unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn per_example_mean_equals_batch_gradient() {
        let mut r = rng(11);
        let net = DenseNet::init(&[2, 8, 2], &[Activation::Tanh, Activation::Identity], &mut r)
            .unwrap();
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..16)
            .map(|_| {
                (
                    vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                    vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                )
            })
            .collect();
        let (_, batch_grad) = net.batch_gradient(&SquaredError, &batch).unwrap();
        let mut mean = GradientVector::zeros(net.parameter_count());
        for (input, target) in &batch {
            let (_, g) = net
                .per_example_gradient(&SquaredError, input, target)
                .unwrap();
            mean.add_assign(&g);
        }
        mean.scale(1.0 / batch.len() as f64);
        for (a, b) in mean.values().iter().zip(batch_grad.values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        struct Scaled(f64);
        impl Loss for Scaled {
            fn value_and_grad(&self, output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
                let (v, mut g) = SquaredError.value_and_grad(output, target);
                for gi in &mut g {
                    *gi *= self.0;
                }
                (v * self.0, g)
            }
        }
        let mut r = rng(3);
        let net = DenseNet::init(&[2, 4, 1], &[Activation::Tanh, Activation::Identity], &mut r)
            .unwrap();
        let input = [0.3, -0.8];
        let target = [0.5];
        let (_, g1) = net.per_example_gradient(&SquaredError, &input, &target).unwrap();
        let (_, g3) = net.per_example_gradient(&Scaled(3.0), &input, &target).unwrap();
        for (a, b) in g1.values().iter().zip(g3.values()) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_serialization_is_deterministic() {
        let mut r1 = rng(42);
        let mut r2 = rng(42);
        let net1 = DenseNet::init(&[3, 5, 2], &[Activation::Relu, Activation::Identity], &mut r1)
            .unwrap();
        let net2 = DenseNet::init(&[3, 5, 2], &[Activation::Relu, Activation::Identity], &mut r2)
            .unwrap();
        let input = [0.1, 0.2, 0.3];
        let target = [1.0, -1.0];
        let (_, g1) = net1.per_example_gradient(&SquaredError, &input, &target).unwrap();
        let (_, g2) = net2.per_example_gradient(&SquaredError, &input, &target).unwrap();
        assert_eq!(g1.to_le_bytes(), g2.to_le_bytes());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut r = rng(9);
        let mut net = DenseNet::init(&[2, 3], &[Activation::Identity], &mut r).unwrap();
        let before = net.params().to_vec();
        let mut state = AdamState::new(net.parameter_count(), 1e-2);
        let grad = GradientVector::zeros(net.parameter_count());
        adam_step(&mut net, &mut state, &grad).unwrap();
        assert_eq!(net.params(), &before[..]);
        assert_eq!(state.step_count(), 1);
    }

    /// Independent scalar Adam used as the oracle for the vector version.
    fn scalar_adam_first_step(g: f64, lr: f64, eps: f64) -> f64 {
        // bias-corrected first step: m_hat = g, v_hat = g*g
        -lr * g / (g.abs() + eps)
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut net = DenseNet::zeros(&[2, 2], &[Activation::Identity]).unwrap();
        let before = net.params().to_vec();
        let mut state = AdamState::new(net.parameter_count(), 1e-2);
        let g = vec![0.5, -0.25, 1.5, 0.0, 2.0, -3.0];
        adam_step(&mut net, &mut state, &GradientVector::from_values(g.clone())).unwrap();
        for i in 0..g.len() {
            let delta = net.params()[i] - before[i];
            let expected = if g[i] == 0.0 {
                0.0
            } else {
                scalar_adam_first_step(g[i], 1e-2, 1e-8)
            };
            assert!(
                (delta - expected).abs() < 1e-12,
                "i={i}: delta {delta}, expected {expected}"
            );
        }
    }

    #[test]
    fn adam_second_identical_step_is_no_larger() {
        let mut net = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut state = AdamState::new(net.parameter_count(), 1e-2);
        let grad = GradientVector::from_values(vec![1.0, 1.0]);
        let p0 = net.params().to_vec();
        adam_step(&mut net, &mut state, &grad).unwrap();
        let p1 = net.params().to_vec();
        adam_step(&mut net, &mut state, &grad).unwrap();
        let p2 = net.params().to_vec();
        let first: f64 = p1.iter().zip(&p0).map(|(a, b)| (a - b).abs()).sum();
        let second: f64 = p2.iter().zip(&p1).map(|(a, b)| (a - b).abs()).sum();
        assert!(second <= first + 1e-12, "first {first}, second {second}");
    }

    #[test]
    fn adam_rejects_nan_without_mutation() {
        let mut net = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut state = AdamState::new(net.parameter_count(), 1e-2);
        let before_params = net.params().to_vec();
        let before_state = state.clone();
        let grad = GradientVector::from_values(vec![f64::NAN, 0.0]);
        assert!(adam_step(&mut net, &mut state, &grad).is_err());
        assert_eq!(net.params(), &before_params[..]);
        assert_eq!(state, before_state);
    }

    #[test]
    fn timestep_embedding_zero_is_sines_zero_cosines_one() {
        let emb = timestep_embedding(0, 8, 100).unwrap();
        for j in 0..4 {
            assert_eq!(emb[j], 0.0);
            assert_eq!(emb[4 + j], 1.0);
        }
    }

    #[test]
    fn timestep_embedding_shape_and_range() {
        let emb = timestep_embedding(37, 16, 100).unwrap();
        assert_eq!(emb.len(), 16);
        assert!(emb.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn timestep_embedding_rejects_odd_dim() {
        assert!(timestep_embedding(3, 7, 100).is_err());
    }

    #[test]
    fn timestep_embedding_separates_adjacent_and_all_timesteps() {
        let horizon = 100;
        let all: Vec<Vec<f64>> = (0..=horizon)
            .map(|t| timestep_embedding(t, 8, horizon).unwrap())
            .collect();
        for t in 0..horizon as usize {
            let d2: f64 = all[t]
                .iter()
                .zip(&all[t + 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d2 > 0.0, "t={t} and t+1 embed identically");
        }
        // injectivity over the whole horizon
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                assert_ne!(all[a], all[b], "t={a} and t={b} embed identically");
            }
        }
    }
}

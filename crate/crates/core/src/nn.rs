//! Small dense networks in double precision.
//!
//! Weights are stored `in × out` so a batch `X (B × in)` maps to `X·W + b`.
//! Gradients are always gradients of a loss; callers that want ascent negate
//! the upstream gradient.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Uniform init in `±1/√fan_in`, weights and biases alike.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..=bound));
        Self { weight, bias, activation }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }
}

/// Per-layer inputs and outputs of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(Error::InvalidArgument(format!("layer {i} bias length mismatch")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|p| !p.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, …, out]`; hidden layers use `hidden`, the last layer
    /// uses `output`.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::random(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self::from_layers(layers)
    }

    /// Relu hidden layers, tanh head scaled down so initial actions are near 0.
    pub fn actor<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut R) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(obs_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(action_dim))
            .collect();
        let mut net = Self::random(&sizes, Activation::Relu, Activation::Tanh, rng)?;
        let head = net.layers.last_mut().expect("non-empty");
        head.weight *= 1e-3;
        head.bias *= 1e-3;
        Ok(net)
    }

    /// Relu hidden layers and a scalar linear head.
    pub fn critic<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let sizes: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Self::random(&sizes, Activation::Relu, Activation::Linear, rng)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    /// `[in, h1, …, out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::outputs))
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        param_count(&self.dims())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut x = self.layer_forward(0, input);
        for i in 1..self.layers.len() {
            x = self.layer_forward(i, x.view());
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_input(input.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for i in 0..self.layers.len() {
            let y = self.layer_forward(i, x.view());
            inputs.push(x);
            x = y;
        }
        Ok(ForwardCache { inputs, output: x })
    }

    fn layer_forward(&self, i: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let layer = &self.layers[i];
        let mut z = x.dot(&layer.weight);
        z += &layer.bias;
        let act = layer.activation;
        if act != Activation::Linear {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} inputs, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Gradients of `L = Σ upstream ⊙ output` for every parameter and input.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Gradients> {
        if upstream.dim() != cache.output.dim() || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "upstream gradient shape {:?} does not match output {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut grad = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let out = if i + 1 == self.layers.len() {
                &cache.output
            } else {
                &cache.inputs[i + 1]
            };
            if layer.activation != Activation::Linear {
                let act = layer.activation;
                grad.zip_mut_with(out, |g, &y| *g *= act.derivative_from_output(y));
            }
            let x = &cache.inputs[i];
            let weight = x.t().dot(&grad);
            let bias = grad.sum_axis(Axis(0));
            let next = grad.dot(&layer.weight.t());
            layers.push(LayerGrad { weight, bias });
            grad = next;
        }
        layers.reverse();
        Ok(Gradients { layers, input: grad })
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check_same_shape(&self, other: &Mlp) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::InvalidArgument(format!(
                "network shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// `self ← τ·online + (1 − τ)·self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        self.check_same_shape(online)?;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            t.weight.zip_mut_with(&o.weight, |t, &o| *t = tau * o + (1.0 - tau) * *t);
            t.bias.zip_mut_with(&o.bias, |t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
        Ok(())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.flat_params() {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format: MlpCheckpoint::FORMAT.to_string(),
            version: MlpCheckpoint::VERSION,
            dims: self.dims(),
            activations: self.activations(),
            params: self.flat_params(),
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self> {
        if ckpt.format != MlpCheckpoint::FORMAT || ckpt.version != MlpCheckpoint::VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        if ckpt.dims.len() < 2 || ckpt.activations.len() != ckpt.dims.len() - 1 {
            return Err(Error::Checkpoint("dims and activations disagree".into()));
        }
        if ckpt.params.len() != param_count(&ckpt.dims) {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for dims {:?}, found {}",
                param_count(&ckpt.dims),
                ckpt.dims,
                ckpt.params.len()
            )));
        }
        let mut it = ckpt.params.iter().copied();
        let layers = ckpt
            .dims
            .windows(2)
            .zip(&ckpt.activations)
            .map(|(w, &activation)| Dense {
                weight: Array2::from_shape_fn((w[0], w[1]), |_| it.next().expect("length checked")),
                bias: Array1::from_shape_fn(w[1], |_| it.next().expect("length checked")),
                activation,
            })
            .collect();
        Self::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// `Σ (d_i · d_{i+1} + d_{i+1})` over consecutive dims.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Flat JSON checkpoint: a dims header plus row-major weights then bias per
/// layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
}

impl MlpCheckpoint {
    pub const FORMAT: &'static str = "sixdma-mlp";
    pub const VERSION: u32 = 1;
}

/// Bias-corrected Adam over the flat parameter order of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.param_count();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        let n = net.param_count();
        let shapes_ok = grads.layers.len() == net.layers.len()
            && grads
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.len() == l.bias.len());
        if !shapes_ok || self.m.len() != n {
            return Err(Error::InvalidArgument("gradient shapes do not match the network".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let g_iter = grads
            .layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()));
        for (((p, g), m), v) in net.params_mut().zip(g_iter).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Central finite-difference check of [`Mlp::backward`].
pub mod gradcheck {
    use ndarray::{Array2, ArrayView2};

    use super::{Activation, Mlp};
    use crate::error::Result;

    pub const STEP: f64 = 1e-5;
    pub const FLOOR: f64 = 1e-6;

    #[derive(Clone, Debug, PartialEq)]
    pub struct Report {
        pub max_rel_error: f64,
        pub checked: usize,
        /// Coordinates skipped because a relu changed state within `±h`.
        pub skipped_kinks: usize,
    }

    fn loss(net: &Mlp, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<f64> {
        Ok((&net.forward_batch(x)? * &upstream).sum())
    }

    fn relu_pattern(net: &Mlp, x: ArrayView2<f64>) -> Result<Vec<bool>> {
        let cache = net.forward_cached(x)?;
        let mut pattern = Vec::new();
        for (i, layer) in net.layers().iter().enumerate() {
            if layer.activation == Activation::Relu {
                let out = if i + 1 == net.layers().len() { cache.output() } else { &cache.inputs[i + 1] };
                pattern.extend(out.iter().map(|&y| y > 0.0));
            }
        }
        Ok(pattern)
    }

    /// `|a − n| / max(|a|, |n|, FLOOR)`.
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
    }

    /// Checks every parameter and input coordinate of `L = Σ upstream ⊙ net(x)`.
    pub fn check(net: &Mlp, input: &Array2<f64>, upstream: &Array2<f64>) -> Result<Report> {
        let cache = net.forward_cached(input.view())?;
        let grads = net.backward(&cache, upstream.view())?;
        let base_pattern = relu_pattern(net, input.view())?;
        let mut report = Report { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };

        let analytic = grads.flat();
        let params = net.flat_params();
        let mut probe = net.clone();
        for (k, &a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[k] = params[k] + STEP;
            probe.set_flat_params(&p)?;
            let plus = loss(&probe, input.view(), upstream.view())?;
            let kink_plus = relu_pattern(&probe, input.view())? != base_pattern;
            p[k] = params[k] - STEP;
            probe.set_flat_params(&p)?;
            let minus = loss(&probe, input.view(), upstream.view())?;
            let kink_minus = relu_pattern(&probe, input.view())? != base_pattern;
            if kink_plus || kink_minus {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }

        for (idx, &a) in grads.input.indexed_iter() {
            let mut x = input.clone();
            x[idx] += STEP;
            let plus = loss(net, x.view(), upstream.view())?;
            let kink_plus = relu_pattern(net, x.view())? != base_pattern;
            x[idx] -= 2.0 * STEP;
            let minus = loss(net, x.view(), upstream.view())?;
            let kink_minus = relu_pattern(net, x.view())? != base_pattern;
            if kink_plus || kink_minus {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
        Ok(report)
    }
}

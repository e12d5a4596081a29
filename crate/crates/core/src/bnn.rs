//! Mean-field Gaussian Bayesian network with manual backpropagation.
//!
//! Each parameterized layer carries a posterior `N(mu, softplus(rho)^2)` per
//! weight and a point-estimate bias. A forward pass draws one weight sample
//! per layer through the reparameterization `w = mu + softplus(rho) * eps`,
//! optionally fake-quantizes the sampled weights and the post-activation
//! outputs, and records everything the backward pass needs. Gradients flow
//! back through the clipped straight-through estimator at every quantizer and
//! into `(mu, rho)` through the reparameterization chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{fake_quant_forward, ste_backward, QuantPlan, Site};
use crate::rng::RngStream;
use crate::synth::{inject_noise, Dataset, Split, Standardization, CHANNELS};
use crate::tensor::{conv2d, conv2d_backward, cross_entropy, maxpool_2x1_indexed, relu, softmax, Tensor};

pub const DEFAULT_PRIOR_SIGMA: f64 = 0.1;
pub const INIT_MU_STD: f64 = 0.05;
pub const INIT_SIGMA: f64 = 0.01;

const INIT_STREAM: u64 = 0x1417;
const TRAIN_STREAM: u64 = 0x7a41;
const VAL_STREAM: u64 = 0x7a42;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `rho` such that `softplus(rho) = sigma`.
pub fn inverse_softplus(sigma: f64) -> f64 {
    sigma.exp_m1().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kh: usize, kw: usize, stride: usize, activation: Activation },
    Dense { units: usize, activation: Activation },
    /// Non-overlapping 2×1 max pooling along the time axis.
    MaxPool,
    Flatten,
}

/// Layer list plus input shape `[channels, time, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// A parameterized layer after shape inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub weight_dims: Vec<usize>,
    pub bias_len: usize,
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
    /// Multiply-accumulates for one forward pass through this layer.
    pub macs: u64,
    pub activation: Activation,
    pub stride: usize,
    pub is_conv: bool,
}

impl Architecture {
    /// Two 5-tap conv layers (8, 16 filters) each followed by time pooling,
    /// then dense 32 → 16 → 3.
    pub fn desk_scale(window_len: usize) -> Self {
        use LayerSpec::*;
        Self {
            input: [CHANNELS, window_len, 1],
            layers: vec![
                Conv { filters: 8, kh: 5, kw: 1, stride: 1, activation: Activation::Relu },
                MaxPool,
                Conv { filters: 16, kh: 5, kw: 1, stride: 1, activation: Activation::Relu },
                MaxPool,
                Flatten,
                Dense { units: 32, activation: Activation::Relu },
                Dense { units: 16, activation: Activation::Relu },
                Dense { units: 3, activation: Activation::None },
            ],
        }
    }

    /// Five conv layers and dense 128 → 64 → 32 → 3.
    pub fn full_scale(window_len: usize) -> Self {
        use LayerSpec::*;
        let conv = |filters| Conv { filters, kh: 5, kw: 1, stride: 1, activation: Activation::Relu };
        Self {
            input: [CHANNELS, window_len, 1],
            layers: vec![
                conv(16),
                conv(16),
                MaxPool,
                conv(32),
                conv(32),
                MaxPool,
                conv(32),
                MaxPool,
                Flatten,
                Dense { units: 128, activation: Activation::Relu },
                Dense { units: 64, activation: Activation::Relu },
                Dense { units: 32, activation: Activation::Relu },
                Dense { units: 3, activation: Activation::None },
            ],
        }
    }

    /// Shape inference over the parameterized layers.
    pub fn resolve(&self) -> Result<Vec<ParamShape>> {
        if self.input.contains(&0) {
            return Err(Error::Shape(format!("input dims must be positive, got {:?}", self.input)));
        }
        let mut dims = self.input.to_vec();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { filters, kh, kw, stride, activation } => {
                    let [c, h, w] = dims[..] else {
                        return Err(Error::Shape(format!("layer {i}: conv needs a C×H×W input, got {dims:?}")));
                    };
                    if filters == 0 || stride == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
                        return Err(Error::Shape(format!("layer {i}: conv {kh}x{kw} does not fit {dims:?}")));
                    }
                    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
                    let next = vec![filters, oh, ow];
                    out.push(ParamShape {
                        weight_dims: vec![filters, c, kh, kw],
                        bias_len: filters,
                        in_dims: dims.clone(),
                        out_dims: next.clone(),
                        macs: (filters * oh * ow * c * kh * kw) as u64,
                        activation,
                        stride,
                        is_conv: true,
                    });
                    dims = next;
                }
                LayerSpec::Dense { units, activation } => {
                    if dims.len() != 1 {
                        return Err(Error::Shape(format!("layer {i}: dense needs a flat input, got {dims:?}")));
                    }
                    if units == 0 {
                        return Err(Error::Shape(format!("layer {i}: dense with zero units")));
                    }
                    out.push(ParamShape {
                        weight_dims: vec![units, dims[0]],
                        bias_len: units,
                        in_dims: dims.clone(),
                        out_dims: vec![units],
                        macs: (units * dims[0]) as u64,
                        activation,
                        stride: 1,
                        is_conv: false,
                    });
                    dims = vec![units];
                }
                LayerSpec::MaxPool => {
                    if dims.len() != 3 || dims[1] < 2 {
                        return Err(Error::Shape(format!("layer {i}: cannot pool {dims:?}")));
                    }
                    dims[1] /= 2;
                }
                LayerSpec::Flatten => {
                    dims = vec![dims.iter().product()];
                }
            }
        }
        let last = out.last().ok_or_else(|| Error::Shape("architecture has no parameterized layer".into()))?;
        if last.is_conv || last.activation != Activation::None || dims.len() != 1 {
            return Err(Error::Shape("architecture must end in a dense layer without activation".into()));
        }
        Ok(out)
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(self.resolve()?.last().map(|p| p.out_dims[0]).unwrap_or(0))
    }

    pub fn total_macs(&self) -> Result<u64> {
        Ok(self.resolve()?.iter().map(|p| p.macs).sum())
    }

    pub fn weight_count(&self) -> Result<usize> {
        Ok(self.resolve()?.iter().map(|p| p.weight_dims.iter().product::<usize>()).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariationalLayer {
    pub mu: Tensor,
    pub rho: Tensor,
    pub bias: Tensor,
    pub prior_sigma: f64,
    pub activation: Activation,
    /// Conv stride, or `None` for a dense layer.
    pub conv_stride: Option<usize>,
}

impl GaussianVariationalLayer {
    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn weight_count(&self) -> usize {
        self.mu.len()
    }
}

/// `mu + softplus(rho) * eps` with `eps` drawn from `rng`.
pub fn sample_weights(layer: &GaussianVariationalLayer, rng: &RngStream) -> Tensor {
    let eps = rng.normals(layer.mu.len());
    reparameterize(layer, &eps)
}

fn reparameterize(layer: &GaussianVariationalLayer, eps: &[f64]) -> Tensor {
    let data = layer
        .mu
        .data()
        .iter()
        .zip(layer.rho.data())
        .zip(eps)
        .map(|((&m, &r), &e)| m + softplus(r) * e)
        .collect();
    Tensor::new(layer.mu.dims().to_vec(), data).expect("mu shape")
}

/// Closed-form `KL(q || p)` between the layer posterior and `N(0, prior_sigma^2)`.
pub fn kl_divergence(layer: &GaussianVariationalLayer) -> f64 {
    let s0 = layer.prior_sigma;
    let mut kl = 0.0;
    for (&m, &r) in layer.mu.data().iter().zip(layer.rho.data()) {
        let s = softplus(r);
        kl += (s0 / s).ln() + (s * s + m * m) / (2.0 * s0 * s0) - 0.5;
    }
    kl
}

/// Gradient of [`kl_divergence`] with respect to `(mu, rho)`.
pub fn kl_gradient(layer: &GaussianVariationalLayer) -> (Vec<f64>, Vec<f64>) {
    let s0sq = layer.prior_sigma * layer.prior_sigma;
    let gmu = layer.mu.data().iter().map(|m| m / s0sq).collect();
    let grho = layer
        .rho
        .data()
        .iter()
        .map(|&r| {
            let s = softplus(r);
            (-1.0 / s + s / s0sq) * sigmoid(r)
        })
        .collect();
    (gmu, grho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub architecture: Architecture,
    pub layers: Vec<GaussianVariationalLayer>,
}

impl BnnModel {
    /// Fresh posterior: `mu ~ N(0, 0.05^2)`, `softplus(rho) = 0.01`, zero biases.
    pub fn init(architecture: Architecture, prior_sigma: f64, seed: u64) -> Result<Self> {
        if prior_sigma <= 0.0 || !prior_sigma.is_finite() {
            return Err(Error::Config(format!("prior sigma must be positive, got {prior_sigma}")));
        }
        let shapes = architecture.resolve()?;
        let root = RngStream::new(seed, INIT_STREAM);
        let rho0 = inverse_softplus(INIT_SIGMA);
        let layers = shapes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let n: usize = p.weight_dims.iter().product();
                let mu = root.derive(i as u64).normals(n).into_iter().map(|z| INIT_MU_STD * z).collect();
                GaussianVariationalLayer {
                    mu: Tensor::new(p.weight_dims.clone(), mu).expect("shape"),
                    rho: Tensor::filled(&p.weight_dims, rho0),
                    bias: Tensor::zeros(&[p.bias_len]),
                    prior_sigma,
                    activation: p.activation,
                    conv_stride: p.is_conv.then_some(p.stride),
                }
            })
            .collect();
        Ok(Self { architecture, layers })
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    pub fn kl(&self) -> f64 {
        self.layers.iter().map(kl_divergence).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight_count()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.weight_count() + l.bias.len()).sum()
    }

    /// Every site a complete [`QuantPlan`] must cover: each layer's weights,
    /// and the output of each layer with a ReLU.
    pub fn quant_sites(&self) -> Vec<Site> {
        let mut sites = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            sites.push(Site::weight(i));
            if l.activation == Activation::Relu {
                sites.push(Site::activation(i));
            }
        }
        sites
    }

    pub fn plan_covers(&self, plan: &QuantPlan) -> bool {
        self.quant_sites().iter().all(|s| plan.get(*s).is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.architecture.resolve()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape("layer count does not match architecture".into()));
        }
        for (i, (p, l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.mu.dims() != p.weight_dims || l.rho.dims() != p.weight_dims || l.bias.len() != p.bias_len {
                return Err(Error::Shape(format!("layer {i} parameters do not match architecture")));
            }
            if l.conv_stride.is_some() != p.is_conv || l.activation != p.activation {
                return Err(Error::Shape(format!("layer {i} kind does not match architecture")));
            }
            if !(l.mu.is_finite() && l.rho.is_finite() && l.bias.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &BnnModel) -> bool {
        self.architecture == other.architecture
    }
}

/// Everything recorded for one parameterized layer during a forward pass.
#[derive(Debug, Clone)]
struct ParamTrace {
    input: Tensor,
    eps: Vec<f64>,
    /// Sampled weights before quantization.
    sampled: Tensor,
    /// Weights actually used (quantized if a plan is active).
    used: Tensor,
    /// Post-activation output before activation quantization.
    activated: Tensor,
    pre: Tensor,
}

#[derive(Debug, Clone)]
enum Step {
    Param(ParamTrace),
    Pool { in_dims: Vec<usize>, idx: Vec<usize> },
    Flatten { in_dims: Vec<usize> },
}

/// Result of a traced forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    steps: Vec<Step>,
}

impl ForwardTrace {
    /// Sampled (pre-quantization) weights of parameterized layer `layer`.
    pub fn sampled_weights(&self, layer: usize) -> Option<&Tensor> {
        self.params().nth(layer).map(|p| &p.sampled)
    }

    /// Weights the pass actually multiplied with.
    pub fn used_weights(&self, layer: usize) -> Option<&Tensor> {
        self.params().nth(layer).map(|p| &p.used)
    }

    /// Post-activation output of layer `layer` before activation quantization.
    pub fn activation(&self, layer: usize) -> Option<&Tensor> {
        self.params().nth(layer).map(|p| &p.activated)
    }

    fn params(&self) -> impl Iterator<Item = &ParamTrace> {
        self.steps.iter().filter_map(|s| match s {
            Step::Param(p) => Some(p),
            _ => None,
        })
    }
}

/// How strictly a forward pass demands quantizer coverage.
#[derive(Debug, Clone, Copy)]
pub(crate) enum PlanUse<'a> {
    None,
    /// Every site must be present.
    Strict(&'a QuantPlan),
    /// Missing sites run in full precision (range calibration).
    Partial(&'a QuantPlan),
}

impl<'a> PlanUse<'a> {
    pub(crate) fn from_option(plan: Option<&'a QuantPlan>) -> Self {
        plan.map_or(PlanUse::None, PlanUse::Strict)
    }

    fn spec(&self, site: Site) -> Result<Option<&'a crate::quant::QuantSpec>> {
        match *self {
            PlanUse::None => Ok(None),
            PlanUse::Strict(p) => p.require(site).map(Some),
            PlanUse::Partial(p) => Ok(p.get(site)),
        }
    }
}

fn apply_layer(layer: &GaussianVariationalLayer, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    match layer.conv_stride {
        Some(stride) => {
            let mut z = conv2d(x, w, stride)?;
            let per = z.len() / layer.bias.len();
            for (f, chunk) in z.data_mut().chunks_mut(per).enumerate() {
                let b = layer.bias.data()[f];
                chunk.iter_mut().for_each(|v| *v += b);
            }
            Ok(z)
        }
        None => {
            let [out, inp] = w.dims() else { unreachable!("dense weights are 2-D") };
            if x.len() != *inp || x.dims().len() != 1 {
                return Err(Error::Shape(format!("dense expects [{inp}], got {:?}", x.dims())));
            }
            let (xd, wd) = (x.data(), w.data());
            let z = (0..*out)
                .map(|o| {
                    let row = &wd[o * inp..(o + 1) * inp];
                    let mut acc = layer.bias.data()[o];
                    for (a, b) in row.iter().zip(xd) {
                        acc += a * b;
                    }
                    acc
                })
                .collect();
            Tensor::new(vec![*out], z)
        }
    }
}

pub(crate) fn forward_traced(
    model: &BnnModel,
    input: &Tensor,
    rng: &RngStream,
    plan: PlanUse<'_>,
) -> Result<ForwardTrace> {
    if input.dims() != model.architecture.input {
        return Err(Error::Shape(format!(
            "model expects input {:?}, got {:?}",
            model.architecture.input,
            input.dims()
        )));
    }
    let mut h = input.clone();
    let mut steps = Vec::with_capacity(model.architecture.layers.len());
    let mut li = 0;
    for spec in &model.architecture.layers {
        match spec {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let layer = model
                    .layers
                    .get(li)
                    .ok_or_else(|| Error::Shape("model has fewer layers than its architecture".into()))?;
                let eps = rng.derive(li as u64).normals(layer.mu.len());
                let sampled = reparameterize(layer, &eps);
                let used = match plan.spec(Site::weight(li))? {
                    Some(q) => fake_quant_forward(&sampled, q),
                    None => sampled.clone(),
                };
                let pre = apply_layer(layer, &h, &used)?;
                let activated = match layer.activation {
                    Activation::Relu => relu(&pre),
                    Activation::None => pre.clone(),
                };
                let out = match layer.activation {
                    Activation::Relu => match plan.spec(Site::activation(li))? {
                        Some(q) => fake_quant_forward(&activated, q),
                        None => activated.clone(),
                    },
                    Activation::None => activated.clone(),
                };
                steps.push(Step::Param(ParamTrace { input: h, eps, sampled, used, activated, pre }));
                h = out;
                li += 1;
            }
            LayerSpec::MaxPool => {
                let (out, idx) = maxpool_2x1_indexed(&h)?;
                steps.push(Step::Pool { in_dims: h.dims().to_vec(), idx });
                h = out;
            }
            LayerSpec::Flatten => {
                let in_dims = h.dims().to_vec();
                let n = h.len();
                h = h.reshape(&[n])?;
                steps.push(Step::Flatten { in_dims });
            }
        }
    }
    h.ensure_finite("forward logits")?;
    Ok(ForwardTrace { logits: h, steps })
}

/// Logits from one posterior sample. With a plan, sampled weights and ReLU
/// outputs pass through their quantizers; every site must be covered.
pub fn forward(model: &BnnModel, input: &Tensor, rng: &RngStream, quant: Option<&QuantPlan>) -> Result<Tensor> {
    forward_traced(model, input, rng, PlanUse::from_option(quant)).map(|t| t.logits)
}

/// Traced forward pass exposed for inspection (grid checks, calibration).
pub fn forward_with_trace(
    model: &BnnModel,
    input: &Tensor,
    rng: &RngStream,
    quant: Option<&QuantPlan>,
) -> Result<ForwardTrace> {
    forward_traced(model, input, rng, PlanUse::from_option(quant))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients, laid out like [`BnnModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &BnnModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    mu: vec![0.0; l.mu.len()],
                    rho: vec![0.0; l.rho.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.mu.iter_mut().zip(&b.mu).for_each(|(x, y)| *x += y);
            a.rho.iter_mut().zip(&b.rho).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.mu.iter_mut().chain(l.rho.iter_mut()).chain(l.bias.iter_mut()).for_each(|x| *x *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.mu.iter().chain(&l.rho).chain(&l.bias))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.mu.iter().chain(&l.rho).chain(&l.bias)).all(|x| x.is_finite())
    }
}

fn backward(
    model: &BnnModel,
    trace: &ForwardTrace,
    grad_logits: Tensor,
    plan: PlanUse<'_>,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(model);
    let mut g = grad_logits;
    let mut li = model.layers.len();
    for step in trace.steps.iter().rev() {
        match step {
            Step::Flatten { in_dims } => g = g.reshape(in_dims)?,
            Step::Pool { in_dims, idx } => {
                let mut gin = Tensor::zeros(in_dims);
                for (o, &k) in idx.iter().enumerate() {
                    gin.data_mut()[k] += g.data()[o];
                }
                g = gin;
            }
            Step::Param(p) => {
                li -= 1;
                let layer = &model.layers[li];
                if layer.activation == Activation::Relu {
                    if let Some(q) = plan.spec(Site::activation(li))? {
                        g = ste_backward(&g, &p.activated, q)?;
                    }
                    g = g.zip_map(&p.pre, |gv, z| if z > 0.0 { gv } else { 0.0 })?;
                }
                let lg = &mut grads.layers[li];
                let (g_in, g_used) = match layer.conv_stride {
                    Some(stride) => {
                        let per = g.len() / layer.bias.len();
                        for (f, chunk) in g.data().chunks(per).enumerate() {
                            lg.bias[f] += chunk.iter().sum::<f64>();
                        }
                        conv2d_backward(&p.input, &p.used, stride, &g)?
                    }
                    None => {
                        let [out, inp] = p.used.dims() else { unreachable!("dense weights are 2-D") };
                        let (out, inp) = (*out, *inp);
                        let x = p.input.data();
                        let w = p.used.data();
                        let mut gw = vec![0.0; out * inp];
                        let mut gx = vec![0.0; inp];
                        for o in 0..out {
                            let go = g.data()[o];
                            lg.bias[o] += go;
                            if go == 0.0 {
                                continue;
                            }
                            let row = o * inp;
                            for i in 0..inp {
                                gw[row + i] = go * x[i];
                                gx[i] += go * w[row + i];
                            }
                        }
                        (Tensor::new(vec![inp], gx)?, Tensor::new(vec![out, inp], gw)?)
                    }
                };
                let g_w = match plan.spec(Site::weight(li))? {
                    Some(q) => ste_backward(&g_used, &p.sampled, q)?,
                    None => g_used,
                };
                for (k, &gw) in g_w.data().iter().enumerate() {
                    lg.mu[k] += gw;
                    lg.rho[k] += gw * p.eps[k] * sigmoid(layer.rho.data()[k]);
                }
                g = g_in;
            }
        }
    }
    Ok(grads)
}

/// Cross-entropy of one posterior sample and its gradient with respect to
/// every parameter.
pub(crate) fn sample_loss_and_grad(
    model: &BnnModel,
    input: &Tensor,
    label: usize,
    rng: &RngStream,
    plan: PlanUse<'_>,
) -> Result<(f64, Gradients)> {
    let trace = forward_traced(model, input, rng, plan)?;
    let probs = softmax(&trace.logits)?;
    let loss = cross_entropy(&probs, label)?;
    let mut gl = probs;
    gl.data_mut()[label] -= 1.0;
    let grads = backward(model, &trace, gl, plan)?;
    Ok((loss, grads))
}

/// Controls for one evaluation of the evidence lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboSettings {
    pub kl_weight: f64,
    /// Number of training examples the KL term is spread over.
    pub dataset_size: usize,
    pub mc_samples: usize,
}

/// One labelled, standardized example.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Tensor,
    pub class: usize,
}

/// Mean cross-entropy over the batch and Monte-Carlo samples plus
/// `kl_weight * KL / dataset_size`, and its gradient. Sample `m` of example
/// `j` draws its weights from `rng.derive_path(&[j, m])`.
pub fn elbo_loss(
    model: &BnnModel,
    batch: &[Example],
    rng: &RngStream,
    settings: ElboSettings,
    quant: Option<&QuantPlan>,
) -> Result<(f64, Gradients)> {
    elbo_loss_with(model, batch, rng, settings, PlanUse::from_option(quant))
}

pub(crate) fn elbo_loss_with(
    model: &BnnModel,
    batch: &[Example],
    rng: &RngStream,
    settings: ElboSettings,
    plan: PlanUse<'_>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Config("ELBO needs a non-empty batch".into()));
    }
    if settings.mc_samples == 0 || settings.dataset_size == 0 {
        return Err(Error::Config("mc_samples and dataset_size must be positive".into()));
    }
    let m = settings.mc_samples;
    let parts: Vec<(f64, Gradients)> = (0..batch.len() * m)
        .into_par_iter()
        .map(|k| {
            let (j, s) = (k / m, k % m);
            let ex = &batch[j];
            sample_loss_and_grad(model, &ex.input, ex.class, &rng.derive_path(&[j as u64, s as u64]), plan)
        })
        .collect::<Result<_>>()?;
    let mut grads = Gradients::zeros_like(model);
    let mut data_loss = 0.0;
    for (l, g) in &parts {
        data_loss += l;
        grads.add_assign(g);
    }
    let n = parts.len() as f64;
    data_loss /= n;
    grads.scale(1.0 / n);
    let mut loss = data_loss;
    if settings.kl_weight != 0.0 {
        let c = settings.kl_weight / settings.dataset_size as f64;
        loss += c * model.kl();
        for (layer, lg) in model.layers.iter().zip(&mut grads.layers) {
            let (gmu, grho) = kl_gradient(layer);
            lg.mu.iter_mut().zip(&gmu).for_each(|(a, b)| *a += c * b);
            lg.rho.iter_mut().zip(&grho).for_each(|(a, b)| *a += c * b);
        }
    }
    Ok((loss, grads))
}

/// Mean softmax over `n` posterior samples; sample `s` uses `rng.derive(s)`.
pub fn mean_probs(
    model: &BnnModel,
    input: &Tensor,
    n: usize,
    rng: &RngStream,
    quant: Option<&QuantPlan>,
) -> Result<Tensor> {
    let rows = mc_probs(model, input, n, rng, quant)?;
    let classes = model.class_count();
    let mut mean = vec![0.0; classes];
    for row in &rows {
        for (m, p) in mean.iter_mut().zip(row.data()) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(Tensor::from_vec(mean))
}

/// Per-sample softmax rows, in sample order.
pub fn mc_probs(
    model: &BnnModel,
    input: &Tensor,
    n: usize,
    rng: &RngStream,
    quant: Option<&QuantPlan>,
) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Config("need at least one Monte-Carlo sample".into()));
    }
    (0..n)
        .map(|s| forward(model, input, &rng.derive(s as u64), quant).and_then(|z| softmax(&z)))
        .collect()
}

/// How the learning rate evolves over the steps of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mc_train_samples: usize,
    /// Fraction of all steps over which the KL weight ramps linearly from 0
    /// to `kl_max`.
    pub kl_anneal_fraction: f64,
    pub kl_max: f64,
    /// Rescale the step gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// One extra noisy copy of every training window per epoch at each of
    /// these SNRs (dB).
    pub augment_snr_db: Vec<f64>,
    /// Leading epochs that see only the clean windows.
    pub clean_warmup_epochs: usize,
    pub val_mc_samples: usize,
    pub prior_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            epochs: 30,
            batch_size: 10,
            mc_train_samples: 2,
            kl_anneal_fraction: 0.5,
            kl_max: 0.001,
            grad_clip: Some(1.0),
            augment_snr_db: vec![0.0],
            clean_warmup_epochs: 12,
            val_mc_samples: 8,
            prior_sigma: DEFAULT_PRIOR_SIGMA,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.mc_train_samples == 0 || self.val_mc_samples == 0 {
            return Err(Error::Config("epochs, batch size and sample counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_anneal_fraction) {
            return Err(Error::Config("kl_anneal_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.kl_max) {
            return Err(Error::Config("kl_max must be in [0, 1]".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if self.augment_snr_db.iter().any(|db| !db.is_finite()) {
            return Err(Error::Config("augmentation SNRs must be finite".into()));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::Config("prior sigma must be positive".into()));
        }
        Ok(())
    }

    /// KL weight at `step` of `total` steps.
    pub fn kl_weight(&self, step: usize, total: usize) -> f64 {
        let ramp = self.kl_anneal_fraction * total as f64;
        if ramp <= 0.0 {
            self.kl_max
        } else {
            self.kl_max * ((step + 1) as f64 / ramp).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub kl_weight: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Standardized input and class index for a seen-fault window.
pub fn example_from(stats: &Standardization, window: &crate::synth::SignalWindow) -> Result<Example> {
    let class = window
        .label
        .class_index()
        .ok_or_else(|| Error::Config(format!("fault {} has no class in the classifier", window.label.label())))?;
    Ok(Example { input: stats.apply(window), class })
}

/// Hook run before each SGD step. It may calibrate and returns the plan the
/// step trains with.
pub(crate) trait StepQuant {
    fn plan_for_step(&mut self, model: &BnnModel, batch: &[Example], epoch: usize, rng: &RngStream)
        -> Result<Option<QuantPlan>>;
    fn eval_plan(&self) -> Option<&QuantPlan>;
    fn end_epoch(&mut self, _epoch: usize) {}
}

pub(crate) struct NoQuant;

impl StepQuant for NoQuant {
    fn plan_for_step(&mut self, _: &BnnModel, _: &[Example], _: usize, _: &RngStream) -> Result<Option<QuantPlan>> {
        Ok(None)
    }

    fn eval_plan(&self) -> Option<&QuantPlan> {
        None
    }
}

/// Shared SGD-with-momentum loop over the training split.
pub(crate) fn run_sgd(
    mut model: BnnModel,
    dataset: &Dataset,
    config: &TrainConfig,
    stream: u64,
    quant: &mut dyn StepQuant,
) -> Result<(BnnModel, TrainHistory)> {
    config.validate()?;
    dataset.validate()?;
    model.validate()?;
    let stats = &dataset.stats;
    let train: Vec<_> = dataset.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let clean: Vec<Example> = train.iter().map(|w| example_from(stats, w)).collect::<Result<_>>()?;
    let val: Vec<Example> = dataset.split(Split::Val).map(|w| example_from(stats, w)).collect::<Result<_>>()?;
    let augmented = |epoch: usize| epoch >= config.clean_warmup_epochs;
    let total_steps: usize = (0..config.epochs)
        .map(|e| {
            let copies = if augmented(e) { config.augment_snr_db.len() } else { 0 };
            (clean.len() * (1 + copies)).div_ceil(config.batch_size)
        })
        .sum();
    let root = RngStream::new(config.seed, stream);
    let mut velocity = Gradients::zeros_like(&model);
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let erng = root.derive(epoch as u64);
        let mut items: Vec<Example> = clean.clone();
        let snrs = if augmented(epoch) { config.augment_snr_db.as_slice() } else { &[] };
        for (k, &db) in snrs.iter().enumerate() {
            let noisy: Vec<Example> = train
                .par_iter()
                .enumerate()
                .map(|(i, w)| {
                    let nw = inject_noise(w, db, &erng.derive_path(&[1, k as u64, i as u64]))?;
                    example_from(stats, &nw)
                })
                .collect::<Result<_>>()?;
            items.extend(noisy);
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut erng.derive(2).generator());
        }
        let mut loss_sum = 0.0;
        let mut kl_weight = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example> = chunk.iter().map(|&i| items[i].clone()).collect();
            let srng = erng.derive_path(&[3, b as u64]);
            let plan = quant.plan_for_step(&model, &batch, epoch, &srng)?;
            kl_weight = config.kl_weight(step, total_steps);
            let settings = ElboSettings { kl_weight, dataset_size: clean.len(), mc_samples: config.mc_train_samples };
            let plan_use = plan.as_ref().map_or(PlanUse::None, PlanUse::Strict);
            let (loss, mut grads) = elbo_loss_with(&model, &batch, &srng.derive(0), settings, plan_use)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, step {b}; lower the learning rate (currently {})",
                    config.learning_rate
                )));
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            loss_sum += loss * batch.len() as f64;
            let lr = config.lr_schedule.rate(config.learning_rate, step, total_steps);
            apply_momentum(&mut model, &mut velocity, &grads, lr, config.momentum);
            step += 1;
        }
        quant.end_epoch(epoch);
        let val_accuracy = if val.is_empty() {
            f64::NAN
        } else {
            let vrng = RngStream::new(config.seed, VAL_STREAM);
            let eval_plan = quant.eval_plan().cloned();
            let correct: usize = val
                .par_iter()
                .enumerate()
                .map(|(i, ex)| {
                    mean_probs(&model, &ex.input, config.val_mc_samples, &vrng.derive(i as u64), eval_plan.as_ref())
                        .map(|p| usize::from(p.argmax() == ex.class))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum();
            correct as f64 / val.len() as f64
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / items.len() as f64,
            kl_weight,
            val_accuracy,
        });
    }
    Ok((model, history))
}

fn apply_momentum(model: &mut BnnModel, velocity: &mut Gradients, grads: &Gradients, lr: f64, momentum: f64) {
    for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
        let upd = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        };
        upd(layer.mu.data_mut(), &mut v.mu, &g.mu);
        upd(layer.rho.data_mut(), &mut v.rho, &g.rho);
        upd(layer.bias.data_mut(), &mut v.bias, &g.bias);
    }
}

/// Full-precision variational training on the training split.
pub fn train_fp32(model: BnnModel, dataset: &Dataset, config: &TrainConfig) -> Result<(BnnModel, TrainHistory)> {
    run_sgd(model, dataset, config, TRAIN_STREAM, &mut NoQuant)
}

//! Quantization-aware fine-tuning, direct post-training quantization, and
//! the fidelity gap between a full-precision model and a quantized one.
//!
//! Both paths quantize the *sampled* weights of every layer and the outputs
//! of every ReLU. The posterior parameters stay in full precision and, under
//! QAT, keep learning through the straight-through estimator.
//!
//! Weight clip ranges are symmetric, `±max(|mu| + k·sigma)` over the layer,
//! and are fixed before any step. Activation ranges are symmetric too: the
//! quantizer grid is centred on zero, so a `[0, max]` range would leave the
//! upper half of the ReLU output unrepresentable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{forward_traced, mean_probs, run_sgd, Activation, BnnModel, PlanUse, StepQuant, TrainConfig, TrainHistory};
use crate::quant::{is_supported_bits, CalibrationMode, QuantPlan, QuantSpec, RangeObserver, Site, SiteKind};
use crate::rng::RngStream;
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

const QAT_STREAM: u64 = 0x9a7;
const PTQ_STREAM: u64 = 0x97c;
const FIDELITY_STREAM: u64 = 0xf1d;
const CALIBRATION_TAG: u64 = 0xca1;

/// Smallest half-width given to a clip range, so a layer whose values are all
/// zero still gets a valid grid.
const MIN_HALF_RANGE: f64 = 1e-9;

/// A model bound to the quantization plan it must be evaluated with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub model: BnnModel,
    pub plan: QuantPlan,
}

impl QuantizedModel {
    pub fn bits(&self) -> Option<u32> {
        self.plan.uniform_bits()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatConfig {
    pub bit_width: u32,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Posterior widths added to `|mu|` when sizing weight ranges.
    pub weight_sigmas: f64,
    pub ema_gamma: f64,
    /// Epochs during which activation ranges track the data before freezing.
    pub calibration_epochs: usize,
    /// Batch size, Monte-Carlo count, KL peak, augmentation and seed. Its
    /// own rate and epoch fields are ignored.
    pub base: TrainConfig,
}

impl QatConfig {
    /// A quarter of the pre-training epochs at a tenth of its learning rate,
    /// with the same training windows and augmentation.
    pub fn after_pretraining(train: &TrainConfig, bit_width: u32) -> Self {
        Self {
            bit_width,
            epochs: (train.epochs / 4).max(1),
            learning_rate: train.learning_rate / 10.0,
            weight_sigmas: 3.0,
            ema_gamma: 0.99,
            calibration_epochs: 1,
            base: train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_supported_bits(self.bit_width) {
            return Err(Error::Config(format!("unsupported bit width {}", self.bit_width)));
        }
        if self.epochs == 0 || self.calibration_epochs == 0 {
            return Err(Error::Config("QAT needs at least one epoch and one calibration epoch".into()));
        }
        if !(self.weight_sigmas >= 0.0 && self.weight_sigmas.is_finite()) {
            return Err(Error::Config(format!("weight_sigmas must be non-negative, got {}", self.weight_sigmas)));
        }
        if !(0.0..1.0).contains(&self.ema_gamma) {
            return Err(Error::Config(format!("ema_gamma must be in [0, 1), got {}", self.ema_gamma)));
        }
        self.train_config().validate()
    }

    /// The schedule the fine-tuning loop runs: the KL term is held at its
    /// peak and augmentation is on from the first epoch, since the posterior
    /// is already trained.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            kl_anneal_fraction: 0.0,
            clean_warmup_epochs: 0,
            ..self.base.clone()
        }
    }
}

/// Plan holding only weight sites, each clipped to `±max(|mu| + k·sigma)`.
pub fn weight_plan(model: &BnnModel, bits: u32, sigmas: f64) -> Result<QuantPlan> {
    let mut plan = QuantPlan::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let sigma = layer.sigma();
        let m = layer
            .mu
            .data()
            .iter()
            .zip(sigma.data())
            .fold(0.0f64, |m, (mu, s)| m.max(mu.abs() + sigmas * s))
            .max(MIN_HALF_RANGE);
        plan.insert(Site::weight(li), QuantSpec::new(bits, -m, m, SiteKind::Weight)?)?;
    }
    Ok(plan)
}

fn relu_layers(model: &BnnModel) -> Vec<usize> {
    model.layers.iter().enumerate().filter(|(_, l)| l.activation == Activation::Relu).map(|(i, _)| i).collect()
}

/// Feeds each ReLU layer's batch min/max into its observer. Inputs run with
/// quantized weights and full-precision activations.
fn observe_activations(
    model: &BnnModel,
    weights: &QuantPlan,
    inputs: &[&Tensor],
    rng: &RngStream,
    observers: &mut [(usize, RangeObserver)],
) -> Result<()> {
    let traces = inputs
        .par_iter()
        .enumerate()
        .map(|(j, x)| forward_traced(model, x, &rng.derive(j as u64), PlanUse::Partial(weights)))
        .collect::<Result<Vec<_>>>()?;
    for (li, obs) in observers.iter_mut() {
        let (lo, hi) = traces
            .iter()
            .filter_map(|t| t.activation(*li))
            .flat_map(|a| a.data().iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        obs.observe_minmax(lo, hi);
    }
    Ok(())
}

fn full_plan(weights: &QuantPlan, observers: &[(usize, RangeObserver)], bits: u32) -> Result<QuantPlan> {
    let mut plan = weights.clone();
    for (li, obs) in observers {
        let (_, m) = obs.finish(true)?;
        let m = m.max(MIN_HALF_RANGE);
        plan.insert(Site::activation(*li), QuantSpec::new(bits, -m, m, SiteKind::Activation)?)?;
    }
    Ok(plan)
}

struct QatQuant {
    bits: u32,
    calibration_epochs: usize,
    weights: QuantPlan,
    observers: Vec<(usize, RangeObserver)>,
    plan: Option<QuantPlan>,
    ranges: Vec<QuantPlan>,
}

impl StepQuant for QatQuant {
    fn plan_for_step(
        &mut self,
        model: &BnnModel,
        batch: &[crate::bnn::Example],
        epoch: usize,
        rng: &RngStream,
    ) -> Result<Option<QuantPlan>> {
        if epoch < self.calibration_epochs {
            let inputs: Vec<&Tensor> = batch.iter().map(|e| &e.input).collect();
            observe_activations(model, &self.weights, &inputs, &rng.derive(CALIBRATION_TAG), &mut self.observers)?;
            self.plan = Some(full_plan(&self.weights, &self.observers, self.bits)?);
        }
        Ok(self.plan.clone())
    }

    fn eval_plan(&self) -> Option<&QuantPlan> {
        self.plan.as_ref()
    }

    fn end_epoch(&mut self, _epoch: usize) {
        if let Some(p) = &self.plan {
            self.ranges.push(p.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatHistory {
    pub train: TrainHistory,
    /// The plan in force at the end of each epoch.
    pub ranges: Vec<QuantPlan>,
    /// Index of the last epoch whose steps could still move activation ranges.
    pub last_calibration_epoch: usize,
}

/// Fine-tunes `pretrained` with fake quantization in the loop.
pub fn qat_finetune(pretrained: &BnnModel, dataset: &Dataset, config: &QatConfig) -> Result<(QuantizedModel, QatHistory)> {
    config.validate()?;
    pretrained.validate()?;
    let weights = weight_plan(pretrained, config.bit_width, config.weight_sigmas)?;
    let observers =
        relu_layers(pretrained).into_iter().map(|li| (li, RangeObserver::new(CalibrationMode::Ema(config.ema_gamma)))).collect();
    let mut quant = QatQuant {
        bits: config.bit_width,
        calibration_epochs: config.calibration_epochs,
        weights,
        observers,
        plan: None,
        ranges: Vec::new(),
    };
    let (model, train) = run_sgd(pretrained.clone(), dataset, &config.train_config(), QAT_STREAM, &mut quant)?;
    let plan = quant.plan.ok_or_else(|| Error::Config("QAT ran no steps".into()))?;
    let history = QatHistory {
        train,
        ranges: quant.ranges,
        last_calibration_epoch: config.calibration_epochs.min(config.epochs) - 1,
    };
    Ok((QuantizedModel { model, plan }, history))
}

/// Quantizes `pretrained` without training. Weight ranges come from the
/// posterior parameters; activation ranges from one min/max pass over
/// `calibration`, one posterior sample per input.
pub fn post_training_quantize(
    pretrained: &BnnModel,
    bits: u32,
    calibration: &[Tensor],
    seed: u64,
) -> Result<QuantizedModel> {
    if !is_supported_bits(bits) {
        return Err(Error::Config(format!("unsupported bit width {bits}")));
    }
    if calibration.is_empty() {
        return Err(Error::Config("post-training quantization needs calibration inputs".into()));
    }
    pretrained.validate()?;
    let weights = weight_plan(pretrained, bits, 3.0)?;
    let mut observers: Vec<(usize, RangeObserver)> =
        relu_layers(pretrained).into_iter().map(|li| (li, RangeObserver::new(CalibrationMode::MinMax))).collect();
    let inputs: Vec<&Tensor> = calibration.iter().collect();
    observe_activations(pretrained, &weights, &inputs, &RngStream::new(seed, PTQ_STREAM), &mut observers)?;
    let plan = full_plan(&weights, &observers, bits)?;
    Ok(QuantizedModel { model: pretrained.clone(), plan })
}

/// Standardized clean training inputs, the default calibration slice.
pub fn calibration_inputs(dataset: &Dataset) -> Vec<Tensor> {
    dataset.split(Split::Train).map(|w| dataset.stats.apply(w)).collect()
}

/// Largest L2 distance between the mean predictive distributions of two
/// models over `inputs`. Both models see the same random streams.
pub fn fidelity_epsilon(
    reference: &BnnModel,
    reference_plan: Option<&QuantPlan>,
    candidate: &BnnModel,
    candidate_plan: Option<&QuantPlan>,
    inputs: &[Tensor],
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !reference.same_architecture(candidate) {
        return Err(Error::Config("fidelity needs two models with the same architecture".into()));
    }
    let root = RngStream::new(seed, FIDELITY_STREAM);
    let gaps = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let rng = root.derive(i as u64);
            let p = mean_probs(reference, x, mc_samples, &rng, reference_plan)?;
            let q = mean_probs(candidate, x, mc_samples, &rng, candidate_plan)?;
            Ok(p.squared_distance(&q)?.sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

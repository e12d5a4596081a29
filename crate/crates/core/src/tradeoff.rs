//! Cost and memory accounting per bit width, the bit-width sweep, and the
//! constrained choice of the cheapest bit width that is accurate enough and
//! well enough calibrated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::{Architecture, BnnModel, TrainConfig};
use crate::qat::{fidelity_epsilon, qat_finetune, QatConfig};
use crate::synth::{Dataset, Split};
use crate::uncertainty::{evaluate, EvalOptions};
use crate::{Error, Result};

/// Fixed header of a deployed model file: format tag, version and layer count.
pub const METADATA_HEADER_BYTES: u64 = 64;
/// Per quantized tensor: scale, clip bounds and bit width, padded to 16 bytes.
pub const METADATA_BYTES_PER_SITE: u64 = 16;

/// Relative compute cost: MACs of one forward pass scaled by the product of
/// weight and activation bit widths over the 32×32 baseline.
pub fn compute_cost(arch: &Architecture, weight_bits: u32, activation_bits: u32) -> Result<f64> {
    let macs = arch.total_macs()?;
    Ok(macs as f64 * f64::from(weight_bits) * f64::from(activation_bits) / 1024.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    /// One deployed value per weight at `bits` bits, rounded up to whole bytes.
    pub payload_bytes: u64,
    /// Quantizer parameters and header, reported apart from the payload.
    pub metadata_bytes: u64,
}

impl MemoryFootprint {
    pub fn total_bytes(&self) -> u64 {
        self.payload_bytes + self.metadata_bytes
    }
}

pub fn memory_footprint(arch: &Architecture, bits: u32) -> Result<MemoryFootprint> {
    let weights = arch.weight_count()? as u64;
    let shapes = arch.resolve()?;
    let relu_sites = shapes.iter().filter(|s| s.activation == crate::bnn::Activation::Relu).count() as u64;
    let sites = shapes.len() as u64 + relu_sites;
    Ok(MemoryFootprint {
        payload_bytes: (weights * u64::from(bits)).div_ceil(8),
        metadata_bytes: METADATA_HEADER_BYTES + sites * METADATA_BYTES_PER_SITE,
    })
}

/// One row of a sweep, and of `sweep.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitWidthReport {
    #[serde(rename = "b")]
    pub bits: u32,
    pub accuracy: f64,
    pub ece: f64,
    pub cost: f64,
    pub memory_payload_bytes: u64,
    pub memory_total_bytes: u64,
    pub epsilon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConstraints {
    pub a_min: f64,
    pub u_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Selection {
    Selected { bits: u32, report: BitWidthReport },
    /// No report meets both constraints; carries the one that misses them
    /// by the smallest total margin.
    Infeasible { closest: BitWidthReport },
}

fn feasible(r: &BitWidthReport, c: &SelectionConstraints) -> bool {
    r.accuracy >= c.a_min && r.ece <= c.u_max
}

fn violation(r: &BitWidthReport, c: &SelectionConstraints) -> f64 {
    (c.a_min - r.accuracy).max(0.0) + (r.ece - c.u_max).max(0.0)
}

/// Cheapest report meeting `accuracy >= a_min` and `ece <= u_max`; equal
/// costs go to the smaller bit width.
pub fn select_bitwidth(reports: &[BitWidthReport], constraints: &SelectionConstraints) -> Result<Selection> {
    if reports.is_empty() {
        return Err(Error::Domain("no reports to select from".into()));
    }
    let best = reports
        .iter()
        .filter(|r| feasible(r, constraints))
        .min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.bits.cmp(&b.bits)));
    Ok(match best {
        Some(r) => Selection::Selected { bits: r.bits, report: *r },
        None => {
            let closest = reports
                .iter()
                .min_by(|a, b| {
                    violation(a, constraints)
                        .total_cmp(&violation(b, constraints))
                        .then(a.cost.total_cmp(&b.cost))
                        .then(a.bits.cmp(&b.bits))
                })
                .expect("non-empty");
            Selection::Infeasible { closest: *closest }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Pre-training schedule; each leg fine-tunes per [`QatConfig::after_pretraining`].
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub fidelity_mc_samples: usize,
}

impl SweepConfig {
    pub fn new(train: TrainConfig, eval: EvalOptions) -> Self {
        Self { train, eval, fidelity_mc_samples: 16 }
    }
}

/// One report per bit width, ascending. Every leg fine-tunes from the same
/// `pretrained` model; 32 bits is always present and is the unquantized model.
/// `epsilon` compares each leg with the pretrained model in full precision.
pub fn sweep_bitwidths(
    pretrained: &BnnModel,
    dataset: &Dataset,
    bits: &[u32],
    config: &SweepConfig,
) -> Result<Vec<BitWidthReport>> {
    let mut bits: Vec<u32> = bits.iter().copied().filter(|&b| b != 32).chain([32]).collect();
    bits.sort_unstable();
    bits.dedup();
    for &b in &bits {
        QatConfig::after_pretraining(&config.train, b).validate()?;
    }
    let arch = &pretrained.architecture;
    let inputs: Vec<_> = dataset.split(Split::TestSeen).map(|w| dataset.stats.apply(w)).collect();
    bits.iter()
        .map(|&b| {
            let (model, plan) = if b == 32 {
                (pretrained.clone(), None)
            } else {
                let (q, _) = qat_finetune(pretrained, dataset, &QatConfig::after_pretraining(&config.train, b))?;
                (q.model, Some(q.plan))
            };
            let report = evaluate(&model, plan.as_ref(), dataset, &config.eval)?;
            let epsilon = fidelity_epsilon(
                pretrained,
                None,
                &model,
                plan.as_ref(),
                &inputs,
                config.fidelity_mc_samples,
                config.eval.seed,
            )?;
            let mem = memory_footprint(arch, b)?;
            Ok(BitWidthReport {
                bits: b,
                accuracy: report.accuracy,
                ece: report.ece,
                cost: compute_cost(arch, b, b)?,
                memory_payload_bytes: mem.payload_bytes,
                memory_total_bytes: mem.total_bytes(),
                epsilon,
                seed: config.train.seed,
            })
        })
        .collect()
}

pub fn sweep_to_csv(reports: &[BitWidthReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn sweep_from_csv(bytes: &[u8]) -> Result<Vec<BitWidthReport>> {
    csv::Reader::from_reader(bytes).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_sweep(path: &Path) -> Result<Vec<BitWidthReport>> {
    sweep_from_csv(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{Activation, LayerSpec};

    fn dense_4_3() -> Architecture {
        Architecture { input: [4, 1, 1], layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 3, activation: Activation::None }] }
    }

    fn report(bits: u32, accuracy: f64, ece: f64, cost: f64) -> BitWidthReport {
        BitWidthReport { bits, accuracy, ece, cost, memory_payload_bytes: 1, memory_total_bytes: 2, epsilon: 0.0, seed: 1 }
    }

    #[test]
    fn cost_normalization() {
        let a = dense_4_3();
        assert_eq!(compute_cost(&a, 32, 32).unwrap(), 12.0);
        assert_eq!(compute_cost(&a, 8, 8).unwrap(), 0.75);
        let d = Architecture::desk_scale(256);
        let macs = d.total_macs().unwrap() as f64;
        assert_eq!(compute_cost(&d, 8, 8).unwrap(), macs / 16.0);
    }

    #[test]
    fn payload_arithmetic() {
        let a = Architecture {
            input: [1000, 1, 1],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1, activation: Activation::None }],
        };
        assert_eq!(memory_footprint(&a, 8).unwrap().payload_bytes, 1000);
        assert_eq!(memory_footprint(&a, 4).unwrap().payload_bytes, 500);
        assert_eq!(memory_footprint(&a, 3).unwrap().payload_bytes, 375);
        assert_eq!(memory_footprint(&a, 32).unwrap().payload_bytes, 4000);
    }

    #[test]
    fn selection_example() {
        let rs = [report(4, 0.90, 0.20, 1.0), report(8, 0.99, 0.05, 2.0), report(32, 0.99, 0.04, 10.0)];
        let c = SelectionConstraints { a_min: 0.985, u_max: 0.1 };
        assert!(matches!(select_bitwidth(&rs, &c).unwrap(), Selection::Selected { bits: 8, .. }));
        let c = SelectionConstraints { a_min: 1.01, u_max: 0.1 };
        match select_bitwidth(&rs, &c).unwrap() {
            Selection::Infeasible { closest } => assert_eq!(closest.bits, 8),
            s => panic!("{s:?}"),
        }
        assert!(select_bitwidth(&[], &c).is_err());
    }

    #[test]
    fn equal_cost_prefers_fewer_bits() {
        let rs = [report(8, 1.0, 0.0, 1.0), report(4, 1.0, 0.0, 1.0)];
        let c = SelectionConstraints { a_min: 0.5, u_max: 0.5 };
        assert!(matches!(select_bitwidth(&rs, &c).unwrap(), Selection::Selected { bits: 4, .. }));
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![report(4, 0.9, 0.1, 1.5), report(8, 0.95, 0.05, 3.0)];
        let bytes = sweep_to_csv(&rs).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("b,accuracy,ece,cost,memory_payload_bytes,memory_total_bytes,epsilon,seed\n"));
        assert_eq!(sweep_from_csv(&bytes).unwrap(), rs);
    }
}

//! Uniform signed-grid quantization.
//!
//! A [`QuantSpec`] maps a real value to `clip(round(x / S), -2^(b-1), 2^(b-1) - 1) * S`
//! with `S = (β - α) / (2^b - 1)`. There is no zero-point: the grid is `k * S`
//! for signed integer `k`, and the representable set is
//! `[-2^(b-1) S, (2^(b-1) - 1) S]` wherever `α` and `β` sit; only the width
//! `β - α` enters through `S`. Ranges should therefore be symmetric for the
//! grid to cover them. Rounding is half away from zero.
//!
//! The backward rule is the clipped straight-through estimator: gradients pass
//! unchanged wherever the pre-clip integer lies inside the grid and are zeroed
//! where the quantizer saturates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bit-widths used by the sweeps and reproduction bundles.
pub const SUPPORTED_BITS: [u32; 6] = [2, 3, 4, 8, 16, 32];

/// Any width in `2..=32` is arithmetically valid.
pub fn is_supported_bits(b: u32) -> bool {
    (2..=32).contains(&b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_width: u32,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub scale: f64,
    pub site: SiteKind,
}

/// `(β - α) / (2^b - 1)`.
pub fn compute_scale(alpha: f64, beta: f64, bits: u32) -> Result<f64> {
    if !(alpha.is_finite() && beta.is_finite()) || alpha >= beta {
        return Err(Error::Domain(format!("clip range needs α < β, got [{alpha}, {beta}]")));
    }
    if !is_supported_bits(bits) {
        return Err(Error::Domain(format!("bit width must be in 2..=32, got {bits}")));
    }
    Ok((beta - alpha) / ((1u64 << bits) - 1) as f64)
}

impl QuantSpec {
    pub fn new(bit_width: u32, clip_lo: f64, clip_hi: f64, site: SiteKind) -> Result<Self> {
        let scale = compute_scale(clip_lo, clip_hi, bit_width)?;
        Ok(Self { bit_width, clip_lo, clip_hi, scale, site })
    }

    /// Lowest grid integer, `-2^(b-1)`.
    pub fn qmin(&self) -> f64 {
        -((1u64 << (self.bit_width - 1)) as f64)
    }

    /// Highest grid integer, `2^(b-1) - 1`.
    pub fn qmax(&self) -> f64 {
        ((1u64 << (self.bit_width - 1)) - 1) as f64
    }

    /// Grid integer for `x` before clipping.
    #[inline]
    pub fn level(&self, x: f64) -> f64 {
        (x / self.scale).round()
    }

    #[inline]
    pub fn saturates(&self, x: f64) -> bool {
        let k = self.level(x);
        k < self.qmin() || k > self.qmax()
    }

    /// Quantize-dequantize a single value.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        self.level(x).clamp(self.qmin(), self.qmax()) * self.scale
    }

    /// True if `v` equals `k * S` for an integer `k` inside the grid.
    pub fn on_grid(&self, v: f64) -> bool {
        let k = (v / self.scale).round();
        k >= self.qmin() && k <= self.qmax() && k * self.scale == v
    }

    pub fn validate(&self) -> Result<()> {
        let s = compute_scale(self.clip_lo, self.clip_hi, self.bit_width)?;
        if s != self.scale {
            return Err(Error::Config(format!(
                "scale {} does not match range [{}, {}] at {} bits",
                self.scale, self.clip_lo, self.clip_hi, self.bit_width
            )));
        }
        Ok(())
    }
}

pub fn quantize(x: f64, spec: &QuantSpec) -> f64 {
    spec.quantize(x)
}

/// Elementwise quantize-dequantize.
pub fn fake_quant_forward(x: &Tensor, spec: &QuantSpec) -> Tensor {
    x.map(|v| spec.quantize(v))
}

/// Clipped straight-through estimator: `upstream` where `x` is unsaturated, 0 elsewhere.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, spec: &QuantSpec) -> Result<Tensor> {
    upstream.zip_map(x, |g, v| if spec.saturates(v) { 0.0 } else { g })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "gamma")]
pub enum CalibrationMode {
    MinMax,
    Ema(f64),
}

/// Running clip-range accumulator. Single writer during calibration.
#[derive(Debug, Clone)]
pub struct RangeObserver {
    mode: CalibrationMode,
    lo: f64,
    hi: f64,
    seen: usize,
}

impl RangeObserver {
    pub fn new(mode: CalibrationMode) -> Self {
        Self { mode, lo: f64::INFINITY, hi: f64::NEG_INFINITY, seen: 0 }
    }

    pub fn observe(&mut self, t: &Tensor) {
        let (bmin, bmax) = t
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        self.observe_minmax(bmin, bmax);
    }

    pub fn observe_minmax(&mut self, bmin: f64, bmax: f64) {
        if self.seen == 0 {
            self.lo = bmin;
            self.hi = bmax;
        } else {
            match self.mode {
                CalibrationMode::MinMax => {
                    self.lo = self.lo.min(bmin);
                    self.hi = self.hi.max(bmax);
                }
                CalibrationMode::Ema(g) => {
                    self.lo = g * self.lo + (1.0 - g) * bmin;
                    self.hi = g * self.hi + (1.0 - g) * bmax;
                }
            }
        }
        self.seen += 1;
    }

    pub fn count(&self) -> usize {
        self.seen
    }

    pub fn finish(&self, symmetric: bool) -> Result<(f64, f64)> {
        if self.seen == 0 {
            return Err(Error::Domain("range calibration needs at least one observation".into()));
        }
        if symmetric {
            let m = self.lo.abs().max(self.hi.abs());
            Ok((-m, m))
        } else {
            Ok((self.lo, self.hi))
        }
    }
}

/// Clip range from a stream of observed tensors.
pub fn calibrate_range<'a>(
    observations: impl IntoIterator<Item = &'a Tensor>,
    mode: CalibrationMode,
    symmetric: bool,
) -> Result<(f64, f64)> {
    let mut obs = RangeObserver::new(mode);
    for t in observations {
        obs.observe(t);
    }
    obs.finish(symmetric)
}

/// Identifies one quantizable tensor in a model: the sampled weights of a
/// parameterized layer, or the activation that layer emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
}

impl Site {
    pub fn weight(layer: usize) -> Self {
        Self { layer, kind: SiteKind::Weight }
    }

    pub fn activation(layer: usize) -> Self {
        Self { layer, kind: SiteKind::Activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlanEntry {
    layer: usize,
    #[serde(flatten)]
    spec: QuantSpec,
}

/// Per-site quantizers for a model. Serialized as a list of entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<PlanEntry>", into = "Vec<PlanEntry>")]
pub struct QuantPlan {
    specs: BTreeMap<Site, QuantSpec>,
}

impl From<Vec<PlanEntry>> for QuantPlan {
    fn from(entries: Vec<PlanEntry>) -> Self {
        let specs = entries
            .into_iter()
            .map(|e| (Site { layer: e.layer, kind: e.spec.site }, e.spec))
            .collect();
        Self { specs }
    }
}

impl From<QuantPlan> for Vec<PlanEntry> {
    fn from(plan: QuantPlan) -> Self {
        plan.specs.into_iter().map(|(site, spec)| PlanEntry { layer: site.layer, spec }).collect()
    }
}

impl QuantPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: Site, spec: QuantSpec) -> Result<()> {
        if spec.site != site.kind {
            return Err(Error::Config(format!("spec for {:?} bound to {:?} site", spec.site, site)));
        }
        spec.validate()?;
        self.specs.insert(site, spec);
        Ok(())
    }

    pub fn get(&self, site: Site) -> Option<&QuantSpec> {
        self.specs.get(&site)
    }

    pub fn require(&self, site: Site) -> Result<&QuantSpec> {
        self.get(site)
            .ok_or_else(|| Error::Config(format!("quant plan has no spec for layer {} {:?}", site.layer, site.kind)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &QuantSpec)> {
        self.specs.iter()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// The common bit-width if every site uses the same one.
    pub fn uniform_bits(&self) -> Option<u32> {
        let mut it = self.specs.values().map(|s| s.bit_width);
        let first = it.next()?;
        it.all(|b| b == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        for (site, spec) in &self.specs {
            if spec.site != site.kind {
                return Err(Error::Config(format!("site/spec kind mismatch at layer {}", site.layer)));
            }
            spec.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(b: u32, lo: f64, hi: f64) -> QuantSpec {
        QuantSpec::new(b, lo, hi, SiteKind::Weight).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(-1.0, 1.0, 8).unwrap(), 2.0 / 255.0);
        assert_eq!(compute_scale(0.0, 3.0, 2).unwrap(), 1.0);
        assert_eq!(compute_scale(-0.5, 0.5, 4).unwrap(), 1.0 / 15.0);
        assert!(matches!(compute_scale(1.0, 1.0, 8), Err(Error::Domain(_))));
        assert!(matches!(compute_scale(2.0, 1.0, 8), Err(Error::Domain(_))));
        assert!(matches!(compute_scale(-1.0, 1.0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn quantize_examples() {
        let s = spec(8, -1.0, 1.0);
        assert_eq!(s.quantize(0.0), 0.0);
        assert_eq!(s.quantize(2.0), 127.0 * (2.0 / 255.0));
        assert!((s.quantize(2.0) - 254.0 / 255.0).abs() < 1e-15);
        assert_eq!(s.quantize(-3.0), -128.0 * (2.0 / 255.0));
        assert!((s.quantize(-3.0) + 256.0 / 255.0).abs() < 1e-15);
        let q = s.quantize(0.3141);
        assert_eq!(s.quantize(q), q);
    }

    #[test]
    fn fake_quant_two_bit() {
        let s = spec(2, -1.0, 0.5);
        assert_eq!(s.scale, 0.5);
        assert_eq!(s.quantize(0.3), 0.5);
        let x = Tensor::from_vec(vec![-1.0, -0.5, 0.0, 0.5]);
        assert_eq!(fake_quant_forward(&x, &s), x);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let s = spec(4, -1.0, 1.0);
        assert_eq!(s.level(2.5 * s.scale), 3.0);
        assert_eq!(s.level(-2.5 * s.scale), -3.0);
    }

    #[test]
    fn ste_masks_saturated() {
        let s = spec(4, -1.0, 1.0);
        let x = Tensor::from_vec(vec![0.1, 10.0, -0.7, -10.0]);
        let g = Tensor::from_vec(vec![1.5, 2.0, -3.0, 4.0]);
        let out = ste_backward(&g, &x, &s).unwrap();
        assert_eq!(out.data(), &[1.5, 0.0, -3.0, 0.0]);
        assert!(ste_backward(&g, &Tensor::zeros(&[3]), &s).is_err());
    }

    #[test]
    fn calibration_examples() {
        let obs = Tensor::from_vec(vec![-2.0, 0.5, 3.0]);
        assert_eq!(calibrate_range([&obs], CalibrationMode::MinMax, false).unwrap(), (-2.0, 3.0));
        assert_eq!(calibrate_range([&obs], CalibrationMode::MinMax, true).unwrap(), (-3.0, 3.0));
        let a = Tensor::from_vec(vec![-1.0, 1.0]);
        let b = Tensor::from_vec(vec![-3.0, 2.0]);
        let (lo, hi) = calibrate_range([&a, &b], CalibrationMode::Ema(0.9), false).unwrap();
        assert!((lo + 1.2).abs() < 1e-12 && (hi - 1.1).abs() < 1e-12);
        let (lo, hi) = calibrate_range([&a, &b], CalibrationMode::MinMax, false).unwrap();
        assert_eq!((lo, hi), (-3.0, 2.0));
        assert!(matches!(
            calibrate_range(std::iter::empty(), CalibrationMode::MinMax, false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn plan_roundtrip_and_lookup() {
        let mut plan = QuantPlan::new();
        plan.insert(Site::weight(0), spec(8, -0.5, 0.5)).unwrap();
        plan.insert(Site::activation(0), QuantSpec::new(8, -4.0, 4.0, SiteKind::Activation).unwrap()).unwrap();
        assert!(plan.insert(Site::activation(1), spec(8, -1.0, 1.0)).is_err());
        let json = serde_json::to_string(&plan).unwrap();
        let back: QuantPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.uniform_bits(), Some(8));
        assert!(matches!(back.require(Site::weight(3)), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn idempotent_monotone_bounded(
            b in 2u32..=16,
            lo in -5.0f64..-0.01,
            width in 0.02f64..10.0,
            x in -20.0f64..20.0,
            dy in 0.0f64..3.0,
        ) {
            let s = spec(b, lo, lo + width);
            let q = s.quantize(x);
            prop_assert_eq!(s.quantize(q), q);
            prop_assert!(s.on_grid(q));
            prop_assert!(s.quantize(x + dy) >= q);
            if x >= s.clip_lo && x <= s.clip_hi && !s.saturates(x) {
                prop_assert!((x - q).abs() <= s.scale / 2.0 + 1e-15 * x.abs().max(1.0));
            }
        }
    }
}

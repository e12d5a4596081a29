//! Monte-Carlo predictive inference and the metrics built on it.
//!
//! Uncertainty follows the entropy split: total is the entropy of the mean
//! predictive distribution, aleatoric is the mean entropy of the per-sample
//! distributions, and epistemic is their difference (the mutual information
//! between prediction and weights). All entropies are in nats.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{mc_probs, BnnModel};
use crate::quant::QuantPlan;
use crate::rng::RngStream;
use crate::synth::{inject_noise, Dataset, Fault, Snr, Split};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Number of confidence bins used for the reported calibration error.
pub const ECE_BINS: usize = 10;

/// Default coverage levels emitted with every report.
pub const COVERAGE_LEVELS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `(total, aleatoric, epistemic)` for an `[n, k]` matrix of probability rows.
pub fn decompose_uncertainty(mc_probs: &Tensor) -> Result<(f64, f64, f64)> {
    let [n, k] = mc_probs.dims() else {
        return Err(Error::Shape(format!("expected an [n, k] matrix, got {:?}", mc_probs.dims())));
    };
    let (n, k) = (*n, *k);
    if n == 0 || k == 0 {
        return Err(Error::Shape("empty probability matrix".into()));
    }
    let rows: Vec<&[f64]> = mc_probs.data().chunks(k).collect();
    let mean = row_mean(&rows, k);
    let total = entropy(&mean);
    let aleatoric = rows.iter().map(|r| entropy(r)).sum::<f64>() / n as f64;
    // Identical rows carry no model disagreement; report that exactly rather
    // than as the rounding residue of two nearly equal sums.
    let epistemic = if rows.iter().all(|r| r == &rows[0]) { 0.0 } else { total - aleatoric };
    let total = if epistemic == 0.0 { aleatoric } else { total };
    Ok((total, aleatoric, epistemic))
}

fn row_mean(rows: &[&[f64]], k: usize) -> Vec<f64> {
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean_probs: Tensor,
    pub mc_probs: Tensor,
    pub total_unc: f64,
    pub aleatoric_unc: f64,
    pub epistemic_unc: f64,
    pub predicted_class: usize,
    pub confidence: f64,
}

impl PredictiveSummary {
    /// Summary of an `[n, k]` matrix of Monte-Carlo probability rows.
    pub fn from_mc(mc_probs: Tensor) -> Result<Self> {
        let (total_unc, aleatoric_unc, epistemic_unc) = decompose_uncertainty(&mc_probs)?;
        let k = mc_probs.dims()[1];
        let rows: Vec<&[f64]> = mc_probs.data().chunks(k).collect();
        let mean_probs = Tensor::from_vec(row_mean(&rows, k));
        let predicted_class = mean_probs.argmax();
        let confidence = mean_probs.data()[predicted_class];
        Ok(Self { mean_probs, mc_probs, total_unc, aleatoric_unc, epistemic_unc, predicted_class, confidence })
    }
}

/// `n_samples` posterior forward passes; sample `s` uses `rng.derive(s)`.
pub fn predict_mc(
    model: &BnnModel,
    input: &Tensor,
    n_samples: usize,
    rng: &RngStream,
    quant: Option<&QuantPlan>,
) -> Result<PredictiveSummary> {
    let rows = mc_probs(model, input, n_samples, rng, quant)?;
    let k = model.class_count();
    let data = rows.into_iter().flat_map(Tensor::into_data).collect();
    PredictiveSummary::from_mc(Tensor::new(vec![n_samples, k], data)?)
}

fn check_lengths(summaries: &[PredictiveSummary], labels: &[usize]) -> Result<()> {
    if summaries.is_empty() {
        return Err(Error::Domain("no predictions to score".into()));
    }
    if summaries.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions but {} labels", summaries.len(), labels.len())));
    }
    Ok(())
}

pub fn accuracy(summaries: &[PredictiveSummary], labels: &[usize]) -> Result<f64> {
    check_lengths(summaries, labels)?;
    let correct = summaries.iter().zip(labels).filter(|(s, &y)| s.predicted_class == y).count();
    Ok(correct as f64 / summaries.len() as f64)
}

/// Bin of a confidence value among `n_bins` equal-width bins on `[0, 1]`;
/// the right edge belongs to the last bin.
pub fn confidence_bin(confidence: f64, n_bins: usize) -> usize {
    ((confidence * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn expected_calibration_error(summaries: &[PredictiveSummary], labels: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one calibration bin".into()));
    }
    check_lengths(summaries, labels)?;
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    for (s, &y) in summaries.iter().zip(labels) {
        let b = confidence_bin(s.confidence, n_bins);
        count[b] += 1;
        conf[b] += s.confidence;
        hits[b] += f64::from(u8::from(s.predicted_class == y));
    }
    let n = summaries.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] / m - conf[b] / m).abs()
        })
        .sum())
}

/// Smallest set of classes, by descending probability with ties broken
/// towards the lower index, whose cumulative probability reaches `level`.
pub fn credible_set(probs: &[f64], level: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut acc = 0.0;
    let mut set = Vec::new();
    for c in order {
        set.push(c);
        acc += probs[c];
        if acc >= level {
            break;
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub level: f64,
    pub coverage: f64,
}

pub fn empirical_coverage(
    summaries: &[PredictiveSummary],
    labels: &[usize],
    levels: &[f64],
) -> Result<Vec<CoveragePoint>> {
    check_lengths(summaries, labels)?;
    if levels.windows(2).any(|w| w[0] > w[1]) || levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::Config("coverage levels must be ascending and inside (0, 1)".into()));
    }
    Ok(levels
        .iter()
        .map(|&level| {
            let inside = summaries
                .iter()
                .zip(labels)
                .filter(|(s, y)| credible_set(s.mean_probs.data(), level).contains(y))
                .count();
            CoveragePoint { level, coverage: inside as f64 / summaries.len() as f64 }
        })
        .collect())
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("quantiles of an empty set".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Ok(Self { min: v[0], q25: at(0.25), median: at(0.5), q75: at(0.75), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMeans {
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub windows: usize,
}

impl UncertaintyMeans {
    pub fn of(summaries: &[PredictiveSummary]) -> Option<Self> {
        if summaries.is_empty() {
            return None;
        }
        let n = summaries.len() as f64;
        Some(Self {
            total: summaries.iter().map(|s| s.total_unc).sum::<f64>() / n,
            aleatoric: summaries.iter().map(|s| s.aleatoric_unc).sum::<f64>() / n,
            epistemic: summaries.iter().map(|s| s.epistemic_unc).sum::<f64>() / n,
            windows: summaries.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultConfidence {
    pub fault: Fault,
    pub confidence: Quantiles,
}

/// One scored window, for external reliability plots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub fault: Fault,
    pub predicted_class: usize,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mc_samples: usize,
    pub seed: u64,
    /// Corrupt every test window at this SNR before scoring.
    pub noise_snr_db: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mc_samples: 64, seed: 1, noise_snr_db: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub correct: usize,
    pub total: usize,
    pub noise: Snr,
    pub mc_samples: usize,
    pub seen: UncertaintyMeans,
    pub unseen: Option<UncertaintyMeans>,
    /// Confidence quantiles grouped by the true fault, seen faults first.
    pub confidence_by_fault: Vec<FaultConfidence>,
    pub coverage: Vec<CoveragePoint>,
    pub predictions: Vec<ScoredPrediction>,
}

const EVAL_STREAM: u64 = 0xe7a1;

/// Summaries for every window of `split`, in dataset order.
pub fn predict_split(
    model: &BnnModel,
    plan: Option<&QuantPlan>,
    dataset: &Dataset,
    split: Split,
    options: &EvalOptions,
) -> Result<Vec<(Fault, PredictiveSummary)>> {
    let root = RngStream::new(options.seed, EVAL_STREAM).derive(split as u64);
    let windows: Vec<_> = dataset.split(split).collect();
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let wrng = root.derive(i as u64);
            let input = match options.noise_snr_db {
                Some(db) => dataset.stats.apply(&inject_noise(w, db, &wrng.derive(0))?),
                None => dataset.stats.apply(w),
            };
            predict_mc(model, &input, options.mc_samples, &wrng.derive(1), plan).map(|s| (w.label, s))
        })
        .collect()
}

/// Scores `model` (under `plan` when given) on the seen test split and
/// summarizes uncertainty on the unseen split.
pub fn evaluate(
    model: &BnnModel,
    plan: Option<&QuantPlan>,
    dataset: &Dataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if dataset.count(Split::TestSeen) == 0 {
        return Err(Error::Config("dataset has no seen-fault test windows".into()));
    }
    let seen = predict_split(model, plan, dataset, Split::TestSeen, options)?;
    let unseen = predict_split(model, plan, dataset, Split::TestUnseen, options)?;
    let labels: Vec<usize> = seen
        .iter()
        .map(|(f, _)| f.class_index().ok_or_else(|| Error::Config(format!("fault {} in seen split", f.label()))))
        .collect::<Result<_>>()?;
    let seen_summaries: Vec<PredictiveSummary> = seen.iter().map(|(_, s)| s.clone()).collect();
    let unseen_summaries: Vec<PredictiveSummary> = unseen.iter().map(|(_, s)| s.clone()).collect();
    let acc = accuracy(&seen_summaries, &labels)?;
    let correct = seen_summaries.iter().zip(&labels).filter(|(s, &y)| s.predicted_class == y).count();

    let mut confidence_by_fault = Vec::new();
    for fault in Fault::ALL {
        let conf: Vec<f64> = seen.iter().chain(&unseen).filter(|(f, _)| *f == fault).map(|(_, s)| s.confidence).collect();
        if !conf.is_empty() {
            confidence_by_fault.push(FaultConfidence { fault, confidence: Quantiles::of(&conf)? });
        }
    }
    let predictions = seen
        .iter()
        .zip(&labels)
        .map(|((f, s), &y)| ScoredPrediction {
            fault: *f,
            predicted_class: s.predicted_class,
            confidence: s.confidence,
            correct: s.predicted_class == y,
        })
        .collect();

    Ok(EvalReport {
        accuracy: acc,
        ece: expected_calibration_error(&seen_summaries, &labels, ECE_BINS)?,
        correct,
        total: labels.len(),
        noise: options.noise_snr_db.map_or(Snr::Clean, Snr::Db),
        mc_samples: options.mc_samples,
        seen: UncertaintyMeans::of(&seen_summaries).expect("non-empty"),
        unseen: UncertaintyMeans::of(&unseen_summaries),
        confidence_by_fault,
        coverage: empirical_coverage(&seen_summaries, &labels, &COVERAGE_LEVELS)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(rows: &[[f64; 3]]) -> PredictiveSummary {
        let data = rows.iter().flatten().copied().collect();
        PredictiveSummary::from_mc(Tensor::new(vec![rows.len(), 3], data).unwrap()).unwrap()
    }

    #[test]
    fn identical_rows_have_zero_epistemic() {
        let s = summary(&[[0.2, 0.3, 0.5]; 5]);
        assert_eq!(s.epistemic_unc, 0.0);
        assert_eq!(s.total_unc, s.aleatoric_unc);
        assert!((s.aleatoric_unc - entropy(&[0.2, 0.3, 0.5])).abs() < 1e-15);
    }

    #[test]
    fn two_disagreeing_one_hots() {
        let s = summary(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(s.mean_probs.data(), &[0.5, 0.5, 0.0]);
        assert_eq!(s.aleatoric_unc, 0.0);
        assert!((s.epistemic_unc - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn three_one_hots_are_pure_disagreement() {
        let s = summary(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!((s.total_unc - 3f64.ln()).abs() < 1e-12);
        assert_eq!(s.aleatoric_unc, 0.0);
        assert!((s.epistemic_unc - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts() {
        let right = summary(&[[0.9, 0.05, 0.05]]);
        let wrong = summary(&[[0.05, 0.9, 0.05]]);
        let set = vec![right.clone(), right.clone(), right, wrong];
        assert_eq!(accuracy(&set, &[0, 0, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&set[..3], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&set[..3], &[2, 2, 2]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn ece_cases() {
        let sure = summary(&[[1.0, 0.0, 0.0]]);
        assert_eq!(expected_calibration_error(&[sure.clone(), sure], &[0, 0], 10).unwrap(), 0.0);
        let s = summary(&[[0.9, 0.05, 0.05]]);
        let set = vec![s.clone(), s.clone(), s.clone(), s];
        let ece = expected_calibration_error(&set, &[0, 0, 1, 1], 1).unwrap();
        assert!((ece - 0.4).abs() < 1e-12);
        assert!(matches!(expected_calibration_error(&[], &[], 10), Err(Error::Domain(_))));
    }

    #[test]
    fn coverage_cases() {
        let onehot = [summary(&[[1.0, 0.0, 0.0]]), summary(&[[0.0, 1.0, 0.0]])];
        for p in empirical_coverage(&onehot, &[0, 1], &COVERAGE_LEVELS).unwrap() {
            assert_eq!(p.coverage, 1.0);
        }
        let u = 1.0 / 3.0;
        let uniform: Vec<_> = (0..3).map(|_| summary(&[[u, u, u]])).collect();
        assert_eq!(credible_set(&[u, u, u], 0.5), vec![0, 1]);
        let c = empirical_coverage(&uniform, &[0, 1, 2], &[0.5]).unwrap();
        assert!((c[0].coverage - 2.0 / 3.0).abs() < 1e-15);
        assert!(empirical_coverage(&uniform, &[0, 1, 2], &[0.6, 0.5]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((q.min, q.q25, q.median, q.q75, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let q = Quantiles::of(&[0.0, 1.0]).unwrap();
        assert_eq!(q.median, 0.5);
    }
}

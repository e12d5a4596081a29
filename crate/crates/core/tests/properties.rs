//! Property tests against small brute-force oracles.

use gearqat::bnn::Architecture;
use gearqat::quant::{ste_backward, QuantSpec, SiteKind};
use gearqat::tensor::Tensor;
use gearqat::tradeoff::{compute_cost, memory_footprint, select_bitwidth, BitWidthReport, Selection, SelectionConstraints};
use gearqat::uncertainty::{
    credible_set, decompose_uncertainty, empirical_coverage, entropy, expected_calibration_error, PredictiveSummary,
};
use proptest::prelude::*;

fn normalize(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn prob_rows(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.001f64..1.0, k), n).prop_map(|rows| rows.iter().map(|r| normalize(r)).collect())
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn summary(rows: &[Vec<f64>]) -> PredictiveSummary {
    PredictiveSummary::from_mc(matrix(rows)).unwrap()
}

proptest! {
    #[test]
    fn decomposition_is_consistent(rows in (1usize..12, 2usize..6).prop_flat_map(|(n, k)| prob_rows(n, k))) {
        let k = rows[0].len();
        let (total, ale, epi) = decompose_uncertainty(&matrix(&rows)).unwrap();
        prop_assert!(ale >= 0.0);
        prop_assert!(epi >= -1e-12);
        prop_assert!(total <= (k as f64).ln() + 1e-12);
        prop_assert!((total - ale - epi).abs() < 1e-12);
        let mean: Vec<f64> = (0..k).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64).collect();
        prop_assert!((total - entropy(&mean)).abs() < 1e-12 || epi == 0.0);
    }

    #[test]
    fn ece_matches_brute_force(
        items in prop::collection::vec((prob_rows(1, 3), 0usize..3), 1..60),
        bins in 1usize..15,
    ) {
        let summaries: Vec<PredictiveSummary> = items.iter().map(|(r, _)| summary(r)).collect();
        let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
        let got = expected_calibration_error(&summaries, &labels, bins).unwrap();
        // Oracle: for each bin, scan every item and test membership directly.
        let n = summaries.len() as f64;
        let mut want = 0.0;
        for b in 0..bins {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let members: Vec<usize> = (0..summaries.len())
                .filter(|&i| {
                    let c = summaries[i].confidence;
                    c >= lo && (c < hi || (b == bins - 1 && c <= 1.0))
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let acc = members.iter().filter(|&&i| summaries[i].predicted_class == labels[i]).count() as f64 / m;
            let conf = members.iter().map(|&i| summaries[i].confidence).sum::<f64>() / m;
            want += m / n * (acc - conf).abs();
        }
        prop_assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
    }

    #[test]
    fn coverage_grows_with_level(items in prop::collection::vec((prob_rows(2, 3), 0usize..3), 1..40)) {
        let summaries: Vec<PredictiveSummary> = items.iter().map(|(r, _)| summary(r)).collect();
        let labels: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
        let pts = empirical_coverage(&summaries, &labels, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
        prop_assert!(pts.windows(2).all(|w| w[0].coverage <= w[1].coverage));
        for s in &summaries {
            let set = credible_set(s.mean_probs.data(), 0.9);
            let mass: f64 = set.iter().map(|&c| s.mean_probs.data()[c]).sum();
            prop_assert!(mass >= 0.9 - 1e-12);
            // Dropping the last member must fall short, or the set is not minimal.
            prop_assert!(mass - s.mean_probs.data()[*set.last().unwrap()] < 0.9);
        }
    }

    #[test]
    fn selector_matches_oracle(
        rows in prop::collection::vec((0usize..6, 0.0f64..1.0, 0.0f64..0.3), 1..6),
        a_min in 0.0f64..1.0,
        u_max in 0.0f64..0.3,
    ) {
        const BITS: [u32; 6] = [2, 3, 4, 8, 16, 32];
        let reports: Vec<BitWidthReport> = rows
            .iter()
            .map(|&(i, accuracy, ece)| BitWidthReport {
                bits: BITS[i],
                accuracy,
                ece,
                cost: f64::from(BITS[i] * BITS[i]),
                memory_payload_bytes: 0,
                memory_total_bytes: 0,
                epsilon: 0.0,
                seed: 0,
            })
            .collect();
        let c = SelectionConstraints { a_min, u_max };
        let got = select_bitwidth(&reports, &c).unwrap();
        let feasible: Vec<&BitWidthReport> = reports.iter().filter(|r| r.accuracy >= a_min && r.ece <= u_max).collect();
        match got {
            Selection::Selected { bits, report } => {
                prop_assert!(!feasible.is_empty());
                prop_assert!(report.accuracy >= a_min && report.ece <= u_max);
                prop_assert!(feasible.iter().all(|r| r.cost > report.cost || (r.cost == report.cost && r.bits >= bits)));
            }
            Selection::Infeasible { .. } => prop_assert!(feasible.is_empty()),
        }
    }

    #[test]
    fn ste_passes_inside_and_blocks_outside(
        b in 2u32..=16,
        half in 0.05f64..5.0,
        xs in prop::collection::vec(-10.0f64..10.0, 1..30),
    ) {
        let spec = QuantSpec::new(b, -half, half, SiteKind::Activation).unwrap();
        let x = Tensor::from_vec(xs.clone());
        let up = Tensor::from_vec(xs.iter().map(|v| v * 3.0 + 1.0).collect());
        let g = ste_backward(&up, &x, &spec).unwrap();
        for ((gi, ui), xi) in g.data().iter().zip(up.data()).zip(&xs) {
            if spec.saturates(*xi) {
                prop_assert_eq!(*gi, 0.0);
            } else {
                prop_assert_eq!(*gi, *ui);
            }
        }
    }

    #[test]
    fn cost_and_memory_scale_with_bits(len in prop::sample::select(vec![64usize, 128, 256, 512])) {
        for arch in [Architecture::desk_scale(len), Architecture::full_scale(len)] {
            let p32 = memory_footprint(&arch, 32).unwrap().payload_bytes;
            let p8 = memory_footprint(&arch, 8).unwrap().payload_bytes;
            prop_assert_eq!(p32, 4 * p8);
            let costs: Vec<f64> = [2u32, 3, 4, 8, 16, 32].iter().map(|&b| compute_cost(&arch, b, b).unwrap()).collect();
            prop_assert!(costs.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

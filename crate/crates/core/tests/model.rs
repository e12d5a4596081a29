//! End-to-end contracts of training, quantization and evaluation on a small
//! dataset shared by every test in this file.

use std::sync::OnceLock;

use gearqat::bnn::{
    elbo_loss, example_from, forward, forward_with_trace, kl_gradient, train_fp32, Architecture, BnnModel, ElboSettings,
    Example, TrainConfig,
};
use gearqat::qat::{calibration_inputs, post_training_quantize, qat_finetune, QatConfig};
use gearqat::quant::Site;
use gearqat::rng::RngStream;
use gearqat::synth::{build_dataset, Dataset, DatasetConfig, Fault, Split};
use gearqat::uncertainty::{evaluate, EvalOptions, EvalReport};

struct Fixture {
    ds: Dataset,
    model: BnnModel,
    config: TrainConfig,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = build_dataset(&DatasetConfig { window_len: 128, master_seed: 21, ..DatasetConfig::default() }).unwrap();
        let config = TrainConfig { seed: 21, ..TrainConfig::default() };
        let model = BnnModel::init(Architecture::desk_scale(128), config.prior_sigma, 21).unwrap();
        let (model, _) = train_fp32(model, &ds, &config).unwrap();
        Fixture { ds, model, config }
    })
}

fn opts() -> EvalOptions {
    EvalOptions { mc_samples: 16, seed: 5, noise_snr_db: None }
}

fn batch(f: &Fixture, n: usize) -> Vec<Example> {
    f.ds.split(Split::Train).take(n).map(|w| example_from(&f.ds.stats, w).unwrap()).collect()
}

fn median_confidence(r: &EvalReport, fault: Fault) -> f64 {
    r.confidence_by_fault.iter().find(|c| c.fault == fault).unwrap().confidence.median
}

#[test]
fn pretrained_model_learns_seen_faults() {
    let f = fixture();
    let r = evaluate(&f.model, None, &f.ds, &opts()).unwrap();
    assert!(r.accuracy >= 0.9, "accuracy {}", r.accuracy);
}

#[test]
fn thirty_two_bit_plan_matches_full_precision() {
    let f = fixture();
    let q = post_training_quantize(&f.model, 32, &calibration_inputs(&f.ds), 3).unwrap();
    for (i, x) in calibration_inputs(&f.ds).iter().take(10).enumerate() {
        let rng = RngStream::new(9, i as u64);
        let a = forward(&f.model, x, &rng, None).unwrap();
        let b = forward(&f.model, x, &rng, Some(&q.plan)).unwrap();
        let gap = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-6, "logit gap {gap}");
    }
}

#[test]
fn more_samples_reduce_loss_variance() {
    let f = fixture();
    let b = batch(f, 4);
    let variance = |m: usize| {
        let losses: Vec<f64> = (0..40)
            .map(|s| {
                let settings = ElboSettings { kl_weight: 0.0, dataset_size: 90, mc_samples: m };
                elbo_loss(&f.model, &b, &RngStream::new(s, 77), settings, None).unwrap().0
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / losses.len() as f64
    };
    let (v1, v16) = (variance(1), variance(16));
    assert!(v16 < v1, "variance with 16 samples {v16} vs 1 sample {v1}");
}

#[test]
fn kl_term_adds_scaled_gradient() {
    let f = fixture();
    let b = batch(f, 3);
    let rng = RngStream::new(2, 2);
    let n = 90;
    let with = |w| elbo_loss(&f.model, &b, &rng, ElboSettings { kl_weight: w, dataset_size: n, mc_samples: 2 }, None).unwrap();
    let (l0, g0) = with(0.0);
    let (l1, g1) = with(1.0);
    assert!((l1 - l0 - f.model.kl() / n as f64).abs() < 1e-12);
    for ((layer, a), c) in f.model.layers.iter().zip(&g0.layers).zip(&g1.layers) {
        let (gmu, grho) = kl_gradient(layer);
        for i in 0..gmu.len() {
            assert!((c.mu[i] - a.mu[i] - gmu[i] / n as f64).abs() < 1e-12);
            assert!((c.rho[i] - a.rho[i] - grho[i] / n as f64).abs() < 1e-12);
        }
        assert_eq!(a.bias, c.bias);
    }
}

#[test]
fn qat_ranges_freeze_and_weights_stay_on_grid() {
    let f = fixture();
    let config = QatConfig { epochs: 3, ..QatConfig::after_pretraining(&f.config, 4) };
    let (q, history) = qat_finetune(&f.model, &f.ds, &config).unwrap();
    assert_eq!(history.ranges.len(), 3);
    for later in &history.ranges[history.last_calibration_epoch..] {
        assert_eq!(later, &q.plan);
    }
    let x = &calibration_inputs(&f.ds)[0];
    let trace = forward_with_trace(&q.model, x, &RngStream::new(1, 1), Some(&q.plan)).unwrap();
    for layer in 0..q.model.layers.len() {
        let spec = q.plan.require(Site::weight(layer)).unwrap();
        assert!(trace.used_weights(layer).unwrap().data().iter().all(|&w| spec.on_grid(w)));
    }
}

#[test]
fn wide_thirty_two_bit_qat_keeps_accuracy() {
    let f = fixture();
    let config = QatConfig { weight_sigmas: 10.0, ..QatConfig::after_pretraining(&f.config, 32) };
    let (q, history) = qat_finetune(&f.model, &f.ds, &config).unwrap();
    let base = evaluate(&f.model, None, &f.ds, &opts()).unwrap();
    let tuned = evaluate(&q.model, Some(&q.plan), &f.ds, &opts()).unwrap();
    assert!((tuned.accuracy - base.accuracy).abs() <= 0.005, "{} vs {}", tuned.accuracy, base.accuracy);
    assert!(history.train.epochs.iter().all(|e| e.mean_loss.is_finite()));
}

#[test]
fn thirty_two_bit_ptq_keeps_accuracy() {
    let f = fixture();
    let q = post_training_quantize(&f.model, 32, &calibration_inputs(&f.ds), 4).unwrap();
    let base = evaluate(&f.model, None, &f.ds, &opts()).unwrap();
    let quant = evaluate(&q.model, Some(&q.plan), &f.ds, &opts()).unwrap();
    assert!((quant.accuracy - base.accuracy).abs() <= 0.005);
}

#[test]
fn evaluation_is_deterministic() {
    let f = fixture();
    let a = evaluate(&f.model, None, &f.ds, &opts()).unwrap();
    let b = evaluate(&f.model, None, &f.ds, &opts()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let noisy = EvalOptions { noise_snr_db: Some(0.0), ..opts() };
    let c = evaluate(&f.model, None, &f.ds, &noisy).unwrap();
    let d = evaluate(&f.model, None, &f.ds, &noisy).unwrap();
    assert_eq!(serde_json::to_string(&c).unwrap(), serde_json::to_string(&d).unwrap());
}

#[test]
fn qat_is_at_least_as_confident_as_ptq_on_seen_faults() {
    let f = fixture();
    let (qat, _) = qat_finetune(&f.model, &f.ds, &QatConfig::after_pretraining(&f.config, 4)).unwrap();
    let ptq = post_training_quantize(&f.model, 4, &calibration_inputs(&f.ds), 6).unwrap();
    let rq = evaluate(&qat.model, Some(&qat.plan), &f.ds, &opts()).unwrap();
    let rp = evaluate(&ptq.model, Some(&ptq.plan), &f.ds, &opts()).unwrap();
    for fault in Fault::SEEN {
        let (a, b) = (median_confidence(&rq, fault), median_confidence(&rp, fault));
        assert!(a >= b, "fault {}: QAT median {a} below PTQ median {b}", fault.label());
    }
}

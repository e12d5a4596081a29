//! Pretrain once, then compare quantization-aware fine-tuning with
//! post-training quantization at the same bit width.

use gearqat::bnn::{train_fp32, Architecture, BnnModel, TrainConfig};
use gearqat::qat::{calibration_inputs, fidelity_epsilon, post_training_quantize, qat_finetune, QatConfig};
use gearqat::synth::{build_dataset, DatasetConfig, Split};
use gearqat::uncertainty::{evaluate, EvalOptions};

fn main() -> gearqat::Result<()> {
    let bits: u32 = std::env::args().nth(1).map_or(Ok(4), |s| s.parse()).map_err(|_| gearqat::Error::Usage("bits must be an integer".into()))?;
    let ds = build_dataset(&DatasetConfig { master_seed: 2, ..DatasetConfig::default() })?;
    let config = TrainConfig { seed: 2, ..TrainConfig::default() };
    let model = BnnModel::init(Architecture::desk_scale(ds.window_len()), config.prior_sigma, config.seed)?;
    let (pretrained, _) = train_fp32(model, &ds, &config)?;

    let (qat, history) = qat_finetune(&pretrained, &ds, &QatConfig::after_pretraining(&config, bits))?;
    println!("QAT ranges froze after epoch {}", history.last_calibration_epoch);
    let ptq = post_training_quantize(&pretrained, bits, &calibration_inputs(&ds), 2)?;

    let opts = EvalOptions { mc_samples: 32, ..EvalOptions::default() };
    let inputs: Vec<_> = ds.split(Split::TestSeen).map(|w| ds.stats.apply(w)).collect();
    let fp = evaluate(&pretrained, None, &ds, &opts)?;
    println!("fp32       accuracy {:.3}  ece {:.3}", fp.accuracy, fp.ece);
    for (name, q) in [("qat", &qat), ("ptq", &ptq)] {
        let r = evaluate(&q.model, Some(&q.plan), &ds, &opts)?;
        let eps = fidelity_epsilon(&pretrained, None, &q.model, Some(&q.plan), &inputs, 16, 1)?;
        println!("{name} {bits:>2}-bit accuracy {:.3}  ece {:.3}  epsilon {:.4}", r.accuracy, r.ece, eps);
    }
    Ok(())
}

//! Train the desk-scale variational network on a small synthetic dataset and
//! print the per-epoch history.

use gearqat::bnn::{train_fp32, Architecture, BnnModel, TrainConfig};
use gearqat::synth::{build_dataset, DatasetConfig};
use gearqat::uncertainty::{evaluate, EvalOptions};

fn main() -> gearqat::Result<()> {
    let ds = build_dataset(&DatasetConfig { train_per_class: 20, master_seed: 3, ..DatasetConfig::default() })?;
    let config = TrainConfig { seed: 3, ..TrainConfig::default() };
    let model = BnnModel::init(Architecture::desk_scale(ds.window_len()), config.prior_sigma, config.seed)?;
    println!("{} weights, {} trainable parameters", model.weight_count(), model.parameter_count());
    let (model, history) = train_fp32(model, &ds, &config)?;
    for e in &history.epochs {
        println!("epoch {:>2}  loss {:.4}  kl weight {:.4}  val accuracy {:.3}", e.epoch, e.mean_loss, e.kl_weight, e.val_accuracy);
    }
    let report = evaluate(&model, None, &ds, &EvalOptions { mc_samples: 16, ..EvalOptions::default() })?;
    println!("seen-test accuracy {:.3}, ECE {:.3}", report.accuracy, report.ece);
    Ok(())
}

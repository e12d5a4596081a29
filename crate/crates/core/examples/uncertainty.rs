//! Split predictive entropy into aleatoric and epistemic parts, first on
//! hand-built Monte-Carlo outputs, then on a trained model under noise.

use gearqat::bnn::{train_fp32, Architecture, BnnModel, TrainConfig};
use gearqat::synth::{build_dataset, DatasetConfig};
use gearqat::tensor::Tensor;
use gearqat::uncertainty::{decompose_uncertainty, evaluate, EvalOptions};

fn main() -> gearqat::Result<()> {
    let cases = [
        ("agreeing, unsure", vec![0.4, 0.3, 0.3, 0.4, 0.3, 0.3]),
        ("disagreeing, sure", vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    ];
    for (name, rows) in cases {
        let (total, aleatoric, epistemic) = decompose_uncertainty(&Tensor::new(vec![2, 3], rows)?)?;
        println!("{name:<18} total {total:.4} = aleatoric {aleatoric:.4} + epistemic {epistemic:.4}");
    }

    let ds = build_dataset(&DatasetConfig { master_seed: 5, ..DatasetConfig::default() })?;
    let config = TrainConfig { seed: 5, ..TrainConfig::default() };
    let model = BnnModel::init(Architecture::desk_scale(ds.window_len()), config.prior_sigma, config.seed)?;
    let (model, _) = train_fp32(model, &ds, &config)?;
    for noise in [None, Some(0.0), Some(-20.0)] {
        let r = evaluate(&model, None, &ds, &EvalOptions { mc_samples: 32, seed: 1, noise_snr_db: noise })?;
        let unseen = r.unseen.expect("unseen split");
        println!(
            "noise {:>6}: accuracy {:.3}  aleatoric {:.4}  epistemic seen {:.4} / unseen {:.4}",
            r.noise.to_string(),
            r.accuracy,
            r.seen.aleatoric,
            r.seen.epistemic,
            unseen.epistemic
        );
    }
    Ok(())
}

//! The `gearqat` command line.
//!
//! Every command computes its outputs in memory first, then writes them
//! atomically together with a [`RunManifest`]. With `--verify` nothing is
//! written: the outputs are recomputed and checked, along with the inputs,
//! against the manifest of the earlier run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bnn::{train_fp32, Architecture, BnnModel, TrainConfig};
use crate::checkpoint::Checkpoint;
use crate::io::write_atomic;
use crate::manifest::{timestamp, FileRecord, RunManifest, TOOL_NAME};
use crate::qat::{calibration_inputs, fidelity_epsilon, post_training_quantize, qat_finetune, QatConfig};
use crate::quant::{is_supported_bits, SUPPORTED_BITS};
use crate::synth::{build_dataset, dataset_files, encode_dataset, load_dataset, Dataset, DatasetConfig, Snr, Split};
use crate::tradeoff::{
    compute_cost, memory_footprint, read_sweep, select_bitwidth, sweep_bitwidths, sweep_to_csv, SelectionConstraints,
    SweepConfig,
};
use crate::uncertainty::{evaluate, EvalOptions, EvalReport};
use crate::{Error, Result};

/// Default data directory when `--data`/`--out` is not given.
pub const DATA_DIR_ENV: &str = "GEARQAT_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "gearqat", version, about = "Quantization-aware training of Bayesian gear-fault classifiers")]
pub struct Cli {
    /// Recompute outputs and check them and the inputs against the saved manifest; write nothing.
    #[arg(long, global = true)]
    pub verify: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the full-precision variational network.
    Train(TrainArgs),
    /// Quantization-aware fine-tuning of a trained checkpoint.
    Qat(QuantArgs),
    /// Post-training quantization of a trained checkpoint.
    Ptq(PtqArgs),
    /// Monte-Carlo evaluation with uncertainty decomposition.
    Eval(EvalArgs),
    /// Largest L2 gap between two models' predictive distributions.
    Fidelity(FidelityArgs),
    /// Fine-tune and evaluate at several bit widths.
    Sweep(SweepArgs),
    /// Cheapest bit width meeting accuracy and calibration limits.
    Select(SelectArgs),
    /// Run a full pipeline and emit plot-ready data for one figure.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub unseen_per_class: usize,
    /// SNR in dB applied to every generated window; clean when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub snr: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub window_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub kl_max: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on clean windows only.
    #[arg(long)]
    pub no_augment: bool,
    /// Leading epochs before the noisy copies join.
    #[arg(long)]
    pub clean_warmup: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QuantArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub bits: u32,
    #[arg(long)]
    pub out: PathBuf,
    /// Fine-tuning epochs; a quarter of the pre-training epochs by default.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PtqArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long)]
    pub bits: u32,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub mc: usize,
    /// Corrupt test windows at this SNR (dB) before scoring.
    #[arg(long, allow_negative_numbers = true)]
    pub noise_snr: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one (confidence, correct) row per seen test window.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FidelityArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub quant: PathBuf,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub mc: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    pub bits: Vec<u32>,
    #[arg(long, default_value_t = 64)]
    pub mc: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long)]
    pub a_min: f64,
    #[arg(long)]
    pub u_max: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fig4a,
    Fig4b,
    Fig5,
    Fig7,
    Fig8,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig4a => "fig4a",
            Experiment::Fig4b => "fig4b",
            Experiment::Fig5 => "fig5",
            Experiment::Fig7 => "fig7",
            Experiment::Fig8 => "fig8",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproduceArgs {
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

/// What a command produced, before anything touches the disk.
pub struct Outcome {
    pub seed: u64,
    pub resolved: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<(PathBuf, Vec<u8>)>,
    /// Where the manifest goes; `None` when the command wrote nothing.
    pub manifest: Option<PathBuf>,
    /// Human-readable result for stdout.
    pub summary: String,
}

/// `<out>.manifest.json` beside a single-file output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| OsString::from("out"));
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

fn check_bits(bits: u32) -> Result<()> {
    if is_supported_bits(bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported bit width {bits}; expected 2 to 32")))
    }
}

fn check_mc(mc: usize) -> Result<()> {
    if mc == 0 {
        return Err(Error::Config("--mc must be positive".into()));
    }
    Ok(())
}

/// Dataset plus the checkpoint's standardization, which the model was trained with.
fn dataset_for(dir: &Path, ck: &Checkpoint) -> Result<Dataset> {
    let mut ds = load_dataset(dir)?;
    ds.stats = ck.stats.clone();
    Ok(ds)
}

fn unquantized(ck: &Checkpoint, path: &Path) -> Result<()> {
    if ck.plan.is_some() {
        return Err(Error::Config(format!("{} is already quantized", path.display())));
    }
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let config = DatasetConfig {
        train_per_class: a.train_per_class,
        val_per_class: a.val_per_class,
        test_seen_per_class: a.test_per_class,
        test_unseen_per_class: a.unseen_per_class,
        window_len: a.window_len,
        snr: a.snr.map_or(Snr::Clean, Snr::Db),
        master_seed: a.seed,
        ..DatasetConfig::default()
    };
    config.validate()?;
    let ds = build_dataset(&config)?;
    let outputs = encode_dataset(&ds)?.into_iter().map(|(name, bytes)| (a.out.join(name), bytes)).collect();
    let summary = Split::ALL.iter().map(|&s| format!("{} {}", s.name(), ds.count(s))).collect::<Vec<_>>().join(", ");
    Ok(Outcome {
        seed: a.seed,
        resolved: json(&config)?,
        inputs: vec![],
        outputs,
        manifest: Some(a.out.join("gen-data.manifest.json")),
        summary: format!("dataset at {}: {summary}", a.out.display()),
    })
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        kl_max: a.kl_max.unwrap_or(defaults.kl_max),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        augment_snr_db: if a.no_augment { vec![] } else { defaults.augment_snr_db.clone() },
        clean_warmup_epochs: a.clean_warmup.unwrap_or(defaults.clean_warmup_epochs),
        ..defaults
    };
    config.validate()?;
    let ds = load_dataset(&a.data)?;
    let model = BnnModel::init(Architecture::desk_scale(ds.window_len()), config.prior_sigma, config.seed)?;
    let (model, history) = train_fp32(model, &ds, &config)?;
    let val = history.epochs.last().map_or(f64::NAN, |e| e.val_accuracy);
    let ck = Checkpoint::new(model, ds.stats.clone(), config.clone(), None);
    Ok(Outcome {
        seed: a.seed,
        resolved: json(&config)?,
        inputs: dataset_files(&a.data),
        outputs: vec![(a.out.clone(), ck.to_bytes()?)],
        manifest: Some(manifest_path_for(&a.out)),
        summary: format!("trained {} epochs, final validation accuracy {val:.4}", config.epochs),
    })
}

fn qat(a: &QuantArgs) -> Result<Outcome> {
    check_bits(a.bits)?;
    let ck = Checkpoint::load(&a.input)?;
    unquantized(&ck, &a.input)?;
    let mut config = QatConfig::after_pretraining(&ck.train_config, a.bits);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.learning_rate = a.lr.unwrap_or(config.learning_rate);
    config.validate()?;
    let ds = dataset_for(&a.data, &ck)?;
    let (q, history) = qat_finetune(&ck.model, &ds, &config)?;
    let val = history.train.epochs.last().map_or(f64::NAN, |e| e.val_accuracy);
    let out = Checkpoint::new(q.model, ck.stats.clone(), ck.train_config.clone(), Some(q.plan));
    let mut inputs = vec![a.input.clone()];
    inputs.extend(dataset_files(&a.data));
    Ok(Outcome {
        seed: ck.train_config.seed,
        resolved: json(&config)?,
        inputs,
        outputs: vec![(a.out.clone(), out.to_bytes()?)],
        manifest: Some(manifest_path_for(&a.out)),
        summary: format!("QAT at {} bits, {} epochs, final validation accuracy {val:.4}", a.bits, config.epochs),
    })
}

fn ptq(a: &PtqArgs) -> Result<Outcome> {
    check_bits(a.bits)?;
    let ck = Checkpoint::load(&a.input)?;
    unquantized(&ck, &a.input)?;
    let ds = dataset_for(&a.data, &ck)?;
    let q = post_training_quantize(&ck.model, a.bits, &calibration_inputs(&ds), a.seed)?;
    let out = Checkpoint::new(q.model, ck.stats.clone(), ck.train_config.clone(), Some(q.plan));
    let mut inputs = vec![a.input.clone()];
    inputs.extend(dataset_files(&a.data));
    Ok(Outcome {
        seed: a.seed,
        resolved: serde_json::json!({ "bits": a.bits, "calibration_windows": ds.count(Split::Train) }),
        inputs,
        outputs: vec![(a.out.clone(), out.to_bytes()?)],
        manifest: Some(manifest_path_for(&a.out)),
        summary: format!("post-training quantization at {} bits", a.bits),
    })
}

/// `(confidence, correct)` rows for external reliability plots.
pub fn predictions_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fault", "predicted_class", "confidence", "correct"])?;
    for p in &report.predictions {
        w.write_record([
            p.fault.label().to_string(),
            p.predicted_class.to_string(),
            p.confidence.to_string(),
            u8::from(p.correct).to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    check_mc(a.mc)?;
    let ck = Checkpoint::load(&a.model)?;
    let ds = dataset_for(&a.data, &ck)?;
    let options = EvalOptions { mc_samples: a.mc, seed: a.seed, noise_snr_db: a.noise_snr };
    let report = evaluate(&ck.model, ck.plan.as_ref(), &ds, &options)?;
    let mut outputs = vec![(a.out.clone(), serde_json::to_vec_pretty(&report)?)];
    if let Some(p) = &a.predictions {
        outputs.push((p.clone(), predictions_csv(&report)?));
    }
    let mut inputs = vec![a.model.clone()];
    inputs.extend(dataset_files(&a.data));
    Ok(Outcome {
        seed: a.seed,
        resolved: json(&options)?,
        inputs,
        outputs,
        manifest: Some(manifest_path_for(&a.out)),
        summary: format!(
            "accuracy {:.4} ({}/{}), ECE {:.4}, seen epistemic {:.5}",
            report.accuracy, report.correct, report.total, report.ece, report.seen.epistemic
        ),
    })
}

#[derive(Debug, Serialize)]
struct FidelityRecord {
    epsilon: f64,
    windows: usize,
    mc_samples: usize,
    seed: u64,
}

fn fidelity(a: &FidelityArgs) -> Result<Outcome> {
    check_mc(a.mc)?;
    let reference = Checkpoint::load(&a.reference)?;
    let candidate = Checkpoint::load(&a.quant)?;
    let ds = dataset_for(&a.data, &reference)?;
    let inputs: Vec<_> = ds.split(Split::TestSeen).map(|w| ds.stats.apply(w)).collect();
    let epsilon = fidelity_epsilon(
        &reference.model,
        reference.plan.as_ref(),
        &candidate.model,
        candidate.plan.as_ref(),
        &inputs,
        a.mc,
        a.seed,
    )?;
    let record = FidelityRecord { epsilon, windows: inputs.len(), mc_samples: a.mc, seed: a.seed };
    let mut files = vec![a.reference.clone(), a.quant.clone()];
    files.extend(dataset_files(&a.data));
    let outputs = match &a.out {
        Some(p) => vec![(p.clone(), serde_json::to_vec_pretty(&record)?)],
        None => vec![],
    };
    Ok(Outcome {
        seed: a.seed,
        resolved: json(&record)?,
        inputs: files,
        outputs,
        manifest: a.out.as_deref().map(manifest_path_for),
        summary: format!("epsilon {epsilon:.6} over {} windows", inputs.len()),
    })
}

fn sweep(a: &SweepArgs) -> Result<Outcome> {
    check_mc(a.mc)?;
    if a.bits.is_empty() {
        return Err(Error::Config("--bits must list at least one bit width".into()));
    }
    for &b in &a.bits {
        check_bits(b)?;
    }
    let ck = Checkpoint::load(&a.input)?;
    unquantized(&ck, &a.input)?;
    let ds = dataset_for(&a.data, &ck)?;
    let config = SweepConfig::new(ck.train_config.clone(), EvalOptions { mc_samples: a.mc, seed: a.seed, noise_snr_db: None });
    let reports = sweep_bitwidths(&ck.model, &ds, &a.bits, &config)?;
    let summary = reports.iter().map(|r| format!("b={} accuracy {:.4} ece {:.4}", r.bits, r.accuracy, r.ece)).collect::<Vec<_>>();
    let mut inputs = vec![a.input.clone()];
    inputs.extend(dataset_files(&a.data));
    Ok(Outcome {
        seed: a.seed,
        resolved: json(&config)?,
        inputs,
        outputs: vec![(a.out.clone(), sweep_to_csv(&reports)?)],
        manifest: Some(manifest_path_for(&a.out)),
        summary: summary.join("\n"),
    })
}

fn select(a: &SelectArgs) -> Result<Outcome> {
    if !a.a_min.is_finite() || !a.u_max.is_finite() {
        return Err(Error::Config("--a-min and --u-max must be finite".into()));
    }
    let constraints = SelectionConstraints { a_min: a.a_min, u_max: a.u_max };
    let reports = read_sweep(&a.sweep)?;
    let selection = select_bitwidth(&reports, &constraints)?;
    let summary = match &selection {
        crate::tradeoff::Selection::Selected { bits, report } => {
            format!("selected b={bits} (accuracy {:.4}, ece {:.4}, cost {})", report.accuracy, report.ece, report.cost)
        }
        crate::tradeoff::Selection::Infeasible { closest } => {
            format!("infeasible; closest is b={} (accuracy {:.4}, ece {:.4})", closest.bits, closest.accuracy, closest.ece)
        }
    };
    let outputs = match &a.out {
        Some(p) => vec![(p.clone(), serde_json::to_vec_pretty(&selection)?)],
        None => vec![],
    };
    Ok(Outcome {
        seed: reports.first().map_or(0, |r| r.seed),
        resolved: json(&constraints)?,
        inputs: vec![a.sweep.clone()],
        outputs,
        manifest: a.out.as_deref().map(manifest_path_for),
        summary,
    })
}

/// Dataset and pretrained model with every setting at its default.
pub fn pretrained_pipeline(seed: u64) -> Result<(Dataset, BnnModel, TrainConfig)> {
    let ds = build_dataset(&DatasetConfig { master_seed: seed, ..DatasetConfig::default() })?;
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let model = BnnModel::init(Architecture::desk_scale(ds.window_len()), config.prior_sigma, seed)?;
    let (model, _) = train_fp32(model, &ds, &config)?;
    Ok((ds, model, config))
}

fn csv_rows<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize)]
struct ConfidenceRow {
    method: &'static str,
    bits: u32,
    fault: u8,
    accuracy: f64,
    min: f64,
    q25: f64,
    median: f64,
    q75: f64,
    max: f64,
}

#[derive(Serialize)]
struct UncertaintyRow {
    model: &'static str,
    condition: String,
    split: &'static str,
    accuracy: f64,
    total: f64,
    aleatoric: f64,
    epistemic: f64,
}

#[derive(Serialize)]
struct CoverageRow {
    model: &'static str,
    condition: String,
    level: f64,
    coverage: f64,
}

#[derive(Serialize)]
struct CostRow {
    weight_bits: u32,
    activation_bits: u32,
    cost: f64,
    memory_payload_bytes: u64,
    memory_total_bytes: u64,
}

/// SNR of the corrupted condition in the noise-robustness bundle.
pub const NOISY_SNR_DB: f64 = -20.0;

/// Files of one experiment bundle, named relative to the output directory.
pub fn reproduce(experiment: Experiment, seed: u64) -> Result<Vec<(String, Vec<u8>)>> {
    let eval = EvalOptions { seed, ..EvalOptions::default() };
    let name = experiment.name();
    match experiment {
        Experiment::Fig5 => {
            let arch = Architecture::desk_scale(crate::synth::DEFAULT_WINDOW_LEN);
            let mut rows = Vec::new();
            for &bw in &SUPPORTED_BITS {
                let mem = memory_footprint(&arch, bw)?;
                for &ba in &SUPPORTED_BITS {
                    rows.push(CostRow {
                        weight_bits: bw,
                        activation_bits: ba,
                        cost: compute_cost(&arch, bw, ba)?,
                        memory_payload_bytes: mem.payload_bytes,
                        memory_total_bytes: mem.total_bytes(),
                    });
                }
            }
            Ok(vec![(format!("{name}.csv"), csv_rows(&rows)?)])
        }
        Experiment::Fig7 | Experiment::Fig8 => {
            let bits: &[u32] = if experiment == Experiment::Fig7 { &[4, 8, 16, 32] } else { &[2, 3, 4, 8, 32] };
            let (ds, model, train) = pretrained_pipeline(seed)?;
            let reports = sweep_bitwidths(&model, &ds, bits, &SweepConfig::new(train, eval))?;
            Ok(vec![(format!("{name}.csv"), sweep_to_csv(&reports)?)])
        }
        Experiment::Fig4a => {
            let (ds, model, train) = pretrained_pipeline(seed)?;
            let calibration = calibration_inputs(&ds);
            let mut rows = Vec::new();
            for bits in [4, 8] {
                let (q, _) = qat_finetune(&model, &ds, &QatConfig::after_pretraining(&train, bits))?;
                let p = post_training_quantize(&model, bits, &calibration, seed)?;
                for (method, m) in [("qat", &q), ("ptq", &p)] {
                    let report = evaluate(&m.model, Some(&m.plan), &ds, &eval)?;
                    for fc in &report.confidence_by_fault {
                        let c = fc.confidence;
                        rows.push(ConfidenceRow {
                            method,
                            bits,
                            fault: fc.fault.label(),
                            accuracy: report.accuracy,
                            min: c.min,
                            q25: c.q25,
                            median: c.median,
                            q75: c.q75,
                            max: c.max,
                        });
                    }
                }
            }
            Ok(vec![(format!("{name}.csv"), csv_rows(&rows)?)])
        }
        Experiment::Fig4b => {
            let (ds, model, train) = pretrained_pipeline(seed)?;
            let (q, _) = qat_finetune(&model, &ds, &QatConfig::after_pretraining(&train, 8))?;
            let mut unc = Vec::new();
            let mut cov = Vec::new();
            for (label, m, plan) in [("fp32", &model, None), ("qat8", &q.model, Some(&q.plan))] {
                for noise in [None, Some(NOISY_SNR_DB)] {
                    let report = evaluate(m, plan, &ds, &EvalOptions { noise_snr_db: noise, ..eval })?;
                    let condition = report.noise.to_string();
                    let mut splits = vec![("seen", report.seen)];
                    splits.extend(report.unseen.map(|u| ("unseen", u)));
                    for (split, u) in splits {
                        unc.push(UncertaintyRow {
                            model: label,
                            condition: condition.clone(),
                            split,
                            accuracy: report.accuracy,
                            total: u.total,
                            aleatoric: u.aleatoric,
                            epistemic: u.epistemic,
                        });
                    }
                    for p in &report.coverage {
                        cov.push(CoverageRow { model: label, condition: condition.clone(), level: p.level, coverage: p.coverage });
                    }
                }
            }
            Ok(vec![(format!("{name}_uncertainty.csv"), csv_rows(&unc)?), (format!("{name}_coverage.csv"), csv_rows(&cov)?)])
        }
    }
}

fn reproduce_cmd(a: &ReproduceArgs) -> Result<Outcome> {
    let files = reproduce(a.experiment, a.seed)?;
    let outputs: Vec<_> = files.into_iter().map(|(name, bytes)| (a.out.join(name), bytes)).collect();
    let summary = outputs.iter().map(|(p, _)| p.display().to_string()).collect::<Vec<_>>().join(", ");
    Ok(Outcome {
        seed: a.seed,
        resolved: serde_json::json!({ "experiment": a.experiment, "seed": a.seed }),
        inputs: vec![],
        outputs,
        manifest: Some(a.out.join(format!("{}.manifest.json", a.experiment.name()))),
        summary: format!("wrote {summary}"),
    })
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Qat(_) => "qat",
            Command::Ptq(_) => "ptq",
            Command::Eval(_) => "eval",
            Command::Fidelity(_) => "fidelity",
            Command::Sweep(_) => "sweep",
            Command::Select(_) => "select",
            Command::Reproduce(_) => "reproduce",
        }
    }

    /// Runs the command without writing anything.
    pub fn execute(&self) -> Result<Outcome> {
        match self {
            Command::GenData(a) => gen_data(a),
            Command::Train(a) => train(a),
            Command::Qat(a) => qat(a),
            Command::Ptq(a) => ptq(a),
            Command::Eval(a) => eval(a),
            Command::Fidelity(a) => fidelity(a),
            Command::Sweep(a) => sweep(a),
            Command::Select(a) => select(a),
            Command::Reproduce(a) => reproduce_cmd(a),
        }
    }
}

fn records(inputs: &[PathBuf]) -> Result<Vec<FileRecord>> {
    inputs.iter().map(|p| FileRecord::of_file(p)).collect()
}

/// Executes a parsed command line and returns the summary to print.
pub fn run_cli(cli: &Cli, argv: Vec<String>) -> Result<String> {
    let started = SystemTime::now();
    let outcome = cli.command.execute()?;
    let inputs = records(&outcome.inputs)?;
    let outputs: Vec<FileRecord> = outcome.outputs.iter().map(|(p, b)| FileRecord::of_bytes(p, b)).collect();
    if cli.verify {
        let path = outcome
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Usage("--verify needs a command that writes outputs".into()))?;
        RunManifest::load(path)?.verify(&inputs, &outputs)?;
        return Ok(format!("{}\nverified {} inputs and {} outputs against {}", outcome.summary, inputs.len(), outputs.len(), path.display()));
    }
    for (path, bytes) in &outcome.outputs {
        write_atomic(path, bytes)?;
    }
    if let Some(path) = &outcome.manifest {
        let manifest = RunManifest {
            tool: TOOL_NAME.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cli.command.name().into(),
            argv,
            seed: outcome.seed,
            arguments: json(&cli.command)?,
            resolved: outcome.resolved,
            inputs,
            outputs,
            started_at: timestamp(started),
            finished_at: timestamp(SystemTime::now()),
        };
        manifest.save(path)?;
    }
    Ok(outcome.summary)
}

/// Parses `argv` (program name first), runs, prints, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Error::Usage(String::new()).exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run_cli(&cli, argv) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(manifest_path_for(Path::new("a/model.ckpt")), PathBuf::from("a/model.ckpt.manifest.json"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["gearqat", "frobnicate"]), 2);
        assert_eq!(run(["gearqat", "select", "--sweep", "x.csv", "--a-min", "0.9", "--u-max", "0.1", "--bogus"]), 2);
        assert_eq!(run(["gearqat", "reproduce", "--experiment", "fig9"]), 2);
    }

    #[test]
    fn bad_bit_width_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("q.ckpt");
        let code = run([
            "gearqat".as_ref(),
            "ptq".as_ref(),
            "--in".as_ref(),
            dir.path().join("missing.ckpt").as_os_str(),
            "--bits".as_ref(),
            "1".as_ref(),
            "--out".as_ref(),
            out.as_os_str(),
        ]);
        assert_eq!(code, 3);
        assert!(!out.exists());
    }

    #[test]
    fn parses_bits_list_and_negative_snr() {
        let cli = Cli::try_parse_from(["gearqat", "eval", "--model", "m", "--out", "r.json", "--noise-snr", "-20"]).unwrap();
        match cli.command {
            Command::Eval(a) => assert_eq!(a.noise_snr, Some(-20.0)),
            c => panic!("{c:?}"),
        }
        let cli = Cli::try_parse_from(["gearqat", "sweep", "--in", "m", "--bits", "4,8", "--out", "s.csv"]).unwrap();
        match cli.command {
            Command::Sweep(a) => assert_eq!(a.bits, vec![4, 8]),
            c => panic!("{c:?}"),
        }
    }
}

//! Synthetic five-channel drive signals for the five gear-fault classes.
//!
//! Every window shares a per-channel baseline (DC offset plus a sinusoid at
//! the shaft rotation frequency, which scales with load) and then receives a
//! fault-specific imprint:
//!
//! | fault | imprint |
//! |-------|---------|
//! | 1 missing tooth | one sharp impulse per rotation on torque and currents |
//! | 2 chipped tooth | a weaker double impulse per rotation |
//! | 3 root crack    | amplitude modulation of the gear-mesh harmonic |
//! | 4 surface crack | intermittent broadband high-frequency bursts |
//! | 5 eccentricity  | slow sinusoidal modulation of the speed channel |
//!
//! Faults 1 to 3 are the "seen" classes; 4 and 5 only ever appear in the
//! unseen test split.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 5;
pub const CHANNEL_NAMES: [&str; CHANNELS] =
    ["speed", "motor_torque", "dc_link_voltage", "active_current", "reactive_current"];
pub const SAMPLE_RATE_HZ: f64 = 5000.0;
pub const DEFAULT_WINDOW_LEN: usize = 256;
pub const DEFAULT_LOADS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const DATASET_FORMAT: &str = "gearqat-dataset/1";

/// Shaft rotation frequency at full load.
const ROTATION_HZ_FULL_LOAD: f64 = 250.0;
/// Gear-mesh harmonic order relative to the shaft frequency.
const MESH_ORDER: f64 = 4.0;

const SPEED: usize = 0;
const TORQUE: usize = 1;
const DC_LINK: usize = 2;
const I_ACTIVE: usize = 3;
const I_REACTIVE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Fault {
    MissingTooth = 1,
    ChippedTooth = 2,
    RootCrack = 3,
    SurfaceCrack = 4,
    Eccentricity = 5,
}

impl Fault {
    pub const ALL: [Fault; 5] =
        [Fault::MissingTooth, Fault::ChippedTooth, Fault::RootCrack, Fault::SurfaceCrack, Fault::Eccentricity];
    pub const SEEN: [Fault; 3] = [Fault::MissingTooth, Fault::ChippedTooth, Fault::RootCrack];
    pub const UNSEEN: [Fault; 2] = [Fault::SurfaceCrack, Fault::Eccentricity];

    pub fn from_label(label: u8) -> Result<Self> {
        Self::ALL
            .get((label as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Domain(format!("fault label must be in 1..=5, got {label}")))
    }

    pub fn label(self) -> u8 {
        self as u8
    }

    /// Zero-based index into the three-way classifier head, for seen faults.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Fault::MissingTooth => Some(0),
            Fault::ChippedTooth => Some(1),
            Fault::RootCrack => Some(2),
            _ => None,
        }
    }

    pub fn is_seen(self) -> bool {
        self.class_index().is_some()
    }
}

impl Serialize for Fault {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.label())
    }
}

impl<'de> Deserialize<'de> for Fault {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Fault::from_label(v).map_err(serde::de::Error::custom)
    }
}

/// Signal-to-noise ratio of a window: noiseless, or a level in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Clean => f.write_str("clean"),
            Snr::Db(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        let v: f64 = s.parse().map_err(|_| Error::Config(format!("bad SNR {s:?}; use dB or \"clean\"")))?;
        if !v.is_finite() {
            return Err(Error::Config(format!("SNR must be finite, got {s}")));
        }
        Ok(Snr::Db(v))
    }
}

impl Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Snr::Clean => s.serialize_str("clean"),
            Snr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr::Db(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    /// `5 × T`, channel-major.
    pub channels: Tensor,
    pub label: Fault,
    pub load: f64,
    pub snr: Snr,
}

impl SignalWindow {
    pub fn len(&self) -> usize {
        self.channels.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let t = self.len();
        &self.channels.data()[c * t..(c + 1) * t]
    }
}

fn gaussian_pulse(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

/// One window of fault `fault` at `load` with window length `len`.
pub fn generate_fault_window_len(
    fault: Fault,
    load: f64,
    snr: Snr,
    rng: &RngStream,
    len: usize,
) -> Result<SignalWindow> {
    if !(0.0..=1.0).contains(&load) {
        return Err(Error::Domain(format!("load must be in [0, 1], got {load}")));
    }
    if len < 16 {
        return Err(Error::Domain(format!("window length must be at least 16, got {len}")));
    }
    let draws = rng.derive(0).uniforms(8);
    let phase = 2.0 * std::f64::consts::PI * draws[0];
    let mesh_phase = 2.0 * std::f64::consts::PI * draws[1];
    let gain = 0.9 + 0.2 * draws[2];
    let speed_factor = 0.5 + 0.5 * load;
    let f_rot = ROTATION_HZ_FULL_LOAD * speed_factor;
    let w_rot = 2.0 * std::f64::consts::PI * f_rot;
    let period = SAMPLE_RATE_HZ / f_rot;
    // Position of the first impulse within the rotation, in samples.
    let offset = draws[3] * period;

    let mut x = vec![0.0; CHANNELS * len];
    let dc = [speed_factor, 0.1 + 0.2 * load, 1.0, 0.1 + 0.2 * load, 0.15];
    let fundamental = [0.02, 0.1, 0.05, 0.1, 0.05];
    let mesh = [0.0, 0.1, 0.0, 0.08, 0.05];
    for c in 0..CHANNELS {
        for n in 0..len {
            let t = n as f64 / SAMPLE_RATE_HZ;
            x[c * len + n] = dc[c]
                + fundamental[c] * (w_rot * t + phase).sin()
                + mesh[c] * (MESH_ORDER * w_rot * t + mesh_phase).sin();
        }
    }

    let rotations = (len as f64 / period).ceil() as usize + 1;
    let impulse_sites = [(TORQUE, 1.0), (I_ACTIVE, 0.8), (I_REACTIVE, 0.6)];
    match fault {
        Fault::MissingTooth => {
            for k in 0..rotations {
                let center = offset + k as f64 * period;
                for &(c, a) in &impulse_sites {
                    for n in 0..len {
                        x[c * len + n] += gain * 2.0 * a * gaussian_pulse(n as f64, center, 1.5);
                    }
                }
            }
        }
        Fault::ChippedTooth => {
            for k in 0..rotations {
                let center = offset + k as f64 * period;
                for &(c, a) in &impulse_sites {
                    for n in 0..len {
                        let t = n as f64;
                        x[c * len + n] +=
                            gain * 1.5 * a * (gaussian_pulse(t, center, 1.0) - gaussian_pulse(t, center + 8.0, 1.0));
                    }
                }
            }
        }
        Fault::RootCrack => {
            for &(c, a) in &impulse_sites {
                for n in 0..len {
                    let t = n as f64 / SAMPLE_RATE_HZ;
                    let carrier = (MESH_ORDER * w_rot * t + mesh_phase).sin();
                    let envelope = 1.0 + (w_rot * t + phase).sin();
                    x[c * len + n] += gain * 0.5 * a * envelope * carrier;
                }
            }
        }
        Fault::SurfaceCrack => {
            let bursts = 2 + (draws[4] * 3.0) as usize;
            let noise = rng.derive(1).normals(CHANNELS * len);
            let starts = rng.derive(2).uniforms(bursts);
            for (b, s) in starts.iter().enumerate() {
                let start = (s * (len - 12) as f64) as usize;
                let dur = 8 + (b % 3) * 2;
                for &(c, a) in &impulse_sites {
                    for n in start..(start + dur).min(len) {
                        // Differenced white noise keeps the burst energy at high frequency.
                        let hf = noise[c * len + n] - noise[c * len + n.saturating_sub(1)];
                        x[c * len + n] += gain * 2.5 * a * hf;
                    }
                }
            }
        }
        Fault::Eccentricity => {
            let slow = 2.0 * std::f64::consts::PI * (f_rot / 4.0);
            for n in 0..len {
                let t = n as f64 / SAMPLE_RATE_HZ;
                let m = (slow * t + mesh_phase).sin();
                x[SPEED * len + n] += gain * 0.6 * speed_factor * m;
                x[DC_LINK * len + n] += gain * 0.3 * m;
            }
        }
    }

    let window = SignalWindow {
        channels: Tensor::new(vec![CHANNELS, len], x)?,
        label: fault,
        load,
        snr: Snr::Clean,
    };
    match snr {
        Snr::Clean => Ok(window),
        Snr::Db(db) => inject_noise(&window, db, &rng.derive(3)),
    }
}

/// One window at the default length.
pub fn generate_fault_window(label: u8, load: f64, snr: Snr, rng: &RngStream) -> Result<SignalWindow> {
    generate_fault_window_len(Fault::from_label(label)?, load, snr, rng, DEFAULT_WINDOW_LEN)
}

/// Adds white Gaussian noise to every channel so that the per-channel ratio of
/// mean-square signal to mean-square noise is exactly `snr_db`. The drawn
/// noise is rescaled to the target power over the window. Repeated calls
/// compose additively; the window records the most recent level.
pub fn inject_noise(window: &SignalWindow, snr_db: f64, rng: &RngStream) -> Result<SignalWindow> {
    if !snr_db.is_finite() {
        return Err(Error::Domain(format!("SNR must be finite, got {snr_db}")));
    }
    let len = window.len();
    let mut out = window.channels.clone();
    for c in 0..CHANNELS {
        let sig = window.channel(c);
        let p_signal = sig.iter().map(|v| v * v).sum::<f64>() / len as f64;
        if p_signal == 0.0 {
            return Err(Error::Domain(format!("channel {c} has zero power; SNR undefined")));
        }
        let p_noise = p_signal / 10f64.powf(snr_db / 10.0);
        let z = rng.derive(c as u64).normals(len);
        let pz = z.iter().map(|v| v * v).sum::<f64>() / len as f64;
        let k = (p_noise / pz).sqrt();
        for (o, zi) in out.data_mut()[c * len..(c + 1) * len].iter_mut().zip(&z) {
            *o += k * zi;
        }
    }
    Ok(SignalWindow { channels: out, label: window.label, load: window.load, snr: Snr::Db(snr_db) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestSeen, Split::TestUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_seen_per_class: usize,
    pub test_unseen_per_class: usize,
    pub window_len: usize,
    pub loads: Vec<f64>,
    pub snr: Snr,
    pub train_faults: Vec<Fault>,
    pub unseen_faults: Vec<Fault>,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_per_class: 30,
            val_per_class: 10,
            test_seen_per_class: 10,
            test_unseen_per_class: 10,
            window_len: DEFAULT_WINDOW_LEN,
            loads: DEFAULT_LOADS.to_vec(),
            snr: Snr::Clean,
            train_faults: Fault::SEEN.to_vec(),
            unseen_faults: Fault::UNSEEN.to_vec(),
            master_seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.train_per_class, self.val_per_class, self.test_seen_per_class, self.test_unseen_per_class];
        if counts.contains(&0) {
            return Err(Error::Config("every split count must be positive".into()));
        }
        if let Some(f) = self.train_faults.iter().find(|f| !f.is_seen()) {
            return Err(Error::Config(format!("fault {} is reserved for unseen testing", f.label())));
        }
        if self.train_faults.is_empty() {
            return Err(Error::Config("at least one training fault is required".into()));
        }
        if let Some(f) = self.unseen_faults.iter().find(|f| f.is_seen()) {
            return Err(Error::Config(format!("fault {} is a training fault", f.label())));
        }
        if self.unseen_faults.is_empty() {
            return Err(Error::Config("at least one unseen fault is required".into()));
        }
        if self.loads.is_empty() || self.loads.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("loads must be a non-empty set within [0, 1]".into()));
        }
        if self.window_len < 16 {
            return Err(Error::Config("window length must be at least 16".into()));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<(Split, Fault, usize)> {
        let mut jobs = Vec::new();
        let per_split = [
            (Split::Train, &self.train_faults, self.train_per_class),
            (Split::Val, &self.train_faults, self.val_per_class),
            (Split::TestSeen, &self.train_faults, self.test_seen_per_class),
            (Split::TestUnseen, &self.unseen_faults, self.test_unseen_per_class),
        ];
        for (split, faults, count) in per_split {
            for i in 0..count {
                for &f in faults.iter() {
                    jobs.push((split, f, i));
                }
            }
        }
        jobs
    }
}

/// Per-channel mean and standard deviation, fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit<'a>(windows: impl IntoIterator<Item = &'a SignalWindow>) -> Result<Self> {
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        let mut n = 0usize;
        for w in windows {
            for c in 0..CHANNELS {
                for &v in w.channel(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += w.len();
        }
        if n == 0 {
            return Err(Error::Config("cannot fit standardization on an empty split".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..CHANNELS)
            .map(|c| (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardized model input, shaped `5 × T × 1` (channels × time × 1).

    pub fn apply(&self, window: &SignalWindow) -> Tensor {
        let len = window.len();
        let mut data = window.channels.data().to_vec();
        for c in 0..CHANNELS {
            for v in &mut data[c * len..(c + 1) * len] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Tensor::new(vec![CHANNELS, len, 1], data).expect("window shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub windows: Vec<SignalWindow>,
    pub splits: Vec<Split>,
    pub stats: Standardization,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SignalWindow> + '_ {
        self.windows.iter().zip(&self.splits).filter(move |(_, s)| **s == split).map(|(w, _)| w)
    }

    pub fn split_vec(&self, split: Split) -> Vec<&SignalWindow> {
        self.split(split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    pub fn window_len(&self) -> usize {
        self.config.window_len
    }

    pub fn validate(&self) -> Result<()> {
        for (w, s) in self.windows.iter().zip(&self.splits) {
            let ok = match s {
                Split::TestUnseen => !w.label.is_seen(),
                _ => w.label.is_seen(),
            };
            if !ok {
                return Err(Error::Config(format!("fault {} not allowed in split {}", w.label.label(), s.name())));
            }
            if w.channels.dims() != [CHANNELS, self.config.window_len] {
                return Err(Error::Config("window shape does not match dataset length".into()));
            }
        }
        if self.windows.len() != self.splits.len() {
            return Err(Error::Config("split tags do not cover every window".into()));
        }
        Ok(())
    }
}

/// Builds every split from `config`. Windows are pure functions of
/// `(master_seed, split, fault, index)`, so generation order is irrelevant.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let master = RngStream::new(config.master_seed, 0);
    let jobs = config.plan();
    let windows: Vec<SignalWindow> = jobs
        .par_iter()
        .map(|&(split, fault, i)| {
            let rng = master.derive_path(&[split.tag(), fault.label() as u64, i as u64]);
            let pick = rng.derive(99).uniforms(1)[0];
            let load = config.loads[((pick * config.loads.len() as f64) as usize).min(config.loads.len() - 1)];
            generate_fault_window_len(fault, load, config.snr, &rng, config.window_len)
        })
        .collect::<Result<_>>()?;
    let splits: Vec<Split> = jobs.iter().map(|j| j.0).collect();
    let stats = Standardization::fit(
        windows.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(w, _)| w),
    )?;
    let ds = Dataset { config: config.clone(), windows, splits, stats };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    config: DatasetConfig,
    sample_rate_hz: f64,
    channels: Vec<String>,
    counts: Vec<(Split, usize)>,
    files: Vec<(Split, String)>,
    standardization: Standardization,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

fn split_file(split: Split) -> String {
    format!("{}.csv", split.name())
}

fn window_csv(windows: &[&SignalWindow], len: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string(), "load".into(), "snr_db".into()];
    for name in CHANNEL_NAMES {
        for t in 0..len {
            header.push(format!("{name}_{t}"));
        }
    }
    w.write_record(&header)?;
    for win in windows {
        let mut rec = vec![win.label.label().to_string(), win.load.to_string(), win.snr.to_string()];
        rec.extend(win.channels.data().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// The dataset's files as `(file name, contents)`: one CSV per split, then
/// the manifest.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for split in Split::ALL {
        let rows = ds.split_vec(split);
        files.push((split_file(split), window_csv(&rows, ds.window_len())?));
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config: ds.config.clone(),
        sample_rate_hz: SAMPLE_RATE_HZ,
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        counts: Split::ALL.iter().map(|&s| (s, ds.count(s))).collect(),
        files: Split::ALL.iter().map(|&s| (s, split_file(s))).collect(),
        standardization: ds.stats.clone(),
    };
    files.push((DATASET_MANIFEST.to_string(), serde_json::to_vec_pretty(&manifest)?));
    Ok(files)
}

/// Writes the manifest plus one CSV per split into `dir`. Returns the paths written.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, bytes) in encode_dataset(ds)? {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Paths [`load_dataset`] reads for a directory.
pub fn dataset_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut v = vec![dir.join(DATASET_MANIFEST)];
    v.extend(Split::ALL.iter().map(|&s| dir.join(split_file(s))));
    v
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", m.format)));
    }
    let len = m.config.window_len;
    let mut windows = Vec::new();
    let mut splits = Vec::new();
    for (split, file) in &m.files {
        let mut r = csv::Reader::from_path(dir.join(file))?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 + CHANNELS * len {
                return Err(Error::Format(format!("{file}: expected {} columns, got {}", 3 + CHANNELS * len, rec.len())));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{file}: {e}")));
            let label: u8 = rec[0].parse().map_err(|_| Error::Format(format!("{file}: bad label")))?;
            let values = rec.iter().skip(3).map(parse).collect::<Result<Vec<_>>>()?;
            windows.push(SignalWindow {
                channels: Tensor::new(vec![CHANNELS, len], values)?,
                label: Fault::from_label(label).map_err(|e| Error::Format(e.to_string()))?,
                load: parse(&rec[1])?,
                snr: rec[2].parse().map_err(|e: Error| Error::Format(e.to_string()))?,
            });
            splits.push(*split);
        }
    }
    let ds = Dataset { config: m.config, windows, splits, stats: m.standardization };
    ds.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

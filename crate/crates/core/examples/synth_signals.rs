//! Generate one window per fault, show per-channel RMS, and corrupt a
//! window at a chosen SNR.

use gearqat::rng::RngStream;
use gearqat::synth::{generate_fault_window, inject_noise, Fault, Snr, CHANNELS, CHANNEL_NAMES};

fn rms(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn main() -> gearqat::Result<()> {
    let rng = RngStream::new(7, 0);
    println!("{:<8}{}", "fault", CHANNEL_NAMES.map(|n| format!("{n:>12}")).concat());
    for fault in Fault::ALL {
        let w = generate_fault_window(fault.label(), 0.75, Snr::Clean, &rng.derive(fault.label() as u64))?;
        let row: String = (0..CHANNELS).map(|c| format!("{:>12.4}", rms(w.channel(c)))).collect();
        println!("{:<8}{row}", fault.label());
    }
    println!("(AC RMS per channel; faults 4 and 5 never appear in training)");

    let clean = generate_fault_window(2, 0.5, Snr::Clean, &rng)?;
    for db in [20.0, 0.0, -20.0] {
        let noisy = inject_noise(&clean, db, &rng.derive(99))?;
        let c = 1;
        let ps: f64 = clean.channel(c).iter().map(|v| v * v).sum();
        let pn: f64 = noisy.channel(c).iter().zip(clean.channel(c)).map(|(a, b)| (a - b).powi(2)).sum();
        println!("requested {db:>6} dB, measured on {}: {:.3} dB", CHANNEL_NAMES[c], 10.0 * (ps / pn).log10());
    }
    Ok(())
}

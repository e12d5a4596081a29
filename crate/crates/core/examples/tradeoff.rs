//! Cost and memory per bit width for the desk-scale network, then pick the
//! cheapest bit width that satisfies accuracy and calibration limits.

use gearqat::bnn::Architecture;
use gearqat::tradeoff::{compute_cost, memory_footprint, select_bitwidth, BitWidthReport, Selection, SelectionConstraints};

fn main() -> gearqat::Result<()> {
    let arch = Architecture::desk_scale(256);
    let mut reports = Vec::new();
    // Accuracy and ECE here are illustrative stand-ins for a sweep's output.
    for (bits, accuracy, ece) in [(2, 0.67, 0.05), (4, 0.97, 0.03), (8, 0.99, 0.01), (16, 0.99, 0.01), (32, 0.99, 0.01)] {
        let mem = memory_footprint(&arch, bits)?;
        let cost = compute_cost(&arch, bits, bits)?;
        println!("b={bits:>2}  cost {cost:>12.1}  payload {:>7} B  total {:>7} B", mem.payload_bytes, mem.total_bytes());
        reports.push(BitWidthReport {
            bits,
            accuracy,
            ece,
            cost,
            memory_payload_bytes: mem.payload_bytes,
            memory_total_bytes: mem.total_bytes(),
            epsilon: 0.0,
            seed: 0,
        });
    }
    for (a_min, u_max) in [(0.95, 0.05), (0.985, 0.02), (0.999, 0.02)] {
        match select_bitwidth(&reports, &SelectionConstraints { a_min, u_max })? {
            Selection::Selected { bits, .. } => println!("A >= {a_min}, U <= {u_max}: choose {bits} bits"),
            Selection::Infeasible { closest } => println!("A >= {a_min}, U <= {u_max}: infeasible, closest {} bits", closest.bits),
        }
    }
    Ok(())
}

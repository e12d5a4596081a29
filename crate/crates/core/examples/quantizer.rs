//! Quantize scalars and a tensor, then push a gradient through the clipped
//! straight-through estimator.

use gearqat::quant::{calibrate_range, fake_quant_forward, ste_backward, CalibrationMode, QuantSpec, SiteKind};
use gearqat::tensor::Tensor;

fn main() -> gearqat::Result<()> {
    let spec = QuantSpec::new(8, -1.0, 1.0, SiteKind::Weight)?;
    println!("8-bit grid on [-1, 1]: scale {:.6}, integer range [{}, {}]", spec.scale, spec.qmin(), spec.qmax());
    for x in [0.3, 0.00391, 2.0, -3.0] {
        println!("  Q({x:>8}) = {:+.6}", spec.quantize(x));
    }

    let x = Tensor::from_vec(vec![-1.4, -0.6, 0.0, 0.25, 0.9, 1.3]);
    let observations = [x.clone()];
    let (lo, hi) = calibrate_range(&observations, CalibrationMode::MinMax, true)?;
    let spec4 = QuantSpec::new(4, lo, hi, SiteKind::Activation)?;
    println!("4-bit symmetric range from min/max: [{lo}, {hi}], scale {:.4}", spec4.scale);
    println!("  input      {:?}", x.data());
    println!("  fake-quant {:?}", fake_quant_forward(&x, &spec4).data());

    let narrow = QuantSpec::new(4, -1.0, 1.0, SiteKind::Activation)?;
    let grad = ste_backward(&Tensor::from_vec(vec![1.0; 6]), &x, &narrow)?;
    println!("  STE gradient on [-1, 1] (zero where saturated) {:?}", grad.data());
    Ok(())
}

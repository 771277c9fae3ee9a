//! Fit a power law to a noisy loss curve, with and without an irreducible
//! offset, and read off the implied intrinsic dimension.
//!
//! ```bash
//! cargo run --release --example scaling_fit
//! ```

use tfapprox::scaling::*;

fn main() -> tfapprox::Result<()> {
    let pts = synthetic_loss_curve(8.0, 0.113, (1e3, 1e9), 25, 0.01, 7)?;
    let fit = fit_power_law(&pts, FitMode::Plain)?;
    println!("plain fit: alpha = {:.4}, B = {:.3}, rms residual {:.2e}", fit.exponent, fit.coefficient, fit.residual);
    // α_D = 2β/(2β+d) with β = 1.
    println!("implied d at beta = 1: {:.1}", 2.0 / fit.exponent - 2.0);

    let floored: Vec<(f64, f64)> = pts.iter().map(|&(n, l)| (n, 1.7 + l)).collect();
    let plain = fit_power_law(&floored, FitMode::Plain)?;
    let off = fit_power_law(&floored, FitMode::Offset)?;
    println!("with floor 1.7: plain alpha {:.4}, offset alpha {:.4}, E = {:.3}", plain.exponent, off.exponent, off.offset.unwrap_or(0.0));
    Ok(())
}

//! Error against width: refine the grid and fit the slope of the sup error
//! against the token count; it approaches −β/d while the depth stays fixed.
//!
//! ```bash
//! cargo run --release --example width_sweep
//! ```

use tfapprox::scaling::{fit_power_law, FitMode};
use tfapprox::synthesis::*;

fn main() -> tfapprox::Result<()> {
    let budget = Budget::default();
    let target = HolderTarget::registry("sines", 2)?;
    let mut pts = Vec::new();
    for n in [5, 9, 17, 33] {
        let grid = build_grid(&target, 2, n, &budget)?;
        let net = synthesize_cube_approximator(&grid, target.sup_bound, &budget)?;
        let scan = default_scan(2, n, 1000, SCAN_SEED, &budget)?;
        let sup = sup_error_over(&scan, |x| net.forward(x), |x| target.eval(x))?.sup_error;
        println!("N = {n:>2}: {:>6} tokens, depth {}, sup error {sup:.5}", net.token_count, net.depth());
        pts.push((net.token_count as f64, sup));
    }
    let fit = fit_power_law(&pts, FitMode::Plain)?;
    println!("fitted slope {:.3}, reference {:.3}", -fit.exponent, -target.beta / 2.0);
    Ok(())
}

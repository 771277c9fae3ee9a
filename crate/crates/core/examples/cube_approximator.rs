//! Compile a Hölder target on [0,1]^2 into transformer weights, then compare
//! the network with the target and with the partition-of-unity oracle.
//!
//! ```bash
//! cargo run --release --example cube_approximator
//! ```

use tfapprox::synthesis::*;

fn main() -> tfapprox::Result<()> {
    let budget = Budget::default();
    let d = 2;
    let target = HolderTarget::registry("bump", d)?;
    let n = choose_n(0.9, d, target.holder, target.beta)?;
    let grid = build_grid(&target, d, n, &budget)?;
    let net = synthesize_cube_approximator(&grid, target.sup_bound, &budget)?;
    println!(
        "N = {n}: {} tokens, {} blocks, {} heads, weights up to {:.3e}",
        net.token_count,
        net.depth(),
        net.head_count(),
        net.weight_sup_norm()
    );

    let pts = default_scan(d, n, 1000, SCAN_SEED, &budget)?;
    let vs_target = sup_error_over(&pts, |x| net.forward(x), |x| target.eval(x))?;
    let vs_oracle = sup_error_over(&pts, |x| net.forward(x), |x| pou_oracle(&grid, x))?;
    println!("sup |net - f|      = {:.4} at {:?}", vs_target.sup_error, vs_target.argmax);
    println!("cube bound         = {:.4}", cube_error_bound(d, n, target.holder, target.beta));
    println!("sup |net - oracle| = {:.3e} (tolerance {:.3e})", vs_oracle.sup_error, net.tolerance());
    Ok(())
}

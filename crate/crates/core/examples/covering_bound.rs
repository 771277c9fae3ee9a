//! Log covering number of a transformer class and the predicted
//! generalization rate.
//!
//! ```bash
//! cargo run --release --example covering_bound
//! ```

use tfapprox::scaling::*;

fn main() -> tfapprox::Result<()> {
    let a = predicted_architecture(ArchMode::Estimation { n: 1e6 }, 4, 1.0, 1.0)?;
    println!("prefactor P = {:.3e}", a.params.covering_prefactor());
    for delta in [1e-1, 1e-3, 1e-6] {
        let v = log_covering_number(&ArchParams { delta, ..a.params })?;
        println!("delta {delta:.0e}: ln N = {v:.4e}");
    }
    for (n, rate) in generalization_rate_curve(4.0, 1.0, 20.0, &[1e4, 1e6, 1e8])? {
        println!("n = {n:.0e}: rate {rate:.4e}");
    }
    Ok(())
}

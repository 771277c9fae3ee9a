//! Predicted data and model exponents, conversion between them, and the
//! concrete architecture for a target accuracy.
//!
//! ```bash
//! cargo run --release --example predict_exponents
//! ```

use tfapprox::scaling::*;

fn main() -> tfapprox::Result<()> {
    for d in [2.0, 8.0, 16.0, 32.0] {
        let p = predict_exponents(d, 1.0)?;
        println!("d = {d:>4}: alpha_D = {:.4}, alpha_N = {:.4}", p.alpha_d, p.alpha_n);
    }
    println!("alpha_N 0.076 -> alpha_D {:.4}", convert_exponents(Known::AlphaN, 0.076)?);
    println!("alpha_D 0.095 -> alpha_N {:.4}", convert_exponents(Known::AlphaD, 0.095)?);

    let a = predicted_architecture(ArchMode::Approximation { eps: 0.1, holder: 1.0 }, 2, 1.0, 1.0)?;
    let p = a.params;
    println!(
        "eps 0.1, d 2: N = {}, tokens {}, depth {}, heads {}, FFN {}x{}, kappa {:.3e}",
        a.n_grid, p.l, p.l_t, p.m, p.l_ff, p.w_ff, p.kappa
    );
    Ok(())
}

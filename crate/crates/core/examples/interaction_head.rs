//! A single interaction head: token 1 reads the product of its own data with
//! token 3's data, and every other entry stays exactly zero.
//!
//! ```bash
//! cargo run --release --example interaction_head
//! ```

use tfapprox::blocks::{e, make_interaction_head, DataKernelPair, StructuredLayout};
use tfapprox::runtime::{attention_forward, tolerance_for};

fn main() -> tfapprox::Result<()> {
    let layout = StructuredLayout::new(4, 1.0)?;
    // <Q^B h_1, K^B h_3> = h_1[row 1] · h_3[row 1]
    let kernels = DataKernelPair::new([e(1), [0.0; 5]], [e(1), [0.0; 5]], 1.0)?;
    let (head, c) = make_interaction_head(1, 3, 2, &kernels, &layout)?;

    let h = layout.embed_row1(&[0.6, -0.2, 0.5, 0.9]);
    let out = attention_forward(&head, &h)?;
    println!("cancellation constant C = {c:.3e}, tolerance {:.3e}", tolerance_for(c));
    println!("row 2 of token 1 = {} (expected {})", out.get(1, 0), 0.6 * 0.5);
    let stray = out.to_rows().iter().flatten().filter(|v| **v != 0.0).count();
    println!("nonzero entries: {stray} of {}", 5 * layout.tokens);
    Ok(())
}

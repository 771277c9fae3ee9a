//! Structured pieces: the trapezoid ψ, the gating map, the addition block
//! and parallel composition of blocks acting on disjoint token ranges.
//!
//! ```bash
//! cargo run --release --example block_algebra
//! ```

use tfapprox::blocks::*;
use tfapprox::runtime::{block_forward, ffn_forward, FfnRecipe, KeepSide};

fn main() -> tfapprox::Result<()> {
    for u in [-1.5, -0.5, 0.0, 0.7, 1.2] {
        println!("psi({u:+.1}) = {:.2}", psi(u));
    }

    let layout = StructuredLayout::new(6, 1.0)?;
    let gate = make_gating_ffn(3, KeepSide::Prefix, &layout)?;
    let h = layout.embed_row1(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    let g = ffn_forward(&gate, &h)?;
    let kept: Vec<String> = (0..6).map(|t| format!("{:.3}", g.get(0, t))).collect();
    println!("gate keeping tokens 1..=3: [{}]", kept.join(", "));

    // x − c lands in tokens D+1..=2D.
    let c = [0.25, 0.5];
    let (add, add_layout) = make_addition_block(&c, &StructuredLayout::new(4, 1.0)?)?;
    let out = block_forward(&add, &add_layout.embed_row1(&[0.9, 0.1, 0.0, 0.0]))?;
    println!("x - c = [{:.6}, {:.6}]", out.get(0, 2), out.get(0, 3));

    // Token 1 of a second block reads token 3, then both run side by side.
    let copy_layout = StructuredLayout::new(3, 1.0)?;
    let kernels = DataKernelPair::new([e(5), [0.0; 5]], [e(1), [0.0; 5]], 1.0)?;
    let (head, _) = make_interaction_head(1, 3, 2, &kernels, &copy_layout)?;
    let copy = structured_block(vec![head], FfnRecipe::Empty, &copy_layout, "copy")?;
    let (merged, merged_layout) = parallelize_blocks(&add, &add_layout, &copy, &copy_layout)?;
    let both = block_forward(&merged, &merged_layout.embed_row1(&[0.9, 0.1, 0.0, 0.0, 0.0, 0.0, 0.7]))?;
    println!(
        "merged block on {} tokens: x - c = [{:.6}, {:.6}], copied {:.6}",
        merged_layout.tokens,
        both.get(0, 2),
        both.get(0, 3),
        both.get(1, 4)
    );
    Ok(())
}

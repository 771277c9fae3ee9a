//! Serialize a synthesized network to JSON and run the reloaded copy.
//!
//! ```bash
//! cargo run --release --example save_network
//! ```

use tfapprox::runtime::TransformerNet;
use tfapprox::synthesis::*;

fn main() -> tfapprox::Result<()> {
    let budget = Budget::default();
    let target = HolderTarget::registry("radial", 2)?;
    let grid = build_grid(&target, 2, 3, &budget)?;
    let net = synthesize_cube_approximator(&grid, target.sup_bound, &budget)?;
    let text = net.to_json()?;
    let back = TransformerNet::from_json(&text)?;
    let x = [0.25, 0.75];
    println!("{} bytes of JSON", text.len());
    println!("original {:.17e}, reloaded {:.17e}", net.forward(&x)?, back.forward(&x)?);
    let size = net.model_size();
    println!("model size: {} by formula, {} learnable entries", size.formula, size.learnable);
    Ok(())
}

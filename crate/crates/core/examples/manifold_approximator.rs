//! A target on the unit circle: charts, chart-wise grids and an indicator
//! ramp compiled into one network, checked against its oracle.
//!
//! ```bash
//! cargo run --release --example manifold_approximator
//! ```

use tfapprox::synthesis::*;

fn main() -> tfapprox::Result<()> {
    let atlas = make_atlas(Shape::Circle, 16, &AtlasParams::default())?;
    atlas.validate()?;
    let target = HolderTarget::new(TargetSpec::Linear { a: vec![1.0, 0.0], b: 0.0 }, 2)?;
    let eps = 0.3;
    let syn = synthesize_manifold_approximator(&atlas, &target, eps, &ManifoldOptions::default())?;
    println!(
        "{} charts, overlap {}, grid N = {}, ramp width {:.3e}",
        atlas.charts.len(),
        atlas.overlap(),
        syn.model.resolution,
        syn.model.ramp_width
    );
    println!("{} tokens, {} blocks", syn.net.token_count, syn.net.depth());

    let (mut sup, mut gap, mut proj) = (0.0f64, 0.0f64, 0.0f64);
    for x in atlas.sample(500, 1) {
        let y = syn.net.forward(&x)?;
        sup = sup.max((y - target.eval(&x)).abs());
        gap = gap.max((y - manifold_oracle(&syn.model, &x)).abs());
        proj = proj.max(syn.projection_gap(&x)?);
    }
    println!("sup error {sup:.4} (eps {eps}), oracle gap {gap:.3e}, projection gap {proj:.3e}");
    Ok(())
}

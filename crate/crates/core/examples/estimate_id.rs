//! Intrinsic dimension of synthetic clouds embedded in R^20.
//!
//! ```bash
//! cargo run --release --example estimate_id
//! ```

use tfapprox::id_estimator::*;

fn main() -> tfapprox::Result<()> {
    let opts = IdOptions { k: 20, batch_size: 2048, seed: 3, aggregation: Aggregation::Arithmetic };
    let specs = [SamplerSpec::Cube { d: 3 }, SamplerSpec::Sphere { d: 4 }, SamplerSpec::SwissRoll, SamplerSpec::Torus];
    for spec in specs {
        let cloud = sample_synthetic_manifold(&spec, 4096, 20, 9)?;
        let est = estimate_id(&cloud, &opts)?;
        println!(
            "{spec:?}: true {} estimate {:.3} over {} batches",
            spec.intrinsic_dim(),
            est.value,
            est.per_batch.len()
        );
    }
    Ok(())
}

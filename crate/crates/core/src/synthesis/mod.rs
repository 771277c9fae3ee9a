//! Compilers from target functions to transformer weights, with oracles.

pub mod cube;
pub mod grid;
pub mod manifold;
pub mod target;

pub use cube::{cube_token_count, padded_dim, product_levels, synthesize_cube_approximator, CubeRegions};
pub use grid::{
    build_grid, build_grid_with, choose_n, cube_error_bound, default_scan, grid_coord, pou_oracle, pou_weight_sum, scan_points,
    sup_error_over, sup_error_scan, Budget, GridApprox, ScanResult, SCAN_SEED,
};
pub use manifold::{
    indicator_net, make_atlas, manifold_oracle, manifold_token_count, prepare_manifold, ramp_error, synthesize_chart_projection,
    synthesize_indicator_net, synthesize_manifold, synthesize_manifold_approximator, Atlas, AtlasParams, Chart,
    ChartRegions, ManifoldModel, ManifoldOptions, ManifoldSynthesis, Shape,
};
pub use target::{HolderTarget, Monomial, TargetSpec, REGISTRY};

//! Charts, atlases and the manifold approximator.
//!
//! Each chart contributes `f̂_n(φ_n(x))·1̂(‖x − c_n‖²)`, where `f̂_n` is the
//! cube interpolant of the local function `(f·ρ_n)∘φ_n⁻¹` and `1̂` the ramp
//! indicator of the chart ball. Per chart the token layout is
//! `X (D copies of x) | Φ (d) | S (N·d) | P (N^d·d_pad) | Δ (D) | U (1)`;
//! charts are concatenated and followed by one output token.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    addition_heads, ce, e, free, head_from_terms, make_ramp_ffn, make_replace_ffn, parallelize_many,
    psi_decode_ffn, ramp_depth, ramp_indicator, structured_block, StructuredLayout,
};
use crate::error::{Error, Result};
use crate::runtime::{AttentionHead, FfnRecipe, Matrix, TransformerBlock, TransformerNet};
use crate::synthesis::cube::{copy_heads, multiply_heads, padded_dim, product_heads, product_levels, s_heads, sum_heads, CubeRegions};
use crate::synthesis::grid::{build_grid_with, choose_n, grid_size, pou_oracle, Budget, GridApprox};
use crate::synthesis::target::HolderTarget;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Unit circle in R².
    Circle,
    /// Unit sphere S² in R³.
    Sphere,
    /// `[0,1]^d` placed in the first `d` coordinates of R^D.
    FlatPatch,
}

/// Optional atlas parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasParams {
    /// Chart radius; defaults to a quarter of the reach (flat: covers the patch).
    pub radius: Option<f64>,
    /// Intrinsic dimension of a flat patch.
    pub dim: Option<usize>,
    /// Ambient dimension of a flat patch.
    pub ambient: Option<usize>,
    /// Minimum bump mass required at every validation sample.
    pub cover_floor: f64,
}

impl Default for AtlasParams {
    fn default() -> Self {
        AtlasParams { radius: None, dim: None, ambient: None, cover_floor: 1e-3 }
    }
}

/// `φ(x) = s(Vᵀ(x − c) + u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub center: Vec<f64>,
    pub radius: f64,
    /// `d` orthonormal tangent vectors of length `D`.
    pub basis: Vec<Vec<f64>>,
    pub scale: f64,
    pub offset: Vec<f64>,
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Chart {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn ambient(&self) -> usize {
        self.center.len()
    }

    /// Tangent coordinates `Vᵀ(x − c)`.
    pub fn tangent(&self, x: &[f64]) -> Vec<f64> {
        let dx: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.basis.iter().map(|v| dotv(v, &dx)).collect()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.tangent(x).iter().zip(&self.offset).map(|(t, u)| self.scale * (t + u)).collect()
    }

    /// Quadratic bump `(max(0, 1 − ‖x−c‖²/r²))²`.
    pub fn bump(&self, x: &[f64]) -> f64 {
        let w = (1.0 - dist2(x, &self.center) / (self.radius * self.radius)).max(0.0);
        w * w
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.offset.len() != d || self.basis.iter().any(|v| v.len() != self.ambient()) {
            return Err(Error::Dimension("chart basis/offset shapes disagree".into()));
        }
        for i in 0..d {
            for j in 0..d {
                let g = dotv(&self.basis[i], &self.basis[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (g - want).abs() > 1e-10 {
                    return Err(Error::Parameter(format!("tangent basis not orthonormal (Gram entry {g})")));
                }
            }
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Parameter(format!("chart scale {} outside (0,1]", self.scale)));
        }
        // the tangent ball of radius r must land inside the cube
        for u in &self.offset {
            let lo = self.scale * (u - self.radius);
            let hi = self.scale * (u + self.radius);
            if lo < 0.0 || hi > 1.0 {
                return Err(Error::Parameter("chart patch does not map into [0,1]^d".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub shape: Shape,
    pub charts: Vec<Chart>,
    pub reach: f64,
    /// Bound on |x^j| for points of the manifold and chart centers.
    pub ambient_bound: f64,
    pub dim: usize,
    pub ambient_dim: usize,
    pub cover_floor: f64,
}

fn sphere_tangent(c: &[f64]) -> Vec<Vec<f64>> {
    // tangent plane of the unit sphere at c
    let a = if c[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let ac = dotv(&a, c);
    let mut v1: Vec<f64> = a.iter().zip(c).map(|(a, c)| a - ac * c).collect();
    let n1 = dotv(&v1, &v1).sqrt();
    v1.iter_mut().for_each(|v| *v /= n1);
    let v2 = vec![c[1] * v1[2] - c[2] * v1[1], c[2] * v1[0] - c[0] * v1[2], c[0] * v1[1] - c[1] * v1[0]];
    vec![v1, v2]
}

fn chart_at(center: Vec<f64>, basis: Vec<Vec<f64>>, radius: f64) -> Chart {
    let scale = (0.5 / radius).min(1.0);
    let d = basis.len();
    Chart { center, radius, basis, scale, offset: vec![0.5 / scale; d] }
}

/// Evenly spaced charts with analytic tangent bases.
pub fn make_atlas(shape: Shape, chart_count: usize, params: &AtlasParams) -> Result<Atlas> {
    if chart_count == 0 {
        return Err(Error::Parameter("need at least one chart".into()));
    }
    let (charts, reach, dim, ambient) = match shape {
        Shape::Circle => {
            let r = params.radius.unwrap_or(0.25);
            let charts = (0..chart_count)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / chart_count as f64;
                    chart_at(vec![th.cos(), th.sin()], vec![vec![-th.sin(), th.cos()]], r)
                })
                .collect();
            (charts, 1.0, 1, 2)
        }
        Shape::Sphere => {
            let r = params.radius.unwrap_or(0.25);
            let golden = PI * (3.0 - 5f64.sqrt());
            let charts = (0..chart_count)
                .map(|k| {
                    let z = if chart_count == 1 { 1.0 } else { 1.0 - 2.0 * (k as f64 + 0.5) / chart_count as f64 };
                    let rad = (1.0 - z * z).max(0.0).sqrt();
                    let th = golden * k as f64;
                    let c = vec![rad * th.cos(), rad * th.sin(), z];
                    let basis = sphere_tangent(&c);
                    chart_at(c, basis, r)
                })
                .collect();
            (charts, 1.0, 2, 3)
        }
        Shape::FlatPatch => {
            let d = params.dim.unwrap_or(2);
            let big_d = params.ambient.unwrap_or(d + 1);
            if big_d < d || d == 0 {
                return Err(Error::Parameter(format!("flat patch needs 1 ≤ d ≤ D, got d={d}, D={big_d}")));
            }
            let m = (chart_count as f64).powf(1.0 / d as f64).round() as usize;
            if grid_size(m, d) != chart_count as u128 {
                return Err(Error::Parameter(format!("flat patch chart count {chart_count} is not a perfect {d}-th power")));
            }
            let spacing = 1.0 / m as f64;
            let r = params.radius.unwrap_or(0.55 * spacing * (d as f64).sqrt() + 0.05);
            let mut charts = Vec::with_capacity(chart_count);
            for k in 0..chart_count {
                let mut flat = k;
                let mut c = vec![0.0; big_d];
                for i in (0..d).rev() {
                    c[i] = (flat % m) as f64 * spacing + spacing / 2.0;
                    flat /= m;
                }
                let basis = (0..d).map(|i| (0..big_d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
                charts.push(chart_at(c, basis, r));
            }
            (charts, 4.0 * r, d, big_d)
        }
    };
    let atlas = Atlas { shape, charts, reach, ambient_bound: 1.0, dim, ambient_dim: ambient, cover_floor: params.cover_floor };
    atlas.validate()?;
    Ok(atlas)
}

impl Atlas {
    pub fn validate(&self) -> Result<()> {
        for c in &self.charts {
            c.validate()?;
            if c.dim() != self.dim || c.ambient() != self.ambient_dim {
                return Err(Error::Dimension("chart dimensions disagree with the atlas".into()));
            }
            if c.radius > self.reach / 4.0 + 1e-15 {
                return Err(Error::Parameter(format!("chart radius {} exceeds reach/4 = {}", c.radius, self.reach / 4.0)));
            }
            if c.center.iter().any(|v| v.abs() > self.ambient_bound) {
                return Err(Error::BoundViolation("chart center outside the ambient bound".into()));
            }
        }
        for x in self.validation_samples() {
            let mass: f64 = self.charts.iter().map(|c| c.bump(&x)).sum();
            if mass < self.cover_floor {
                return Err(Error::Coverage { sample: x });
            }
        }
        Ok(())
    }

    /// Deterministic points used for the coverage check.
    pub fn validation_samples(&self) -> Vec<Vec<f64>> {
        match self.shape {
            Shape::Circle => (0..4096)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / 4096.0;
                    vec![th.cos(), th.sin()]
                })
                .collect(),
            _ => self.sample(4096, 0xc0ffee),
        }
    }

    /// Seeded samples on the manifold.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| match self.shape {
                Shape::Circle => {
                    let th = rng.gen::<f64>() * 2.0 * PI;
                    vec![th.cos(), th.sin()]
                }
                Shape::Sphere => loop {
                    let v: Vec<f64> = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let nv = dotv(&v, &v).sqrt();
                    if nv > 1e-12 {
                        break v.iter().map(|a| a / nv).collect();
                    }
                },
                Shape::FlatPatch => {
                    let mut x = vec![0.0; self.ambient_dim];
                    for v in x.iter_mut().take(self.dim) {
                        *v = rng.gen::<f64>();
                    }
                    x
                }
            })
            .collect()
    }

    /// Nearest-point map onto the manifold.
    pub fn project_to_manifold(&self, x: &[f64]) -> Vec<f64> {
        match self.shape {
            Shape::Circle | Shape::Sphere => {
                let n = dotv(x, x).sqrt();
                if n == 0.0 {
                    self.charts[0].center.clone()
                } else {
                    x.iter().map(|v| v / n).collect()
                }
            }
            Shape::FlatPatch => x.iter().enumerate().map(|(i, v)| if i < self.dim { *v } else { 0.0 }).collect(),
        }
    }

    /// Normalized bump `ρ_n(x)`; 0 where no chart covers `x`.
    pub fn pou(&self, n: usize, x: &[f64]) -> f64 {
        let total: f64 = self.charts.iter().map(|c| c.bump(x)).sum();
        if total == 0.0 {
            0.0
        } else {
            self.charts[n].bump(x) / total
        }
    }

    /// Largest number of charts whose ball contains any validation sample.
    pub fn overlap(&self) -> usize {
        self.validation_samples()
            .iter()
            .map(|x| self.charts.iter().filter(|c| c.bump(x) > 0.0).count())
            .max()
            .unwrap_or(0)
    }

    /// Manifold point with chart coordinates `φ_n(x) = t`, or `None` if the
    /// preimage leaves the chart ball.
    pub fn invert_chart(&self, n: usize, t: &[f64]) -> Option<Vec<f64>> {
        let c = &self.charts[n];
        let target: Vec<f64> = t.iter().zip(&c.offset).map(|(v, u)| v / c.scale - u).collect();
        let mut x = c.center.clone();
        for _ in 0..200 {
            let cur = c.tangent(&x);
            let mut y = x.clone();
            for (i, v) in c.basis.iter().enumerate() {
                let step = target[i] - cur[i];
                for (yj, vj) in y.iter_mut().zip(v) {
                    *yj += step * vj;
                }
            }
            let next = self.project_to_manifold(&y);
            let moved = dist2(&next, &x).sqrt();
            x = next;
            if dist2(&x, &c.center) >= c.radius * c.radius {
                return None;
            }
            if moved <= 1e-10 {
                let resid: f64 = c.tangent(&x).iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                return if resid <= 1e-8 { Some(x) } else { None };
            }
        }
        None
    }

    /// Local function `(f·ρ_n)(φ_n⁻¹(t))`, 0 outside the chart ball.
    pub fn local_value(&self, n: usize, target: &HolderTarget, t: &[f64]) -> f64 {
        match self.invert_chart(n, t) {
            Some(x) => target.eval(&x) * self.pou(n, &x),
            None => 0.0,
        }
    }
}

/// Tuning knobs for the manifold synthesizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldOptions {
    /// Fixed grid resolution instead of the verified search.
    pub resolution: Option<usize>,
    /// Ramp width override.
    pub ramp_width: Option<f64>,
    /// Per-chart interpolation budget override (default `ε/(2 K)`, `K` the
    /// largest number of charts active at one point).
    pub chart_accuracy: Option<f64>,
    /// Cap on scan points per chart in the resolution search.
    pub scan_cap: usize,
    pub budget: Budget,
}

impl Default for ManifoldOptions {
    fn default() -> Self {
        ManifoldOptions { resolution: None, ramp_width: None, chart_accuracy: None, scan_cap: 20_000, budget: Budget::default() }
    }
}

/// Mathematical content of the manifold approximator, without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub atlas: Atlas,
    pub target: HolderTarget,
    pub eps: f64,
    pub resolution: usize,
    pub grids: Vec<GridApprox>,
    pub ramp_width: f64,
    /// [`ramp_error`] at `ramp_width`.
    pub ramp_error: f64,
    /// Constant added to the squared distance before the ramp.
    pub ramp_offset: f64,
    pub chart_accuracy: f64,
    /// Largest measured `|f̂_n − f̃_n|` on the resolution scan.
    pub measured_chart_error: f64,
    /// Estimated Hölder constant of the local functions.
    pub local_holder: f64,
    /// Resolution the cube formula would give for `local_holder`.
    pub formula_resolution: usize,
}

/// Uniform grid with `res` points per axis over the image of the chart ball.
fn chart_box_grid(chart: &Chart, res: usize) -> Vec<Vec<f64>> {
    let d = chart.dim();
    let lo: Vec<f64> = chart.offset.iter().map(|u| chart.scale * (u - chart.radius)).collect();
    let hi: Vec<f64> = chart.offset.iter().map(|u| chart.scale * (u + chart.radius)).collect();
    let total = grid_size(res, d) as usize;
    (0..total)
        .map(|k| {
            let mut flat = k;
            let mut x = vec![0.0; d];
            for i in (0..d).rev() {
                let j = flat % res;
                flat /= res;
                x[i] = lo[i] + (hi[i] - lo[i]) * j as f64 / (res - 1) as f64;
            }
            x
        })
        .collect()
}

/// Scan of the chart image with about six points per grid cell per axis.
fn chart_scan(chart: &Chart, n: usize, cap: usize) -> Vec<Vec<f64>> {
    let width = 2.0 * chart.scale * chart.radius;
    let cells = (width * (n - 1) as f64).ceil() as usize + 1;
    let per_axis_cap = (cap as f64).powf(1.0 / chart.dim() as f64).floor() as usize;
    chart_box_grid(chart, (6 * cells + 1).min(per_axis_cap.max(2)))
}

fn local_grids(atlas: &Atlas, target: &HolderTarget, n: usize, budget: &Budget) -> Result<Vec<GridApprox>> {
    (0..atlas.charts.len())
        .map(|k| build_grid_with(atlas.dim, n, budget, |t| atlas.local_value(k, target, t)))
        .collect()
}

fn measured_error(atlas: &Atlas, target: &HolderTarget, grids: &[GridApprox], cap: usize) -> f64 {
    grids
        .iter()
        .enumerate()
        .map(|(k, g)| {
            chart_scan(&atlas.charts[k], g.n, cap)
                .par_iter()
                .map(|t| (pou_oracle(g, t) - atlas.local_value(k, target, t)).abs())
                .reduce(|| 0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Largest difference quotient of the local functions between axis
/// neighbours of a fine grid over each chart image.
fn local_holder(atlas: &Atlas, target: &HolderTarget, cap: usize) -> f64 {
    (0..atlas.charts.len())
        .map(|k| {
            let c = &atlas.charts[k];
            let d = c.dim();
            let res = ((cap as f64).powf(1.0 / d as f64).floor() as usize).clamp(2, 4001);
            let pts = chart_box_grid(c, res);
            let vals: Vec<f64> = pts.par_iter().map(|t| atlas.local_value(k, target, t)).collect();
            let mut best: f64 = 0.0;
            let mut stride = 1;
            for _ in 0..d {
                for i in 0..pts.len() {
                    let j = i + stride;
                    if j < pts.len() && (i / stride) % res != res - 1 {
                        let dd = dist2(&pts[i], &pts[j]).sqrt();
                        best = best.max((vals[i] - vals[j]).abs() / dd);
                    }
                }
                stride *= res;
            }
            best
        })
        .fold(0.0, f64::max)
}

/// `max_x Σ_n |f(x)| ρ_n(x) (1 − 1̂_n(x))` over the validation samples: the
/// error the ramp indicators alone would cause with exact local functions.
pub fn ramp_error(atlas: &Atlas, target: &HolderTarget, delta: f64) -> f64 {
    atlas
        .validation_samples()
        .par_iter()
        .map(|x| {
            let f = target.eval(x).abs();
            (0..atlas.charts.len())
                .map(|n| {
                    let c = &atlas.charts[n];
                    let ind = ramp_indicator(dist2(x, &c.center), c.radius * c.radius, delta);
                    f * atlas.pou(n, x) * (1.0 - ind)
                })
                .sum::<f64>()
        })
        .reduce(|| 0.0, f64::max)
}

/// Chooses the grid, ramp and offsets for the manifold approximator.
///
/// The grid resolution is the smallest `N` whose measured interpolation error
/// of every local function stays below `0.9·ε/(2K)` on a scan of the chart
/// image, found by bisection below the cube-formula value.
pub fn prepare_manifold(atlas: &Atlas, target: &HolderTarget, eps: f64, opts: &ManifoldOptions) -> Result<ManifoldModel> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Parameter(format!("accuracy {eps} outside (0,1)")));
    }
    if target.dim != atlas.ambient_dim {
        return Err(Error::Dimension(format!(
            "target takes {} coordinates, manifold lives in R^{}",
            target.dim, atlas.ambient_dim
        )));
    }
    let d = atlas.dim;
    let r = atlas.charts.iter().map(|c| c.radius).fold(f64::INFINITY, f64::min);
    let ramp = match opts.ramp_width {
        Some(w) => w,
        None => {
            // Start from `ε r/(2 max(1, H_f))` and halve until the indicator
            // term uses at most the half of ε the charts leave free.
            let mut w = (eps * r / (2.0 * target.holder.max(1.0))).min(0.5 * r * r);
            for _ in 0..60 {
                if ramp_error(atlas, target, w) <= 0.5 * eps {
                    break;
                }
                w *= 0.5;
            }
            w
        }
    };
    if !(ramp > 0.0 && ramp < r * r) {
        return Err(Error::Parameter(format!("ramp width {ramp} outside (0, r²)")));
    }
    // At most `overlap` indicators are nonzero at any point, so the local
    // errors only add up over that many charts.
    let delta1 = opts.chart_accuracy.unwrap_or(eps / (2.0 * atlas.overlap().max(1) as f64));
    let h_hat = local_holder(atlas, target, opts.scan_cap);
    let formula = choose_n(delta1.min(0.999), d, h_hat.max(1e-12), 1.0)?;

    let resolution = match opts.resolution {
        Some(n) => n,
        None => {
            let pass = |n: usize| -> Result<bool> {
                let grids = local_grids(atlas, target, n, &opts.budget)?;
                Ok(measured_error(atlas, target, &grids, opts.scan_cap) <= 0.9 * delta1)
            };
            let mut hi = formula.max(2);
            while !pass(hi)? {
                hi *= 2;
                opts.budget.check_evaluations("chart grid", grid_size(hi, d))?;
            }
            let mut lo = 1;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if mid >= 2 && pass(mid)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    let grids = local_grids(atlas, target, resolution, &opts.budget)?;
    let measured = measured_error(atlas, target, &grids, opts.scan_cap);
    let m = atlas.ambient_bound;
    Ok(ManifoldModel {
        atlas: atlas.clone(),
        target: target.clone(),
        eps,
        resolution,
        grids,
        ramp_width: ramp,
        ramp_error: ramp_error(atlas, target, ramp),
        ramp_offset: atlas.ambient_dim as f64 * 4.0 * m * m,
        chart_accuracy: delta1,
        measured_chart_error: measured,
        local_holder: h_hat,
        formula_resolution: formula,
    })
}

impl ManifoldModel {
    /// Output clip `R = max(sup|f|, max |grid value|)` shared by net and oracle.
    pub fn output_bound(&self) -> f64 {
        self.grids.iter().flat_map(|g| g.values.iter()).fold(self.target.sup_bound, |m, v| m.max(v.abs()))
    }
}

/// `Σ_n f̂_n(φ_n(x))·1̂(‖x − c_n‖²)` evaluated directly, clipped to `±R`.
pub fn manifold_oracle(model: &ManifoldModel, x: &[f64]) -> f64 {
    let r = model.output_bound();
    let sum: f64 = model
        .atlas
        .charts
        .iter()
        .zip(&model.grids)
        .map(|(c, g)| {
            let ind = ramp_indicator(dist2(x, &c.center), c.radius * c.radius, model.ramp_width);
            if ind == 0.0 {
                0.0
            } else {
                pou_oracle(g, &c.project(x)) * ind
            }
        })
        .sum();
    sum.clamp(-r, r)
}

/// Token positions of one chart (1-based within the chart).
#[derive(Clone, Debug, PartialEq)]
pub struct ChartRegions {
    pub big_d: usize,
    pub d: usize,
    pub n: usize,
    pub cube: CubeRegions,
    /// 0-based offset of the Δ tokens.
    pub delta_base: usize,
    /// Indicator token.
    pub u: usize,
}

impl ChartRegions {
    pub fn new(big_d: usize, d: usize, n: usize) -> Self {
        let phi_base = big_d;
        let s_base = phi_base + d;
        let p_base = s_base + n * d;
        let cube = CubeRegions { d, n, inputs: (phi_base + 1..=phi_base + d).collect(), s_base, p_base };
        let delta_base = p_base + cube.p_len();
        ChartRegions { big_d, d, n, cube, delta_base, u: delta_base + big_d + 1 }
    }

    pub fn x(&self, j: usize) -> usize {
        j
    }

    pub fn phi(&self, i: usize) -> usize {
        self.big_d + i
    }

    pub fn delta(&self, j: usize) -> usize {
        self.delta_base + j
    }

    pub fn tokens(&self) -> usize {
        self.u
    }

    /// Patch slot that collects the chart's interpolant.
    pub fn out(&self) -> usize {
        self.cube.p(self.cube.patches(), self.cube.d_pad())
    }
}

/// Token count of the whole manifold net.
pub fn manifold_token_count(atlas: &Atlas, n: usize) -> u128 {
    let (big_d, d) = (atlas.ambient_dim as u128, atlas.dim as u128);
    let per = 2 * big_d + d + n as u128 * d + grid_size(n, atlas.dim).saturating_mul(padded_dim(atlas.dim) as u128) + 1;
    per.saturating_mul(atlas.charts.len() as u128) + 1
}

/// Heads writing `φ_n(x)` into the Φ tokens from the X tokens.
fn projection_heads(layout: &StructuredLayout, chart: &Chart, x_tokens: &[usize], phi_tokens: &[usize]) -> Result<Vec<AttentionHead>> {
    let mut heads = Vec::new();
    for (i, v) in chart.basis.iter().enumerate() {
        let t = phi_tokens[i];
        for (j, vj) in v.iter().enumerate() {
            let coef = chart.scale * vj;
            if coef != 0.0 {
                heads.push(head_from_terms(layout, t, x_tokens[j], 1, false, &[(e(5), ce(coef, 1))])?);
                heads.push(head_from_terms(layout, t, x_tokens[j], 1, true, &[(e(5), ce(-coef, 1))])?);
            }
        }
        let konst = chart.scale * (chart.offset[i] - dotv(v, &chart.center));
        if konst != 0.0 {
            heads.push(head_from_terms(layout, t, t, 1, konst < 0.0, &[(e(5), ce(konst.abs(), 5))])?);
        }
    }
    Ok(heads)
}

/// Largest |φ| over `|x^j| ≤ M`.
fn projection_bound(chart: &Chart, m: f64) -> f64 {
    chart
        .basis
        .iter()
        .zip(&chart.offset)
        .map(|(v, u)| chart.scale * (v.iter().zip(&chart.center).map(|(a, c)| a.abs() * (m + c.abs())).sum::<f64>() + u.abs()))
        .fold(0.0, f64::max)
}

/// Block computing `φ_n` on a layout with `D` input tokens followed by `d`
/// output slots. Heads only: each coordinate gets the signed pair
/// `σ(s v^j x^j) − σ(−s v^j x^j)` per input plus one constant head.
pub fn synthesize_chart_projection(chart: &Chart, layout: &StructuredLayout) -> Result<TransformerBlock> {
    chart.validate()?;
    let (big_d, d) = (chart.ambient(), chart.dim());
    if layout.tokens != big_d + d {
        return Err(Error::Parameter(format!("projection needs D + d = {} tokens, layout has {}", big_d + d, layout.tokens)));
    }
    let x: Vec<usize> = (1..=big_d).collect();
    let phi: Vec<usize> = (big_d + 1..=big_d + d).collect();
    structured_block(projection_heads(layout, chart, &x, &phi)?, FfnRecipe::Empty, layout, "projection")
}

/// Blocks computing `1̂_{r²,Δ}(‖x − c‖²)` on the layout `X (D) | Δ (D) | U`.
///
/// Block 1 subtracts the center, block 2 squares into the scratch row and
/// moves the squares into row 1, block 3 sums them into the indicator token
/// whose ramp FFN (depth `ceil(ln(1/Δ))` plus two) writes the indicator.
pub fn synthesize_indicator_net(chart: &Chart, delta: f64, layout: &StructuredLayout) -> Result<Vec<TransformerBlock>> {
    let big_d = chart.ambient();
    let r2 = chart.radius * chart.radius;
    if !(delta > 0.0 && delta < r2) {
        return Err(Error::Parameter(format!("ramp width {delta} outside (0, r² = {r2})")));
    }
    if layout.tokens != 2 * big_d + 1 {
        return Err(Error::Parameter(format!("indicator needs 2D + 1 = {} tokens", 2 * big_d + 1)));
    }
    let m = layout.bound.max(2.0 * chart.center.iter().fold(0.0f64, |a, c| a.max(c.abs())));
    let lay1 = layout.with_bound(m);
    let add = structured_block(
        addition_heads(&lay1, 0, big_d, big_d, &chart.center)?,
        FfnRecipe::Empty,
        &lay1,
        "addition",
    )?;

    let dm = 1.5 * m;
    let lay2 = layout.with_bound(dm);
    let mut sq = Vec::with_capacity(big_d);
    for j in 1..=big_d {
        let t = big_d + j;
        sq.push(head_from_terms(&lay2, t, t, 2, false, &[(e(1), e(1))])?);
    }
    let squares = structured_block(sq, free("replace", make_replace_ffn()), &lay2, "square")?;

    let offset = big_d as f64 * dm * dm;
    let lay3 = layout.with_bound(dm * dm);
    let u = 2 * big_d + 1;
    let mut sum = Vec::with_capacity(big_d + 1);
    for j in 1..=big_d {
        sum.push(head_from_terms(&lay3, u, big_d + j, 2, false, &[(e(5), e(1))])?);
    }
    sum.push(head_from_terms(&lay3, u, u, 2, false, &[(e(5), ce(offset, 5))])?);
    let ramp = structured_block(sum, free("ramp", make_ramp_ffn(r2, delta, offset)?), &lay3, "indicator")?;
    Ok(vec![add, squares, ramp])
}

/// Standalone indicator net on `X | Δ | U`, reading the indicator token.
pub fn indicator_net(chart: &Chart, delta: f64, ambient_bound: f64) -> Result<TransformerNet> {
    let big_d = chart.ambient();
    let layout = StructuredLayout::new(2 * big_d + 1, ambient_bound)?;
    let blocks = synthesize_indicator_net(chart, delta, &layout)?;
    let mut input_map = Matrix::zeros(layout.tokens, big_d);
    for j in 0..big_d {
        input_map.set(j, j, 1.0);
    }
    Ok(TransformerNet::new(input_map, layout.positional(), blocks, 1.0)?.with_note("X (D) | Δ (D) | U"))
}

/// Output of the manifold synthesizer.
#[derive(Clone, Debug)]
pub struct ManifoldSynthesis {
    pub net: TransformerNet,
    pub model: ManifoldModel,
    pub regions: ChartRegions,
}

impl ManifoldSynthesis {
    /// Global 1-based token of chart `k`'s local token `t`.
    pub fn global(&self, k: usize, t: usize) -> usize {
        k * self.regions.tokens() + t
    }

    /// Largest deviation after the projection block from the closed form:
    /// row 1 of every Φ token against `φ_n(x)`, row 2 against 0.
    pub fn projection_gap(&self, x: &[f64]) -> Result<f64> {
        let h = self.net.embedding_after(x, 1)?;
        let mut gap = 0.0f64;
        for (k, chart) in self.model.atlas.charts.iter().enumerate() {
            for (i, v) in chart.project(x).iter().enumerate() {
                let t = self.global(k, self.regions.phi(i + 1)) - 1;
                gap = gap.max((h.get(0, t) - v).abs()).max(h.get(1, t).abs());
            }
        }
        Ok(gap)
    }
}

/// Compiles the model into a net. Every stage is built per chart on the
/// chart's own layout and merged with [`parallelize_many`]; all FFNs leave
/// tokens with an empty scratch row untouched, so the merge shares them.
pub fn synthesize_manifold(model: &ManifoldModel, budget: &Budget) -> Result<ManifoldSynthesis> {
    let atlas = &model.atlas;
    let (big_d, d, n) = (atlas.ambient_dim, atlas.dim, model.resolution);
    let total = manifold_token_count(atlas, n);
    budget.check_tokens(total)?;
    let reg = ChartRegions::new(big_d, d, n);
    let lc = reg.tokens();
    let a = atlas.ambient_bound;
    let r = model.output_bound();
    let phi_bound = atlas.charts.iter().map(|c| projection_bound(c, a)).fold(0.0, f64::max);

    let b1 = a.max(1.0);
    let b2 = b1.max(phi_bound).max(2.0 * a);
    let b3 = b2.max(4.0 * a * a);
    let b_sum = b3.max(r);
    let omega = model.ramp_offset;
    let r2 = atlas.charts.iter().map(|c| c.radius * c.radius).fold(f64::INFINITY, f64::min);
    if atlas.charts.iter().any(|c| c.radius * c.radius != r2) {
        return Err(Error::Parameter("the manifold synthesizer needs equal chart radii".into()));
    }
    let ramp = make_ramp_ffn(r2, model.ramp_width, omega)?;

    let x: Vec<usize> = (1..=big_d).collect();
    let phi: Vec<usize> = (1..=d).map(|i| reg.phi(i)).collect();
    let stage = |bound: f64, recipe: FfnRecipe, label: &str, build: &dyn Fn(usize, &StructuredLayout) -> Result<Vec<AttentionHead>>| -> Result<TransformerBlock> {
        let lay = StructuredLayout::new(lc, bound)?;
        let parts: Vec<TransformerBlock> = (0..atlas.charts.len())
            .map(|k| structured_block(build(k, &lay)?, recipe.clone(), &lay, label))
            .collect::<Result<_>>()?;
        let out_lay = StructuredLayout::new(1, bound)?;
        let out_block = structured_block(Vec::new(), recipe.clone(), &out_lay, label)?;
        let mut pieces: Vec<(&TransformerBlock, StructuredLayout)> = parts.iter().map(|b| (b, lay)).collect();
        pieces.push((&out_block, out_lay));
        let (mut merged, _) = parallelize_many(&pieces)?;
        if let Some(p) = merged.provenance.as_mut() {
            p.label = label.into();
        }
        Ok(merged)
    };

    let mut blocks = Vec::new();
    blocks.push(stage(b1, FfnRecipe::Empty, "projection+shift", &|k, lay| {
        let c = &atlas.charts[k];
        let mut h = projection_heads(lay, c, &x, &phi)?;
        for j in 1..=big_d {
            let cj = c.center[j - 1];
            let mut kp = e(1);
            kp[4] = -cj;
            let mut kn = ce(-1.0, 1);
            kn[4] = cj;
            h.push(head_from_terms(lay, reg.delta(j), reg.x(j), 1, false, &[(e(5), kp)])?);
            h.push(head_from_terms(lay, reg.delta(j), reg.x(j), 1, true, &[(e(5), kn)])?);
        }
        Ok(h)
    })?);
    blocks.push(stage(b2, free("psi-decode", psi_decode_ffn(n)), "precompute+square", &|_, lay| {
        let mut h = s_heads(lay, &reg.cube)?;
        for j in 1..=big_d {
            let t = reg.delta(j);
            h.push(head_from_terms(lay, t, t, 1, false, &[(e(1), e(1))])?);
            h.push(head_from_terms(lay, t, t, 1, true, &[(e(5), e(1))])?);
            h.push(head_from_terms(lay, t, t, 1, false, &[(e(5), ce(-1.0, 1))])?);
        }
        Ok(h)
    })?);
    blocks.push(stage(b3, FfnRecipe::Empty, "copy", &|_, lay| copy_heads(lay, &reg.cube))?);
    for level in 1..=product_levels(d) {
        blocks.push(stage(b3, FfnRecipe::Empty, "product", &|_, lay| product_heads(lay, &reg.cube, level))?);
    }
    blocks.push(stage(b3, free("ramp", ramp.clone()), "multiply+indicator", &|k, lay| {
        let mut h = multiply_heads(lay, &reg.cube, &model.grids[k].values)?;
        for j in 1..=big_d {
            h.push(head_from_terms(lay, reg.u, reg.delta(j), 2, false, &[(e(5), e(1))])?);
        }
        h.push(head_from_terms(lay, reg.u, reg.u, 2, false, &[(e(5), ce(omega, 5))])?);
        Ok(h)
    })?);
    let out = reg.out();
    let clear = |lay: &StructuredLayout, h: &mut Vec<AttentionHead>| -> Result<()> {
        h.push(head_from_terms(lay, out, out, 1, true, &[(e(5), e(1))])?);
        h.push(head_from_terms(lay, out, out, 1, false, &[(e(5), ce(-1.0, 1))])?);
        Ok(())
    };
    blocks.push(stage(b_sum, FfnRecipe::Empty, "sum", &|k, lay| {
        let mut h = sum_heads(lay, &reg.cube, &model.grids[k].values, out, 1)?;
        clear(lay, &mut h)?;
        Ok(h)
    })?);
    blocks.push(stage(b_sum, FfnRecipe::Empty, "combine", &|_, lay| {
        let mut h = Vec::with_capacity(4);
        clear(lay, &mut h)?;
        h.push(head_from_terms(lay, out, reg.u, 1, false, &[(e(1), e(1))])?);
        h.push(head_from_terms(lay, out, reg.u, 1, true, &[(ce(-1.0, 1), e(1))])?);
        Ok(h)
    })?);

    let l = total as usize;
    let global = StructuredLayout::new(l, b_sum)?;
    let mut fin = Vec::with_capacity(2 * atlas.charts.len());
    for k in 0..atlas.charts.len() {
        let src = k * lc + out;
        fin.push(head_from_terms(&global, l, src, 2, false, &[(e(5), e(1))])?);
        fin.push(head_from_terms(&global, l, src, 2, true, &[(e(5), ce(-1.0, 1))])?);
    }
    blocks.push(structured_block(fin, free("replace", make_replace_ffn()), &global, "final")?);

    let mut input_map = Matrix::zeros(l, big_d);
    for k in 0..atlas.charts.len() {
        for j in 1..=big_d {
            input_map.set(k * lc + reg.x(j) - 1, j - 1, 1.0);
        }
    }
    let net = TransformerNet::new(input_map, global.positional(), blocks, r)?.with_note(format!(
        "manifold: {} charts of {lc} tokens [X (D={big_d}) | Φ (d={d}) | S (N·d, N={n}) | P (N^d·d_pad) | Δ (D) | U], then output token {l}; ramp depth {}",
        atlas.charts.len(),
        ramp_depth(model.ramp_width)
    ));
    Ok(ManifoldSynthesis { net, model: model.clone(), regions: reg })
}

/// Chooses parameters and compiles the manifold approximator.
pub fn synthesize_manifold_approximator(
    atlas: &Atlas,
    target: &HolderTarget,
    eps: f64,
    opts: &ManifoldOptions,
) -> Result<ManifoldSynthesis> {
    let model = prepare_manifold(atlas, target, eps, opts)?;
    synthesize_manifold(&model, &opts.budget)
}

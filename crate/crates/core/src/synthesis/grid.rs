use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::psi;
use crate::error::{Error, Result};
use crate::synthesis::target::HolderTarget;

/// Evaluation and token caps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub max_evaluations: u128,
    pub max_tokens: u128,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_evaluations: 10_000_000, max_tokens: 1_000_000 }
    }
}

impl Budget {
    pub fn check_evaluations(&self, what: &str, required: u128) -> Result<()> {
        if required > self.max_evaluations {
            return Err(Error::Resource { what: what.into(), required, cap: self.max_evaluations });
        }
        Ok(())
    }

    pub fn check_tokens(&self, required: u128) -> Result<()> {
        if required > self.max_tokens {
            return Err(Error::Resource { what: "tokens".into(), required, cap: self.max_tokens });
        }
        Ok(())
    }
}

/// `N^d` without overflow.
pub fn grid_size(n: usize, d: usize) -> u128 {
    (0..d).fold(1u128, |acc, _| acc.saturating_mul(n as u128))
}

/// Target values at the centers `g_n = (n − 1)/(N − 1)` of the uniform grid.
/// Flat index runs over multi-indices with the first axis most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridApprox {
    pub d: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridApprox {
    pub fn new(d: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::Parameter(format!("grid needs N ≥ 2 and d ≥ 1, got N={n}, d={d}")));
        }
        if values.len() as u128 != grid_size(n, d) {
            return Err(Error::Dimension(format!("{} values for a {n}^{d} grid", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite grid value".into()));
        }
        Ok(GridApprox { d, n, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multi-index (0-based per axis) of a flat index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        for i in (0..self.d).rev() {
            idx[i] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat).iter().map(|j| grid_coord(*j, self.n)).collect()
    }
}

/// `j/(N − 1)` for a 0-based index.
pub fn grid_coord(j: usize, n: usize) -> f64 {
    j as f64 / (n - 1) as f64
}

/// Smallest grid resolution meeting accuracy `ε` for a `(β, H_f)`-Hölder
/// target: `ceil(d(2^d H_f/ε)^{1/β} + 1)`, at least 2.
pub fn choose_n(eps: f64, d: usize, holder: f64, beta: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Parameter(format!("accuracy {eps} outside (0,1)")));
    }
    if d == 0 || !(beta > 0.0 && beta <= 1.0) || !(holder >= 0.0) {
        return Err(Error::Parameter("need d ≥ 1, β ∈ (0,1], H_f ≥ 0".into()));
    }
    let raw = d as f64 * (2f64.powi(d as i32) * holder / eps).powf(1.0 / beta) + 1.0;
    // absorb representation error in ε (e.g. 2/0.2 = 10.000000000000002)
    let n = (raw * (1.0 - 1e-12)).ceil();
    if !n.is_finite() || n > usize::MAX as f64 {
        return Err(Error::Resource { what: "grid resolution".into(), required: u128::MAX, cap: usize::MAX as u128 });
    }
    Ok((n as usize).max(2))
}

/// Evaluates the target at every grid center.
pub fn build_grid(target: &HolderTarget, d: usize, n: usize, budget: &Budget) -> Result<GridApprox> {
    if d != target.dim {
        return Err(Error::Dimension(format!("target has dimension {}, grid {d}", target.dim)));
    }
    build_grid_with(d, n, budget, |x| target.eval(x))
}

/// Grid from an arbitrary function of the grid center.
pub fn build_grid_with<F>(d: usize, n: usize, budget: &Budget, f: F) -> Result<GridApprox>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n < 2 || d == 0 {
        return Err(Error::Parameter(format!("grid needs N ≥ 2 and d ≥ 1, got N={n}, d={d}")));
    }
    let size = grid_size(n, d);
    budget.check_evaluations("grid evaluations", size)?;
    let shell = GridApprox { d, n, values: Vec::new() };
    let values: Vec<f64> = (0..size as usize).into_par_iter().map(|k| f(&shell.center(k))).collect();
    GridApprox::new(d, n, values)
}

/// Axis weights `(j, ψ(3(N−1)(x − g_j)))` that are nonzero at `x`.
fn axis_weights(x: f64, n: usize) -> Vec<(usize, f64)> {
    let a = 3.0 * (n - 1) as f64;
    let pos = x * (n - 1) as f64;
    if !pos.is_finite() {
        return Vec::new();
    }
    let lo = (pos.floor() - 1.0).max(0.0);
    let hi = (pos.ceil() + 1.0).min((n - 1) as f64);
    let mut out = Vec::with_capacity(3);
    if lo > hi {
        return out;
    }
    for j in lo as usize..=hi as usize {
        let w = psi(a * (x - grid_coord(j, n)));
        if w != 0.0 {
            out.push((j, w));
        }
    }
    out
}

/// PoU interpolant `Σ_n f_n Π_i ψ(3(N−1)(x^i − g_n^i))`, summed over the at
/// most `2^d` patches whose support contains `x`. Defined for every `x`;
/// it vanishes once `x` is farther than `2/(3(N−1))` from the cube.
pub fn pou_oracle(grid: &GridApprox, x: &[f64]) -> f64 {
    let axes: Vec<Vec<(usize, f64)>> = x.iter().map(|v| axis_weights(*v, grid.n)).collect();
    let mut total = 0.0;
    let mut idx = vec![0usize; grid.d];
    'outer: loop {
        let mut w = 1.0;
        let mut flat = 0;
        for (i, a) in axes.iter().enumerate() {
            if a.is_empty() {
                return 0.0;
            }
            let (j, wj) = a[idx[i]];
            w *= wj;
            flat = flat * grid.n + j;
        }
        total += grid.values[flat] * w;
        for i in (0..grid.d).rev() {
            idx[i] += 1;
            if idx[i] < axes[i].len() {
                continue 'outer;
            }
            idx[i] = 0;
        }
        break;
    }
    total
}

/// `Σ_n Π_i ψ(·)` at `x`; 1 on the cube.
pub fn pou_weight_sum(d: usize, n: usize, x: &[f64]) -> f64 {
    let ones = GridApprox { d, n, values: vec![1.0; grid_size(n, d) as usize] };
    pou_oracle(&ones, x)
}

/// Cube error bound `2^d d^β H_f/(N−1)^β`.
pub fn cube_error_bound(d: usize, n: usize, holder: f64, beta: f64) -> f64 {
    2f64.powi(d as i32) * (d as f64).powf(beta) * holder / ((n - 1) as f64).powf(beta)
}

/// Uniform scan grid with `resolution` points per axis (endpoints included)
/// followed by `random` seeded interior points.
pub fn scan_points(d: usize, resolution: usize, random: usize, seed: u64, budget: &Budget) -> Result<Vec<Vec<f64>>> {
    let res = resolution.max(1);
    let size = grid_size(res, d);
    budget.check_evaluations("scan points", size + random as u128)?;
    let mut pts = Vec::with_capacity(size as usize + random);
    for k in 0..size as usize {
        let mut flat = k;
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let j = flat % res;
            flat /= res;
            x[i] = if res == 1 { 0.5 } else { j as f64 / (res - 1) as f64 };
        }
        pts.push(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..random {
        pts.push((0..d).map(|_| rng.gen::<f64>()).collect());
    }
    Ok(pts)
}

/// About `total` scan points for a grid of resolution `n`: a uniform grid
/// whose spacing divides the ψ breakpoints `1/(3(N−1))` when it fits in half
/// the total, topped up with seeded random points.
pub fn default_scan(d: usize, n: usize, total: usize, seed: u64, budget: &Budget) -> Result<Vec<Vec<f64>>> {
    let aligned = 6 * n.saturating_sub(1) + 1;
    let fit = ((total as f64 / 2.0).powf(1.0 / d as f64) + 1e-9).floor() as usize;
    let res = aligned.min(fit).max(2);
    let grid = grid_size(res, d) as usize;
    scan_points(d, res, total.saturating_sub(grid), seed, budget)
}

/// Outcome of a sup-norm scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub sup_error: f64,
    pub argmax: Vec<f64>,
    pub points: usize,
}

/// Seed of the random part of every scan.
pub const SCAN_SEED: u64 = 20_240_601;

/// `max |evaluate(x) − f(x)|` over the scan grid plus 10³ random points.
pub fn sup_error_scan<F>(
    evaluate: F,
    target: &HolderTarget,
    d: usize,
    resolution: usize,
    budget: &Budget,
) -> Result<ScanResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let pts = scan_points(d, resolution, 1000, SCAN_SEED, budget)?;
    sup_error_over(&pts, evaluate, |x| target.eval(x))
}

/// `max |a(x) − b(x)|` over the given points, first maximizer on ties.
pub fn sup_error_over<A, B>(pts: &[Vec<f64>], a: A, b: B) -> Result<ScanResult>
where
    A: Fn(&[f64]) -> Result<f64> + Sync,
    B: Fn(&[f64]) -> f64 + Sync,
{
    let errs: Vec<f64> = pts
        .par_iter()
        .map(|x| a(x).map(|v| (v - b(x)).abs()))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, e) in errs.iter().enumerate() {
        if *e > errs[best] {
            best = i;
        }
    }
    Ok(ScanResult {
        sup_error: errs.get(best).copied().unwrap_or(0.0),
        argmax: pts.get(best).cloned().unwrap_or_default(),
        points: pts.len(),
    })
}

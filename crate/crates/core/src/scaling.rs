//! Scaling exponents from intrinsic dimension, power-law fits of loss
//! curves, and the covering-number and rate calculators.

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{cancellation_constant, make_replace_ffn, psi_decode_ffn, D_EMBD};
use crate::error::{Error, Result};
use crate::synthesis::{choose_n, cube_token_count, padded_dim, product_levels};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentPrediction {
    #[serde(rename = "alpha_D")]
    pub alpha_d: f64,
    #[serde(rename = "alpha_N")]
    pub alpha_n: f64,
    pub d: f64,
    pub beta: f64,
}

/// `α_D = 2β/(2β+d)` and `α_N = 2β/d`.
pub fn predict_exponents(d: f64, beta: f64) -> Result<ExponentPrediction> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!("intrinsic dimension must be positive, got {d}")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain(format!("Hölder exponent must lie in (0,1], got {beta}")));
    }
    Ok(ExponentPrediction { alpha_d: 2.0 * beta / (2.0 * beta + d), alpha_n: 2.0 * beta / d, d, beta })
}

/// Which exponent is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Known {
    AlphaN,
    AlphaD,
}

/// `α_D = α_N/(α_N+1)` or `α_N = α_D/(1−α_D)`.
pub fn convert_exponents(known: Known, value: f64) -> Result<f64> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::Domain(format!("exponent must be positive, got {value}")));
    }
    match known {
        Known::AlphaN => Ok(value / (value + 1.0)),
        Known::AlphaD if value >= 1.0 => Err(Error::Domain(format!("α_D must be below 1, got {value}"))),
        Known::AlphaD => Ok(value / (1.0 - value)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Least squares on `(ln n, ln loss)`.
    #[default]
    Plain,
    /// Grid search over an irreducible offset `E`, plain fit on `loss − E`.
    Offset,
}

/// `loss ≈ E + B·n^{−α}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub coefficient: f64,
    pub offset: Option<f64>,
    /// RMS of the log-space residuals.
    pub residual: f64,
    pub points: usize,
    pub mode: FitMode,
}

impl ScalingFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.offset.unwrap_or(0.0) + self.coefficient * n.powf(-self.exponent)
    }
}

/// Number of offsets tried in offset mode.
pub const OFFSET_GRID: usize = 64;

fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, intercept, (rss / n).sqrt())
}

fn plain_fit(points: &[(f64, f64)], offset: f64) -> Option<ScalingFit> {
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let mut y = Vec::with_capacity(points.len());
    for &(_, loss) in points {
        let v = loss - offset;
        if !(v > 0.0) {
            return None;
        }
        y.push(v.ln());
    }
    let (slope, intercept, residual) = ols(&x, &y);
    Some(ScalingFit {
        exponent: -slope,
        coefficient: intercept.exp(),
        offset: None,
        residual,
        points: points.len(),
        mode: FitMode::Plain,
    })
}

/// Fits `loss = B·n^{−α}` (plain) or `loss = E + B·n^{−α}` (offset).
pub fn fit_power_law(points: &[(f64, f64)], mode: FitMode) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!("a fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(n, l)| !(*n > 0.0) || !(*l > 0.0) || !n.is_finite() || !l.is_finite()) {
        return Err(Error::Domain("sizes and losses must be positive and finite".into()));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Domain("sizes must be strictly increasing".into()));
    }
    match mode {
        FitMode::Plain => plain_fit(points, 0.0).ok_or_else(|| Error::Domain("nonpositive loss".into())),
        FitMode::Offset => {
            let floor = 0.99 * points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let best = (0..OFFSET_GRID)
                .into_par_iter()
                .filter_map(|i| {
                    let e = floor * i as f64 / (OFFSET_GRID - 1) as f64;
                    plain_fit(points, e).map(|f| (i, e, f))
                })
                .min_by(|a, b| a.2.residual.total_cmp(&b.2.residual).then(a.0.cmp(&b.0)))
                .ok_or_else(|| Error::Domain("no offset leaves all losses positive".into()))?;
            Ok(ScalingFit { offset: Some(best.1), mode: FitMode::Offset, ..best.2 })
        }
    }
}

#[derive(Deserialize)]
struct LossRow {
    n: f64,
    loss: f64,
}

/// Loss curve from a CSV with header `n,loss`.
pub fn read_loss_csv<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<LossRow>().map(|r| r.map(|r| (r.n, r.loss)).map_err(Error::from)).collect()
}

/// `coef·n^{−exponent}·(1+u)`, `u` uniform in `±noise`, at `count`
/// log-spaced sizes in `[n_min, n_max]`.
pub fn synthetic_loss_curve(
    coef: f64,
    exponent: f64,
    (n_min, n_max): (f64, f64),
    count: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if count < 2 || !(n_min > 0.0 && n_max > n_min) {
        return Err(Error::Parameter("need at least two sizes on a positive increasing range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (n_min.ln(), n_max.ln());
    Ok((0..count)
        .map(|i| {
            let n = (a + (b - a) * i as f64 / (count - 1) as f64).exp();
            let u = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            (n, coef * n.powf(-exponent) * (1.0 + u))
        })
        .collect())
}

/// Architecture symbols of the covering bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub l_t: u64,
    pub l_ff: u64,
    pub w_ff: u64,
    pub l: u64,
    pub d_embd: u64,
    pub m: u64,
    pub kappa: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "D")]
    pub big_d: f64,
    pub delta: f64,
}

impl ArchParams {
    pub fn validate(&self) -> Result<()> {
        let ints = [self.l_t, self.l_ff, self.w_ff, self.l, self.d_embd, self.m];
        if ints.iter().any(|v| *v == 0) {
            return Err(Error::Domain("integer architecture parameters must be positive".into()));
        }
        for (name, v) in [("κ", self.kappa), ("M", self.big_m), ("R", self.r), ("D", self.big_d)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Domain(format!("δ must lie in (0,1], got {}", self.delta)));
        }
        Ok(())
    }

    /// `P = 4·d_embd²·w_ff²·D·(m + L_ff)·L_T`.
    pub fn covering_prefactor(&self) -> f64 {
        4.0 * (self.d_embd as f64).powi(2)
            * (self.w_ff as f64).powi(2)
            * self.big_d
            * (self.m + self.l_ff) as f64
            * self.l_t as f64
    }
}

/// Natural log of the sup-norm covering number of the transformer class.
pub fn log_covering_number(p: &ArchParams) -> Result<f64> {
    p.validate()?;
    let lt = p.l_t as f64;
    let lff = p.l_ff as f64;
    let lt2 = lt * lt;
    let ln2 = std::f64::consts::LN_2;
    let bracket = (lt2 + 1.0) * ln2
        + lff.ln()
        + 3.0 * lt * p.big_m.ln()
        + 18.0 * lt2 * (p.d_embd as f64).ln()
        + 18.0 * lt2 * lff * (p.w_ff as f64).ln()
        + 6.0 * lt2 * lff * p.kappa.ln()
        + lt2 * (p.m as f64).ln()
        + lt2 * (p.l as f64).ln()
        - p.delta.ln();
    Ok(p.covering_prefactor() * bracket)
}

/// `rate(n) = D·d²·n^{−2β/(2β+d)}`, the bound's shape without constants.
pub fn generalization_rate_curve(d: f64, beta: f64, big_d: f64, n_values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(d > 0.0) || !(beta > 0.0) || !(big_d > 0.0) {
        return Err(Error::Domain("d, β and D must be positive".into()));
    }
    if n_values.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::Domain("sample sizes must be positive".into()));
    }
    let e = 2.0 * beta / (2.0 * beta + d);
    Ok(n_values.iter().map(|&n| (n, big_d * d * d * n.powf(-e))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ArchMode {
    /// Target accuracy `ε` for a target with Hölder constant `H_f`.
    Approximation { eps: f64, holder: f64 },
    /// Sample size `n`, grid balanced against the statistical error.
    Estimation { n: f64 },
}

/// Asymptotic drivers behind the concrete table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drivers {
    /// Number of grid patches driving the width: `(2^d d^β H/ε)^{d/β}` or `n^{d/(2β+d)}`.
    pub grid: f64,
    /// `d · grid`.
    pub tokens: f64,
    /// `log₂ d`.
    pub depth: f64,
    /// `ln(1/ε)`.
    pub ffn_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchPrediction {
    pub params: ArchParams,
    pub mode: ArchMode,
    pub d: usize,
    pub beta: f64,
    /// Grid points per axis.
    pub n_grid: usize,
    pub d_pad: usize,
    pub drivers: Drivers,
}

/// Concrete cube-approximator architecture for `ε` or `n`.
///
/// Sizes follow the synthesizer's layout with every grid value nonzero;
/// `κ` is its largest weight, the cancellation constant of the sum block.
/// `δ` is `ε` in approximation mode and `1/n` in estimation mode.
pub fn predicted_architecture(mode: ArchMode, d: usize, beta: f64, sup_bound: f64) -> Result<ArchPrediction> {
    if d == 0 || !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Domain("need d ≥ 1 and β ∈ (0,1]".into()));
    }
    if !(sup_bound > 0.0) || !sup_bound.is_finite() {
        return Err(Error::Domain(format!("sup bound must be positive, got {sup_bound}")));
    }
    let df = d as f64;
    let (n_grid, grid, ffn_depth, delta) = match mode {
        ArchMode::Approximation { eps, holder } => {
            if !(eps > 0.0) || !(holder > 0.0) {
                return Err(Error::Domain("ε and H_f must be positive".into()));
            }
            let n = choose_n(eps, d, holder, beta)?;
            let grid = (2f64.powi(d as i32) * df.powf(beta) * holder / eps).powf(df / beta);
            (n, grid, (1.0 / eps).ln(), eps.min(1.0))
        }
        ArchMode::Estimation { n } => {
            if !(n >= 1.0) {
                return Err(Error::Domain(format!("sample size must be at least 1, got {n}")));
            }
            let grid = n.powf(df / (2.0 * beta + df));
            let axis = ((grid.powf(1.0 / df) * (1.0 - 1e-12)).ceil() as usize).max(2);
            (axis, grid, beta * (axis as f64).ln(), 1.0 / n)
        }
    };
    let d_pad = padded_dim(d);
    let l = cube_token_count(d, n_grid);
    let patches = (n_grid as u128).pow(d as u32);
    let dp = d_pad as u128;
    let mut heads = [(n_grid * d) as u128, patches * dp, 3 * patches, 2 * patches];
    if d_pad > 1 {
        heads[1] = heads[1].max(3 * patches * dp / 2);
    }
    let m = *heads.iter().max().expect("non-empty");
    let (psi, rep) = (psi_decode_ffn(n_grid), make_replace_ffn());
    let big_m = sup_bound.max(1.0);
    let params = ArchParams {
        l_t: (product_levels(d) + 4) as u64,
        l_ff: psi.depth().max(rep.depth()) as u64,
        w_ff: psi.width().max(rep.width()) as u64,
        l: u64::try_from(l).map_err(|_| Error::Parameter("token count overflows".into()))?,
        d_embd: D_EMBD as u64,
        m: u64::try_from(m).map_err(|_| Error::Parameter("head count overflows".into()))?,
        kappa: cancellation_constant(big_m, 1.0, l as usize),
        big_m,
        r: sup_bound,
        big_d: df,
        delta,
    };
    Ok(ArchPrediction {
        params,
        mode,
        d,
        beta,
        n_grid,
        d_pad,
        drivers: Drivers { grid, tokens: df * grid, depth: df.log2(), ffn_depth },
    })
}

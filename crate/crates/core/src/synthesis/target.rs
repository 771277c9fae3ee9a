use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed-form targets. Constants are derived on `[0,1]^d` unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    /// `c`.
    Constant { value: f64 },
    /// `a·x + b`.
    Linear { a: Vec<f64>, b: f64 },
    /// `A Π_i sin(ω x^i)`.
    ProductOfSines { amplitude: f64, omega: f64 },
    /// `A exp(−‖x−μ‖²/(2σ²))`.
    GaussianBump { amplitude: f64, center: Vec<f64>, sigma: f64 },
    /// `A ‖x−μ‖^β`, Hölder with exponent β.
    Radial { amplitude: f64, center: Vec<f64>, exponent: f64 },
    /// `Σ_k c_k Π_i (x^i)^{e_{k,i}}`.
    Polynomial { terms: Vec<Monomial> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

/// A target with its regularity metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderTarget {
    pub spec: TargetSpec,
    pub dim: usize,
    pub beta: f64,
    pub holder: f64,
    pub sup_bound: f64,
}

impl TargetSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TargetSpec::Constant { value } => *value,
            TargetSpec::Linear { a, b } => a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b,
            TargetSpec::ProductOfSines { amplitude, omega } => {
                amplitude * x.iter().map(|v| (omega * v).sin()).product::<f64>()
            }
            TargetSpec::GaussianBump { amplitude, center, sigma } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            TargetSpec::Radial { amplitude, center, exponent } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * r2.sqrt().powf(*exponent)
            }
            TargetSpec::Polynomial { terms } => terms
                .iter()
                .map(|m| m.coef * m.powers.iter().zip(x).map(|(p, v)| v.powi(*p as i32)).product::<f64>())
                .sum(),
        }
    }

    /// Hölder exponent, Hölder constant and sup bound on `[0,1]^d`.
    fn constants(&self, d: usize) -> Result<(f64, f64, f64)> {
        let df = d as f64;
        let check_len = |v: &Vec<f64>, what: &str| {
            if v.len() != d {
                Err(Error::Parameter(format!("{what} has length {}, dimension is {d}", v.len())))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            TargetSpec::Constant { value } => (1.0, 0.0, value.abs()),
            TargetSpec::Linear { a, b } => {
                check_len(a, "coefficient vector")?;
                let l2 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let l1 = a.iter().map(|v| v.abs()).sum::<f64>();
                (1.0, l2, b.abs() + l1)
            }
            TargetSpec::ProductOfSines { amplitude, omega } => {
                (1.0, amplitude.abs() * omega.abs() * df.sqrt(), amplitude.abs())
            }
            TargetSpec::GaussianBump { amplitude, center, sigma } => {
                check_len(center, "center")?;
                if !(*sigma > 0.0) {
                    return Err(Error::Parameter("bump width must be positive".into()));
                }
                (1.0, amplitude.abs() / (sigma * std::f64::consts::E.sqrt()), amplitude.abs())
            }
            TargetSpec::Radial { amplitude, center, exponent } => {
                check_len(center, "center")?;
                if !(*exponent > 0.0 && *exponent <= 1.0) {
                    return Err(Error::Parameter(format!("radial exponent {exponent} outside (0,1]")));
                }
                let far: f64 = center.iter().map(|c| c.abs().max((1.0 - c).abs()).powi(2)).sum();
                (*exponent, amplitude.abs(), amplitude.abs() * far.sqrt().powf(*exponent))
            }
            TargetSpec::Polynomial { terms } => {
                let mut h = 0.0;
                let mut r = 0.0;
                for m in terms {
                    if m.powers.len() != d {
                        return Err(Error::Parameter("monomial power list must match the dimension".into()));
                    }
                    let e2 = m.powers.iter().map(|p| (*p as f64).powi(2)).sum::<f64>().sqrt();
                    h += m.coef.abs() * e2;
                    r += m.coef.abs();
                }
                (1.0, h, r)
            }
        })
    }
}

impl HolderTarget {
    /// Registers a target on `[0,1]^d` with derived constants and spot-checks
    /// `|f| ≤ R` on 10⁴ samples.
    pub fn new(spec: TargetSpec, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("dimension must be positive".into()));
        }
        let (beta, holder, sup_bound) = spec.constants(dim)?;
        let t = HolderTarget { spec, dim, beta, holder, sup_bound: sup_bound.max(f64::MIN_POSITIVE) };
        t.spot_check()?;
        Ok(t)
    }

    /// Same with caller-supplied constants (for domains other than the cube).
    pub fn with_constants(spec: TargetSpec, dim: usize, beta: f64, holder: f64, sup_bound: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Parameter(format!("Hölder exponent {beta} outside (0,1]")));
        }
        if !(holder >= 0.0) || !(sup_bound > 0.0) {
            return Err(Error::Parameter("Hölder constant must be nonnegative and sup bound positive".into()));
        }
        Ok(HolderTarget { spec, dim, beta, holder, sup_bound })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.spec.eval(x)
    }

    fn spot_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut x = vec![0.0; self.dim];
        for _ in 0..10_000 {
            for v in x.iter_mut() {
                *v = rng.gen::<f64>();
            }
            let y = self.eval(&x);
            if !y.is_finite() || y.abs() > self.sup_bound * (1.0 + 1e-12) {
                return Err(Error::Parameter(format!("|f| = {} exceeds the sup bound {}", y.abs(), self.sup_bound)));
            }
        }
        Ok(())
    }

    /// Builds one of the named registry entries with its default parameters.
    pub fn registry(name: &str, dim: usize) -> Result<Self> {
        let d = dim;
        let spec = match name {
            "zero" => TargetSpec::Constant { value: 0.0 },
            "linear" => TargetSpec::Linear { a: vec![1.0 / d as f64; d], b: 0.0 },
            "sines" | "product_of_sines" => TargetSpec::ProductOfSines { amplitude: 1.0, omega: std::f64::consts::PI },
            "bump" | "gaussian_bump" => {
                TargetSpec::GaussianBump { amplitude: 1.0, center: vec![0.5; d], sigma: 0.3 }
            }
            "radial" => TargetSpec::Radial { amplitude: 1.0, center: vec![0.5; d], exponent: 0.5 },
            "polynomial" => {
                let mut powers = vec![0; d];
                powers[0] = 2;
                let mut cross = vec![1; d];
                cross[0] = 0;
                if d == 1 {
                    cross[0] = 1;
                }
                TargetSpec::Polynomial {
                    terms: vec![Monomial { coef: 0.5, powers }, Monomial { coef: -0.25, powers: cross }],
                }
            }
            other => return Err(Error::Config(format!("unknown target '{other}'"))),
        };
        HolderTarget::new(spec, dim)
    }
}

/// Names accepted by [`HolderTarget::registry`].
pub const REGISTRY: &[&str] = &["linear", "sines", "bump", "radial", "polynomial", "zero"];

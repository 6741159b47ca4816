//! Exchangeable Archimedean copulas (product, Clayton, Gumbel).
//!
//! All three families share the form `C(u) = ψ(Σ_j t(u_j))`, so evaluation is
//! split into a per-coordinate transform and a combine step. The information
//! module relies on that split to reuse per-margin transforms across a whole
//! outcome grid.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kendall's τ used in place of exact independence for the dependent families.
pub const TAU_EPSILON: f64 = 1e-9;

/// Default Monte-Carlo sample size for [`tau_numeric`].
pub const TAU_NUMERIC_SAMPLES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    Product,
    Clayton,
    Gumbel,
}

impl CopulaFamily {
    pub const ALL: [CopulaFamily; 3] = [Self::Product, Self::Clayton, Self::Gumbel];

    /// Number of dependence parameters.
    pub fn alpha_count(self) -> usize {
        match self {
            CopulaFamily::Product => 0,
            CopulaFamily::Clayton | CopulaFamily::Gumbel => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CopulaFamily::Product => "product",
            CopulaFamily::Clayton => "clayton",
            CopulaFamily::Gumbel => "gumbel",
        }
    }

    /// Admissible dependence parameters: Clayton `(0, ∞)`, Gumbel `[1, ∞)`.
    pub fn check_alpha(self, alpha: f64) -> Result<()> {
        let ok = match self {
            CopulaFamily::Product => true,
            CopulaFamily::Clayton => alpha > 0.0 && alpha.is_finite(),
            CopulaFamily::Gumbel => alpha >= 1.0 && alpha.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "alpha = {alpha} outside the admissible range of the {} copula",
                self.name()
            )))
        }
    }

    /// Whether `alpha` still yields a valid copula on `k` coordinates once
    /// the Clayton family is extended to its negative-dependence branch.
    ///
    /// Finite-difference stencils use this to decide whether a central
    /// difference may straddle the nominal boundary.
    pub(crate) fn extended_ok(self, alpha: f64, k: usize) -> bool {
        match self {
            CopulaFamily::Product => true,
            CopulaFamily::Clayton => alpha.is_finite() && alpha >= -1.0 / (k as f64 - 1.0),
            CopulaFamily::Gumbel => alpha.is_finite() && alpha >= 1.0,
        }
    }

    /// Per-coordinate generator transform `t(u)`; `t(1) = 0` for every family.
    #[inline]
    pub(crate) fn transform(self, alpha: f64, u: f64) -> f64 {
        if u >= 1.0 {
            return 0.0;
        }
        match self {
            CopulaFamily::Product => u.ln(),
            CopulaFamily::Clayton => {
                if alpha == 0.0 {
                    u.ln()
                } else {
                    (-alpha * u.ln()).exp_m1()
                }
            }
            CopulaFamily::Gumbel => (-u.ln()).powf(alpha),
        }
    }

    /// Maps a sum of transforms back to the copula value.
    #[inline]
    pub(crate) fn combine(self, alpha: f64, sum: f64) -> f64 {
        match self {
            CopulaFamily::Product => sum.exp(),
            CopulaFamily::Clayton => {
                if alpha == 0.0 {
                    return sum.exp();
                }
                // max(Σ u^-α - k + 1, 0) branch
                if sum <= -1.0 {
                    return 0.0;
                }
                (-sum.ln_1p() / alpha).exp()
            }
            CopulaFamily::Gumbel => (-sum.powf(1.0 / alpha)).exp(),
        }
    }
}

impl fmt::Display for CopulaFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CopulaFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "product" | "independence" => Ok(CopulaFamily::Product),
            "clayton" => Ok(CopulaFamily::Clayton),
            "gumbel" => Ok(CopulaFamily::Gumbel),
            other => Err(Error::Config(format!("unknown copula family '{other}'"))),
        }
    }
}

/// Copula family with a validated dependence parameter and dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    family: CopulaFamily,
    alpha: f64,
    k: usize,
}

impl CopulaSpec {
    pub fn new(family: CopulaFamily, alpha: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain(format!("block size k = {k} must be at least 2")));
        }
        family.check_alpha(alpha)?;
        let alpha = if family == CopulaFamily::Product { 0.0 } else { alpha };
        Ok(CopulaSpec { family, alpha, k })
    }

    pub fn product(k: usize) -> Result<Self> {
        Self::new(CopulaFamily::Product, 0.0, k)
    }

    /// Builds the copula whose generalized Kendall's τ equals `tau`.
    pub fn from_tau(family: CopulaFamily, tau: f64, k: usize) -> Result<Self> {
        Self::new(family, tau_to_alpha(family, tau)?, k)
    }

    pub fn family(&self) -> CopulaFamily {
        self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The dependence parameters as a vector (empty for the product copula).
    pub fn alpha_vec(&self) -> Vec<f64> {
        match self.family {
            CopulaFamily::Product => Vec::new(),
            _ => vec![self.alpha],
        }
    }

    /// Closed-form generalized Kendall's τ for `k = 2`.
    pub fn tau(&self) -> f64 {
        alpha_to_tau(self.family, self.alpha).expect("validated alpha")
    }

    /// `C(u)` for `u ∈ [0,1]^k`.
    pub fn cdf(&self, u: &[f64]) -> Result<f64> {
        self.check_point(u)?;
        Ok(cdf_raw(self.family, self.alpha, u))
    }

    /// C-volume of the box `[lower, upper]` by `2^k`-term inclusion–exclusion.
    pub fn rectangle_prob(&self, lower: &[f64], upper: &[f64]) -> Result<f64> {
        self.check_point(lower)?;
        self.check_point(upper)?;
        if let Some(j) = (0..self.k).find(|&j| lower[j] > upper[j]) {
            return Err(Error::domain(format!(
                "rectangle lower bound {} exceeds upper bound {} in coordinate {j}",
                lower[j], upper[j]
            )));
        }
        Ok(rectangle_raw(self.family, self.alpha, lower, upper).max(0.0))
    }

    fn check_point(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.k {
            return Err(Error::domain(format!(
                "copula of dimension {} evaluated at a point of length {}",
                self.k,
                u.len()
            )));
        }
        if let Some(v) = u.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("copula argument {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Draws one point from the copula.
    ///
    /// For `k = 2` this is conditional inversion (the second coordinate is
    /// drawn from `∂C/∂u₁`); for larger `k` the Marshall–Olkin frailty
    /// construction is used.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.k == 2 {
            let u: f64 = open_unit(rng);
            let t: f64 = open_unit(rng);
            vec![u, conditional_inverse(self.family, self.alpha, u, t)]
        } else {
            frailty_sample(self.family, self.alpha, self.k, rng)
        }
    }
}

/// Copula value without argument validation; accepts the extended Clayton
/// range used by finite-difference stencils.
pub(crate) fn cdf_raw(family: CopulaFamily, alpha: f64, u: &[f64]) -> f64 {
    if u.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    if family == CopulaFamily::Product {
        return u.iter().map(|&v| v.min(1.0)).product();
    }
    let sum: f64 = u.iter().map(|&v| family.transform(alpha, v)).sum();
    family.combine(alpha, sum)
}

/// Signed inclusion–exclusion sum; may be slightly negative from rounding.
pub(crate) fn rectangle_raw(family: CopulaFamily, alpha: f64, lower: &[f64], upper: &[f64]) -> f64 {
    let k = lower.len();
    let mut vertex = vec![0.0; k];
    let mut total = 0.0;
    for mask in 0u32..(1u32 << k) {
        let mut lower_count = 0;
        for j in 0..k {
            if mask & (1 << j) != 0 {
                vertex[j] = lower[j];
                lower_count += 1;
            } else {
                vertex[j] = upper[j];
            }
        }
        let c = cdf_raw(family, alpha, &vertex);
        if lower_count % 2 == 0 {
            total += c;
        } else {
            total -= c;
        }
    }
    total
}

/// Maps Kendall's τ to the dependence parameter.
///
/// Clayton: `α = 2τ/(1−τ)`; Gumbel: `α = 1/(1−τ)`. A Clayton request for
/// `τ = 0` is answered with the α of `τ = TAU_EPSILON`, since α = 0 is not
/// admissible. The product copula maps only from `τ = 0`.
pub fn tau_to_alpha(family: CopulaFamily, tau: f64) -> Result<f64> {
    if !tau.is_finite() || tau >= 1.0 {
        return Err(Error::domain(format!("tau = {tau} must be below 1")));
    }
    match family {
        CopulaFamily::Product => {
            if tau == 0.0 {
                Ok(0.0)
            } else {
                Err(Error::domain(format!("product copula has tau = 0, not {tau}")))
            }
        }
        CopulaFamily::Clayton => {
            let tau = if tau == 0.0 { TAU_EPSILON } else { tau };
            if tau < 0.0 {
                return Err(Error::domain(format!("Clayton tau = {tau} must lie in (0, 1)")));
            }
            Ok(2.0 * tau / (1.0 - tau))
        }
        CopulaFamily::Gumbel => {
            if tau < 0.0 {
                return Err(Error::domain(format!("Gumbel tau = {tau} must lie in [0, 1)")));
            }
            Ok(1.0 / (1.0 - tau))
        }
    }
}

/// Inverse of [`tau_to_alpha`]: Clayton `τ = α/(α+2)`, Gumbel `τ = (α−1)/α`.
pub fn alpha_to_tau(family: CopulaFamily, alpha: f64) -> Result<f64> {
    family.check_alpha(alpha)?;
    Ok(match family {
        CopulaFamily::Product => 0.0,
        CopulaFamily::Clayton => alpha / (alpha + 2.0),
        CopulaFamily::Gumbel => (alpha - 1.0) / alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TauEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of the generalized Kendall's τ,
/// `τ_k = (2^k E[C(U)] − 1) / (2^{k−1} − 1)` with `U ~ C`.
pub fn tau_numeric(spec: &CopulaSpec, samples: usize, seed: u64) -> TauEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..samples {
        let u = spec.sample(&mut rng);
        let c = cdf_raw(spec.family, spec.alpha, &u);
        let delta = c - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (c - mean);
    }
    let k = spec.k as i32;
    let scale = 2f64.powi(k) / (2f64.powi(k - 1) - 1.0);
    let var = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
    TauEstimate {
        estimate: (2f64.powi(k) * mean - 1.0) / (2f64.powi(k - 1) - 1.0),
        std_error: scale * (var / samples as f64).sqrt(),
        samples,
    }
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            return v;
        }
    }
}

/// Solves `∂C/∂u(u, v) = t` for `v`.
fn conditional_inverse(family: CopulaFamily, alpha: f64, u: f64, t: f64) -> f64 {
    match family {
        CopulaFamily::Product => t,
        CopulaFamily::Clayton => {
            // v = (u^-α (t^{-α/(1+α)} - 1) + 1)^{-1/α}
            let inner = (-alpha * u.ln()).exp() * (-alpha / (1.0 + alpha) * t.ln()).exp_m1();
            (-inner.ln_1p() / alpha).exp()
        }
        CopulaFamily::Gumbel => {
            let a = -u.ln();
            let h = |v: f64| {
                let b = -v.ln();
                let s = a.powf(alpha) + b.powf(alpha);
                let c = (-s.powf(1.0 / alpha)).exp();
                c / u * a.powf(alpha - 1.0) * s.powf(1.0 / alpha - 1.0)
            };
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..64 {
                let mid = 0.5 * (lo + hi);
                if mid <= 0.0 || mid >= 1.0 {
                    break;
                }
                if h(mid) < t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }
}

/// Marshall–Olkin sampling: `U_j = φ⁻¹(E_j / V)` with frailty `V`.
fn frailty_sample<R: Rng + ?Sized>(family: CopulaFamily, alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let mut exp = || -> f64 { Exp1.sample(rng) };
    let mut e: Vec<f64> = (0..k).map(|_| exp()).collect();
    match family {
        CopulaFamily::Product => e.iter().map(|x| (-x).exp()).collect(),
        CopulaFamily::Clayton => {
            let v: f64 = Gamma::new(1.0 / alpha, 1.0).expect("positive shape").sample(rng);
            e.iter().map(|x| (-(x / v).ln_1p() / alpha).exp()).collect()
        }
        CopulaFamily::Gumbel => {
            // positive stable variate with Laplace transform exp(-s^θ), θ = 1/α
            let theta = 1.0 / alpha;
            let w: f64 = std::f64::consts::PI * open_unit(rng);
            let ew: f64 = Exp1.sample(rng);
            let v = if theta >= 1.0 {
                1.0
            } else {
                (theta * w).sin() / w.sin().powf(1.0 / theta)
                    * (((1.0 - theta) * w).sin() / ew).powf((1.0 - theta) / theta)
            };
            for x in e.iter_mut() {
                *x = (-(*x / v).powf(theta)).exp();
            }
            e
        }
    }
}

//! Marginal GLMs for Bernoulli/logit and Poisson/log responses.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Bernoulli,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Log,
}

impl FromStr for Response {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" => Ok(Response::Bernoulli),
            "poisson" => Ok(Response::Poisson),
            other => Err(Error::Config(format!("unknown response family '{other}'"))),
        }
    }
}

impl FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "log" => Ok(Link::Log),
            other => Err(Error::Config(format!("unknown link '{other}'"))),
        }
    }
}

/// One column of the marginal model matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BasisTerm {
    Intercept,
    /// `x_i`
    Linear(usize),
    /// `x_i²`
    Quadratic(usize),
    /// `1{x_factor = level}` for a categorical factor.
    Indicator { factor: usize, level: i64 },
}

impl BasisTerm {
    pub fn eval(&self, x: &TreatmentPoint) -> f64 {
        match *self {
            BasisTerm::Intercept => 1.0,
            BasisTerm::Linear(i) => x.0[i],
            BasisTerm::Quadratic(i) => x.0[i] * x.0[i],
            BasisTerm::Indicator { factor, level } => {
                if x.0[factor] == level as f64 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn max_factor(&self) -> Option<usize> {
        match *self {
            BasisTerm::Intercept => None,
            BasisTerm::Linear(i) | BasisTerm::Quadratic(i) => Some(i),
            BasisTerm::Indicator { factor, .. } => Some(factor),
        }
    }
}

impl fmt::Display for BasisTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BasisTerm::Intercept => write!(f, "intercept"),
            BasisTerm::Linear(i) => write!(f, "linear({i})"),
            BasisTerm::Quadratic(i) => write!(f, "quad({i})"),
            BasisTerm::Indicator { factor: 0, level } => write!(f, "indicator({level})"),
            BasisTerm::Indicator { factor, level } => write!(f, "indicator({factor},{level})"),
        }
    }
}

impl FromStr for BasisTerm {
    type Err = Error;

    /// Accepts `intercept`, `linear(i)`, `quad(i)`, `indicator(level)` and
    /// `indicator(factor,level)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "intercept" {
            return Ok(BasisTerm::Intercept);
        }
        let bad = || Error::Config(format!("malformed basis term '{s}'"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = &s[..open];
        let args: Vec<&str> = s[open + 1..s.len() - 1].split(',').map(str::trim).collect();
        let index = |a: &str| a.parse::<usize>().map_err(|_| bad());
        match (name, args.as_slice()) {
            ("linear", [i]) => Ok(BasisTerm::Linear(index(i)?)),
            ("quad", [i]) => Ok(BasisTerm::Quadratic(index(i)?)),
            ("indicator", [level]) => Ok(BasisTerm::Indicator {
                factor: 0,
                level: level.parse().map_err(|_| bad())?,
            }),
            ("indicator", [factor, level]) => Ok(BasisTerm::Indicator {
                factor: index(factor)?,
                level: level.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for BasisTerm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BasisTerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A point of the design space. Continuous factors live in `[-1, 1]`;
/// categorical factors store their level number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPoint(pub Vec<f64>);

impl TreatmentPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        TreatmentPoint(coords)
    }

    pub fn scalar(x: f64) -> Self {
        TreatmentPoint(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    /// Lexicographic total order used for block canonicalization.
    pub fn total_cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                ord => return ord,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

/// Result of applying the inverse link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanValue {
    pub value: f64,
    /// Set when `exp` overflowed and the value was clamped to the finite range.
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    response: Response,
    link: Link,
    basis: Vec<BasisTerm>,
}

pub(crate) fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl MarginalModel {
    pub fn new(response: Response, link: Link, basis: Vec<BasisTerm>) -> Result<Self> {
        match (response, link) {
            (Response::Bernoulli, Link::Logit) | (Response::Poisson, Link::Log) => {}
            _ => {
                return Err(Error::Config(format!(
                    "unsupported response/link pairing {response:?}/{link:?}"
                )))
            }
        }
        if basis.is_empty() {
            return Err(Error::Config("marginal model needs at least one basis term".into()));
        }
        Ok(MarginalModel { response, link, basis })
    }

    /// `log η = β0 + β1 x + β2 x²`, Poisson.
    pub fn poisson_quadratic() -> Self {
        Self::new(
            Response::Poisson,
            Link::Log,
            vec![BasisTerm::Intercept, BasisTerm::Linear(0), BasisTerm::Quadratic(0)],
        )
        .expect("valid preset")
    }

    /// Logistic model with one categorical factor: level 1 is the reference,
    /// levels `2..=levels` get an indicator each.
    pub fn logistic_treatments(levels: i64) -> Self {
        let mut basis = vec![BasisTerm::Intercept];
        basis.extend((2..=levels).map(|level| BasisTerm::Indicator { factor: 0, level }));
        Self::new(Response::Bernoulli, Link::Logit, basis).expect("valid preset")
    }

    pub fn response(&self) -> Response {
        self.response
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn basis(&self) -> &[BasisTerm] {
        &self.basis
    }

    /// Number of marginal parameters `r`.
    pub fn r(&self) -> usize {
        self.basis.len()
    }

    /// Number of design-space coordinates the basis reads.
    pub fn min_factors(&self) -> usize {
        self.basis.iter().filter_map(BasisTerm::max_factor).max().map_or(0, |m| m + 1)
    }

    pub fn regressors(&self, x: &TreatmentPoint) -> Vec<f64> {
        self.basis.iter().map(|t| t.eval(x)).collect()
    }

    pub fn linear_predictor(&self, beta: &[f64], x: &TreatmentPoint) -> f64 {
        debug_assert_eq!(beta.len(), self.r());
        self.basis.iter().zip(beta).map(|(t, b)| t.eval(x) * b).sum()
    }

    pub fn inverse_link(&self, eta: f64) -> MeanValue {
        match self.link {
            Link::Logit => MeanValue { value: expit(eta), saturated: false },
            Link::Log => {
                let value = eta.exp();
                if value.is_finite() {
                    MeanValue { value, saturated: false }
                } else {
                    MeanValue { value: f64::MAX, saturated: true }
                }
            }
        }
    }

    pub fn mean(&self, beta: &[f64], x: &TreatmentPoint) -> Result<MeanValue> {
        if beta.len() != self.r() {
            return Err(Error::domain(format!("beta has length {}, expected {}", beta.len(), self.r())));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::domain("beta must be finite"));
        }
        Ok(self.inverse_link(self.linear_predictor(beta, x)))
    }

    /// `(F(y), p(y))` for a response with the given mean.
    pub fn cdf_pmf(&self, mean: f64, y: i64) -> Result<(f64, f64)> {
        if y < 0 {
            return Err(Error::domain(format!("outcome {y} is negative")));
        }
        match self.response {
            Response::Bernoulli => match y {
                0 => Ok((1.0 - mean, 1.0 - mean)),
                1 => Ok((1.0, mean)),
                _ => Err(Error::domain(format!("Bernoulli outcome {y} not in {{0, 1}}"))),
            },
            Response::Poisson => Ok((poisson_cdf(y as u64, mean), poisson_pmf(y as u64, mean))),
        }
    }

    pub fn marginal_cdf_pmf(&self, beta: &[f64], x: &TreatmentPoint, y: i64) -> Result<(f64, f64)> {
        let mean = self.mean(beta, x)?.value;
        self.cdf_pmf(mean, y)
    }

    /// Smallest `N` with `F(N) ≥ 1 − tail_tol`; Bernoulli always gives 1.
    pub fn truncation_bound(&self, mean: f64, tail_tol: f64) -> u64 {
        match self.response {
            Response::Bernoulli => 1,
            Response::Poisson => {
                // P(Y > N) = P(N + 1, μ), decreasing in N
                let upper_tail = |n: u64| gamma_lr(n as f64 + 1.0, mean);
                let mut hi = (mean + 50.0 * mean.sqrt() + 50.0).ceil() as u64;
                while upper_tail(hi) > tail_tol {
                    hi *= 2;
                }
                let mut lo = 0u64;
                if upper_tail(lo) <= tail_tol {
                    return 0;
                }
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if upper_tail(mid) <= tail_tol {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    /// Outcome window `[lo, hi]` holding all but `tail_tol` mass on each side.
    pub fn support_window(&self, mean: f64, tail_tol: f64) -> (u64, u64) {
        match self.response {
            Response::Bernoulli => (0, 1),
            Response::Poisson => {
                let hi = self.truncation_bound(mean, tail_tol);
                // largest L with F(L − 1) = Q(L, μ) ≤ tail_tol
                let lower_tail = |l: u64| if l == 0 { 0.0 } else { gamma_ur(l as f64, mean) };
                let (mut lo, mut top) = (0u64, mean.floor() as u64 + 1);
                if lower_tail(top) <= tail_tol {
                    return (top.min(hi), hi);
                }
                while top - lo > 1 {
                    let mid = lo + (top - lo) / 2;
                    if lower_tail(mid) <= tail_tol {
                        lo = mid;
                    } else {
                        top = mid;
                    }
                }
                (lo.min(hi), hi)
            }
        }
    }

    /// CDF values `F(lo−1), F(lo), …, F(hi)` at linear predictor `eta`.
    pub(crate) fn cdf_table(&self, eta: f64, lo: u64, hi: u64) -> Vec<f64> {
        match self.response {
            Response::Bernoulli => {
                let f0 = expit(-eta);
                let full = [0.0, f0, 1.0];
                full[lo as usize..=hi as usize + 1].to_vec()
            }
            Response::Poisson => {
                let mean = self.inverse_link(eta).value;
                let mut out = Vec::with_capacity((hi - lo + 2) as usize);
                let mut acc = if lo == 0 { 0.0 } else { gamma_ur(lo as f64, mean) };
                out.push(acc);
                for y in lo..=hi {
                    acc += poisson_pmf(y, mean);
                    out.push(acc.min(1.0));
                }
                out
            }
        }
    }

    /// `dF(y)/dη` for `y = lo−1, …, hi`, aligned with [`Self::cdf_table`].
    pub(crate) fn cdf_table_deta(&self, eta: f64, lo: u64, hi: u64) -> Vec<f64> {
        match self.response {
            Response::Bernoulli => {
                let f0 = expit(-eta);
                let full = [0.0, -f0 * (1.0 - f0), 0.0];
                full[lo as usize..=hi as usize + 1].to_vec()
            }
            Response::Poisson => {
                let mean = self.inverse_link(eta).value;
                let below = if lo == 0 { 0.0 } else { -mean * poisson_pmf(lo - 1, mean) };
                std::iter::once(below).chain((lo..=hi).map(|y| -mean * poisson_pmf(y, mean))).collect()
            }
        }
    }

    /// `F(y)` at linear predictor `eta`, with `F(−1) = 0`.
    pub(crate) fn cdf_at_eta(&self, eta: f64, y: i64) -> f64 {
        if y < 0 {
            return 0.0;
        }
        match self.response {
            Response::Bernoulli => {
                if y == 0 {
                    expit(-eta)
                } else {
                    1.0
                }
            }
            Response::Poisson => poisson_cdf(y as u64, self.inverse_link(eta).value),
        }
    }
}

pub(crate) fn poisson_pmf(y: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return if y == 0 { 1.0 } else { 0.0 };
    }
    let y = y as f64;
    (y * mean.ln() - mean - ln_gamma(y + 1.0)).exp()
}

/// Poisson CDF through the regularized upper incomplete gamma function.
pub(crate) fn poisson_cdf(y: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 1.0;
    }
    gamma_ur(y as f64 + 1.0, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn materials() -> MarginalModel {
        MarginalModel::logistic_treatments(6)
    }

    /// Brute-force Poisson pmf by the recursion p(y+1) = p(y) μ/(y+1).
    fn brute_pmf(mean: f64, upto: usize) -> Vec<f64> {
        let mut p = vec![(-mean).exp()];
        for y in 0..upto {
            let next = p[y] * mean / (y + 1) as f64;
            p.push(next);
        }
        p
    }

    fn brute_bound(mean: f64, tol: f64) -> u64 {
        // work in log space so that large means do not underflow exp(-μ)
        let mut logp = -mean;
        let mut acc = 0.0f64;
        let mut y = 0u64;
        loop {
            acc += logp.exp();
            if acc >= 1.0 - tol {
                return y;
            }
            y += 1;
            logp += mean.ln() - (y as f64).ln();
        }
    }

    #[test]
    fn basis_terms_parse_and_print() {
        for s in ["intercept", "linear(0)", "quad(2)", "indicator(4)", "indicator(1,3)"] {
            let t: BasisTerm = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
        assert!("cubic(0)".parse::<BasisTerm>().is_err());
        assert!("linear(x)".parse::<BasisTerm>().is_err());
        assert!("linear(0".parse::<BasisTerm>().is_err());
    }

    #[test]
    fn pairing_is_checked() {
        assert!(MarginalModel::new(Response::Bernoulli, Link::Log, vec![BasisTerm::Intercept]).is_err());
        assert!(MarginalModel::new(Response::Poisson, Link::Logit, vec![BasisTerm::Intercept]).is_err());
        assert!(MarginalModel::new(Response::Poisson, Link::Log, vec![]).is_err());
    }

    #[test]
    fn mean_examples() {
        let m = materials();
        let x = TreatmentPoint::scalar(3.0);
        assert_eq!(m.mean(&[0.0; 6], &x).unwrap().value, 0.5);
        let p = MarginalModel::poisson_quadratic();
        assert!((p.mean(&[0.0, 4.5, 1.0], &TreatmentPoint::scalar(0.0)).unwrap().value - 1.0).abs() < 1e-15);
        // level 1 is the reference, so only the intercept enters; level 2 picks up beta_1
        let beta = [0.0, -1.0, 2.0, -3.0, 4.0, -5.0];
        let got = m.mean(&beta, &TreatmentPoint::scalar(2.0)).unwrap().value;
        assert!((got - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(m.mean(&beta, &TreatmentPoint::scalar(1.0)).unwrap().value, 0.5);
    }

    #[test]
    fn mean_saturates_instead_of_overflowing() {
        let p = MarginalModel::poisson_quadratic();
        let v = p.mean(&[800.0, 0.0, 0.0], &TreatmentPoint::scalar(0.0)).unwrap();
        assert!(v.saturated);
        assert!(v.value.is_finite());
        assert!(p.mean(&[f64::NAN, 0.0, 0.0], &TreatmentPoint::scalar(0.0)).is_err());
    }

    #[test]
    fn cdf_pmf_examples() {
        let b = materials();
        assert_eq!(b.cdf_pmf(0.5, 0).unwrap().0, 0.5);
        assert_eq!(b.cdf_pmf(0.5, 1).unwrap().1, 0.5);
        assert!(b.cdf_pmf(0.5, 2).is_err());
        let p = MarginalModel::poisson_quadratic();
        assert!((p.cdf_pmf(1.0, 0).unwrap().1 - (-1.0f64).exp()).abs() < 1e-15);
        let brute: f64 = brute_pmf(1.0, 3).iter().sum();
        assert!((p.cdf_pmf(1.0, 3).unwrap().0 - brute).abs() < 1e-13);
        assert!((brute - 0.98101).abs() < 1e-5);
        assert!(matches!(p.cdf_pmf(1.0, -1), Err(Error::Domain(_))));
    }

    #[test]
    fn truncation_bound_examples() {
        let b = materials();
        assert_eq!(b.truncation_bound(0.3, 1e-8), 1);
        let p = MarginalModel::poisson_quadratic();
        let n1 = p.truncation_bound(1.0, 1e-8);
        assert_eq!(n1, brute_bound(1.0, 1e-8));
        assert!((10..=12).contains(&n1));
        let n100 = p.truncation_bound(100.0, 1e-8);
        assert_eq!(n100, brute_bound(100.0, 1e-8));
        assert!((n100 as f64 - 165.0).abs() <= 5.0);
    }

    #[test]
    fn window_cuts_both_tails() {
        let p = MarginalModel::poisson_quadratic();
        let (lo, hi) = p.support_window(1000.0, 1e-12);
        assert!(lo > 700 && hi < 1300);
        assert!(poisson_cdf(lo - 1, 1000.0) <= 1e-12);
        assert!(poisson_cdf(lo, 1000.0) > 1e-12);
        assert_eq!(p.support_window(0.5, 1e-12).0, 0);
        let t = p.cdf_table(1000f64.ln(), lo, hi);
        assert_eq!(t.len() as u64, hi - lo + 2);
        assert!((t[t.len() - 1] - poisson_cdf(hi, 1000.0)).abs() < 1e-12);
    }

    #[test]
    fn pmf_sums_and_means_over_truncated_support() {
        let p = MarginalModel::poisson_quadratic();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tol = 1e-8;
        for _ in 0..100 {
            let beta = [rng.random_range(-1.0..1.0), rng.random_range(4.0..5.0), rng.random_range(0.5..1.5)];
            let x = TreatmentPoint::scalar(rng.random_range(-1.0..1.0));
            let mean = p.mean(&beta, &x).unwrap().value;
            let n = p.truncation_bound(mean, tol);
            let (mut total, mut below_n, mut first_moment, mut last_f) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..=n {
                let (f, pm) = p.cdf_pmf(mean, y as i64).unwrap();
                assert!(pm >= 0.0 && f >= last_f - 1e-15);
                last_f = f;
                below_n = total;
                total += pm;
                first_moment += y as f64 * pm;
            }
            assert!(total >= 1.0 - tol - 1e-12, "{mean} {total}");
            // sum_{y<=n} y p(y) = mean * P(Y <= n-1)
            assert!((first_moment - mean * below_n).abs() <= 1e-12 * mean.max(1.0), "{mean} {first_moment}");
        }
    }

    #[test]
    fn cdf_table_derivative_matches_differences() {
        for (model, eta, lo, hi) in [
            (MarginalModel::poisson_quadratic(), 1.3, 0u64, 20u64),
            (MarginalModel::poisson_quadratic(), 4.0, 20, 90),
            (MarginalModel::logistic_treatments(2), -0.7, 0, 1),
        ] {
            let d = model.cdf_table_deta(eta, lo, hi);
            let h = 1e-6;
            let plus = model.cdf_table(eta + h, lo, hi);
            let minus = model.cdf_table(eta - h, lo, hi);
            for i in 0..d.len() {
                assert!((d[i] - (plus[i] - minus[i]) / (2.0 * h)).abs() < 1e-7, "{i}");
            }
        }
    }

    #[test]
    fn cdf_table_matches_pointwise_cdf() {
        let p = MarginalModel::poisson_quadratic();
        let eta: f64 = 3.7;
        let mean = eta.exp();
        let (lo, hi) = p.support_window(mean, 1e-12);
        let t = p.cdf_table(eta, lo, hi);
        for (i, y) in (lo..=hi).enumerate() {
            assert!((t[i + 1] - poisson_cdf(y, mean)).abs() < 1e-13);
        }
        let b = materials();
        assert_eq!(b.cdf_table(0.0, 0, 1), vec![0.0, 0.5, 1.0]);
        assert_eq!(b.cdf_at_eta(0.0, -1), 0.0);
    }
}

//! Response simulation, maximum-likelihood fitting and a Monte-Carlo check
//! that `(b·M)⁻¹` approximates the covariance of the MLE.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{Design, Factor};
use crate::error::{Error, Result};
use crate::information::{fd_step, Block, CopulaModel, FimEstimator, ParameterPoint};

/// Logit-scale magnitude beyond which a Bernoulli fit is flagged as separated.
pub const SEPARATION_BOUND: f64 = 15.0;

/// Gradient norm at which the quasi-Newton search stops.
pub const GRADIENT_TOL: f64 = 1e-6;

/// Largest tolerated share of failed fits in a simulation study.
pub const MAX_FAILURE_RATE: f64 = 0.02;

/// One draw for `block` from a seeded generator.
pub fn sample_block(block: &Block, model: &CopulaModel, gamma: &ParameterPoint, seed: u64) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.sample_block(block, gamma, &mut rng)
}

/// Blocks with their observed outcomes.
pub type Dataset = Vec<(Block, Vec<u64>)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleFit {
    pub estimate: ParameterPoint,
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separated: bool,
}

/// Distinct (block, outcome) cells with multiplicities.
struct Aggregated {
    cells: Vec<(Block, Vec<u64>, f64)>,
}

impl Aggregated {
    fn new(data: &[(Block, Vec<u64>)]) -> Self {
        let mut map: BTreeMap<(Vec<u64>, Vec<u64>), (Block, f64)> = BTreeMap::new();
        for (b, y) in data {
            map.entry((b.key(), y.clone())).or_insert_with(|| (b.clone(), 0.0)).1 += 1.0;
        }
        Aggregated { cells: map.into_iter().map(|((_, y), (b, n))| (b, y, n)).collect() }
    }

    fn log_likelihood(&self, model: &CopulaModel, gamma: &ParameterPoint) -> f64 {
        let mut total = 0.0;
        for (b, y, n) in &self.cells {
            match model.joint_pmf(b, gamma, y) {
                Ok(p) if p > 0.0 => total += n * p.ln(),
                _ => return f64::NEG_INFINITY,
            }
        }
        total
    }
}

/// Maximizes the log-likelihood over the estimable coordinates by BFGS
/// with central-difference gradients.
pub fn mle_fit(data: &[(Block, Vec<u64>)], model: &CopulaModel, gamma_init: &ParameterPoint) -> Result<MleFit> {
    if data.is_empty() {
        return Err(Error::Config("mle_fit needs a nonempty dataset".into()));
    }
    let agg = Aggregated::new(data);
    let f = |x: &[f64]| -> f64 { -agg.log_likelihood(model, &gamma_init.with_estimable_values(x)) };
    let x0 = gamma_init.estimable_values();
    if !f(&x0).is_finite() {
        return Err(Error::domain("log-likelihood is not finite at the starting point"));
    }
    let (x, fx, grad_norm, iterations, converged) = bfgs(&f, x0, 200);
    let estimate = gamma_init.with_estimable_values(&x);
    let separated = model.margin.response() == crate::margins::Response::Bernoulli
        && estimate.beta().iter().any(|b| b.abs() > SEPARATION_BOUND);
    Ok(MleFit { estimate, log_likelihood: -fx, gradient_norm: grad_norm, iterations, converged, separated })
}

fn gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = fd_step(x[i]);
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Minimizes `f`; returns `(x, f(x), |∇f|, iterations, converged)`.
fn bfgs(f: &dyn Fn(&[f64]) -> f64, mut x: Vec<f64>, max_iters: usize) -> (Vec<f64>, f64, f64, usize, bool) {
    let n = x.len();
    let mut fx = f(&x);
    let mut g = DVector::from_vec(gradient(f, &x));
    let mut h = DMatrix::<f64>::identity(n, n);
    for it in 0..max_iters {
        let gnorm = g.norm();
        if gnorm < GRADIENT_TOL {
            return (x, fx, gnorm, it, true);
        }
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                next = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            return (x, fx, gnorm, it, false);
        };
        let gn = DVector::from_vec(gradient(f, &xn));
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        g = gn;
    }
    let gnorm = g.norm();
    (x, fx, gnorm, max_iters, gnorm < GRADIENT_TOL)
}

/// Largest-remainder apportionment of `b` blocks; ties go to the earlier block.
pub fn round_design(design: &Design, b: usize) -> Vec<usize> {
    let quotas: Vec<f64> = design.weights().iter().map(|w| w * b as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.total_cmp(&ri).then(design.blocks()[i].total_cmp(&design.blocks()[j]))
    });
    for &i in order.iter().take(b.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub labels: Vec<String>,
    pub b: usize,
    pub counts: Vec<usize>,
    pub replications: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// False when more than [`MAX_FAILURE_RATE`] of the fits failed.
    pub valid: bool,
    pub empirical: DMatrix<f64>,
    pub predicted: DMatrix<f64>,
    /// `‖Σ̂ − (bM)⁻¹‖_F / ‖(bM)⁻¹‖_F`.
    pub relative_frobenius: f64,
    /// Per-replication estimates of the estimable coordinates (failed fits omitted).
    pub estimates: Vec<Vec<f64>>,
}

/// Simulates `replications` experiments with the rounded design, refits
/// each by maximum likelihood and compares the empirical covariance with
/// `(Σ n_i M(ζ_i))⁻¹`.
pub fn fim_vs_empirical(
    design: &Design,
    model: &CopulaModel,
    gamma: &ParameterPoint,
    b: usize,
    replications: usize,
    seed: u64,
) -> Result<CovarianceReport> {
    if replications < 1000 {
        return Err(Error::Config(format!("need at least 1000 replications, got {replications}")));
    }
    if b == 0 {
        return Err(Error::Config("block budget b must be positive".into()));
    }
    let counts = round_design(design, b);
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / b as f64).collect();
    let info = model.design_fim(design.blocks(), &weights, gamma, FimEstimator::ExactSum)?;
    let predicted = Factor::new(&(info.entries.clone() * b as f64), 0)?.inverse();

    let runs: Vec<Option<Vec<f64>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut data: Dataset = Vec::with_capacity(b);
            for (block, &n) in design.blocks().iter().zip(&counts) {
                for _ in 0..n {
                    data.push((block.clone(), model.sample_block(block, gamma, &mut rng).ok()?));
                }
            }
            let fit = mle_fit(&data, model, gamma).ok()?;
            (fit.converged && !fit.separated).then(|| fit.estimate.estimable_values())
        })
        .collect();
    let estimates: Vec<Vec<f64>> = runs.iter().flatten().cloned().collect();
    let failures = replications - estimates.len();
    let failure_rate = failures as f64 / replications as f64;
    let q = predicted.nrows();
    let n = estimates.len().max(2) as f64;
    let mean = estimates.iter().fold(DVector::zeros(q), |acc, e| acc + DVector::from_column_slice(e)) / n;
    let empirical = estimates.iter().fold(DMatrix::zeros(q, q), |acc, e| {
        let d = DVector::from_column_slice(e) - &mean;
        acc + &d * d.transpose()
    }) / (n - 1.0);
    let relative_frobenius = (&empirical - &predicted).norm() / predicted.norm();
    Ok(CovarianceReport {
        labels: info.labels,
        b,
        counts,
        replications,
        failures,
        failure_rate,
        valid: failure_rate <= MAX_FAILURE_RATE,
        empirical,
        predicted,
        relative_frobenius,
        estimates,
    })
}

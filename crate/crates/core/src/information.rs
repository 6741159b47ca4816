//! Joint block pmf via Sklar's construction and the Fisher information of a
//! block of `k` dependent discrete responses.
//!
//! For discrete margins the joint pmf of an outcome cell is the C-volume of
//! `[F(y_j − 1), F(y_j)]_{j=1..k}`. Information is computed as the expected
//! outer product of the score. The pmf depends on `β` only through the unit
//! linear predictors `η_j = f(x_j)ᵀβ`, so scores are differenced in
//! `(η_1, …, η_k, α)` and mapped to `γ = (β, α)` by the exact chain rule.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::copula::{self, CopulaFamily, CopulaSpec};
use crate::error::{Error, Result};
use crate::margins::{MarginalModel, Response, TreatmentPoint};

/// Cells whose joint pmf falls below this are dropped from expectations.
pub const PMF_FLOOR: f64 = 1e-14;

/// Largest outcome grid the exact-sum estimator accepts.
pub const EXACT_SUM_CELL_LIMIT: usize = 1_000_000;

/// Default per-margin tail mass cut from Poisson outcome windows.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

/// Below this |α| the Clayton α-score is differenced instead of evaluated.
const CLAYTON_ANALYTIC_MIN_ALPHA: f64 = 1e-3;

/// Default Monte-Carlo sample size for [`FimEstimator::Auto`].
pub const DEFAULT_MC_SAMPLES: usize = 20_000;

/// Relative finite-difference step: `h = max(1e-5, 1e-5·|θ|)`.
pub fn fd_step(theta: f64) -> f64 {
    1e-5f64.max(1e-5 * theta.abs())
}

/// `k` treatment points receiving the units of one block, stored in
/// canonical (lexicographically sorted) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    points: Vec<TreatmentPoint>,
}

impl Block {
    pub fn new(mut points: Vec<TreatmentPoint>) -> Self {
        points.sort_by(|a, b| a.total_cmp(b));
        Block { points }
    }

    /// Block of single-factor points.
    pub fn scalars(xs: &[f64]) -> Self {
        Self::new(xs.iter().map(|&x| TreatmentPoint::scalar(x)).collect())
    }

    pub fn points(&self) -> &[TreatmentPoint] {
        &self.points
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    /// Bit pattern of all coordinates; equal keys mean identical blocks.
    pub fn key(&self) -> Vec<u64> {
        self.points.iter().flat_map(|p| p.coords().iter().map(|c| c.to_bits())).collect()
    }

    pub fn total_cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.points.iter().zip(&other.points) {
            match a.total_cmp(b) {
                Ordering::Equal => {}
                ord => return ord,
            }
        }
        self.points.len().cmp(&other.points.len())
    }

    /// ∞-norm distance between the coordinates of two canonical blocks.
    pub fn linf_distance(&self, other: &Self) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .flat_map(|(a, b)| a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// `γ = (β, α)` with a mask selecting the coordinates that enter the FIM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    estimable: Vec<bool>,
}

impl ParameterPoint {
    /// All `β` coordinates estimable; `α` treated as known.
    pub fn new(beta: Vec<f64>, alpha: Vec<f64>) -> Self {
        let estimable = beta.iter().map(|_| true).chain(alpha.iter().map(|_| false)).collect();
        ParameterPoint { beta, alpha, estimable }
    }

    pub fn with_mask(beta: Vec<f64>, alpha: Vec<f64>, estimable: Vec<bool>) -> Result<Self> {
        if estimable.len() != beta.len() + alpha.len() {
            return Err(Error::Config(format!(
                "estimable mask has length {}, expected {}",
                estimable.len(),
                beta.len() + alpha.len()
            )));
        }
        if !estimable.iter().any(|&e| e) {
            return Err(Error::Config("at least one parameter must be estimable".into()));
        }
        Ok(ParameterPoint { beta, alpha, estimable })
    }

    /// Switches the copula coordinates in or out of the FIM.
    pub fn with_alpha_estimable(mut self, include: bool) -> Self {
        let r = self.beta.len();
        for e in &mut self.estimable[r..] {
            *e = include;
        }
        self
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn estimable(&self) -> &[bool] {
        &self.estimable
    }

    /// Concatenated `γ`.
    pub fn values(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.alpha).copied().collect()
    }

    /// Values of the estimable coordinates, in order.
    pub fn estimable_values(&self) -> Vec<f64> {
        self.values().into_iter().zip(&self.estimable).filter(|(_, &e)| e).map(|(v, _)| v).collect()
    }

    /// Copy with the estimable coordinates replaced by `values`.
    pub fn with_estimable_values(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        let r = self.beta.len();
        let mut it = values.iter();
        for (i, &e) in self.estimable.iter().enumerate() {
            if e {
                let v = *it.next().expect("one value per estimable coordinate");
                if i < r {
                    out.beta[i] = v;
                } else {
                    out.alpha[i - r] = v;
                }
            }
        }
        out
    }

    /// Number of estimable coordinates `q`.
    pub fn q(&self) -> usize {
        self.estimable.iter().filter(|&&e| e).count()
    }

    pub fn alpha_estimable(&self) -> bool {
        self.estimable[self.beta.len()..].iter().any(|&e| e)
    }

    /// Coordinate names of the estimable entries.
    pub fn labels(&self) -> Vec<String> {
        let r = self.beta.len();
        let l = self.alpha.len();
        (0..r + l)
            .filter(|&i| self.estimable[i])
            .map(|i| {
                if i < r {
                    format!("beta{i}")
                } else if l == 1 {
                    "alpha".to_string()
                } else {
                    format!("alpha{}", i - r + 1)
                }
            })
            .collect()
    }
}

/// Marginal model plus copula family: everything needed to turn a block and
/// a parameter point into a joint distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub margin: MarginalModel,
    pub family: CopulaFamily,
    pub k: usize,
    pub tail_tol: f64,
}

impl CopulaModel {
    pub fn new(margin: MarginalModel, family: CopulaFamily, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("block size k = {k} must be at least 2")));
        }
        Ok(CopulaModel { margin, family, k, tail_tol: DEFAULT_TAIL_TOL })
    }

    pub fn from_spec(margin: MarginalModel, copula: &CopulaSpec) -> Self {
        CopulaModel { margin, family: copula.family(), k: copula.k(), tail_tol: DEFAULT_TAIL_TOL }
    }

    pub fn with_tail_tol(mut self, tail_tol: f64) -> Self {
        self.tail_tol = tail_tol;
        self
    }

    pub(crate) fn check(&self, block: &Block, gamma: &ParameterPoint) -> Result<()> {
        if block.k() != self.k {
            return Err(Error::Config(format!(
                "block has {} units but the copula has dimension {}",
                block.k(),
                self.k
            )));
        }
        if gamma.beta.len() != self.margin.r() {
            return Err(Error::Config(format!(
                "beta has length {}, the marginal model has {} parameters",
                gamma.beta.len(),
                self.margin.r()
            )));
        }
        if gamma.alpha.len() != self.family.alpha_count() {
            return Err(Error::Config(format!(
                "{} copula takes {} dependence parameters, got {}",
                self.family,
                self.family.alpha_count(),
                gamma.alpha.len()
            )));
        }
        if let Some(&a) = gamma.alpha.first() {
            self.family.check_alpha(a)?;
        }
        Ok(())
    }

    fn etas(&self, block: &Block, beta: &[f64]) -> Vec<f64> {
        block.points().iter().map(|x| self.margin.linear_predictor(beta, x)).collect()
    }

    fn alpha_of(gamma: &ParameterPoint) -> f64 {
        gamma.alpha.first().copied().unwrap_or(0.0)
    }

    /// Pmf of one outcome cell at the given unit predictors; no validation.
    pub(crate) fn cell_pmf(&self, etas: &[f64], alpha: f64, y: &[u64]) -> f64 {
        let lower: Vec<f64> = etas.iter().zip(y).map(|(&e, &v)| self.margin.cdf_at_eta(e, v as i64 - 1)).collect();
        let upper: Vec<f64> = etas.iter().zip(y).map(|(&e, &v)| self.margin.cdf_at_eta(e, v as i64)).collect();
        copula::rectangle_raw(self.family, alpha, &lower, &upper)
    }

    fn check_outcome(&self, y: &[u64]) -> Result<()> {
        if y.len() != self.k {
            return Err(Error::domain(format!("outcome has length {}, expected {}", y.len(), self.k)));
        }
        if self.margin.response() == Response::Bernoulli && y.iter().any(|&v| v > 1) {
            return Err(Error::domain(format!("Bernoulli outcome {y:?} outside {{0, 1}}")));
        }
        Ok(())
    }

    /// Joint probability of outcome `y` for the block.
    pub fn joint_pmf(&self, block: &Block, gamma: &ParameterPoint, y: &[u64]) -> Result<f64> {
        self.check(block, gamma)?;
        self.check_outcome(y)?;
        let etas = self.etas(block, &gamma.beta);
        Ok(self.cell_pmf(&etas, Self::alpha_of(gamma), y).clamp(0.0, 1.0))
    }

    /// Central finite-difference gradient of `log p(y; γ)` over the estimable
    /// coordinates of `γ`.
    pub fn score(&self, block: &Block, gamma: &ParameterPoint, y: &[u64]) -> Result<DVector<f64>> {
        self.check(block, gamma)?;
        self.check_outcome(y)?;
        let log_pmf = |g: &ParameterPoint| -> f64 {
            let etas = self.etas(block, &g.beta);
            self.cell_pmf(&etas, Self::alpha_of(g), y).ln()
        };
        let base_pmf = self.joint_pmf(block, gamma, y)?;
        if base_pmf <= PMF_FLOOR {
            return Err(Error::ExcludedOutcome { outcome: y.to_vec(), pmf: base_pmf });
        }
        let values = gamma.values();
        let r = gamma.beta.len();
        let mut out = Vec::with_capacity(gamma.q());
        for (v, &est) in gamma.estimable.iter().enumerate() {
            if !est {
                continue;
            }
            let h = fd_step(values[v]);
            let shifted = |delta: f64| {
                let mut vals = values.clone();
                vals[v] += delta;
                let mut g = gamma.clone();
                g.beta.copy_from_slice(&vals[..r]);
                g.alpha.copy_from_slice(&vals[r..]);
                log_pmf(&g)
            };
            let d = if v >= r && !self.family.extended_ok(values[v] - h, self.k) {
                (-3.0 * base_pmf.ln() + 4.0 * shifted(h) - shifted(2.0 * h)) / (2.0 * h)
            } else {
                (shifted(h) - shifted(-h)) / (2.0 * h)
            };
            out.push(d);
        }
        Ok(DVector::from_vec(out))
    }
}

/// Symmetric information matrix over the estimable coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoMatrix {
    pub entries: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Per-entry standard errors (Monte-Carlo estimator only).
    pub std_error: Option<DMatrix<f64>>,
}

impl InfoMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.entries.amax().max(f64::MIN_POSITIVE);
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| (self.entries[(i, j)] - self.entries[(j, i)]).abs() <= rel_tol * scale))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.entries.clone().symmetric_eigenvalues().min()
    }
}

/// How the expectation over outcomes is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimEstimator {
    /// Sum over the truncated outcome grid.
    ExactSum,
    /// Average over `samples` outcomes drawn from the joint pmf.
    MonteCarlo { samples: usize, seed: u64 },
    /// Exact sum when the grid fits under [`EXACT_SUM_CELL_LIMIT`], otherwise Monte Carlo.
    Auto { samples: usize, seed: u64 },
}

impl Default for FimEstimator {
    fn default() -> Self {
        FimEstimator::Auto { samples: DEFAULT_MC_SAMPLES, seed: 0x5eed }
    }
}

/// Information about `(η_1, …, η_k[, α])` plus optional standard errors.
struct PredictorInfo {
    matrix: DMatrix<f64>,
}

impl CopulaModel {
    /// Fisher information of one block at `γ`.
    pub fn block_fim(&self, block: &Block, gamma: &ParameterPoint, estimator: FimEstimator) -> Result<InfoMatrix> {
        self.check(block, gamma)?;
        let etas = self.etas(block, &gamma.beta);
        let jac = self.jacobian(block, gamma);
        let labels = gamma.labels();
        let cells = self.grid_cells(&etas);
        let use_exact = match estimator {
            FimEstimator::ExactSum => {
                if cells > EXACT_SUM_CELL_LIMIT {
                    return Err(Error::GridTooLarge { cells, limit: EXACT_SUM_CELL_LIMIT });
                }
                true
            }
            FimEstimator::MonteCarlo { samples, .. } => {
                if samples < 1000 {
                    return Err(Error::Config(format!("Monte-Carlo FIM needs at least 1000 samples, got {samples}")));
                }
                false
            }
            FimEstimator::Auto { .. } => cells <= EXACT_SUM_CELL_LIMIT,
        };
        if use_exact {
            let info = self.predictor_info_exact(&etas, gamma)?;
            let mut entries = jac.transpose() * &info.matrix * &jac;
            symmetrize(&mut entries);
            Ok(InfoMatrix { entries, labels, std_error: None })
        } else {
            let (samples, seed) = match estimator {
                FimEstimator::MonteCarlo { samples, seed } | FimEstimator::Auto { samples, seed } => (samples, seed),
                FimEstimator::ExactSum => unreachable!(),
            };
            let (entries, se) = self.fim_monte_carlo(&etas, gamma, &jac, samples, seed)?;
            Ok(InfoMatrix { entries, labels, std_error: Some(se) })
        }
    }

    /// Number of cells in the truncated outcome grid.
    pub fn grid_cells(&self, etas: &[f64]) -> usize {
        etas.iter()
            .map(|&e| {
                let (lo, hi) = self.margin.support_window(self.margin.inverse_link(e).value, self.tail_tol);
                (hi - lo + 1) as usize
            })
            .fold(1usize, |acc, w| acc.saturating_mul(w))
    }

    /// `∂(η_1..η_k, α_est) / ∂γ_est`.
    fn jacobian(&self, block: &Block, gamma: &ParameterPoint) -> DMatrix<f64> {
        let r = gamma.beta.len();
        let est_cols: Vec<usize> = (0..gamma.estimable.len()).filter(|&i| gamma.estimable[i]).collect();
        let alpha_rows = usize::from(gamma.alpha_estimable());
        let mut jac = DMatrix::zeros(self.k + alpha_rows, est_cols.len());
        for (j, x) in block.points().iter().enumerate() {
            let f = self.margin.regressors(x);
            for (c, &col) in est_cols.iter().enumerate() {
                if col < r {
                    jac[(j, c)] = f[col];
                }
            }
        }
        if alpha_rows == 1 {
            let c = est_cols.iter().position(|&col| col >= r).expect("alpha column");
            jac[(self.k, c)] = 1.0;
        }
        jac
    }

    /// Parameter perturbations for the finite-difference stencil.
    fn stencil(&self, etas: &[f64], alpha: f64, with_alpha: bool) -> Vec<Derivative> {
        let mut out: Vec<Derivative> = etas
            .iter()
            .enumerate()
            .map(|(j, &e)| Derivative { target: Target::Eta(j), h: fd_step(e), forward: false })
            .collect();
        if with_alpha {
            let h = fd_step(alpha);
            let forward = !self.family.extended_ok(alpha - h, self.k);
            out.push(Derivative { target: Target::Alpha, h, forward });
        }
        out
    }

    fn predictor_info_exact(&self, etas: &[f64], gamma: &ParameterPoint) -> Result<PredictorInfo> {
        let k = self.k;
        let alpha = Self::alpha_of(gamma);
        let windows: Vec<(u64, u64)> = etas
            .iter()
            .map(|&e| self.margin.support_window(self.margin.inverse_link(e).value, self.tail_tol))
            .collect();
        let grid = OutcomeGrid::new(&windows);
        let with_alpha = gamma.alpha_estimable();
        let dim = k + usize::from(with_alpha);

        // analytic scores, except the α-score of near-independent Clayton
        // where the closed form cancels catastrophically
        let fd_alpha = with_alpha && self.family == CopulaFamily::Clayton && alpha.abs() < CLAYTON_ANALYTIC_MIN_ALPHA;
        let eval = grid.evaluate(self, etas, alpha, true, with_alpha && !fd_alpha);
        let base = eval.pmf;
        let mut scores: Vec<Vec<f64>> = eval
            .d_eta
            .into_iter()
            .chain(eval.d_alpha)
            .map(|g| g.iter().zip(&base).map(|(d, p)| d / p).collect())
            .collect();
        if fd_alpha {
            let h = fd_step(alpha);
            let p1 = grid.evaluate(self, etas, alpha + h, false, false).pmf;
            let p2 = grid.evaluate(self, etas, alpha - h, false, false).pmf;
            scores.push((0..grid.cells).map(|c| (p1[c] / p2[c]).ln() / (2.0 * h)).collect());
        }

        let mut matrix = DMatrix::zeros(dim, dim);
        let mut score = vec![0.0; dim];
        for c in 0..grid.cells {
            let p = base[c];
            if p <= PMF_FLOOR {
                continue;
            }
            let mut finite = true;
            for (a, s) in scores.iter().enumerate() {
                score[a] = s[c];
                finite &= s[c].is_finite();
            }
            if !finite {
                continue;
            }
            for a in 0..dim {
                let pa = p * score[a];
                for b in a..dim {
                    matrix[(a, b)] += pa * score[b];
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                matrix[(a, b)] = matrix[(b, a)];
            }
        }
        Ok(PredictorInfo { matrix })
    }

    fn fim_monte_carlo(
        &self,
        etas: &[f64],
        gamma: &ParameterPoint,
        jac: &DMatrix<f64>,
        samples: usize,
        seed: u64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let alpha = Self::alpha_of(gamma);
        let derivs = self.stencil(etas, alpha, gamma.alpha_estimable());
        let q = jac.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mean = DMatrix::<f64>::zeros(q, q);
        let mut m2 = DMatrix::<f64>::zeros(q, q);
        let mut s = DVector::<f64>::zeros(derivs.len());
        for n in 1..=samples {
            let y = self.sample_outcome(etas, alpha, &mut rng)?;
            let p0 = self.cell_pmf(etas, alpha, &y);
            let mut outer = DMatrix::<f64>::zeros(q, q);
            if p0 > PMF_FLOOR {
                let mut finite = true;
                for (a, d) in derivs.iter().enumerate() {
                    let (plus, minus) = d.shifted(etas, alpha, 1.0, if d.forward { 2.0 } else { -1.0 });
                    let pp = self.cell_pmf(&plus.0, plus.1, &y);
                    let pm = self.cell_pmf(&minus.0, minus.1, &y);
                    s[a] = if d.forward {
                        (-3.0 * p0.ln() + 4.0 * pp.ln() - pm.ln()) / (2.0 * d.h)
                    } else {
                        (pp / pm).ln() / (2.0 * d.h)
                    };
                    finite &= s[a].is_finite();
                }
                if finite {
                    let g = jac.transpose() * &s;
                    outer = &g * g.transpose();
                }
            }
            let delta = &outer - &mean;
            mean += &delta / n as f64;
            let delta2 = &outer - &mean;
            m2 += delta.component_mul(&delta2);
        }
        let var = m2 / (samples.max(2) - 1) as f64;
        let se = var.map(|v| (v / samples as f64).sqrt());
        symmetrize(&mut mean);
        Ok((mean, se))
    }

    /// Draws an outcome by sequential conditional inversion: the first unit
    /// from its margin, each further unit from its conditional given the
    /// units already drawn.
    pub(crate) fn sample_outcome<R: Rng + ?Sized>(&self, etas: &[f64], alpha: f64, rng: &mut R) -> Result<Vec<u64>> {
        let k = self.k;
        let mut lower = vec![0.0; k];
        let mut upper = vec![1.0; k];
        let mut prefix = 1.0;
        let mut y = vec![0u64; k];
        for j in 0..k {
            let t = rng.random::<f64>() * prefix;
            let mut cum = |v: u64| -> f64 {
                let (l, u) = (lower[j], upper[j]);
                lower[j] = 0.0;
                upper[j] = self.margin.cdf_at_eta(etas[j], v as i64);
                let c = copula::rectangle_raw(self.family, alpha, &lower, &upper);
                lower[j] = l;
                upper[j] = u;
                c
            };
            let mean = self.margin.inverse_link(etas[j]).value;
            let mut hi = self.margin.truncation_bound(mean, self.tail_tol);
            let mut top = cum(hi);
            let mut extensions = 0;
            while top < t {
                if extensions >= 8 {
                    return Err(Error::TruncationDeficit { deficit: (prefix - top) / prefix, tail_tol: self.tail_tol });
                }
                hi = hi * 2 + 1;
                top = cum(hi);
                extensions += 1;
            }
            // smallest v in [0, hi] with cum(v) >= t
            let (mut lo_v, mut hi_v) = (0u64, hi);
            if cum(0) >= t {
                hi_v = 0;
            } else {
                while hi_v - lo_v > 1 {
                    let mid = lo_v + (hi_v - lo_v) / 2;
                    if cum(mid) >= t {
                        hi_v = mid;
                    } else {
                        lo_v = mid;
                    }
                }
            }
            y[j] = hi_v;
            lower[j] = self.margin.cdf_at_eta(etas[j], hi_v as i64 - 1);
            upper[j] = self.margin.cdf_at_eta(etas[j], hi_v as i64);
            prefix = copula::rectangle_raw(self.family, alpha, &lower, &upper).max(0.0);
        }
        Ok(y)
    }

    /// Draws one outcome for `block` at `γ`.
    pub fn sample_block<R: Rng + ?Sized>(&self, block: &Block, gamma: &ParameterPoint, rng: &mut R) -> Result<Vec<u64>> {
        self.check(block, gamma)?;
        let etas = self.etas(block, &gamma.beta);
        self.sample_outcome(&etas, Self::alpha_of(gamma), rng)
    }

    /// `M(ξ; γ) = Σ w_i M(ζ_i; γ)`.
    pub fn design_fim(&self, blocks: &[Block], weights: &[f64], gamma: &ParameterPoint, estimator: FimEstimator) -> Result<InfoMatrix> {
        let mut total: Option<InfoMatrix> = None;
        for (b, &w) in blocks.iter().zip(weights) {
            let m = self.block_fim(b, gamma, estimator)?;
            match total.as_mut() {
                None => {
                    total = Some(InfoMatrix {
                        entries: m.entries * w,
                        labels: m.labels,
                        std_error: m.std_error.map(|s| s * w),
                    })
                }
                Some(t) => {
                    t.entries += m.entries * w;
                    t.std_error = match (t.std_error.take(), m.std_error) {
                        (Some(a), Some(b)) => {
                            let bw = b * w;
                            Some((a.component_mul(&a) + bw.component_mul(&bw)).map(f64::sqrt))
                        }
                        _ => None,
                    };
                }
            }
        }
        total.ok_or_else(|| Error::Config("design has no blocks".into()))
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Target {
    Eta(usize),
    Alpha,
}

#[derive(Clone, Copy, Debug)]
struct Derivative {
    target: Target,
    h: f64,
    /// One-sided second-order stencil, used when `α − h` leaves the family.
    forward: bool,
}

impl Derivative {
    /// Parameter states at `+a·h` and `+b·h`.
    fn shifted(&self, etas: &[f64], alpha: f64, a: f64, b: f64) -> ((Vec<f64>, f64), (Vec<f64>, f64)) {
        let at = |m: f64| match self.target {
            Target::Eta(j) => {
                let mut e = etas.to_vec();
                e[j] += m * self.h;
                (e, alpha)
            }
            Target::Alpha => (etas.to_vec(), alpha + m * self.h),
        };
        (at(a), at(b))
    }
}

/// Product grid of outcome cells with shared copula corner evaluations.
struct OutcomeGrid {
    windows: Vec<(u64, u64)>,
    /// Corner count per axis (`width + 1`).
    corner_dims: Vec<usize>,
    corner_strides: Vec<usize>,
    cells: usize,
    /// Inclusion–exclusion offsets and signs relative to a cell's lowest corner.
    vertex_offsets: Vec<(usize, f64)>,
}

impl OutcomeGrid {
    fn new(windows: &[(u64, u64)]) -> Self {
        let k = windows.len();
        let corner_dims: Vec<usize> = windows.iter().map(|&(lo, hi)| (hi - lo + 2) as usize).collect();
        let mut corner_strides = vec![1usize; k];
        for j in (0..k.saturating_sub(1)).rev() {
            corner_strides[j] = corner_strides[j + 1] * corner_dims[j + 1];
        }
        let cells = corner_dims.iter().map(|d| d - 1).product();
        let vertex_offsets = (0..1usize << k)
            .map(|mask| {
                let mut off = 0;
                let mut uppers = 0;
                for j in 0..k {
                    if mask & (1 << j) != 0 {
                        off += corner_strides[j];
                        uppers += 1;
                    }
                }
                // sign is (-1)^(number of lower coordinates)
                let sign = if (k - uppers) % 2 == 0 { 1.0 } else { -1.0 };
                (off, sign)
            })
            .collect();
        OutcomeGrid { windows: windows.to_vec(), corner_dims, corner_strides, cells, vertex_offsets }
    }

    /// Pmf of every cell in row-major order over the windows, with
    /// analytic `∂p/∂η_j` when `grads` is set and `∂p/∂α` when
    /// `alpha_grad` is set.
    fn evaluate(&self, model: &CopulaModel, etas: &[f64], alpha: f64, grads: bool, alpha_grad: bool) -> GridEval {
        let k = self.windows.len();
        let family = model.family;
        let axes: Vec<Axis> = self
            .windows
            .iter()
            .zip(etas)
            .map(|(&(lo, hi), &eta)| Axis::new(model, eta, alpha, lo, hi, grads))
            .collect();
        let kernel = Kernel { family, alpha };

        let corners: usize = self.corner_dims.iter().product();
        let mut values = vec![0.0; corners];
        let mut d_eta = vec![vec![0.0; if grads { corners } else { 0 }]; if grads { k } else { 0 }];
        let mut d_alpha = vec![0.0; if alpha_grad { corners } else { 0 }];
        let mut idx = vec![0usize; k];
        for c in 0..corners {
            if (0..k).all(|j| axes[j].u[idx[j]] > 0.0) {
                let sum: f64 = (0..k).map(|j| axes[j].t[idx[j]]).sum();
                let log_c = kernel.log_value(sum);
                if log_c > f64::NEG_INFINITY {
                    let v = log_c.exp();
                    values[c] = v;
                    if grads {
                        for j in 0..k {
                            let i = idx[j];
                            let dfj = axes[j].df[i];
                            if dfj != 0.0 {
                                d_eta[j][c] = kernel.log_partial(log_c, sum, axes[j].log_u[i], axes[j].t[i]).exp() * dfj;
                            }
                        }
                    }
                    if alpha_grad {
                        let aux: f64 = (0..k).map(|j| axes[j].alpha_aux[idx[j]]).sum();
                        d_alpha[c] = v * kernel.dlog_dalpha(sum, aux);
                    }
                }
            }
            for j in (0..k).rev() {
                idx[j] += 1;
                if idx[j] < self.corner_dims[j] {
                    break;
                }
                idx[j] = 0;
            }
        }

        GridEval {
            pmf: self.volume(&values),
            d_eta: d_eta.iter().map(|g| self.volume(g)).collect(),
            d_alpha: alpha_grad.then(|| self.volume(&d_alpha)),
        }
    }

    /// Inclusion–exclusion of corner quantities into cell quantities.
    fn volume(&self, src: &[f64]) -> Vec<f64> {
        let k = self.windows.len();
        let mut out = Vec::with_capacity(self.cells);
        let mut idx = vec![0usize; k];
        for _ in 0..self.cells {
            let base: usize = (0..k).map(|j| idx[j] * self.corner_strides[j]).sum();
            out.push(self.vertex_offsets.iter().map(|&(off, sign)| sign * src[base + off]).sum());
            for j in (0..k).rev() {
                idx[j] += 1;
                if idx[j] + 1 < self.corner_dims[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        out
    }
}

struct GridEval {
    pmf: Vec<f64>,
    d_eta: Vec<Vec<f64>>,
    d_alpha: Option<Vec<f64>>,
}

/// Per-margin corner data: CDF values and their transforms.
struct Axis {
    u: Vec<f64>,
    log_u: Vec<f64>,
    t: Vec<f64>,
    /// `dF/dη`.
    df: Vec<f64>,
    /// Per-coordinate term of `∂S/∂α` (Clayton `ln u · u^−α`, Gumbel `t · ln(−ln u)`).
    alpha_aux: Vec<f64>,
}

impl Axis {
    fn new(model: &CopulaModel, eta: f64, alpha: f64, lo: u64, hi: u64, grads: bool) -> Self {
        let family = model.family;
        let u = model.margin.cdf_table(eta, lo, hi);
        let log_u: Vec<f64> = u.iter().map(|&v| v.min(1.0).ln()).collect();
        let t: Vec<f64> = u.iter().map(|&v| if v <= 0.0 { 0.0 } else { family.transform(alpha, v) }).collect();
        let df = if grads { model.margin.cdf_table_deta(eta, lo, hi) } else { Vec::new() };
        let alpha_aux = u
            .iter()
            .zip(&log_u)
            .zip(&t)
            .map(|((&v, &lu), &tv)| {
                if v <= 0.0 || v >= 1.0 {
                    return 0.0;
                }
                match family {
                    CopulaFamily::Product => 0.0,
                    CopulaFamily::Clayton => lu * (tv + 1.0),
                    CopulaFamily::Gumbel => tv * (-lu).ln(),
                }
            })
            .collect();
        Axis { u, log_u, t, df, alpha_aux }
    }
}

/// Log-space copula value and derivatives in terms of the transform sum `S`.
struct Kernel {
    family: CopulaFamily,
    alpha: f64,
}

impl Kernel {
    #[inline]
    fn log_value(&self, sum: f64) -> f64 {
        let a = self.alpha;
        match self.family {
            CopulaFamily::Product => sum,
            CopulaFamily::Clayton if a == 0.0 => sum,
            CopulaFamily::Clayton => {
                if sum <= -1.0 {
                    f64::NEG_INFINITY
                } else {
                    -sum.ln_1p() / a
                }
            }
            CopulaFamily::Gumbel => -sum.powf(1.0 / a),
        }
    }

    /// `ln ∂C/∂u_j` given `ln C`, `S`, `ln u_j` and `t_j`.
    #[inline]
    fn log_partial(&self, log_c: f64, sum: f64, log_u: f64, t: f64) -> f64 {
        let a = self.alpha;
        match self.family {
            CopulaFamily::Product => log_c - log_u,
            CopulaFamily::Clayton if a == 0.0 => log_c - log_u,
            CopulaFamily::Clayton => (1.0 + a) * (log_c - log_u),
            CopulaFamily::Gumbel => {
                if a == 1.0 || sum <= 0.0 {
                    log_c - log_u
                } else {
                    log_c - log_u + (1.0 - 1.0 / a) * (t.ln() - sum.ln())
                }
            }
        }
    }

    /// `∂ ln C / ∂α` given `S` and `Σ_j alpha_aux_j`.
    #[inline]
    fn dlog_dalpha(&self, sum: f64, aux: f64) -> f64 {
        let a = self.alpha;
        match self.family {
            CopulaFamily::Product => 0.0,
            CopulaFamily::Clayton => sum.ln_1p() / (a * a) + aux / (a * (1.0 + sum)),
            CopulaFamily::Gumbel => {
                if sum <= 0.0 {
                    return 0.0;
                }
                let r = sum.powf(1.0 / a);
                -r * (-sum.ln() / (a * a) + aux / (a * sum))
            }
        }
    }
}

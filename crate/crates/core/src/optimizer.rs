//! Fedorov–Wynn vertex-direction search over a finite candidate set, with
//! multiplicative weight refinement on the current support.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::criteria::{sensitivity_from, Design, Problem};
use crate::equivalence;
use crate::error::{Error, Result};
use crate::information::Block;
use crate::margins::TreatmentPoint;

/// Finite set of canonical, distinct candidate blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    blocks: Vec<Block>,
    provenance: Provenance,
}

/// How a candidate set was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// `points` equally spaced values on `[lower, upper]`, all unordered `k`-multisets.
    Grid { lower: f64, upper: f64, points: usize, k: usize },
    /// All unordered `k`-multisets of the given factor levels.
    Levels { levels: Vec<i64>, k: usize },
    Explicit,
}

impl CandidateSet {
    pub fn grid(lower: f64, upper: f64, points: usize, k: usize) -> Result<Self> {
        if points < 2 || !(lower < upper) || k < 1 {
            return Err(Error::Config(format!("candidate grid needs points >= 2 and lower < upper (got {points} on [{lower}, {upper}])")));
        }
        let step = (upper - lower) / (points - 1) as f64;
        let values: Vec<f64> = (0..points).map(|i| if i + 1 == points { upper } else { lower + step * i as f64 }).collect();
        Ok(CandidateSet { blocks: multisets(&values, k), provenance: Provenance::Grid { lower, upper, points, k } })
    }

    pub fn levels(levels: &[i64], k: usize) -> Result<Self> {
        if levels.is_empty() || k < 1 {
            return Err(Error::Config("candidate levels must be nonempty".into()));
        }
        let mut sorted = levels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let values: Vec<f64> = sorted.iter().map(|&l| l as f64).collect();
        Ok(CandidateSet { blocks: multisets(&values, k), provenance: Provenance::Levels { levels: sorted, k } })
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        let mut out: Vec<Block> = Vec::with_capacity(blocks.len());
        for b in blocks {
            if !out.iter().any(|o| o.key() == b.key()) {
                out.push(b);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("candidate set is empty".into()));
        }
        Ok(CandidateSet { blocks: out, provenance: Provenance::Explicit })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Spacing of a continuous grid; categorical and explicit sets have none.
    pub fn step(&self) -> Option<f64> {
        match self.provenance {
            Provenance::Grid { lower, upper, points, .. } => Some((upper - lower) / (points - 1) as f64),
            Provenance::Levels { .. } | Provenance::Explicit => None,
        }
    }

    /// Grid with half the spacing; other sets are returned unchanged.
    pub fn refined(&self) -> Self {
        match self.provenance {
            Provenance::Grid { lower, upper, points, k } => {
                Self::grid(lower, upper, 2 * (points - 1) + 1, k).expect("refining a valid grid")
            }
            _ => self.clone(),
        }
    }
}

fn multisets(values: &[f64], k: usize) -> Vec<Block> {
    let mut out = Vec::new();
    let mut idx = vec![0usize; k];
    loop {
        out.push(Block::new(idx.iter().map(|&i| TreatmentPoint::scalar(values[i])).collect()));
        // next nondecreasing index tuple
        let mut j = k;
        while j > 0 && idx[j - 1] + 1 == values.len() {
            j -= 1;
        }
        if j == 0 {
            return out;
        }
        idx[j - 1] += 1;
        let v = idx[j - 1];
        for slot in idx.iter_mut().skip(j) {
            *slot = v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Step `1/(t+2)` at vertex iteration `t`, halved until the criterion does not drop.
    Wynn,
    /// Golden-section search on the mixing weight.
    Golden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Relative tolerance on the equivalence bound `s`.
    pub convergence_tol: f64,
    pub weight_prune_tol: f64,
    /// ∞-norm radius for merging support blocks; `None` uses one grid step
    /// (no merging on categorical candidates).
    pub merge_radius: Option<f64>,
    pub step_rule: StepRule,
    /// Vertex steps between support refinements.
    pub refine_every: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 5000,
            convergence_tol: 1e-3,
            weight_prune_tol: 1e-3,
            merge_radius: None,
            step_rule: StepRule::Golden,
            refine_every: 5,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("optimizer.max_iters must be at least 1".into()));
        }
        for (name, v) in [("convergence_tol", self.convergence_tol), ("weight_prune_tol", self.weight_prune_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("optimizer.{name} must be positive, got {v}")));
            }
        }
        if let Some(r) = self.merge_radius {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("optimizer.merge_radius must be nonnegative, got {r}")));
            }
        }
        if self.refine_every < 1 {
            return Err(Error::Config("optimizer.refine_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub value: f64,
    pub max_sensitivity: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub iterations: usize,
    pub value: f64,
    pub max_sensitivity: f64,
    pub argmax: Block,
    pub s: usize,
    /// `max_sensitivity / s − 1`.
    pub gap: f64,
    /// Whether the merge step was undone because it broke convergence.
    pub merge_reverted: bool,
    pub history: Vec<IterationRecord>,
}

/// Working state: design over candidate indices plus per-node matrices.
struct State<'a> {
    problem: &'a Problem,
    fims: Vec<std::sync::Arc<Vec<DMatrix<f64>>>>,
    support: Vec<usize>,
    weights: Vec<f64>,
}

impl<'a> State<'a> {
    fn matrices(&self) -> Vec<DMatrix<f64>> {
        let per: Vec<_> = self.support.iter().map(|&i| self.fims[i].clone()).collect();
        self.problem.combine(&per, &self.weights, self.problem.q())
    }

    fn value_with(&self, weights: &[f64]) -> Result<f64> {
        let per: Vec<_> = self.support.iter().map(|&i| self.fims[i].clone()).collect();
        self.problem.value_of(&self.problem.combine(&per, weights, self.problem.q()))
    }

    fn value(&self) -> Result<f64> {
        self.value_with(&self.weights)
    }

    fn design(&self, candidates: &[Block]) -> Design {
        let mut pairs: Vec<(Block, f64)> = self.support.iter().map(|&i| candidates[i].clone()).zip(self.weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (blocks, weights) = pairs.into_iter().unzip();
        Design::from_parts_unchecked(blocks, weights)
    }

    fn add_mass(&mut self, cand: usize, a: f64) {
        for w in &mut self.weights {
            *w *= 1.0 - a;
        }
        match self.support.iter().position(|&i| i == cand) {
            Some(p) => self.weights[p] += a,
            None => {
                self.support.push(cand);
                self.weights.push(a);
            }
        }
    }

    fn drop_below(&mut self, tol: f64) {
        let keep: Vec<usize> = (0..self.support.len()).filter(|&p| self.weights[p] >= tol).collect();
        if keep.len() == self.support.len() || keep.is_empty() {
            return;
        }
        self.support = keep.iter().map(|&p| self.support[p]).collect();
        self.weights = keep.iter().map(|&p| self.weights[p]).collect();
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
    }
}

/// Multiplicative update `w_i ← w_i·d_i/s` on a fixed support, with
/// backtracking so the criterion never decreases.
fn refine_state(state: &mut State, max_rounds: usize) -> Result<f64> {
    let s = state.problem.s() as f64;
    let mut value = state.value()?;
    for _ in 0..max_rounds {
        let kernels = state.problem.kernels_of(&state.matrices())?;
        let d: Vec<f64> = state.support.iter().map(|&i| sensitivity_from(&kernels, &state.fims[i])).collect();
        let target: Vec<f64> = state.weights.iter().zip(&d).map(|(w, d)| w * d / s).collect();
        let total: f64 = target.iter().sum();
        let target: Vec<f64> = target.iter().map(|t| t / total).collect();
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = state.weights.iter().zip(&target).map(|(w, t)| w + lambda * (t - w)).collect();
            if let Ok(v) = state.value_with(&trial) {
                if v >= value {
                    accepted = Some((trial, v));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, v)) => {
                let gain = v - value;
                state.weights = trial;
                value = v;
                if gain < 1e-10 {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(value)
}

/// Multiplicative weight refinement on a fixed support; the criterion is
/// nondecreasing over iterations and the loop stops once the gain drops
/// below `1e-10`.
pub fn refine_weights(problem: &Problem, design: &Design, max_rounds: usize) -> Result<Design> {
    problem.prefetch(design.blocks())?;
    let fims = design.blocks().iter().map(|b| problem.block_fims(b)).collect::<Result<Vec<_>>>()?;
    let mut state = State { problem, fims, support: (0..design.len()).collect(), weights: design.weights().to_vec() };
    refine_state(&mut state, max_rounds)?;
    let mut pairs: Vec<(Block, f64)> = design.blocks().iter().cloned().zip(state.weights).collect();
    pairs.retain(|p| p.1 > 0.0);
    let (blocks, weights) = pairs.into_iter().unzip();
    Ok(Design::from_parts_unchecked(blocks, weights))
}

/// Sorts units and blocks, merges duplicates, drops weights below
/// `prune_tol` and renormalizes. Idempotent.
pub fn canonicalize(design: &Design, prune_tol: f64) -> Design {
    let mut pairs: Vec<(Block, f64)> = Vec::new();
    for (b, &w) in design.blocks().iter().zip(design.weights()) {
        let b = Block::new(b.points().to_vec());
        match pairs.iter_mut().find(|p| p.0.key() == b.key()) {
            Some(p) => p.1 += w,
            None => pairs.push((b, w)),
        }
    }
    let total_before: f64 = pairs.iter().map(|p| p.1).sum();
    let kept: Vec<(Block, f64)> = pairs.iter().filter(|p| p.1 / total_before >= prune_tol).cloned().collect();
    let mut pairs = if kept.is_empty() { pairs } else { kept };
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let (blocks, weights) = pairs.into_iter().map(|(b, w)| (b, w / total)).unzip();
    Design::from_parts_unchecked(blocks, weights)
}

/// Merges support blocks within `radius` (∞-norm) into the heavier one.
fn merge_close(state: &mut State, candidates: &[Block], radius: f64) -> bool {
    let mut order: Vec<usize> = (0..state.support.len()).collect();
    order.sort_by(|&a, &b| state.weights[b].total_cmp(&state.weights[a]).then(a.cmp(&b)));
    let mut support: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut merged = false;
    for p in order {
        let c = state.support[p];
        let w = state.weights[p];
        match support.iter().position(|&s| candidates[s].linf_distance(&candidates[c]) <= radius + 1e-12) {
            Some(q) => {
                weights[q] += w;
                merged = true;
            }
            None => {
                support.push(c);
                weights.push(w);
            }
        }
    }
    state.support = support;
    state.weights = weights;
    merged
}

/// Picks `q + 1` spread candidates, adding more until the design is nonsingular.
fn seed_state<'a>(problem: &'a Problem, fims: &[std::sync::Arc<Vec<DMatrix<f64>>>]) -> Result<State<'a>> {
    let n = fims.len();
    let want = (problem.q() + 1).min(n);
    let mut support: Vec<usize> = (0..want).map(|i| if want == 1 { 0 } else { i * (n - 1) / (want - 1) }).collect();
    support.dedup();
    let mut extra = 0usize;
    loop {
        let weights = vec![1.0 / support.len() as f64; support.len()];
        let state = State { problem, fims: fims.to_vec(), support: support.clone(), weights };
        if state.value().is_ok() {
            return Ok(state);
        }
        // deterministic fill: next unused candidate in stride order
        let stride = (n / (problem.q() + 1)).max(1);
        let mut added = false;
        while extra < n {
            let c = (extra * stride + extra / (n / stride).max(1)) % n;
            extra += 1;
            if !support.contains(&c) {
                support.push(c);
                added = true;
                break;
            }
        }
        if !added {
            return Err(Error::Infeasible { candidates: n });
        }
    }
}

fn line_search(state: &State, cand: usize, rule: StepRule, t: usize, current: f64) -> Result<f64> {
    let value_at = |a: f64| -> f64 {
        let mut trial = State { problem: state.problem, fims: state.fims.clone(), support: state.support.clone(), weights: state.weights.clone() };
        trial.add_mass(cand, a);
        trial.value().unwrap_or(f64::NEG_INFINITY)
    };
    match rule {
        StepRule::Wynn => {
            let mut a = 1.0 / (t as f64 + 2.0);
            for _ in 0..40 {
                if value_at(a) >= current {
                    return Ok(a);
                }
                a *= 0.5;
            }
            Ok(0.0)
        }
        StepRule::Golden => {
            let g = (5f64.sqrt() - 1.0) / 2.0;
            let (mut lo, mut hi) = (0.0, 1.0 - 1e-9);
            let mut x1 = hi - g * (hi - lo);
            let mut x2 = lo + g * (hi - lo);
            let (mut f1, mut f2) = (value_at(x1), value_at(x2));
            for _ in 0..40 {
                if f1 < f2 {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + g * (hi - lo);
                    f2 = value_at(x2);
                } else {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - g * (hi - lo);
                    f1 = value_at(x1);
                }
            }
            let a = 0.5 * (lo + hi);
            Ok(if value_at(a) >= current { a } else { 0.0 })
        }
    }
}

/// Computes a design maximizing the criterion over designs supported on
/// `candidates`, certified by the equivalence bound on the same set.
pub fn optimize(problem: &Problem, candidates: &CandidateSet, options: &OptimizerOptions) -> Result<(Design, ConvergenceReport)> {
    options.validate()?;
    let blocks = candidates.blocks();
    problem.prefetch(blocks)?;
    let fims = blocks.iter().map(|b| problem.block_fims(b)).collect::<Result<Vec<_>>>()?;
    let s = problem.s() as f64;
    let bound = s * (1.0 + options.convergence_tol);
    let mut state = seed_state(problem, &fims)?;
    let mut history = Vec::new();
    let mut value = refine_state(&mut state, 50)?;

    let sweep = |state: &State| -> Result<Vec<f64>> {
        let kernels = problem.kernels_of(&state.matrices())?;
        Ok(fims.iter().map(|f| sensitivity_from(&kernels, f)).collect())
    };
    let argmax = |d: &[f64]| -> usize { (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a))).expect("nonempty") };

    let mut iterations = 0;
    let mut d = sweep(&state)?;
    let mut converged = false;
    for t in 0..options.max_iters {
        iterations = t + 1;
        let best = argmax(&d);
        history.push(IterationRecord { iteration: t, value, max_sensitivity: d[best], support: state.support.len() });
        if d[best] <= bound {
            converged = true;
            break;
        }
        let a = line_search(&state, best, options.step_rule, t, value)?;
        if a > 0.0 {
            state.add_mass(best, a);
            value = state.value()?;
        }
        if (t + 1) % options.refine_every == 0 || a == 0.0 {
            state.drop_below(1e-12);
            value = refine_state(&mut state, 200)?;
        }
        d = sweep(&state)?;
    }

    // prune, merge, polish; undo the merge if it breaks the certificate
    let before = (state.support.clone(), state.weights.clone());
    let radius = options.merge_radius.or(candidates.step()).unwrap_or(0.0);
    let mut merge_reverted = false;
    let polish = |state: &mut State, merge: bool| -> Option<(f64, Vec<f64>, bool)> {
        state.support = before.0.clone();
        state.weights = before.1.clone();
        state.drop_below(options.weight_prune_tol);
        let merged = merge && radius > 0.0 && merge_close(state, blocks, radius);
        let mut v = refine_state(state, 2000).ok()?;
        // weights can drift below the prune level again while refining
        for _ in 0..5 {
            let n = state.support.len();
            state.drop_below(options.weight_prune_tol);
            if state.support.len() == n {
                break;
            }
            v = refine_state(state, 2000).ok()?;
        }
        let dd = sweep(state).ok()?;
        Some((v, dd, merged))
    };
    match polish(&mut state, true) {
        Some((v, dd, merged)) if !(merged && converged && dd[argmax(&dd)] > bound) => {
            value = v;
            d = dd;
        }
        first => {
            merge_reverted = first.map(|f| f.2).unwrap_or(false);
            match polish(&mut state, false) {
                Some((v, dd, _)) => {
                    value = v;
                    d = dd;
                }
                None => {
                    state.support = before.0.clone();
                    state.weights = before.1.clone();
                    value = state.value()?;
                    d = sweep(&state)?;
                }
            }
        }
    }
    let best = argmax(&d);
    let max_sensitivity = d[best];
    converged = max_sensitivity <= bound;
    history.push(IterationRecord { iteration: iterations, value, max_sensitivity, support: state.support.len() });
    let design = state.design(blocks);
    let report = ConvergenceReport {
        converged,
        iterations,
        value,
        max_sensitivity,
        argmax: blocks[best].clone(),
        s: problem.s(),
        gap: max_sensitivity / s - 1.0,
        merge_reverted,
        history,
    };
    Ok((design, report))
}

/// Re-checks a design against the equivalence bound on `candidates`.
pub fn certify(problem: &Problem, design: &Design, candidates: &CandidateSet, tol: f64) -> Result<equivalence::VerifyReport> {
    equivalence::verify(problem, design, candidates.blocks(), tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{tau_to_alpha, CopulaFamily};
    use crate::criteria::{CriterionSpec, PriorSpec};
    use crate::information::{CopulaModel, FimEstimator, ParameterPoint};
    use crate::margins::{BasisTerm, Link, MarginalModel, Response};

    fn materials(beta: Vec<f64>) -> Problem {
        let model = CopulaModel::new(MarginalModel::logistic_treatments(6), CopulaFamily::Clayton, 2).unwrap();
        let alpha = tau_to_alpha(CopulaFamily::Clayton, 1.0 / 3.0).unwrap();
        let prior = PriorSpec::Point(ParameterPoint::new(beta, vec![alpha]));
        Problem::new(model, &prior, CriterionSpec::D, FimEstimator::ExactSum).unwrap()
    }

    fn poisson_product() -> Problem {
        let model = CopulaModel::new(MarginalModel::poisson_quadratic(), CopulaFamily::Product, 2).unwrap();
        let base = ParameterPoint::new(vec![0.0, 4.5, 1.0], vec![]);
        let prior = PriorSpec::UniformBox { base, lower: vec![-1.0, 4.0, 0.5], upper: vec![1.0, 5.0, 1.5], nodes_per_dim: 3 };
        Problem::new(model, &prior, CriterionSpec::D, FimEstimator::ExactSum).unwrap()
    }

    #[test]
    fn candidate_sets() {
        let g = CandidateSet::grid(-1.0, 1.0, 41, 2).unwrap();
        assert_eq!(g.len(), 861);
        assert_eq!(g.refined().len(), 81 * 82 / 2);
        assert!((g.step().unwrap() - 0.05).abs() < 1e-15);
        let l = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        assert_eq!(l.len(), 21);
        assert_eq!(CandidateSet::levels(&[1, 2, 3], 3).unwrap().len(), 10);
        let keys: std::collections::HashSet<Vec<u64>> = g.blocks().iter().map(|b| b.key()).collect();
        assert_eq!(keys.len(), 861);
        assert!(CandidateSet::from_blocks(vec![]).is_err());
        assert_eq!(CandidateSet::from_blocks(vec![Block::scalars(&[1.0, 0.0]), Block::scalars(&[0.0, 1.0])]).unwrap().len(), 1);
    }

    #[test]
    fn canonicalize_examples() {
        let d = Design::new(vec![Block::new(vec![TreatmentPoint::scalar(0.7), TreatmentPoint::scalar(0.2)])], vec![1.0]).unwrap();
        let mixed = Design::from_parts_unchecked(
            vec![
                Block::new(vec![TreatmentPoint::scalar(0.7), TreatmentPoint::scalar(0.2)]),
                Block::new(vec![TreatmentPoint::scalar(0.2), TreatmentPoint::scalar(0.7)]),
            ],
            vec![0.5, 0.5],
        );
        let c = canonicalize(&mixed, 1e-4);
        assert_eq!(c.len(), 1);
        assert_eq!(c.weights(), &[1.0]);
        assert_eq!(canonicalize(&d, 1e-4), d);

        let three = Design::new(
            vec![Block::scalars(&[0.0, 0.0]), Block::scalars(&[0.0, 1.0]), Block::scalars(&[1.0, 1.0])],
            vec![0.5, 0.5 - 1e-9, 1e-9],
        )
        .unwrap();
        let c = canonicalize(&three, 1e-4);
        assert_eq!(c.len(), 2);
        assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(canonicalize(&c, 1e-4), c);
    }

    #[test]
    fn intercept_only_any_design_is_optimal() {
        let margin = MarginalModel::new(Response::Bernoulli, Link::Logit, vec![BasisTerm::Intercept]).unwrap();
        let model = CopulaModel::new(margin, CopulaFamily::Gumbel, 2).unwrap();
        let p = Problem::new(model, &PriorSpec::Point(ParameterPoint::new(vec![0.4], vec![1.5])), CriterionSpec::D, FimEstimator::ExactSum)
            .unwrap();
        let cands = CandidateSet::grid(-1.0, 1.0, 5, 2).unwrap();
        let (design, report) = optimize(&p, &cands, &OptimizerOptions::default()).unwrap();
        assert!(report.converged);
        let d = equivalence::sensitivities(&p, &design, cands.blocks()).unwrap();
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn materials_null_prior_support_is_all_mixed_pairs() {
        let p = materials(vec![0.0; 6]);
        let cands = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        let (design, report) = optimize(&p, &cands, &OptimizerOptions::default()).unwrap();
        assert!(report.converged, "{report:?}");
        assert_eq!(design.len(), 15);
        assert!(design.blocks().iter().all(|b| b.points()[0] != b.points()[1]));
        // pure pairs are strictly inside the bound
        for l in 1..=6 {
            let pure = Block::scalars(&[l as f64, l as f64]);
            assert!(equivalence::sensitivity(&p, &design, &pure).unwrap() < p.s() as f64);
        }
    }

    #[test]
    fn wynn_and_golden_agree() {
        let p = materials(vec![0.0, -1.0, 2.0, -3.0, 4.0, -5.0]);
        let cands = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        let golden = optimize(&p, &cands, &OptimizerOptions::default()).unwrap();
        let wynn = optimize(&p, &cands, &OptimizerOptions { step_rule: StepRule::Wynn, ..Default::default() }).unwrap();
        assert!(golden.1.converged && wynn.1.converged);
        assert!((golden.1.value - wynn.1.value).abs() < 1e-3);
    }

    #[test]
    fn history_is_monotone_and_deterministic() {
        let p = materials(vec![0.5, -1.0, 0.3, 0.8, -0.2, 0.1]);
        let cands = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        for rule in [StepRule::Wynn, StepRule::Golden] {
            let opts = OptimizerOptions { step_rule: rule, ..Default::default() };
            let (d1, r1) = optimize(&p, &cands, &opts).unwrap();
            let (d2, _) = optimize(&p, &cands, &opts).unwrap();
            assert_eq!(d1, d2);
            let values: Vec<f64> = r1.history[..r1.history.len() - 1].iter().map(|h| h.value).collect();
            assert!(values.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{values:?}");
        }
    }

    #[test]
    fn refine_weights_fixed_point_and_monotone() {
        let p = materials(vec![0.0; 6]);
        let cands = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        let (design, _) = optimize(&p, &cands, &OptimizerOptions::default()).unwrap();
        let again = refine_weights(&p, &design, 100).unwrap();
        let change = design.weights().iter().zip(again.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(change < 1e-6, "{change}");
        assert!(p.value(&again).unwrap() >= p.value(&design).unwrap());
    }

    #[test]
    fn dominated_block_loses_its_weight() {
        // Poisson log-linear at β = 0: M(±a) = 2·diag(1, a²), so (−½, ½) is a Loewner minorant of (−1, 1)
        let margin = MarginalModel::new(Response::Poisson, Link::Log, vec![BasisTerm::Intercept, BasisTerm::Linear(0)]).unwrap();
        let model = CopulaModel::new(margin, CopulaFamily::Product, 2).unwrap();
        let p = Problem::new(model, &PriorSpec::Point(ParameterPoint::new(vec![0.0, 0.0], vec![])), CriterionSpec::D, FimEstimator::ExactSum)
            .unwrap();
        let good = Block::scalars(&[-1.0, 1.0]);
        let bad = Block::scalars(&[-0.5, 0.5]);
        let scan = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .map(|w| (w, p.value(&Design::new(vec![good.clone(), bad.clone()], vec![w, 1.0 - w]).unwrap()).unwrap()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(scan.0, 0.999);
        let design = Design::new(vec![good.clone(), bad.clone()], vec![0.5, 0.5]).unwrap();
        let refined = refine_weights(&p, &design, 5000).unwrap();
        let w_bad = refined.weights()[refined.blocks().iter().position(|b| *b == bad).unwrap()];
        assert!(w_bad < 0.005, "{w_bad}");
    }

    #[test]
    fn gee_support_weights_match_grid_search() {
        let p = poisson_product();
        let blocks = vec![Block::scalars(&[0.03, 1.0]), Block::scalars(&[1.0, 0.60]), Block::scalars(&[-0.40, 0.78])];
        let start = Design::uniform(blocks.clone()).unwrap();
        let refined = refine_weights(&p, &start, 5000).unwrap();
        let value = |a: f64, b: f64| {
            Design::new(blocks.clone(), vec![a, b, 1.0 - a - b]).ok().and_then(|d| p.value(&d).ok()).unwrap_or(f64::NEG_INFINITY)
        };
        // simplex scan at 0.01, then at 0.001 around the coarse maximum (the objective is concave)
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 1..100 {
            for j in 1..(100 - i) {
                let (a, b) = (i as f64 / 100.0, j as f64 / 100.0);
                let v = value(a, b);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        let (ca, cb) = (best.1, best.2);
        for i in -20..=20 {
            for j in -20..=20 {
                let (a, b) = (ca + i as f64 / 1000.0, cb + j as f64 / 1000.0);
                if a > 0.0 && b > 0.0 && a + b < 1.0 {
                    let v = value(a, b);
                    if v > best.0 {
                        best = (v, a, b);
                    }
                }
            }
        }
        assert!((refined.weights()[0] - best.1).abs() < 0.005);
        assert!((refined.weights()[1] - best.2).abs() < 0.005);
    }

    #[test]
    fn perturbed_optimum_exposes_a_violator() {
        let p = materials(vec![0.0; 6]);
        let cands = CandidateSet::levels(&[1, 2, 3, 4, 5, 6], 2).unwrap();
        let (design, _) = optimize(&p, &cands, &OptimizerOptions::default()).unwrap();
        let mut w = design.weights().to_vec();
        w[0] -= 0.05;
        w[1] += 0.05;
        let perturbed = Design::new(design.blocks().to_vec(), w).unwrap();
        let r = equivalence::verify(&p, &perturbed, cands.blocks(), 0.0).unwrap();
        assert!(r.max_sensitivity > p.s() as f64);
    }
}

//! Sensitivity function and optimality certification.
//!
//! At a design optimal for the prior-averaged criterion, the prior-averaged
//! directional statistic `tr[B(ξ; γ) M(ζ; γ)]` is at most `s` for every
//! block `ζ`, with equality on the support.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{Design, Problem};
use crate::error::Result;
use crate::information::Block;

/// Violators listed in a failing report.
pub const REPORTED_VIOLATORS: usize = 10;

/// Sensitivity of `block` relative to `design`.
pub fn sensitivity(problem: &Problem, design: &Design, block: &Block) -> Result<f64> {
    let kernels = problem.kernels(design)?;
    problem.sensitivity_with(&kernels, block)
}

/// Sensitivities of many blocks, computed in parallel.
pub fn sensitivities(problem: &Problem, design: &Design, blocks: &[Block]) -> Result<Vec<f64>> {
    let kernels = problem.kernels(design)?;
    problem.prefetch(blocks)?;
    blocks.par_iter().map(|b| problem.sensitivity_with(&kernels, b)).collect()
}

/// `Σ w_i·d(ζ_i) − s`, zero for every nonsingular design.
pub fn trace_identity_gap(problem: &Problem, design: &Design) -> Result<f64> {
    let d = sensitivities(problem, design, design.blocks())?;
    let total: f64 = d.iter().zip(design.weights()).map(|(d, w)| d * w).sum();
    Ok(total - problem.s() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub max_sensitivity: f64,
    pub argmax: Block,
    pub bound: f64,
    pub tol: f64,
    pub pass: bool,
    /// Largest sensitivities above the bound, descending; empty on pass.
    pub violators: Vec<(Block, f64)>,
}

/// Checks `max_ζ d(ζ) ≤ s·(1 + tol)` over `candidates`.
pub fn verify(problem: &Problem, design: &Design, candidates: &[Block], tol: f64) -> Result<VerifyReport> {
    let d = sensitivities(problem, design, candidates)?;
    Ok(report(candidates, &d, problem.s() as f64, tol))
}

pub(crate) fn report(candidates: &[Block], d: &[f64], bound: f64, tol: f64) -> VerifyReport {
    let (imax, &max) = d.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("nonempty candidates");
    let pass = max <= bound * (1.0 + tol);
    let mut violators: Vec<(Block, f64)> = Vec::new();
    if !pass {
        let mut order: Vec<usize> = (0..d.len()).filter(|&i| d[i] > bound * (1.0 + tol)).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
        violators = order.into_iter().take(REPORTED_VIOLATORS).map(|i| (candidates[i].clone(), d[i])).collect();
    }
    VerifyReport { max_sensitivity: max, argmax: candidates[imax].clone(), bound, tol, pass, violators }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::{tau_to_alpha, CopulaFamily};
    use crate::criteria::{CriterionSpec, PriorSpec};
    use crate::information::{CopulaModel, FimEstimator, ParameterPoint};
    use crate::margins::{BasisTerm, Link, MarginalModel, Response};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn poisson(family: CopulaFamily, tau: f64, criterion: CriterionSpec, include_alpha: bool) -> Problem {
        let model = CopulaModel::new(MarginalModel::poisson_quadratic(), family, 2).unwrap();
        let alpha = if family == CopulaFamily::Product { vec![] } else { vec![tau_to_alpha(family, tau).unwrap()] };
        let base = ParameterPoint::new(vec![0.0, 4.5, 1.0], alpha).with_alpha_estimable(include_alpha);
        let prior = PriorSpec::UniformBox { base, lower: vec![-1.0, 4.0, 0.5], upper: vec![1.0, 5.0, 1.5], nodes_per_dim: 3 };
        Problem::new(model, &prior, criterion, FimEstimator::ExactSum).unwrap()
    }

    fn gee() -> Design {
        Design::new(
            vec![Block::scalars(&[0.03, 1.0]), Block::scalars(&[1.0, 0.60]), Block::scalars(&[-0.40, 0.78])],
            vec![0.355, 0.310, 0.335],
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_sensitivity_is_constant() {
        let margin = MarginalModel::new(Response::Bernoulli, Link::Logit, vec![BasisTerm::Intercept]).unwrap();
        let model = CopulaModel::new(margin, CopulaFamily::Clayton, 2).unwrap();
        let p = Problem::new(
            model,
            &PriorSpec::Point(ParameterPoint::new(vec![0.3], vec![1.0])),
            CriterionSpec::D,
            FimEstimator::ExactSum,
        )
        .unwrap();
        let d = Design::new(vec![Block::scalars(&[0.0, 0.0])], vec![1.0]).unwrap();
        for b in [Block::scalars(&[0.0, 0.0]), Block::scalars(&[-1.0, 2.0])] {
            assert!((sensitivity(&p, &d, &b).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_prior_d_sensitivity_is_trace() {
        let p = poisson(CopulaFamily::Gumbel, 0.1, CriterionSpec::D, false);
        let g = p.nodes()[13].0.clone();
        let local = Problem::new(p.model().clone(), &PriorSpec::Point(g.clone()), CriterionSpec::D, FimEstimator::ExactSum).unwrap();
        let d = gee();
        let zeta = Block::scalars(&[0.2, 0.9]);
        let m = p.model().design_fim(d.blocks(), d.weights(), &g, FimEstimator::ExactSum).unwrap().entries;
        let mz = p.model().block_fim(&zeta, &g, FimEstimator::ExactSum).unwrap().entries;
        let oracle = (m.try_inverse().unwrap() * mz).trace();
        assert!((sensitivity(&local, &d, &zeta).unwrap() - oracle).abs() < 1e-9 * oracle);
    }

    #[test]
    fn trace_identity_for_all_criterion_forms() {
        let mut a = DMatrix::zeros(4, 2);
        a[(1, 0)] = 1.0;
        a[(2, 0)] = 0.5;
        a[(3, 1)] = 1.0;
        for crit in [CriterionSpec::D, CriterionSpec::DA(a), CriterionSpec::Ds(vec!["beta1".into(), "beta2".into()])] {
            let p = poisson(CopulaFamily::Clayton, 1.0 / 3.0, crit, true);
            let design = Design::new(
                vec![Block::scalars(&[0.03, 1.0]), Block::scalars(&[1.0, 0.60]), Block::scalars(&[-0.40, 0.78]), Block::scalars(&[0.5, 0.5])],
                vec![0.3, 0.3, 0.3, 0.1],
            )
            .unwrap();
            assert!(trace_identity_gap(&p, &design).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn non_optimal_reference_design_fails_verification() {
        let p = poisson(CopulaFamily::Clayton, 1.0 / 3.0, CriterionSpec::D, true);
        let grid: Vec<Block> = (0..=10)
            .flat_map(|i| (i..=10).map(move |j| Block::scalars(&[-1.0 + 0.2 * i as f64, -1.0 + 0.2 * j as f64])))
            .collect();
        let r = verify(&p, &gee(), &grid, 1e-2).unwrap();
        assert!(!r.pass);
        assert!(r.max_sensitivity > r.bound);
        assert!(!r.violators.is_empty() && r.violators.len() <= REPORTED_VIOLATORS);
        assert!(r.violators.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn sensitivity_ignores_unit_order(x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            let p = poisson(CopulaFamily::Gumbel, 1.0 / 3.0, CriterionSpec::D, true);
            let d = gee();
            let a = sensitivity(&p, &d, &Block::scalars(&[x1, x2])).unwrap();
            let b = sensitivity(&p, &d, &Block::scalars(&[x2, x1])).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a >= 0.0);
        }
    }
}

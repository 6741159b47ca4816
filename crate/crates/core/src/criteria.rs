//! Pseudo-Bayesian D, D_A and D_s objectives averaged over a prior by
//! product Gauss–Legendre quadrature.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::information::{Block, CopulaModel, FimEstimator, ParameterPoint};

/// Relative pivot below which an information matrix is declared singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Weight-sum slack accepted on input before renormalization.
const WEIGHT_SUM_SLACK: f64 = 1e-6;

/// Approximate design: distinct canonical blocks with positive weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    blocks: Vec<Block>,
    weights: Vec<f64>,
}

impl Design {
    /// Validates weights, sums within `1e-6` of one are renormalized exactly.
    pub fn new(blocks: Vec<Block>, weights: Vec<f64>) -> Result<Self> {
        if blocks.is_empty() || blocks.len() != weights.len() {
            return Err(Error::Config(format!(
                "design needs one weight per block and at least one block (got {} blocks, {} weights)",
                blocks.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::Config(format!("design weight {w} outside (0, 1]")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_SLACK {
            return Err(Error::Config(format!("design weights sum to {total}, expected 1")));
        }
        for (i, a) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|b| b.key() == a.key()) {
                return Err(Error::Config(format!("duplicate design block {:?}", a.points())));
            }
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Design { blocks, weights })
    }

    /// Equal weights on the given blocks.
    pub fn uniform(blocks: Vec<Block>) -> Result<Self> {
        let n = blocks.len();
        Self::new(blocks, vec![1.0 / n.max(1) as f64; n])
    }

    pub(crate) fn from_parts_unchecked(blocks: Vec<Block>, weights: Vec<f64>) -> Self {
        Design { blocks, weights }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Mixture `λ·self + (1−λ)·other`, canonicalized.
    pub fn mix(&self, other: &Design, lambda: f64) -> Design {
        let mut blocks = self.blocks.clone();
        let mut weights: Vec<f64> = self.weights.iter().map(|w| w * lambda).collect();
        for (b, &w) in other.blocks.iter().zip(&other.weights) {
            match blocks.iter().position(|x| x.key() == b.key()) {
                Some(i) => weights[i] += w * (1.0 - lambda),
                None => {
                    blocks.push(b.clone());
                    weights.push(w * (1.0 - lambda));
                }
            }
        }
        let keep: Vec<usize> = (0..blocks.len()).filter(|&i| weights[i] > 0.0).collect();
        Design {
            blocks: keep.iter().map(|&i| blocks[i].clone()).collect(),
            weights: keep.iter().map(|&i| weights[i]).collect(),
        }
    }
}

/// Prior over `γ`: a point, or a uniform box over `β` integrated by quadrature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    Point(ParameterPoint),
    /// `base` supplies `α` and the estimable mask; its `β` is replaced at each node.
    UniformBox { base: ParameterPoint, lower: Vec<f64>, upper: Vec<f64>, nodes_per_dim: usize },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if let PriorSpec::UniformBox { base, lower, upper, nodes_per_dim } = self {
            if *nodes_per_dim < 1 {
                return Err(Error::Config("prior.nodes_per_dim must be at least 1".into()));
            }
            if lower.len() != base.beta().len() || upper.len() != base.beta().len() {
                return Err(Error::Config(format!(
                    "prior box has {}/{} bounds for {} beta coordinates",
                    lower.len(),
                    upper.len(),
                    base.beta().len()
                )));
            }
            for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                if !(l.is_finite() && u.is_finite() && l < u) {
                    return Err(Error::Config(format!("prior box dimension {i}: need finite lower < upper, got [{l}, {u}]")));
                }
            }
        }
        Ok(())
    }

    /// Any parameter point of the prior, used for labels and masks.
    pub fn base(&self) -> &ParameterPoint {
        match self {
            PriorSpec::Point(g) => g,
            PriorSpec::UniformBox { base, .. } => base,
        }
    }
}

/// Gauss–Legendre nodes and weights on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Quadrature nodes of the prior with weights summing to one.
pub fn quad_grid(prior: &PriorSpec) -> Result<Vec<(ParameterPoint, f64)>> {
    prior.validate()?;
    match prior {
        PriorSpec::Point(g) => Ok(vec![(g.clone(), 1.0)]),
        PriorSpec::UniformBox { base, lower, upper, nodes_per_dim } => {
            let (x, w) = gauss_legendre(*nodes_per_dim);
            let dims = lower.len();
            let total = nodes_per_dim.pow(dims as u32);
            let mut out = Vec::with_capacity(total);
            let mut idx = vec![0usize; dims];
            for _ in 0..total {
                let beta: Vec<f64> = (0..dims)
                    .map(|d| 0.5 * (lower[d] + upper[d]) + 0.5 * (upper[d] - lower[d]) * x[idx[d]])
                    .collect();
                let weight: f64 = idx.iter().map(|&i| 0.5 * w[i]).product();
                out.push((with_beta(base, beta), weight));
                for d in (0..dims).rev() {
                    idx[d] += 1;
                    if idx[d] < *nodes_per_dim {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Ok(out)
        }
    }
}

fn with_beta(base: &ParameterPoint, beta: Vec<f64>) -> ParameterPoint {
    ParameterPoint::with_mask(beta, base.alpha().to_vec(), base.estimable().to_vec()).expect("mask matches base")
}

/// Which functional of the information matrix is maximized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionSpec {
    D,
    /// `log det (Aᵀ M⁻¹ A)⁻¹`, `A` of shape `q × s`.
    DA(DMatrix<f64>),
    /// `log det` of the Schur complement for the named coordinates.
    Ds(Vec<String>),
}

impl CriterionSpec {
    /// Checks the criterion against the estimable coordinate labels.
    pub fn validate(&self, labels: &[String]) -> Result<()> {
        let q = labels.len();
        match self {
            CriterionSpec::D => Ok(()),
            CriterionSpec::DA(a) => {
                if a.nrows() != q || a.ncols() == 0 || a.ncols() > q {
                    return Err(Error::Config(format!(
                        "criterion.A has shape {}x{}, expected {q}xs with 1 <= s <= {q}",
                        a.nrows(),
                        a.ncols()
                    )));
                }
                let sv = a.clone().svd(false, false).singular_values;
                if sv.min() <= 1e-10 * sv.max() {
                    return Err(Error::Config("criterion.A must have full column rank".into()));
                }
                Ok(())
            }
            CriterionSpec::Ds(names) => {
                if names.is_empty() || names.len() >= q {
                    return Err(Error::Config(format!(
                        "criterion.Ds needs a nonempty proper subset of {labels:?}, got {names:?}"
                    )));
                }
                for n in names {
                    if !labels.contains(n) {
                        return Err(Error::Config(format!("criterion.Ds names unknown parameter {n:?}; known {labels:?}")));
                    }
                }
                let mut sorted = names.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != names.len() {
                    return Err(Error::Config("criterion.Ds lists a parameter twice".into()));
                }
                Ok(())
            }
        }
    }

    /// Dimension `s` of the criterion.
    pub fn s(&self, q: usize) -> usize {
        match self {
            CriterionSpec::D => q,
            CriterionSpec::DA(a) => a.ncols(),
            CriterionSpec::Ds(names) => names.len(),
        }
    }

    /// The `A` matrix of the equivalent D_A form (`None` for D).
    fn a_matrix(&self, labels: &[String]) -> Option<DMatrix<f64>> {
        match self {
            CriterionSpec::D => None,
            CriterionSpec::DA(a) => Some(a.clone()),
            CriterionSpec::Ds(names) => {
                let mut a = DMatrix::zeros(labels.len(), names.len());
                for (c, n) in names.iter().enumerate() {
                    let r = labels.iter().position(|l| l == n).expect("validated name");
                    a[(r, c)] = 1.0;
                }
                Some(a)
            }
        }
    }
}

/// Cholesky factor with pivot-based singularity detection.
pub(crate) struct Factor {
    l: DMatrix<f64>,
}

impl Factor {
    pub(crate) fn new(m: &DMatrix<f64>, node: usize) -> Result<Self> {
        let n = m.nrows();
        let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for p in 0..j {
                d -= l[(j, p)] * l[(j, p)];
            }
            if !(d > SINGULAR_PIVOT * scale) || !d.is_finite() {
                return Err(Error::Singular { node, pivot: if scale > 0.0 { d / scale } else { d } });
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in j + 1..n {
                let mut v = m[(i, j)];
                for p in 0..j {
                    v -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = v / dj;
            }
        }
        Ok(Factor { l })
    }

    pub(crate) fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub(crate) fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero pivots");
        self.l.transpose().solve_upper_triangular(&y).expect("nonzero pivots")
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        self.solve(&DMatrix::identity(n, n))
    }
}

/// Sum in a fixed pairwise tree, so results do not depend on scheduling.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Local criterion at one node.
fn local_value(m: &DMatrix<f64>, a: Option<&DMatrix<f64>>, node: usize) -> Result<f64> {
    let f = Factor::new(m, node)?;
    match a {
        None => Ok(f.log_det()),
        Some(a) => {
            let inner = a.transpose() * f.solve(a);
            Ok(-Factor::new(&inner, node)?.log_det())
        }
    }
}

/// Weighted sensitivity kernel `g_n·B_n`, with `B = M⁻¹` for D and
/// `M⁻¹A(AᵀM⁻¹A)⁻¹AᵀM⁻¹` otherwise.
fn local_kernel(m: &DMatrix<f64>, a: Option<&DMatrix<f64>>, node: usize) -> Result<DMatrix<f64>> {
    let f = Factor::new(m, node)?;
    match a {
        None => Ok(f.inverse()),
        Some(a) => {
            let mia = f.solve(a);
            let inner = a.transpose() * &mia;
            let g = Factor::new(&inner, node)?;
            Ok(&mia * g.solve(&mia.transpose()))
        }
    }
}

type NodeFims = Arc<Vec<DMatrix<f64>>>;

/// A model, prior and criterion bound together with a cache of per-node
/// block information matrices.
pub struct Problem {
    model: CopulaModel,
    nodes: Vec<(ParameterPoint, f64)>,
    criterion: CriterionSpec,
    estimator: FimEstimator,
    labels: Vec<String>,
    a: Option<DMatrix<f64>>,
    cache: Mutex<HashMap<Vec<u64>, NodeFims>>,
}

impl Problem {
    pub fn new(model: CopulaModel, prior: &PriorSpec, criterion: CriterionSpec, estimator: FimEstimator) -> Result<Self> {
        let nodes = quad_grid(prior)?;
        let labels = prior.base().labels();
        criterion.validate(&labels)?;
        let a = criterion.a_matrix(&labels);
        Ok(Problem { model, nodes, criterion, estimator, labels, a, cache: Mutex::new(HashMap::new()) })
    }

    pub fn model(&self) -> &CopulaModel {
        &self.model
    }

    pub fn nodes(&self) -> &[(ParameterPoint, f64)] {
        &self.nodes
    }

    pub fn criterion(&self) -> &CriterionSpec {
        &self.criterion
    }

    pub fn estimator(&self) -> FimEstimator {
        self.estimator
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of estimable coordinates.
    pub fn q(&self) -> usize {
        self.labels.len()
    }

    /// Criterion dimension `s`.
    pub fn s(&self) -> usize {
        self.criterion.s(self.q())
    }

    /// Block information at every quadrature node, cached.
    pub fn block_fims(&self, block: &Block) -> Result<NodeFims> {
        let key = block.key();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let fims = self
            .nodes
            .iter()
            .map(|(g, _)| self.model.block_fim(block, g, self.estimator).map(|m| m.entries))
            .collect::<Result<Vec<_>>>()?;
        let fims = Arc::new(fims);
        self.cache.lock().expect("cache lock").insert(key, fims.clone());
        Ok(fims)
    }

    /// Fills the cache for `blocks` in parallel over blocks and nodes.
    pub fn prefetch(&self, blocks: &[Block]) -> Result<()> {
        let missing: Vec<&Block> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            blocks.iter().filter(|b| !cache.contains_key(&b.key()) && seen.insert(b.key())).collect()
        };
        let pairs: Vec<(usize, usize)> =
            (0..missing.len()).flat_map(|b| (0..self.nodes.len()).map(move |n| (b, n))).collect();
        let results: Vec<DMatrix<f64>> = pairs
            .par_iter()
            .map(|&(b, n)| self.model.block_fim(missing[b], &self.nodes[n].0, self.estimator).map(|m| m.entries))
            .collect::<Result<Vec<_>>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        let mut it = results.into_iter();
        for b in missing {
            let fims: Vec<DMatrix<f64>> = it.by_ref().take(self.nodes.len()).collect();
            cache.insert(b.key(), Arc::new(fims));
        }
        Ok(())
    }

    /// Inserts externally computed per-node FIMs (e.g. from a disk cache).
    pub fn insert_cached(&self, block: &Block, fims: Vec<DMatrix<f64>>) {
        self.cache.lock().expect("cache lock").insert(block.key(), Arc::new(fims));
    }

    pub fn cached(&self, block: &Block) -> Option<NodeFims> {
        self.cache.lock().expect("cache lock").get(&block.key()).cloned()
    }

    /// All cached entries, sorted by block key.
    pub fn cache_entries(&self) -> Vec<(Vec<u64>, NodeFims)> {
        let mut out: Vec<_> = self.cache.lock().expect("cache lock").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Restores entries produced by [`Problem::cache_entries`]. Entries with
    /// the wrong node count or dimension are skipped.
    pub fn restore_cache(&self, entries: Vec<(Vec<u64>, Vec<DMatrix<f64>>)>) -> usize {
        let q = self.q();
        let mut cache = self.cache.lock().expect("cache lock");
        let mut restored = 0;
        for (key, fims) in entries {
            if fims.len() == self.nodes.len() && fims.iter().all(|m| m.shape() == (q, q)) {
                cache.insert(key, Arc::new(fims));
                restored += 1;
            }
        }
        restored
    }

    /// Identifies everything a cached block FIM depends on.
    pub fn fingerprint(&self) -> String {
        format!("{:?}|{:?}|{:?}", self.model, self.nodes, self.estimator)
    }

    /// `M(ξ; γ_n)` for every node.
    pub fn design_matrices(&self, design: &Design) -> Result<Vec<DMatrix<f64>>> {
        // canonical summation order keeps values exact under block permutations
        let mut order: Vec<usize> = (0..design.len()).collect();
        order.sort_by(|&i, &j| design.blocks()[i].total_cmp(&design.blocks()[j]));
        let per_block = order.iter().map(|&i| self.block_fims(&design.blocks()[i])).collect::<Result<Vec<_>>>()?;
        let weights: Vec<f64> = order.iter().map(|&i| design.weights()[i]).collect();
        Ok(self.combine(&per_block, &weights, self.q()))
    }

    pub(crate) fn combine(&self, per_block: &[NodeFims], weights: &[f64], q: usize) -> Vec<DMatrix<f64>> {
        (0..self.nodes.len())
            .map(|n| {
                let mut m = DMatrix::zeros(q, q);
                for (f, &w) in per_block.iter().zip(weights) {
                    m += &f[n] * w;
                }
                m
            })
            .collect()
    }

    /// Criterion value from per-node design matrices.
    pub fn value_of(&self, mats: &[DMatrix<f64>]) -> Result<f64> {
        let terms = mats
            .par_iter()
            .enumerate()
            .map(|(n, m)| local_value(m, self.a.as_ref(), n).map(|v| v * self.nodes[n].1))
            .collect::<Result<Vec<_>>>()?;
        Ok(pairwise_sum(&terms))
    }

    /// `Ψ(ξ)`, larger is better.
    pub fn value(&self, design: &Design) -> Result<f64> {
        self.value_of(&self.design_matrices(design)?)
    }

    /// Node-weighted kernels `g_n·B_n`; `sensitivity(ζ) = Σ_n ⟨g_n B_n, M_n(ζ)⟩`.
    pub fn kernels_of(&self, mats: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        mats.par_iter()
            .enumerate()
            .map(|(n, m)| local_kernel(m, self.a.as_ref(), n).map(|b| b * self.nodes[n].1))
            .collect()
    }

    pub fn kernels(&self, design: &Design) -> Result<Vec<DMatrix<f64>>> {
        self.kernels_of(&self.design_matrices(design)?)
    }

    /// `Σ_n tr(g_n B_n M_n(ζ))` for precomputed kernels.
    pub fn sensitivity_with(&self, kernels: &[DMatrix<f64>], block: &Block) -> Result<f64> {
        Ok(sensitivity_from(kernels, &self.block_fims(block)?))
    }

    /// `exp((Ψ(ξ) − Ψ(ξ_ref))/s)`.
    pub fn efficiency(&self, design: &Design, reference: &Design) -> Result<f64> {
        if design == reference {
            return Ok(1.0);
        }
        let s = self.s() as f64;
        Ok(((self.value(design)? - self.value(reference)?) / s).exp())
    }
}

pub(crate) fn sensitivity_from(kernels: &[DMatrix<f64>], fims: &[DMatrix<f64>]) -> f64 {
    let terms: Vec<f64> = kernels.iter().zip(fims).map(|(b, m)| b.dot(m)).collect();
    pairwise_sum(&terms)
}

/// `Ψ(ξ)` for a one-off evaluation.
pub fn criterion_value(
    design: &Design,
    model: &CopulaModel,
    prior: &PriorSpec,
    criterion: &CriterionSpec,
    estimator: FimEstimator,
) -> Result<f64> {
    Problem::new(model.clone(), prior, criterion.clone(), estimator)?.value(design)
}

/// Bayesian efficiency of `design` relative to `reference`.
pub fn efficiency(
    design: &Design,
    reference: &Design,
    model: &CopulaModel,
    prior: &PriorSpec,
    criterion: &CriterionSpec,
    estimator: FimEstimator,
) -> Result<f64> {
    Problem::new(model.clone(), prior, criterion.clone(), estimator)?.efficiency(design, reference)
}

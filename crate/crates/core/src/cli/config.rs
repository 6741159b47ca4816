//! Experiment configuration: one JSON document per experiment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::copula::{alpha_to_tau, tau_to_alpha, CopulaFamily};
use crate::criteria::{CriterionSpec, Design, PriorSpec};
use crate::error::{Error, Result};
use crate::information::{CopulaModel, FimEstimator, ParameterPoint};
use crate::margins::{BasisTerm, Link, MarginalModel, Response};
use crate::optimizer::{CandidateSet, OptimizerOptions};

use super::io::read_design_csv;
use super::presets;

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_SEED: u64 = 0x5eed;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_nodes() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub margin: MarginConfig,
    pub copula: CopulaConfig,
    pub prior: PriorConfig,
    #[serde(default)]
    pub criterion: CriterionConfig,
    pub candidates: CandidateConfig,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub estimator: FimEstimator,
    #[serde(default)]
    pub verify: VerifyConfig,
    /// Fixed designs to evaluate, as design CSV files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<ReferenceConfig>,
    /// Further experiment configs compared side by side by `eff`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub response: String,
    pub link: String,
    pub basis: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopulaConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub k: usize,
    /// Whether α is estimated (adds a row and column to the FIM).
    #[serde(default)]
    pub include_alpha: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Point {
        beta: Vec<f64>,
    },
    /// Independent uniform priors on `[lower_i, upper_i]` for each β_i.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default = "default_nodes")]
        nodes_per_dim: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CriterionConfig {
    #[default]
    #[serde(alias = "D")]
    D,
    /// `A` read from a headerless CSV with one row per parameter.
    #[serde(alias = "DA")]
    Da { matrix_file: String },
    #[serde(alias = "Ds")]
    Ds { params: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateConfig {
    Grid { lower: f64, upper: f64, points: usize },
    Levels { levels: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Relative slack on the bound `s`.
    pub tol: f64,
    /// Certify on a grid twice as fine as the candidate grid.
    pub refine: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { tol: 1e-2, refine: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub name: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub b: usize,
    pub replications: usize,
    /// True β; defaults to the prior centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into(), svg: true }
    }
}

/// Where relative paths inside a config are resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Preset,
}

impl Source {
    pub fn read(&self, rel: &str) -> Result<String> {
        match self {
            Source::Dir(dir) => {
                let p = dir.join(rel);
                std::fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
            }
            Source::Preset => presets::get(rel).map(str::to_owned).ok_or_else(|| Error::Io(format!("no bundled file '{rel}'"))),
        }
    }
}

/// Fully resolved experiment, ready for the engine.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub name: String,
    pub model: CopulaModel,
    pub prior: PriorSpec,
    pub criterion: CriterionSpec,
    pub candidates: CandidateSet,
    pub estimator: FimEstimator,
    pub options: OptimizerOptions,
    pub references: Vec<(String, Design)>,
    pub truth: ParameterPoint,
}

/// Reads and validates a config. `preset:NAME` selects a bundled preset.
pub fn parse_config(path: &str) -> Result<(ExperimentConfig, Source)> {
    let (text, source) = match path.strip_prefix("preset:") {
        Some(name) => {
            let text = presets::config(name).ok_or_else(|| {
                Error::Config(format!("unknown preset '{name}' (available: {})", presets::CONFIG_NAMES.join(", ")))
            })?;
            (text.to_owned(), Source::Preset)
        }
        None => {
            let p = Path::new(path);
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{path}: {e}")))?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (text, Source::Dir(dir))
        }
    };
    let cfg = parse_str(&text)?;
    cfg.check(&source)?;
    Ok((cfg, source))
}

/// Parses JSON text without resolving referenced files.
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))
}

/// Hex sha256 of the canonical serialization.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Issues(Vec<String>);

impl Issues {
    fn push(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.0.push(format!("{path}: {msg}"));
    }

    fn take<T>(&mut self, path: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.push(path, strip(&e));
                None
            }
        }
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Domain(m) | Error::Io(m) => m.clone(),
        other => other.to_string(),
    }
}

impl ExperimentConfig {
    /// Validates everything, reporting every violation with its field path.
    pub fn check(&self, source: &Source) -> Result<()> {
        self.resolve(source).map(|_| ())
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "experiment".into())
    }

    pub fn resolve(&self, source: &Source) -> Result<Experiment> {
        let mut is = Issues(Vec::new());
        if self.schema_version != SCHEMA_VERSION {
            is.push("schema_version", format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }

        let response = is.take("margin.response", self.margin.response.parse::<Response>());
        let link = is.take("margin.link", self.margin.link.parse::<Link>());
        let mut basis = Vec::new();
        for (i, b) in self.margin.basis.iter().enumerate() {
            if let Some(t) = is.take(&format!("margin.basis[{i}]"), b.parse::<BasisTerm>()) {
                basis.push(t);
            }
        }
        let margin = match (response, link) {
            (Some(r), Some(l)) if basis.len() == self.margin.basis.len() => is.take("margin", MarginalModel::new(r, l, basis)),
            _ => None,
        };
        if let Some(t) = self.margin.tail_tol {
            if !(t > 0.0 && t < 1e-3) {
                is.push("margin.tail_tol", format!("{t} must lie in (0, 1e-3)"));
            }
        }

        let family = is.take("copula.family", self.copula.family.parse::<CopulaFamily>());
        if self.copula.k < 2 {
            is.push("copula.k", format!("block size {} must be at least 2", self.copula.k));
        }
        let alpha = match (family, self.copula.tau, self.copula.alpha) {
            (_, Some(_), Some(_)) => {
                is.push("copula", "give exactly one of tau and alpha");
                None
            }
            (Some(CopulaFamily::Product), None, None) => Some(0.0),
            (Some(_), None, None) => {
                is.push("copula", "one of tau or alpha is required");
                None
            }
            (Some(f), Some(t), None) => {
                if !(0.0..1.0).contains(&t) {
                    is.push("copula.tau", format!("{t} outside [0, 1)"));
                    None
                } else {
                    is.take("copula.tau", tau_to_alpha(f, t))
                }
            }
            (Some(f), None, Some(a)) => is.take("copula.alpha", f.check_alpha(a).and_then(|_| alpha_to_tau(f, a)).map(|_| a)),
            (None, _, _) => None,
        };
        let alpha_vec = match (family, alpha) {
            (Some(CopulaFamily::Product), _) => Some(Vec::new()),
            (Some(_), Some(a)) => Some(vec![a]),
            _ => None,
        };
        if family == Some(CopulaFamily::Product) && self.copula.include_alpha {
            is.push("copula.include_alpha", "the product copula has no dependence parameter");
        }

        let r = margin.as_ref().map(MarginalModel::r);
        let check_len = |is: &mut Issues, path: &str, v: &[f64]| {
            if let Some(r) = r {
                if v.len() != r {
                    is.push(path, format!("expected {r} values (one per basis term), got {}", v.len()));
                }
            }
            if v.iter().any(|x| !x.is_finite()) {
                is.push(path, "values must be finite");
            }
        };
        let centre: Vec<f64> = match &self.prior {
            PriorConfig::Point { beta } => {
                check_len(&mut is, "prior.beta", beta);
                beta.clone()
            }
            PriorConfig::Box { lower, upper, nodes_per_dim } => {
                check_len(&mut is, "prior.lower", lower);
                check_len(&mut is, "prior.upper", upper);
                for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if l > u {
                        is.push(&format!("prior.lower[{i}]"), format!("{l} exceeds upper bound {u}"));
                    }
                }
                if *nodes_per_dim < 1 {
                    is.push("prior.nodes_per_dim", "must be at least 1");
                }
                lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect()
            }
        };
        let base = alpha_vec.clone().map(|a| ParameterPoint::new(centre.clone(), a).with_alpha_estimable(self.copula.include_alpha));
        let prior = base.clone().map(|base| match &self.prior {
            PriorConfig::Point { .. } => PriorSpec::Point(base),
            PriorConfig::Box { lower, upper, nodes_per_dim } => {
                PriorSpec::UniformBox { base, lower: lower.clone(), upper: upper.clone(), nodes_per_dim: *nodes_per_dim }
            }
        });
        if let (Some(p), true) = (&prior, is.0.is_empty()) {
            is.take("prior", p.validate());
        }

        let criterion = match &self.criterion {
            CriterionConfig::D => Some(CriterionSpec::D),
            CriterionConfig::Ds { params } => Some(CriterionSpec::Ds(params.clone())),
            CriterionConfig::Da { matrix_file } => {
                is.take("criterion.matrix_file", source.read(matrix_file).and_then(|t| parse_matrix(&t))).map(CriterionSpec::DA)
            }
        };
        if let (Some(c), Some(b)) = (&criterion, &base) {
            is.take("criterion", c.validate(&b.labels()));
        }

        let candidates = match &self.candidates {
            CandidateConfig::Grid { lower, upper, points } => {
                is.take("candidates", CandidateSet::grid(*lower, *upper, *points, self.copula.k.max(1)))
            }
            CandidateConfig::Levels { levels } => is.take("candidates", CandidateSet::levels(levels, self.copula.k.max(1))),
        };
        if let (Some(m), Some(c)) = (&margin, &candidates) {
            let need = m.min_factors();
            let have = c.blocks().first().map(|b| b.points()[0].coords().len()).unwrap_or(0);
            if have < need {
                is.push("candidates", format!("the basis needs {need} factor(s), candidates have {have}"));
            }
        }

        is.take("optimizer", self.optimizer.validate());
        match self.estimator {
            FimEstimator::MonteCarlo { samples, .. } | FimEstimator::Auto { samples, .. } if samples < 1000 => {
                is.push("estimator.samples", format!("{samples} is below the minimum of 1000"));
            }
            _ => {}
        }
        if !(self.verify.tol >= 0.0) {
            is.push("verify.tol", "must be nonnegative");
        }

        let mut references = Vec::new();
        for (i, r) in self.references.iter().enumerate() {
            let path = format!("references[{i}].path");
            if let Some(d) = is.take(&path, source.read(&r.path).and_then(|t| read_design_csv(&t))) {
                references.push((r.name.clone(), d));
            }
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            is.take(&format!("scenarios[{i}]"), source.read(s).and_then(|t| parse_str(&t)).map(|_| ()));
        }
        let mut truth = base.clone();
        if let Some(sim) = &self.simulation {
            if sim.b == 0 {
                is.push("simulation.b", "must be positive");
            }
            if sim.replications < 1000 {
                is.push("simulation.replications", format!("{} is below the minimum of 1000", sim.replications));
            }
            if let Some(beta) = &sim.beta {
                check_len(&mut is, "simulation.beta", beta);
                truth = truth.map(|t| ParameterPoint::new(beta.clone(), t.alpha().to_vec()).with_alpha_estimable(self.copula.include_alpha));
            }
        }

        if !is.0.is_empty() {
            return Err(Error::Config(is.0.join("; ")));
        }
        let mut model = CopulaModel::new(margin.unwrap(), family.unwrap(), self.copula.k)?;
        if let Some(t) = self.margin.tail_tol {
            model = model.with_tail_tol(t);
        }
        Ok(Experiment {
            name: self.display_name(),
            model,
            prior: prior.unwrap(),
            criterion: criterion.unwrap(),
            candidates: candidates.unwrap(),
            estimator: self.estimator,
            options: self.optimizer.clone(),
            references,
            truth: truth.unwrap(),
        })
    }
}

/// Headerless CSV, one row per parameter, one column per combination.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Config(format!("row {}: '{}' is not a number", i + 1, c.trim()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config("matrix must be a nonempty rectangle".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> ExperimentConfig {
        parse_config(&format!("preset:{name}")).unwrap().0
    }

    #[test]
    fn poisson_preset_resolves_to_the_box_prior() {
        let (cfg, src) = parse_config("preset:poisson_clayton_third").unwrap();
        let e = cfg.resolve(&src).unwrap();
        assert_eq!(e.model.family, CopulaFamily::Clayton);
        assert!((alpha_to_tau(CopulaFamily::Clayton, e.prior.base().alpha()[0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        match &e.prior {
            PriorSpec::UniformBox { lower, upper, .. } => {
                assert_eq!(lower, &vec![-1.0, 4.0, 0.5]);
                assert_eq!(upper, &vec![1.0, 5.0, 1.5]);
            }
            other => panic!("unexpected prior {other:?}"),
        }
        assert_eq!(e.candidates.len(), 861);
        assert_eq!(e.references.len(), 1);
    }

    #[test]
    fn every_preset_parses() {
        for name in presets::CONFIG_NAMES {
            parse_config(&format!("preset:{name}")).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn bad_tau_names_its_field() {
        let mut cfg = preset("poisson_clayton_third");
        cfg.copula.tau = Some(1.2);
        let err = cfg.check(&Source::Preset).unwrap_err().to_string();
        assert!(err.contains("copula.tau"), "{err}");
    }

    #[test]
    fn all_violations_are_reported() {
        let mut cfg = preset("poisson_clayton_third");
        cfg.copula.family = "frank".into();
        cfg.margin.basis[1] = "cubic(0)".into();
        cfg.candidates = CandidateConfig::Grid { lower: 1.0, upper: -1.0, points: 41 };
        cfg.schema_version = 7;
        let err = cfg.check(&Source::Preset).unwrap_err().to_string();
        for field in ["copula.family", "margin.basis[1]", "candidates", "schema_version"] {
            assert!(err.contains(field), "missing {field} in {err}");
        }
    }

    #[test]
    fn tau_and_alpha_are_exclusive() {
        let mut cfg = preset("poisson_gumbel_third");
        cfg.copula.alpha = Some(1.5);
        assert!(cfg.check(&Source::Preset).unwrap_err().to_string().contains("exactly one of tau and alpha"));
    }

    #[test]
    fn malformed_matrix_is_rejected() {
        assert!(parse_matrix("1,0\n0,x\n").unwrap_err().to_string().contains("row 2"));
        assert!(parse_matrix("1,0\n0\n").is_err());
        assert_eq!(parse_matrix("1,0\n0,1\n0,0\n").unwrap().shape(), (3, 2));
    }

    #[test]
    fn round_trip_is_identity() {
        for name in presets::CONFIG_NAMES {
            let cfg = preset(name);
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let again = parse_str(&text).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(config_hash(&cfg), config_hash(&again));
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = presets::config("poisson_product").unwrap().replacen("\"seed\"", "\"sed\"", 1);
        assert!(parse_str(&text).is_err());
    }
}

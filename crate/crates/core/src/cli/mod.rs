//! Command-line front end: config parsing, subcommand dispatch and artifacts.

pub mod config;
pub mod io;
pub mod plot;
pub mod presets;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::copula::{alpha_to_tau, tau_numeric, tau_to_alpha, CopulaFamily, CopulaSpec};
use crate::criteria::{Design, Problem};
use crate::equivalence::{sensitivities, trace_identity_gap, verify};
use crate::error::{Error, Result};
use crate::information::FimEstimator;
use crate::optimizer::{optimize, CandidateSet, ConvergenceReport, Provenance};
use crate::validation::fim_vs_empirical;

use config::{config_hash, parse_config, Experiment, ExperimentConfig, Source};

/// Process exit status for a run that completed but did not certify.
pub const EXIT_NOT_CERTIFIED: i32 = 1;
/// Process exit status for an error.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "copdex", version, about = "Robust optimal approximate block designs under copula models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config file, or `preset:NAME`.
    #[arg(long)]
    pub config: String,
    /// Output directory (default: the config's `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps the worker pool.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an optimal design and certify it.
    Design(Common),
    /// Evaluate a fixed design.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
    },
    /// Efficiencies of reference designs (and optima across scenarios).
    Eff {
        #[command(flatten)]
        common: Common,
        /// Extra design files to compare.
        #[arg(long)]
        design: Vec<PathBuf>,
    },
    /// Sensitivity surface of a design (the computed optimum by default).
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Monte-Carlo comparison of MLE covariance with the inverse FIM.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        b: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Convert between α and Kendall's τ.
    Tau {
        family: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Also report a Monte-Carlo estimate of τ.
        #[arg(long)]
        numeric: bool,
    },
    /// List bundled presets.
    Presets,
}

/// Runs one command, writing artifacts and returning the exit status.
pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Tau { family, alpha, tau, k, numeric } => match tau_command(&family, alpha, tau, k, numeric) {
            Ok(text) => {
                print!("{text}");
                0
            }
            Err(e) => {
                eprintln!("error[{}]: {e}", e.code());
                EXIT_ERROR
            }
        },
        Command::Presets => {
            for name in presets::CONFIG_NAMES {
                println!("{name}");
            }
            0
        }
        Command::Design(c) => with_config("design", &c, |ctx| design_command(ctx)),
        Command::Eval { common, design } => with_config("eval", &common, |ctx| eval_command(ctx, &design)),
        Command::Eff { common, design } => with_config("eff", &common, |ctx| eff_command(ctx, &design)),
        Command::Check { common, design } => with_config("check", &common, |ctx| check_command(ctx, design.as_deref())),
        Command::Simulate { common, design, b, replications } => {
            with_config("simulate", &common, |ctx| simulate_command(ctx, design.as_deref(), b, replications))
        }
    }
}

fn tau_command(family: &str, alpha: Option<f64>, tau: Option<f64>, k: usize, numeric: bool) -> Result<String> {
    let family: CopulaFamily = family.parse()?;
    let (alpha, tau) = match (alpha, tau) {
        (Some(a), None) => (a, alpha_to_tau(family, a)?),
        (None, Some(t)) => (tau_to_alpha(family, t)?, t),
        _ => return Err(Error::Config("give exactly one of --alpha and --tau".into())),
    };
    let mut out = format!("{tau}\n");
    if numeric {
        let spec = CopulaSpec::new(family, alpha, k)?;
        let est = tau_numeric(&spec, crate::copula::TAU_NUMERIC_SAMPLES, 1);
        let _ = writeln!(out, "alpha = {alpha}, tau_numeric = {} +/- {}", est.estimate, est.std_error);
    } else if alpha != 0.0 || family == CopulaFamily::Product {
        let _ = writeln!(out, "alpha = {alpha}");
    }
    Ok(out)
}

struct Ctx {
    cfg: ExperimentConfig,
    source: Source,
    exp: Experiment,
    out: PathBuf,
    svg: bool,
    summary: Map<String, Value>,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        io::write_atomic(&self.out.join(name), contents.as_bytes())
    }

    fn problem_for(exp: &Experiment) -> Result<Problem> {
        let p = Problem::new(exp.model.clone(), &exp.prior, exp.criterion.clone(), exp.estimator)?;
        io::load_cache(&p);
        Ok(p)
    }

    fn problem(&self) -> Result<Problem> {
        Self::problem_for(&self.exp)
    }

    fn set(&mut self, key: &str, v: Value) {
        self.summary.insert(key.to_owned(), v);
    }
}

fn with_config(command: &str, common: &Common, body: impl FnOnce(&mut Ctx) -> Result<bool>) -> i32 {
    let start = Instant::now();
    if let Some(n) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    let loaded = parse_config(&common.config).and_then(|(mut cfg, source)| {
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.estimator = match cfg.estimator {
            FimEstimator::MonteCarlo { samples, .. } => FimEstimator::MonteCarlo { samples, seed: cfg.seed },
            FimEstimator::Auto { samples, .. } => FimEstimator::Auto { samples, seed: cfg.seed },
            e => e,
        };
        let exp = cfg.resolve(&source)?;
        Ok((cfg, source, exp))
    });
    let (cfg, source, exp) = match loaded {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            if let Some(out) = &common.out {
                let summary = json!({ "command": command, "status": "error", "error": { "code": e.code(), "message": e.to_string() } });
                let _ = io::write_atomic(&out.join("summary.json"), pretty(&summary).as_bytes());
            }
            return EXIT_ERROR;
        }
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let mut summary = Map::new();
    summary.insert("command".into(), json!(command));
    summary.insert("name".into(), json!(exp.name));
    summary.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    summary.insert("config_hash".into(), json!(config_hash(&cfg)));
    summary.insert("seed".into(), json!(cfg.seed));
    summary.insert("threads".into(), json!(rayon::current_num_threads()));
    summary.insert("candidates".into(), provenance_json(&exp.candidates));
    summary.insert("config".into(), serde_json::to_value(&cfg).expect("config serializes"));
    let svg = cfg.output.svg;
    let mut ctx = Ctx { cfg, source, exp, out, svg, summary };
    let result = body(&mut ctx);
    let code = match &result {
        Ok(true) => 0,
        Ok(false) => EXIT_NOT_CERTIFIED,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ctx.set("error", json!({ "code": e.code(), "message": e.to_string() }));
            EXIT_ERROR
        }
    };
    let status = match code {
        0 => "ok",
        EXIT_NOT_CERTIFIED => "not_certified",
        _ => "error",
    };
    ctx.set("status", json!(status));
    ctx.set("runtime_seconds", json!(start.elapsed().as_secs_f64()));
    let text = pretty(&Value::Object(ctx.summary.clone()));
    if let Err(e) = ctx.write("summary.json", &text) {
        eprintln!("error[{}]: {e}", e.code());
        return EXIT_ERROR;
    }
    println!("{status}: {} (summary in {})", ctx.exp.name, ctx.out.join("summary.json").display());
    code
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn provenance_json(c: &CandidateSet) -> Value {
    let mut v = serde_json::to_value(c.provenance()).expect("provenance serializes");
    if let Value::Object(m) = &mut v {
        m.insert("count".into(), json!(c.len()));
    }
    v
}

fn read_design(path: &Path) -> Result<Design> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    io::read_design_csv(&text)
}

fn certification_set(ctx: &Ctx) -> CandidateSet {
    if ctx.cfg.verify.refine {
        ctx.exp.candidates.refined()
    } else {
        ctx.exp.candidates.clone()
    }
}

fn grid_values(c: &CandidateSet) -> Option<Vec<f64>> {
    match *c.provenance() {
        Provenance::Grid { lower, upper, points, k: 2 } => {
            Some((0..points).map(|i| lower + (upper - lower) * i as f64 / (points - 1) as f64).collect())
        }
        _ => None,
    }
}

fn design_json(problem: &Problem, design: &Design) -> Result<Value> {
    let value = problem.value(design)?;
    Ok(json!({
        "criterion_value": value,
        "criterion_scale": (value / problem.s() as f64).exp(),
        "s": problem.s(),
        "support": design.len(),
    }))
}

fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("iteration,value,max_sensitivity,support\n");
    for r in &report.history {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.value, r.max_sensitivity, r.support);
    }
    out
}

fn optimize_exp(exp: &Experiment, problem: &Problem) -> Result<(Design, ConvergenceReport)> {
    let r = optimize(problem, &exp.candidates, &exp.options);
    let _ = io::save_cache(problem);
    r
}

fn design_command(ctx: &mut Ctx) -> Result<bool> {
    let problem = ctx.problem()?;
    let (design, report) = optimize_exp(&ctx.exp, &problem)?;
    ctx.write("design.csv", &io::write_design_csv(&design))?;
    ctx.write("convergence.csv", &convergence_csv(&report))?;
    let cert = certification_set(ctx);
    let vr = verify(&problem, &design, cert.blocks(), ctx.cfg.verify.tol)?;
    let gap = trace_identity_gap(&problem, &design)?;
    let _ = io::save_cache(&problem);
    if ctx.svg {
        if let Some(v) = grid_values(&ctx.exp.candidates) {
            let title = format!("{}: support", ctx.exp.name);
            if let Some(svg) = plot::support_svg(&design, v[0], v[v.len() - 1], &title) {
                ctx.write("support.svg", &svg)?;
            }
        }
    }
    ctx.set("design", design_json(&problem, &design)?);
    ctx.set("converged", json!(report.converged));
    ctx.set("iterations", json!(report.iterations));
    ctx.set("max_sensitivity", json!(report.max_sensitivity));
    ctx.set("s", json!(problem.s()));
    ctx.set("verify", serde_json::to_value(&vr).expect("report serializes"));
    ctx.set("trace_identity_gap", json!(gap));
    ctx.set("efficiencies", reference_efficiencies(&ctx.exp, &problem, &design, &ctx.exp.name)?);
    Ok(report.converged && vr.pass)
}

fn reference_efficiencies(exp: &Experiment, problem: &Problem, optimum: &Design, scenario: &str) -> Result<Value> {
    exp.references
        .iter()
        .map(|(name, d)| Ok(json!({ "scenario": scenario, "design": name, "efficiency": problem.efficiency(d, optimum)? })))
        .collect::<Result<Vec<_>>>()
        .map(Value::Array)
}

fn eval_command(ctx: &mut Ctx, path: &Path) -> Result<bool> {
    let problem = ctx.problem()?;
    let design = read_design(path)?;
    let cert = certification_set(ctx);
    let vr = verify(&problem, &design, cert.blocks(), ctx.cfg.verify.tol)?;
    ctx.set("design", design_json(&problem, &design)?);
    ctx.set("design_file", json!(path.display().to_string()));
    ctx.set("max_sensitivity", json!(vr.max_sensitivity));
    ctx.set("verify", serde_json::to_value(&vr).expect("report serializes"));
    ctx.set("trace_identity_gap", json!(trace_identity_gap(&problem, &design)?));
    let _ = io::save_cache(&problem);
    Ok(true)
}

fn eff_command(ctx: &mut Ctx, extra: &[PathBuf]) -> Result<bool> {
    let mut scenarios: Vec<Experiment> = vec![ctx.exp.clone()];
    for (i, s) in ctx.cfg.scenarios.iter().enumerate() {
        let cfg = config::parse_str(&ctx.source.read(s)?)?;
        let mut exp = cfg.resolve(&scenario_source(&ctx.source, s))?;
        if exp.name == "experiment" {
            exp.name = format!("scenario{}", i + 1);
        }
        scenarios.push(exp);
    }
    let mut references = ctx.exp.references.clone();
    for p in extra {
        references.push((p.display().to_string(), read_design(p)?));
    }
    let mut problems = Vec::new();
    let mut optima = Vec::new();
    let mut all_converged = true;
    for exp in &scenarios {
        let problem = Ctx::problem_for(exp)?;
        let (design, report) = optimize_exp(exp, &problem)?;
        all_converged &= report.converged;
        ctx.write(&format!("design_{}.csv", exp.name), &io::write_design_csv(&design))?;
        problems.push(problem);
        optima.push(design);
    }
    let mut rows = Vec::new();
    for (j, exp) in scenarios.iter().enumerate() {
        for (name, d) in &references {
            rows.push((exp.name.clone(), name.clone(), problems[j].efficiency(d, &optima[j])?));
        }
        for (i, other) in scenarios.iter().enumerate() {
            if i != j {
                rows.push((exp.name.clone(), format!("optimum:{}", other.name), problems[j].efficiency(&optima[i], &optima[j])?));
            }
        }
    }
    for p in &problems {
        let _ = io::save_cache(p);
    }
    let mut csv = String::from("scenario,design,efficiency\n");
    for (s, d, e) in &rows {
        let _ = writeln!(csv, "{s},{d},{e}");
    }
    ctx.write("efficiency.csv", &csv)?;
    for (s, d, e) in &rows {
        println!("{s:<28} {d:<36} {:>8.2}%", 100.0 * e);
    }
    ctx.set(
        "efficiencies",
        Value::Array(rows.iter().map(|(s, d, e)| json!({ "scenario": s, "design": d, "efficiency": e })).collect()),
    );
    ctx.set("converged", json!(all_converged));
    Ok(all_converged)
}

fn scenario_source(parent: &Source, rel: &str) -> Source {
    match parent {
        Source::Preset => Source::Preset,
        Source::Dir(d) => Source::Dir(d.join(rel).parent().map(Path::to_path_buf).unwrap_or_else(|| d.clone())),
    }
}

fn design_or_optimum(ctx: &mut Ctx, problem: &Problem, path: Option<&Path>) -> Result<Design> {
    match path {
        Some(p) => {
            ctx.set("design_file", json!(p.display().to_string()));
            read_design(p)
        }
        None => {
            let (d, report) = optimize_exp(&ctx.exp, problem)?;
            ctx.set("converged", json!(report.converged));
            ctx.write("design.csv", &io::write_design_csv(&d))?;
            Ok(d)
        }
    }
}

fn check_command(ctx: &mut Ctx, path: Option<&Path>) -> Result<bool> {
    let problem = ctx.problem()?;
    let design = design_or_optimum(ctx, &problem, path)?;
    let cert = certification_set(ctx);
    let d = sensitivities(&problem, &design, cert.blocks())?;
    let _ = io::save_cache(&problem);
    ctx.write("sensitivity.csv", &io::write_sensitivity_csv(cert.blocks(), &d))?;
    let vr = crate::equivalence::report(cert.blocks(), &d, problem.s() as f64, ctx.cfg.verify.tol);
    if ctx.svg {
        if let Some(values) = grid_values(&cert) {
            let title = format!("{}: sensitivity / s", ctx.exp.name);
            if let Some(svg) = plot::sensitivity_svg(cert.blocks(), &d, problem.s() as f64, &values, &title) {
                ctx.write("sensitivity.svg", &svg)?;
            }
        }
    }
    ctx.set("design", design_json(&problem, &design)?);
    ctx.set("verify", serde_json::to_value(&vr).expect("report serializes"));
    ctx.set("max_sensitivity", json!(vr.max_sensitivity));
    ctx.set("s", json!(problem.s()));
    ctx.set("trace_identity_gap", json!(trace_identity_gap(&problem, &design)?));
    Ok(vr.pass)
}

fn simulate_command(ctx: &mut Ctx, path: Option<&Path>, b: Option<usize>, reps: Option<usize>) -> Result<bool> {
    let sim = ctx.cfg.simulation.clone();
    let b = b.or(sim.as_ref().map(|s| s.b)).ok_or_else(|| Error::Config("simulation.b: missing (set it or pass --b)".into()))?;
    let reps = reps
        .or(sim.as_ref().map(|s| s.replications))
        .ok_or_else(|| Error::Config("simulation.replications: missing (set it or pass --replications)".into()))?;
    let problem = ctx.problem()?;
    let design = design_or_optimum(ctx, &problem, path)?;
    let truth = ctx.exp.truth.clone();
    let report = fim_vs_empirical(&design, &ctx.exp.model, &truth, b, reps, ctx.cfg.seed)?;
    let mut csv = format!("{}\n", report.labels.join(","));
    for e in &report.estimates {
        let cells: Vec<String> = e.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    ctx.write("estimates.csv", &csv)?;
    let matrix = |m: &nalgebra::DMatrix<f64>| -> Value {
        Value::Array((0..m.nrows()).map(|i| json!((0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())).collect())
    };
    ctx.set(
        "simulation",
        json!({
            "b": b,
            "replications": reps,
            "counts": report.counts,
            "failures": report.failures,
            "failure_rate": report.failure_rate,
            "valid": report.valid,
            "relative_frobenius": report.relative_frobenius,
            "labels": report.labels,
            "empirical": matrix(&report.empirical),
            "predicted": matrix(&report.predicted),
            "truth": truth.values(),
        }),
    );
    Ok(report.valid)
}

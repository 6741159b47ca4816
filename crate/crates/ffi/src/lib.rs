//! C interface to the copdex design engine.
//!
//! Every function returns a [`CopdexStatus`]; on failure the message is
//! available from [`copdex_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use copdex::cli::config::{parse_config, parse_str, Experiment, Source};
use copdex::copula::{alpha_to_tau, tau_to_alpha};
use copdex::equivalence;
use copdex::optimizer::optimize;
use copdex::{Block, CopulaFamily, CopulaSpec, Design, Error, Problem, TreatmentPoint};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopdexStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Config = 4,
    ExcludedOutcome = 5,
    GridTooLarge = 6,
    Singular = 7,
    Infeasible = 8,
    TruncationDeficit = 9,
    Io = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CopdexFamily {
    Product = 0,
    Clayton = 1,
    Gumbel = 2,
}

impl From<CopdexFamily> for CopulaFamily {
    fn from(f: CopdexFamily) -> Self {
        match f {
            CopdexFamily::Product => CopulaFamily::Product,
            CopdexFamily::Clayton => CopulaFamily::Clayton,
            CopdexFamily::Gumbel => CopulaFamily::Gumbel,
        }
    }
}

/// A resolved experiment with its block-FIM cache.
pub struct CopdexExperiment {
    exp: Experiment,
    problem: Problem,
}

/// An approximate block design.
pub struct CopdexDesign {
    design: Design,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CopdexStatus {
    match e {
        Error::Domain(_) => CopdexStatus::Domain,
        Error::Config(_) => CopdexStatus::Config,
        Error::ExcludedOutcome { .. } => CopdexStatus::ExcludedOutcome,
        Error::GridTooLarge { .. } => CopdexStatus::GridTooLarge,
        Error::Singular { .. } => CopdexStatus::Singular,
        Error::Infeasible { .. } => CopdexStatus::Infeasible,
        Error::TruncationDeficit { .. } => CopdexStatus::TruncationDeficit,
        Error::Io(_) => CopdexStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Engine(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CopdexStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CopdexStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            CopdexStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            CopdexStatus::InvalidArgument
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(&format!("{}: {e}", e.code()));
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CopdexStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Message of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn copdex_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn copdex_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out_alpha` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_tau_to_alpha(family: CopdexFamily, tau: f64, out_alpha: *mut f64) -> CopdexStatus {
    guard(|| {
        *out(out_alpha, "out_alpha")? = tau_to_alpha(family.into(), tau)?;
        Ok(())
    })
}

/// # Safety
/// `out_tau` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_alpha_to_tau(family: CopdexFamily, alpha: f64, out_tau: *mut f64) -> CopdexStatus {
    guard(|| {
        *out(out_tau, "out_tau")? = alpha_to_tau(family.into(), alpha)?;
        Ok(())
    })
}

/// Copula CDF at `u[0..k]`.
///
/// # Safety
/// `u` must hold `k` values; `out_value` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_copula_cdf(
    family: CopdexFamily,
    alpha: f64,
    u: *const f64,
    k: usize,
    out_value: *mut f64,
) -> CopdexStatus {
    guard(|| {
        let spec = CopulaSpec::new(family.into(), alpha, k)?;
        *out(out_value, "out_value")? = spec.cdf(slice(u, k, "u")?)?;
        Ok(())
    })
}

fn build(exp: Experiment) -> Result<Box<CopdexExperiment>, Fail> {
    let problem = Problem::new(exp.model.clone(), &exp.prior, exp.criterion.clone(), exp.estimator)?;
    Ok(Box::new(CopdexExperiment { exp, problem }))
}

/// Loads an experiment config file, or a bundled preset given as `preset:NAME`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_experiment` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_experiment_load(path: *const c_char, out_experiment: *mut *mut CopdexExperiment) -> CopdexStatus {
    guard(|| {
        let slot = out(out_experiment, "out_experiment")?;
        *slot = ptr::null_mut();
        let (cfg, source) = parse_config(text(path, "path")?)?;
        *slot = Box::into_raw(build(cfg.resolve(&source)?)?);
        Ok(())
    })
}

/// Builds an experiment from config JSON. Relative file references resolve
/// against the bundled presets.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_experiment` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_experiment_from_json(json: *const c_char, out_experiment: *mut *mut CopdexExperiment) -> CopdexStatus {
    guard(|| {
        let slot = out(out_experiment, "out_experiment")?;
        *slot = ptr::null_mut();
        let cfg = parse_str(text(json, "json")?)?;
        *slot = Box::into_raw(build(cfg.resolve(&Source::Preset)?)?);
        Ok(())
    })
}

/// # Safety
/// `experiment` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn copdex_experiment_free(experiment: *mut CopdexExperiment) {
    if !experiment.is_null() {
        drop(Box::from_raw(experiment));
    }
}

/// Number of estimable parameters `q` and criterion dimension `s`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn copdex_experiment_dims(experiment: *const CopdexExperiment, out_q: *mut usize, out_s: *mut usize) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        *out(out_q, "out_q")? = e.problem.q();
        *out(out_s, "out_s")? = e.problem.s();
        Ok(())
    })
}

/// Runs the optimizer on the experiment's candidate set.
///
/// # Safety
/// Pointers must be valid; `out_converged` may be null.
#[no_mangle]
pub unsafe extern "C" fn copdex_optimize(
    experiment: *const CopdexExperiment,
    out_design: *mut *mut CopdexDesign,
    out_converged: *mut bool,
) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        let slot = out(out_design, "out_design")?;
        *slot = ptr::null_mut();
        let (design, report) = optimize(&e.problem, &e.exp.candidates, &e.exp.options)?;
        if let Some(c) = out_converged.as_mut() {
            *c = report.converged;
        }
        *slot = Box::into_raw(Box::new(CopdexDesign { design }));
        Ok(())
    })
}

fn blocks_from(coords: &[f64], n_blocks: usize, k: usize, m: usize) -> Vec<Block> {
    (0..n_blocks)
        .map(|b| Block::new((0..k).map(|u| TreatmentPoint::new(coords[(b * k + u) * m..(b * k + u + 1) * m].to_vec())).collect()))
        .collect()
}

/// Builds a design from `n_blocks` blocks of `k` units with `m` factors.
/// `coords` is block-major, then unit, then factor (`n_blocks·k·m` values).
///
/// # Safety
/// Arrays must hold the stated number of values; `out_design` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copdex_design_new(
    n_blocks: usize,
    k: usize,
    m: usize,
    coords: *const f64,
    weights: *const f64,
    out_design: *mut *mut CopdexDesign,
) -> CopdexStatus {
    guard(|| {
        let slot = out(out_design, "out_design")?;
        *slot = ptr::null_mut();
        if n_blocks == 0 || k == 0 || m == 0 {
            return Err(Fail::Arg("n_blocks, k and m must be positive".into()));
        }
        let coords = slice(coords, n_blocks * k * m, "coords")?;
        let weights = slice(weights, n_blocks, "weights")?;
        let design = Design::new(blocks_from(coords, n_blocks, k, m), weights.to_vec())?;
        *slot = Box::into_raw(Box::new(CopdexDesign { design }));
        Ok(())
    })
}

/// # Safety
/// `design` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn copdex_design_free(design: *mut CopdexDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}

/// Support size, units per block and factors per unit.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn copdex_design_shape(
    design: *const CopdexDesign,
    out_blocks: *mut usize,
    out_k: *mut usize,
    out_m: *mut usize,
) -> CopdexStatus {
    guard(|| {
        let d = &get(design, "design")?.design;
        let first = &d.blocks()[0];
        *out(out_blocks, "out_blocks")? = d.len();
        *out(out_k, "out_k")? = first.k();
        *out(out_m, "out_m")? = first.points()[0].coords().len();
        Ok(())
    })
}

/// Copies block `index` (k·m coordinates) and its weight.
///
/// # Safety
/// `out_coords` must have room for k·m values; pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn copdex_design_block(
    design: *const CopdexDesign,
    index: usize,
    out_coords: *mut f64,
    out_weight: *mut f64,
) -> CopdexStatus {
    guard(|| {
        let d = &get(design, "design")?.design;
        let block = d.blocks().get(index).ok_or_else(|| Fail::Arg(format!("block index {index} out of range ({})", d.len())))?;
        let flat: Vec<f64> = block.points().iter().flat_map(|p| p.coords().iter().copied()).collect();
        if out_coords.is_null() {
            return Err(Fail::Null("out_coords"));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), out_coords, flat.len());
        *out(out_weight, "out_weight")? = d.weights()[index];
        Ok(())
    })
}

/// Prior-averaged criterion value Ψ (larger is better).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn copdex_criterion(
    experiment: *const CopdexExperiment,
    design: *const CopdexDesign,
    out_value: *mut f64,
) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        *out(out_value, "out_value")? = e.problem.value(&get(design, "design")?.design)?;
        Ok(())
    })
}

/// Efficiency of `design` relative to `reference`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn copdex_efficiency(
    experiment: *const CopdexExperiment,
    design: *const CopdexDesign,
    reference: *const CopdexDesign,
    out_value: *mut f64,
) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        let d = &get(design, "design")?.design;
        let r = &get(reference, "reference")?.design;
        *out(out_value, "out_value")? = e.problem.efficiency(d, r)?;
        Ok(())
    })
}

/// Sensitivity of one block (k·m coordinates) relative to `design`.
///
/// # Safety
/// `block` must hold k·m values matching the design's shape.
#[no_mangle]
pub unsafe extern "C" fn copdex_sensitivity(
    experiment: *const CopdexExperiment,
    design: *const CopdexDesign,
    block: *const f64,
    k: usize,
    m: usize,
    out_value: *mut f64,
) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        let d = &get(design, "design")?.design;
        let coords = slice(block, k * m, "block")?;
        if k != e.exp.model.k || m == 0 {
            return Err(Fail::Arg(format!("block must have k = {} units and m > 0 factors", e.exp.model.k)));
        }
        let b = blocks_from(coords, 1, k, m).remove(0);
        *out(out_value, "out_value")? = equivalence::sensitivity(&e.problem, d, &b)?;
        Ok(())
    })
}

/// Maximum sensitivity over the experiment's candidate set and whether it
/// stays within `s·(1 + tol)`.
///
/// # Safety
/// Pointers must be valid; `out_pass` may be null.
#[no_mangle]
pub unsafe extern "C" fn copdex_verify(
    experiment: *const CopdexExperiment,
    design: *const CopdexDesign,
    tol: f64,
    out_max: *mut f64,
    out_pass: *mut bool,
) -> CopdexStatus {
    guard(|| {
        let e = get(experiment, "experiment")?;
        let d = &get(design, "design")?.design;
        let r = equivalence::verify(&e.problem, d, e.exp.candidates.blocks(), tol)?;
        *out(out_max, "out_max")? = r.max_sensitivity;
        if let Some(p) = out_pass.as_mut() {
            *p = r.pass;
        }
        Ok(())
    })
}

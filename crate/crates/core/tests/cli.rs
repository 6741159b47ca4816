use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn copdex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copdex")).args(args).output().expect("binary runs")
}

fn copdex_env(args: &[&str], key: &str, value: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copdex")).args(args).env(key, value).output().expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn small_poisson(dir: &Path, family: &str, tau: Option<f64>) -> String {
    let copula = match tau {
        Some(t) => format!(r#"{{"family": "{family}", "tau": {t}, "k": 2}}"#),
        None => format!(r#"{{"family": "{family}", "k": 2}}"#),
    };
    let text = format!(
        r#"{{
  "schema_version": 1,
  "name": "small_{family}",
  "margin": {{"response": "poisson", "link": "log", "basis": ["intercept", "linear(0)", "quad(0)"]}},
  "copula": {copula},
  "prior": {{"type": "point", "beta": [0.0, 1.0, 0.5]}},
  "candidates": {{"type": "grid", "lower": -1.0, "upper": 1.0, "points": 11}},
  "references": [{{"name": "gee", "path": "gee.csv"}}]
}}"#
    );
    fs::write(dir.join("gee.csv"), "block_id,unit_index,x1,weight\n1,1,0.03,0.355\n1,2,1,0.355\n2,1,1,0.31\n2,2,0.6,0.31\n3,1,-0.4,0.335\n3,2,0.78,0.335\n").unwrap();
    let path = dir.join(format!("small_{family}.json"));
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn tau_subcommand_prints_kendall_tau() {
    let out = copdex(&["tau", "clayton", "--alpha", "1"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0.333333"));
    let out = copdex(&["tau", "gumbel", "--tau", "0.5"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("alpha = 2"));
    let out = copdex(&["tau", "frank", "--alpha", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown copula family"));
}

#[test]
fn presets_are_listed() {
    let out = copdex(&["presets"]);
    let names = String::from_utf8_lossy(&out.stdout).lines().count();
    assert_eq!(names, copdex::cli::presets::CONFIG_NAMES.len());
}

#[test]
fn design_on_materials_preset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let out = copdex(&["design", "--config", "preset:materials_local_null", "--out", dir.to_str().unwrap(), "--threads", "1"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv = fs::read(a.path().join("design.csv")).unwrap();
    assert_eq!(csv, fs::read(b.path().join("design.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    let ids: std::collections::BTreeSet<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 15);
    let s = summary(a.path());
    assert_eq!(s["status"], "ok");
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(s["seed"], 20240601);
    assert!(s["verify"]["pass"].as_bool().unwrap());
    assert!(s["trace_identity_gap"].as_f64().unwrap().abs() < 1e-8);
    assert_eq!(s["candidates"]["count"], 21);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_poisson(dir.path(), "clayton", Some(1.2));
    let out_dir = dir.path().join("out");
    let out = copdex(&["design", "--config", &path, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("copula.tau"));
    let s = summary(&out_dir);
    assert_eq!(s["status"], "error");
    assert_eq!(s["error"]["code"], "cli.config");
}

#[test]
fn eval_eff_and_check_on_a_small_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_poisson(dir.path(), "gumbel", Some(0.25));
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();

    let r = copdex(&["eval", "--config", &path, "--out", o, "--design", dir.path().join("gee.csv").to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let s = summary(&out);
    assert!(s["design"]["criterion_value"].as_f64().unwrap().is_finite());
    assert_eq!(s["design"]["s"], 3);

    let r = copdex(&["check", "--config", &path, "--out", o, "--design", dir.path().join("gee.csv").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1), "the reference design is not optimal here");
    let s = summary(&out);
    assert_eq!(s["status"], "not_certified");
    assert!(!s["verify"]["violators"].as_array().unwrap().is_empty());

    let r = copdex(&["check", "--config", &path, "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let sens = fs::read_to_string(out.join("sensitivity.csv")).unwrap();
    assert!(sens.starts_with("u1,u2,sensitivity\n"));
    assert_eq!(sens.lines().count(), 1 + 21 * 22 / 2);
    assert!(fs::read_to_string(out.join("sensitivity.svg")).unwrap().starts_with("<svg"));

    // scenario list: a product-copula twin of the same problem
    let twin = small_poisson(dir.path(), "product", None);
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["scenarios"] = Value::Array(vec![Value::String(Path::new(&twin).file_name().unwrap().to_string_lossy().into())]);
    let both = dir.path().join("both.json");
    fs::write(&both, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let r = copdex(&["eff", "--config", both.to_str().unwrap(), "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let eff = fs::read_to_string(out.join("efficiency.csv")).unwrap();
    assert_eq!(eff.lines().count(), 1 + 4);
    assert!(eff.contains("small_gumbel,gee,"));
    assert!(eff.contains("small_product,optimum:small_gumbel,"));
    for row in eff.lines().skip(1) {
        let e: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(e > 0.0 && e <= 1.0 + 1e-9, "{row}");
    }
    assert!(out.join("design_small_product.csv").exists());
}

#[test]
fn design_writes_support_plot_and_uses_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let path = small_poisson(dir.path(), "clayton", Some(1.0 / 3.0));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = copdex_env(&["design", "--config", &path, "--out", out.to_str().unwrap()], "COPDEX_CACHE_DIR", &cache);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(fs::read(a.join("design.csv")).unwrap(), fs::read(b.join("design.csv")).unwrap());
    assert!(fs::read_to_string(a.join("support.svg")).unwrap().contains("<circle"));
    let conv = fs::read_to_string(a.join("convergence.csv")).unwrap();
    assert!(conv.starts_with("iteration,value,max_sensitivity,support\n"));
}

#[test]
fn simulate_reports_covariance_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let r = copdex(&["simulate", "--config", "preset:materials_local_null", "--out", o, "--replications", "1000", "--b", "60", "--seed", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let s = summary(dir.path());
    assert_eq!(s["seed"], 3);
    let sim = &s["simulation"];
    assert!(sim["valid"].as_bool().unwrap());
    assert_eq!(sim["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 60);
    assert!(sim["relative_frobenius"].as_f64().unwrap() < 0.25);
    let est = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    assert!(est.starts_with("beta0,beta1,"));
    assert_eq!(est.lines().count() as u64, 1 + 1000 - sim["failures"].as_u64().unwrap());
}

#[test]
fn poisson_scenarios_preset_resolves_all_scenarios() {
    let (cfg, source) = copdex::cli::config::parse_config("preset:poisson_scenarios").unwrap();
    assert_eq!(cfg.scenarios.len(), 4);
    for s in &cfg.scenarios {
        let sub = copdex::cli::config::parse_str(&source.read(s).unwrap()).unwrap();
        assert!(sub.resolve(&source).is_ok());
    }
}

//! Artifact formats: design and sensitivity CSV, summary JSON, FIM cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::criteria::{Design, Problem};
use crate::error::{Error, Result};
use crate::information::Block;
use crate::margins::TreatmentPoint;

/// Environment variable naming the FIM cache directory.
pub const CACHE_ENV: &str = "COPDEX_CACHE_DIR";

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::Io(format!("{}: {e}", path.display()))
    })
}

fn factor_columns(m: usize) -> Vec<String> {
    (1..=m).map(|j| format!("x{j}")).collect()
}

/// `block_id,unit_index,x1..xm,weight`, one row per unit.
pub fn write_design_csv(design: &Design) -> String {
    let m = design.blocks().first().map(|b| b.points()[0].coords().len()).unwrap_or(1);
    let mut out = format!("block_id,unit_index,{},weight\n", factor_columns(m).join(","));
    for (i, (b, w)) in design.blocks().iter().zip(design.weights()).enumerate() {
        for (u, p) in b.points().iter().enumerate() {
            let coords: Vec<String> = p.coords().iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{},{},{},{}", i + 1, u + 1, coords.join(","), w);
        }
    }
    out
}

pub fn read_design_csv(text: &str) -> Result<Design> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty design file".into()))?.split(',').map(str::trim).collect();
    if header.len() < 4 || header[0] != "block_id" || header[1] != "unit_index" || header[header.len() - 1] != "weight" {
        return Err(Error::Config("design header must be block_id,unit_index,<factors...>,weight".into()));
    }
    let m = header.len() - 3;
    let mut blocks: BTreeMap<String, (Vec<(u64, TreatmentPoint)>, f64)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (ln, line) in lines.enumerate() {
        let row = ln + 2;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::Config(format!("line {row}: expected {} fields, got {}", header.len(), cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("line {row}: '{s}' is not a number")));
        let unit = cells[1].parse::<u64>().map_err(|_| Error::Config(format!("line {row}: bad unit index '{}'", cells[1])))?;
        let coords = cells[2..2 + m].iter().map(|c| num(c)).collect::<Result<Vec<_>>>()?;
        let w = num(cells[header.len() - 1])?;
        let entry = blocks.entry(cells[0].to_owned()).or_insert_with(|| {
            order.push(cells[0].to_owned());
            (Vec::new(), w)
        });
        if entry.1 != w {
            return Err(Error::Config(format!("line {row}: block {} has inconsistent weights", cells[0])));
        }
        entry.0.push((unit, TreatmentPoint::new(coords)));
    }
    let mut bs = Vec::new();
    let mut ws = Vec::new();
    let mut k = None;
    for id in order {
        let (mut units, w) = blocks.remove(&id).expect("recorded id");
        units.sort_by_key(|u| u.0);
        if *k.get_or_insert(units.len()) != units.len() {
            return Err(Error::Config(format!("block {id} has {} units, others have {}", units.len(), k.unwrap_or(0))));
        }
        bs.push(Block::new(units.into_iter().map(|u| u.1).collect()));
        ws.push(w);
    }
    Design::new(bs, ws)
}

/// Coordinate column names for blocks of `k` units with `m` factors.
pub fn block_columns(k: usize, m: usize) -> Vec<String> {
    (1..=k)
        .flat_map(|u| (1..=m).map(move |j| if m == 1 { format!("u{u}") } else { format!("u{u}_x{j}") }))
        .collect()
}

/// `<block coordinates...>,sensitivity`.
pub fn write_sensitivity_csv(blocks: &[Block], d: &[f64]) -> String {
    let (k, m) = blocks.first().map(|b| (b.k(), b.points()[0].coords().len())).unwrap_or((2, 1));
    let mut out = format!("{},sensitivity\n", block_columns(k, m).join(","));
    for (b, v) in blocks.iter().zip(d) {
        let coords: Vec<String> = b.points().iter().flat_map(|p| p.coords().iter().map(|c| c.to_string())).collect();
        let _ = writeln!(out, "{},{}", coords.join(","), v);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    fingerprint: String,
    entries: Vec<(Vec<u64>, Vec<DMatrix<f64>>)>,
}

/// Per-problem cache file inside `$COPDEX_CACHE_DIR`, if set.
pub fn cache_path(problem: &Problem) -> Option<PathBuf> {
    let dir = std::env::var_os(CACHE_ENV)?;
    let digest = Sha256::digest(problem.fingerprint().as_bytes());
    let name: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
    Some(PathBuf::from(dir).join(format!("fim-{name}.json")))
}

/// Loads cached block FIMs; a missing or unreadable file is not an error.
pub fn load_cache(problem: &Problem) -> usize {
    let Some(path) = cache_path(problem) else { return 0 };
    let Ok(text) = fs::read(&path) else { return 0 };
    match serde_json::from_slice::<CacheFile>(&text) {
        Ok(f) if f.fingerprint == problem.fingerprint() => problem.restore_cache(f.entries),
        _ => 0,
    }
}

pub fn save_cache(problem: &Problem) -> Result<()> {
    let Some(path) = cache_path(problem) else { return Ok(()) };
    let entries = problem.cache_entries().into_iter().map(|(k, v)| (k, v.as_ref().clone())).collect();
    let file = CacheFile { fingerprint: problem.fingerprint(), entries };
    write_atomic(&path, &serde_json::to_vec(&file).map_err(|e| Error::Io(e.to_string()))?)
}

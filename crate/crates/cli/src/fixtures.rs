//! Fixture manifest: frozen values and the oracles that recompute them.
//!
//! Each record names an oracle registered in [`ORACLES`]. Regeneration runs
//! every oracle at the manifest seed, reports which values changed and can
//! rewrite the manifest. A record whose oracle is not registered is an
//! error naming the fixture.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use datareg::scoring::Method;
use datareg_sim::{
    estimate_mse, regime_population, regime_rules, subset_bound, sweep_m, UpdateRule, REGIME_MS, REGIME_N,
};

use crate::bench::{self, BenchGrid, Cell, Sweep};
use crate::report::{read_json, OutDir};
use crate::verify::{hutchinson_rel_err, median};
use crate::{simulate, CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// A closed form or value stated in the reference material, checked by
    /// measurement.
    Published,
    /// Produced by a runnable oracle in this repository.
    Computed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub id: String,
    pub provenance: Provenance,
    /// Command that reproduces the value.
    pub oracle: String,
    pub expected: Value,
    /// Absolute tolerance for numeric values; 0 means exact.
    #[serde(default)]
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<FixtureRecord>,
}

type Oracle = fn(u64) -> Result<Value>;

fn measured(method: Method, c: Cell, what: &str) -> Result<Value> {
    let grid = BenchGrid { seed: 0, cells: vec![c], sweeps: vec![], projector_k: 0 };
    let r = bench::run(&grid)?;
    let row = r.rows.iter().find(|x| x.method == method).expect("row for every exact method");
    Ok(match what {
        "flops" => json!(row.flops_measured),
        _ => json!(row.mem_measured),
    })
}

fn direct_flops(_: u64) -> Result<Value> {
    measured(Method::Direct, Cell { n: 2, m: 1, t: 2, w: 4 }, "flops")
}
fn gip_flops(_: u64) -> Result<Value> {
    measured(Method::Gip, Cell { n: 2, m: 1, t: 2, w: 4 }, "flops")
}
fn pip_flops(_: u64) -> Result<Value> {
    measured(Method::Pip, Cell { n: 2, m: 1, t: 2, w: 4 }, "flops")
}
fn direct_memory(_: u64) -> Result<Value> {
    measured(Method::Direct, Cell { n: 8, m: 1, t: 1, w: 64 }, "memory")
}
fn gip_memory(_: u64) -> Result<Value> {
    measured(Method::Gip, Cell { n: 8, m: 1, t: 512, w: 4 }, "memory")
}
fn gip_crossover(_: u64) -> Result<Value> {
    let grid = BenchGrid {
        seed: 0,
        cells: vec![],
        sweeps: vec![Sweep { n: 8, m: 1, w: 64, ts: vec![1, 2, 4, 8, 16, 32, 64, 128, 256] }],
        projector_k: 0,
    };
    let r = bench::run(&grid)?;
    Ok(json!(r.crossovers.iter().find(|c| c.method == Method::Gip).and_then(|c| c.flip_t)))
}
fn bound_value(_: u64) -> Result<Value> {
    Ok(json!(subset_bound(1.0, 1.0, 1, 8, 4, 4)))
}
fn full_training_mse(seed: u64) -> Result<Value> {
    let cfg = simulate::SimConfig::default();
    let pop = cfg.population.validate()?;
    Ok(json!(estimate_mse(&pop, &UpdateRule::FullTraining, 8, 4, 2000, seed)?.mse))
}
fn hutchinson_median(seed: u64) -> Result<Value> {
    let errs = (0..20).map(|i| hutchinson_rel_err(seed * 100 + i, 1024)).collect::<Result<Vec<_>>>()?;
    Ok(json!(median(errs)))
}
fn regime(mu: f64, seed: u64) -> Result<Value> {
    let pop = regime_population(mu).validate()?;
    Ok(json!(sweep_m(&pop, &regime_rules(), REGIME_N, &REGIME_MS, 500, seed)?.transitions()))
}
fn regime_mu0(seed: u64) -> Result<Value> {
    regime(0.0, seed)
}
fn regime_mu2(seed: u64) -> Result<Value> {
    regime(2.0, seed)
}

/// Registered oracles by name.
pub const ORACLES: &[(&str, Oracle)] = &[
    ("direct_flops_n2_m1_t2_w4", direct_flops),
    ("gip_flops_n2_m1_t2_w4", gip_flops),
    ("pip_flops_n2_m1_t2_w4", pip_flops),
    ("direct_memory_n8_m1_t1_w64", direct_memory),
    ("gip_memory_n8_m1_t512_w4", gip_memory),
    ("gip_crossover_n8_m1_w64", gip_crossover),
    ("subset_bound_n8_k4_m4", bound_value),
    ("full_training_mse_default", full_training_mse),
    ("hutchinson_median_kappa16", hutchinson_median),
    ("regime_transitions_mu0", regime_mu0),
    ("regime_transitions_mu2", regime_mu2),
];

fn oracle(id: &str) -> Result<Oracle> {
    ORACLES
        .iter()
        .find(|(name, _)| *name == id)
        .map(|(_, f)| *f)
        .ok_or_else(|| CliError::Failed(format!("fixture {id}: no oracle registered")))
}

fn matches(a: &Value, b: &Value, tol: f64) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) if tol > 0.0 => (x - y).abs() <= tol,
        _ => a == b,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Change {
    pub id: String,
    pub old: Value,
    pub new: Value,
}

/// Recomputes every record; returns the updated manifest and the changes.
pub fn regenerate(manifest: &Manifest) -> Result<(Manifest, Vec<Change>)> {
    let mut out = manifest.clone();
    let mut changes = vec![];
    for r in &mut out.records {
        let new = oracle(&r.id)?(manifest.seed).map_err(|e| CliError::Failed(format!("fixture {}: {e}", r.id)))?;
        if !matches(&new, &r.expected, r.tolerance) {
            changes.push(Change { id: r.id.clone(), old: r.expected.clone(), new: new.clone() });
            r.expected = new;
        }
    }
    Ok((out, changes))
}

pub fn load(path: &Path) -> Result<Manifest> {
    read_json(path)
}

pub fn save(path: &Path, manifest: &Manifest) -> Result<()> {
    let dir = OutDir::new(path.parent().unwrap_or(Path::new(".")));
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("manifest.json");
    dir.write(name, &(serde_json::to_string_pretty(manifest)? + "\n"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, expected: Value) -> FixtureRecord {
        FixtureRecord {
            id: id.into(),
            provenance: Provenance::Computed,
            oracle: format!("datareg fixtures --only {id}"),
            expected,
            tolerance: 0.0,
        }
    }

    #[test]
    fn unchanged_values_give_an_empty_diff() {
        let m = Manifest {
            seed: 0,
            records: vec![record("direct_flops_n2_m1_t2_w4", json!(222)), record("subset_bound_n8_k4_m4", json!(0.0))],
        };
        let (new, changes) = regenerate(&m).unwrap();
        assert_eq!(changes.len(), 1);
        assert_eq!(changes[0].id, "subset_bound_n8_k4_m4");
        let (_, again) = regenerate(&new).unwrap();
        assert!(again.is_empty());
    }

    #[test]
    fn seed_changes_values_and_keeps_provenance() {
        let m = Manifest { seed: 0, records: vec![record("full_training_mse_default", json!(0.0))] };
        let (a, _) = regenerate(&m).unwrap();
        let (b, changes) = regenerate(&Manifest { seed: 1, ..a.clone() }).unwrap();
        assert_eq!(changes.len(), 1);
        assert_eq!(a.records[0].provenance, b.records[0].provenance);
    }

    #[test]
    fn missing_oracle_names_the_fixture() {
        let m = Manifest { seed: 0, records: vec![record("no_such_fixture", json!(1))] };
        let err = regenerate(&m).unwrap_err();
        assert!(err.to_string().contains("no_such_fixture"));
    }
}

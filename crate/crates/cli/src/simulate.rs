//! Bias/variance simulation tables and regime sweeps.
//!
//! Besides the raw tables, the command checks the closed forms that apply
//! to its configuration: Full-Training and Target-Only MSE identities for
//! unclipped populations, and the variance bounds of subset rules for
//! clipped ones. Runs with fewer than two trials report their (infinite)
//! standard errors and check nothing.

use serde::{Deserialize, Serialize};

use datareg_sim::{
    estimate_many, regime_population, regime_rules, sweep_m, PopulationSpec, RegimeTable, SimResult, UpdateRule,
    REGIME_MS, REGIME_N,
};

use crate::report::Check;
use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSweep {
    pub mismatches: Vec<f64>,
    #[serde(default = "default_regime_ms")]
    pub ms: Vec<usize>,
    #[serde(default = "default_regime_trials")]
    pub trials: usize,
}

fn default_regime_ms() -> Vec<usize> {
    REGIME_MS.to_vec()
}
fn default_regime_trials() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_population")]
    pub population: PopulationSpec,
    #[serde(default = "default_rules")]
    pub rules: Vec<UpdateRule>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_ms")]
    pub ms: Vec<usize>,
    /// Tolerance of every check, in standard errors.
    #[serde(default = "default_z")]
    pub z: f64,
    #[serde(default)]
    pub sweep: Option<RegimeSweep>,
}

fn default_trials() -> usize {
    100_000
}
fn default_population() -> PopulationSpec {
    PopulationSpec::factor_model(16, 1.0, 0.7, 0.4, 1.5, 0.5, 2.0)
}
fn default_rules() -> Vec<UpdateRule> {
    vec![
        UpdateRule::FullTraining,
        UpdateRule::Global { k: 4 },
        UpdateRule::GroupWise { k: 4, groups: 2 },
        UpdateRule::GroupWise { k: 4, groups: 4 },
        UpdateRule::TargetOnly,
    ]
}
fn default_n() -> usize {
    8
}
fn default_ms() -> Vec<usize> {
    vec![1, 4, 16]
}
fn default_z() -> f64 {
    3.0
}

impl Default for SimConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub mismatch: f64,
    pub table: RegimeTable,
    pub transitions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub results: Vec<SimResult>,
    pub regimes: Vec<RegimeResult>,
    pub checks: Vec<Check>,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn results_csv(&self) -> String {
        let mut s = format!("{}\n", SimResult::CSV_HEADER);
        for r in &self.results {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn regime_csv(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.regimes.iter().enumerate() {
            for (j, line) in r.table.csv().lines().enumerate() {
                if j == 0 {
                    if i == 0 {
                        s.push_str(&format!("mismatch,{line}\n"));
                    }
                    continue;
                }
                s.push_str(&format!("{},{line}\n", r.mismatch));
            }
        }
        s
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Closed-form checks for one result.
pub fn result_checks(spec: &PopulationSpec, pop: &datareg_sim::Population, r: &SimResult, z: f64) -> Vec<Check> {
    let mut out = vec![];
    let name = format!("{}_m{}", r.method, r.m);
    let near = |got: f64, want: f64, se: f64| (got - want).abs() <= z * se;
    if spec.clip.is_none() {
        if r.method == "full_training" {
            let want = dist_sq(&spec.g_tr, &spec.g_star) + pop.trace_tr() / r.n as f64;
            out.push(Check::new(
                "simulate",
                &format!("{name}_mse"),
                near(r.mse, want, r.mse_se) && r.var == 0.0,
                format!("mse {:.6} ± {:.6}, closed form {want:.6}, variance {}", r.mse, r.mse_se, r.var),
            ));
        }
        if r.method == "target_only" {
            let want = pop.trace_star() / r.m as f64;
            out.push(Check::new(
                "simulate",
                &format!("{name}_mse"),
                near(r.mse, want, r.mse_se) && r.bias == 0.0,
                format!("mse {:.6} ± {:.6}, closed form {want:.6}, bias {}", r.mse, r.mse_se, r.bias),
            ));
        }
    }
    if let Some(b) = r.bound {
        out.push(Check::new(
            "simulate",
            &format!("{name}_variance_bound"),
            r.var <= b + z * r.var_se,
            format!("variance {:.6} ± {:.6}, bound {b:.6}", r.var, r.var_se),
        ));
    }
    out
}

pub fn run(cfg: &SimConfig) -> Result<SimReport> {
    if cfg.ms.is_empty() && cfg.sweep.is_none() {
        return Err(CliError::Config("nothing to simulate: ms is empty and no sweep is given".into()));
    }
    let pop = cfg.population.validate()?;
    let check = cfg.trials >= 2;
    let mut results = vec![];
    let mut checks = vec![];
    for &m in &cfg.ms {
        for r in estimate_many(&pop, &cfg.rules, cfg.n, m, cfg.trials, cfg.seed)? {
            if check {
                checks.extend(result_checks(&cfg.population, &pop, &r, cfg.z));
            }
            results.push(r);
        }
    }
    let mut regimes = vec![];
    if let Some(sw) = &cfg.sweep {
        for &mu in &sw.mismatches {
            let p = regime_population(mu).validate()?;
            let table = sweep_m(&p, &regime_rules(), REGIME_N, &sw.ms, sw.trials, cfg.seed)?;
            regimes.push(RegimeResult { mismatch: mu, transitions: table.transitions(), table });
        }
        if sw.mismatches.len() >= 2 && sw.trials >= 2 {
            let mut distinct: Vec<&Vec<String>> = regimes.iter().map(|r| &r.transitions).collect();
            distinct.dedup();
            distinct.sort();
            distinct.dedup();
            checks.push(Check::new(
                "simulate",
                "regime_orderings",
                distinct.len() >= 2,
                format!("{} distinct winner sequences across {} mismatch levels", distinct.len(), regimes.len()),
            ));
        }
    }
    Ok(SimReport { results, regimes, checks })
}

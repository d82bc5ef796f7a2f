//! Monte-Carlo bias/variance laboratory for feasible-set update rules.
//!
//! Per-sample gradients are synthetic vectors drawn from a [`PopulationSpec`];
//! parameter groups are contiguous coordinate blocks. For each trial the
//! training batch defines the feasible set, the target-batch mean ĝ⋆ picks
//! the update by exact projection, and the true mean g⋆ measures both the
//! error ‖u − g⋆‖² and the best achievable error inf_{u∈U} ‖u − g⋆‖².
//! Averages give MSE, bias B and variance V = MSE − B.
//!
//! Trials run in parallel. Each trial draws from streams keyed by
//! (seed, trial, side, index), and sums are reduced in trial order, so
//! results do not depend on the thread schedule. The same keys are reused
//! across rules and across n and m, giving common random numbers.

pub mod population;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use datareg::selection::{
    ln_binomial, solve_bruteforce, FeasibleSetSpec, Mode, Partition, SelectionRule, Span, SubsetObjective,
};

pub use population::{Covariance, Population, PopulationSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("population: {0}")]
    Spec(String),
    #[error("rule: {0}")]
    Rule(String),
    #[error(transparent)]
    Core(#[from] datareg::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Enumeration cap for one brute-force projection.
const BRUTE_CAP: u64 = 5_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    FullTraining,
    TargetOnly,
    Global {
        k: usize,
    },
    /// `groups` equal contiguous coordinate blocks, each with its own subset.
    GroupWise {
        k: usize,
        groups: usize,
    },
}

impl UpdateRule {
    pub fn label(&self) -> String {
        match self {
            UpdateRule::FullTraining => "full_training".into(),
            UpdateRule::TargetOnly => "target_only".into(),
            UpdateRule::Global { .. } => "global".into(),
            UpdateRule::GroupWise { groups, .. } => format!("group_wise_p{groups}"),
        }
    }

    pub fn k(&self, n: usize) -> usize {
        match *self {
            UpdateRule::Global { k } | UpdateRule::GroupWise { k, .. } => k,
            UpdateRule::FullTraining => n,
            UpdateRule::TargetOnly => 0,
        }
    }

    pub fn groups(&self) -> usize {
        match *self {
            UpdateRule::GroupWise { groups, .. } => groups,
            _ => 1,
        }
    }

    fn check(&self, d: usize, n: usize) -> Result<()> {
        if let UpdateRule::Global { k } | UpdateRule::GroupWise { k, .. } = *self {
            if k == 0 || k > n {
                return Err(SimError::Rule(format!("k={k} is infeasible for n={n}")));
            }
        }
        if let UpdateRule::GroupWise { groups, .. } = *self {
            if groups == 0 || groups > d {
                return Err(SimError::Rule(format!("{groups} groups cannot partition d={d}")));
            }
        }
        if n == 0 && *self != UpdateRule::TargetOnly {
            return Err(SimError::Rule("training batch is empty".into()));
        }
        Ok(())
    }

    /// Coordinate blocks, as near-equal contiguous ranges.
    fn blocks(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let p = self.groups();
        (0..p).map(|i| i * d / p..(i + 1) * d / p).collect()
    }

    /// The same rule as a training-engine feasible set over one d-sized layer.
    pub fn feasible_set(&self, d: usize) -> Result<FeasibleSetSpec> {
        let whole = Partition::global(&[d]);
        let (mode, rule, partition) = match *self {
            UpdateRule::FullTraining => (Mode::FullTraining, SelectionRule::topk(1), whole),
            UpdateRule::TargetOnly => (Mode::TargetOnly, SelectionRule::topk(1), whole),
            UpdateRule::Global { k } => (Mode::Subset, SelectionRule::bruteforce(k), whole),
            UpdateRule::GroupWise { k, .. } => {
                let spans =
                    self.blocks(d).into_iter().map(|r| vec![Span { layer: 0, start: r.start, end: r.end }]).collect();
                (Mode::Subset, SelectionRule::bruteforce(k), Partition::from_spans(&[d], spans)?)
            }
        };
        Ok(FeasibleSetSpec { mode, rule, partition })
    }
}

/// Error of the chosen update and of the best member of the feasible set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialOutcome {
    /// ‖u − g⋆‖².
    pub err: f64,
    /// inf_{u∈U} ‖u − g⋆‖².
    pub inf: f64,
    /// ⟨u, g⋆⟩ and ‖u‖², used by descent checks.
    pub u_dot_gstar: f64,
    pub u_sq: f64,
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean_of(vs: &[&[f64]]) -> Vec<f64> {
    let mut u = vec![0.0; vs[0].len()];
    for v in vs {
        u.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
    }
    u.iter_mut().for_each(|x| *x /= vs.len() as f64);
    u
}

/// Applies `rule` to one trial's draws.
pub fn evaluate(rule: &UpdateRule, train: &[Vec<f64>], g_hat: &[f64], g_star: &[f64]) -> Result<TrialOutcome> {
    let d = g_star.len();
    rule.check(d, train.len())?;
    let (u, inf) = match *rule {
        UpdateRule::TargetOnly => (g_hat.to_vec(), 0.0),
        UpdateRule::FullTraining => {
            let refs: Vec<&[f64]> = train.iter().map(|g| g.as_slice()).collect();
            let u = mean_of(&refs);
            let inf = dist_sq(&u, g_star);
            (u, inf)
        }
        UpdateRule::Global { k } | UpdateRule::GroupWise { k, .. } => {
            let mut u = vec![0.0; d];
            let mut inf = 0.0;
            for r in rule.blocks(d) {
                let sub: Vec<Vec<f64>> = train.iter().map(|g| g[r.clone()].to_vec()).collect();
                let hat = SubsetObjective::from_vectors(&sub, &g_hat[r.clone()]);
                let (s, _) = solve_bruteforce(&hat, k, BRUTE_CAP)?;
                let truth = SubsetObjective {
                    scores: sub.iter().map(|g| g.iter().zip(&g_star[r.clone()]).map(|(a, b)| a * b).sum()).collect(),
                    target_sq: g_star[r.clone()].iter().map(|x| x * x).sum(),
                    gram: hat.gram,
                };
                inf += solve_bruteforce(&truth, k, BRUTE_CAP)?.1.max(0.0);
                let refs: Vec<&[f64]> = s.iter().map(|&i| sub[i].as_slice()).collect();
                u[r].copy_from_slice(&mean_of(&refs));
            }
            (u, inf)
        }
    };
    Ok(TrialOutcome {
        err: dist_sq(&u, g_star),
        inf,
        u_dot_gstar: u.iter().zip(g_star).map(|(a, b)| a * b).sum(),
        u_sq: u.iter().map(|x| x * x).sum(),
    })
}

/// Mean and standard error of a sample. One observation carries no
/// spread information, so its standard error is infinite.
fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut s) = (0usize, 0.0);
    for x in xs.clone() {
        n += 1;
        s += x;
    }
    let mean = s / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub trials: usize,
    pub mse: f64,
    pub mse_se: f64,
    pub bias: f64,
    pub bias_se: f64,
    /// MSE − bias, estimated per trial so the two share noise.
    pub var: f64,
    pub var_se: f64,
    /// Theoretical variance bound, when one applies.
    pub bound: Option<f64>,
}

impl SimResult {
    pub const CSV_HEADER: &'static str = "method,n,m,k,P,mse,se,bias,var,bound";

    pub fn csv_row(&self) -> String {
        let bound = self.bound.map(|b| format!("{b:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.method, self.n, self.m, self.k, self.p, self.mse, self.mse_se, self.bias, self.var, bound
        )
    }
}

/// Per-trial outcomes of several rules on shared draws, in trial order.
pub fn run_trials(
    pop: &Population,
    rules: &[UpdateRule],
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<TrialOutcome>>> {
    if trials == 0 {
        return Err(SimError::Rule("trials must be at least 1".into()));
    }
    if m == 0 {
        return Err(SimError::Rule("target batch must be non-empty".into()));
    }
    for r in rules {
        r.check(pop.spec.d, n)?;
    }
    (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (train, g_hat) = pop.draw_trial(seed, t, n, m)?;
            rules.iter().map(|r| evaluate(r, &train, &g_hat, &pop.spec.g_star)).collect()
        })
        .collect()
}

fn summarize(pop: &Population, rule: &UpdateRule, n: usize, m: usize, outcomes: &[TrialOutcome]) -> SimResult {
    let (mse, mse_se) = mean_se(outcomes.iter().map(|o| o.err));
    let (bias, bias_se) = mean_se(outcomes.iter().map(|o| o.inf));
    let (var, var_se) = mean_se(outcomes.iter().map(|o| o.err - o.inf));
    SimResult {
        method: rule.label(),
        n,
        m,
        k: rule.k(n),
        p: rule.groups(),
        trials: outcomes.len(),
        mse,
        mse_se,
        bias,
        bias_se,
        var,
        var_se,
        bound: variance_bound(pop, rule, n, m).ok(),
    }
}

/// Monte-Carlo MSE, bias and variance of several rules on shared draws.
pub fn estimate_many(
    pop: &Population,
    rules: &[UpdateRule],
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SimResult>> {
    let per = run_trials(pop, rules, n, m, trials, seed)?;
    Ok((0..rules.len())
        .map(|j| {
            let col: Vec<TrialOutcome> = per.iter().map(|t| t[j]).collect();
            summarize(pop, &rules[j], n, m, &col)
        })
        .collect())
}

pub fn estimate_mse(
    pop: &Population,
    rule: &UpdateRule,
    n: usize,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<SimResult> {
    Ok(estimate_many(pop, std::slice::from_ref(rule), n, m, trials, seed)?.remove(0))
}

/// Variance bound for a rule. Full-Training has zero variance and
/// Target-Only's variance is exactly tr(Σ⋆)/m; subset rules use
/// 4C·P·σ/√m·√(2 log(2·C(n,k))) with σ = √λ_max(Σ⋆) (P = 1 for Global).
pub fn variance_bound(pop: &Population, rule: &UpdateRule, n: usize, m: usize) -> Result<f64> {
    rule.check(pop.spec.d, n)?;
    if m == 0 {
        return Err(SimError::Rule("target batch must be non-empty".into()));
    }
    match *rule {
        UpdateRule::FullTraining => Ok(0.0),
        UpdateRule::TargetOnly => Ok(pop.trace_star() / m as f64),
        UpdateRule::Global { k } | UpdateRule::GroupWise { k, .. } => {
            let c = pop.spec.clip.ok_or_else(|| SimError::Rule("subset variance bounds need a clip C".into()))?;
            Ok(subset_bound(c, pop.sigma(), rule.groups(), n, k, m))
        }
    }
}

/// 4·C·P·σ/√m·√(2 log(2·C(n,k))), computed through log-binomials.
pub fn subset_bound(c: f64, sigma: f64, p: usize, n: usize, k: usize, m: usize) -> f64 {
    let log_card = std::f64::consts::LN_2 + ln_binomial(n, k);
    4.0 * c * p as f64 * sigma / (m as f64).sqrt() * (2.0 * log_card).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub m: usize,
    pub mse: Vec<f64>,
    pub winner: String,
}

/// Argmin-MSE rule for each target batch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeTable {
    pub methods: Vec<String>,
    pub rows: Vec<RegimeRow>,
}

impl RegimeTable {
    /// Winners in order of increasing m with repeats collapsed.
    pub fn transitions(&self) -> Vec<String> {
        let mut out: Vec<String> = vec![];
        for r in &self.rows {
            if out.last() != Some(&r.winner) {
                out.push(r.winner.clone());
            }
        }
        out
    }

    /// Number of grid points a method wins.
    pub fn wins(&self, method: &str) -> usize {
        self.rows.iter().filter(|r| r.winner == method).count()
    }

    pub fn csv(&self) -> String {
        let mut s = format!("m,{},winner\n", self.methods.join(","));
        for r in &self.rows {
            let cols: Vec<String> = r.mse.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&format!("{},{},{}\n", r.m, cols.join(","), r.winner));
        }
        s
    }
}

/// MSE of every rule across a grid of target batch sizes.
pub fn sweep_m(
    pop: &Population,
    rules: &[UpdateRule],
    n: usize,
    ms: &[usize],
    trials: usize,
    seed: u64,
) -> Result<RegimeTable> {
    let methods: Vec<String> = rules.iter().map(|r| r.label()).collect();
    let rows = ms
        .iter()
        .map(|&m| {
            let res = estimate_many(pop, rules, n, m, trials, seed)?;
            let mse: Vec<f64> = res.iter().map(|r| r.mse).collect();
            let best = (0..mse.len()).min_by(|&a, &b| mse[a].total_cmp(&mse[b])).expect("at least one rule");
            Ok(RegimeRow { m, mse, winner: methods[best].clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegimeTable { methods, rows })
}

/// Target batch sizes of the regime sweep.
pub const REGIME_MS: [usize; 18] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512];

/// Training batch size, subset size and group count of the regime sweep.
pub const REGIME_N: usize = 8;
pub const REGIME_K: usize = 4;
pub const REGIME_GROUPS: usize = 4;

/// Population for the regime sweep at a given mismatch knob: d = 16, a
/// shared factor that one global subset can exploit, and block-structured
/// mismatch of size `mismatch` that only per-group subsets can correct,
/// with independent per-block training variability along it.
pub fn regime_population(mismatch: f64) -> PopulationSpec {
    PopulationSpec::factor_model(16, 1.0, 0.5, mismatch, 4.0, 0.2, 4.0).with_block_factors(REGIME_GROUPS, 2.0)
}

/// Mismatch levels of the regime sweep, from small to large.
pub const REGIME_MISMATCHES: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

/// Full-Training, Global, Group-Wise and Target-Only, in that order.
pub fn regime_rules() -> [UpdateRule; 4] {
    [
        UpdateRule::FullTraining,
        UpdateRule::Global { k: REGIME_K },
        UpdateRule::GroupWise { k: REGIME_K, groups: REGIME_GROUPS },
        UpdateRule::TargetOnly,
    ]
}

/// Observed one-step progress on L⋆(θ) = (β/2)‖θ − θ_opt‖², placed so that
/// ∇L⋆(θ_t) = g⋆, against the majorization bound
/// L⋆(θ_t) − (η/2)‖g⋆‖² + (η/2)·MSE(u).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentCheck {
    pub eta: f64,
    pub loss_before: f64,
    pub expected_after: f64,
    pub expected_after_se: f64,
    pub mse: f64,
    pub mse_se: f64,
    pub bound: f64,
}

impl DescentCheck {
    /// True when the observed loss exceeds the bound by at most `z` standard
    /// errors of the difference.
    pub fn holds(&self, z: f64) -> bool {
        let se = (self.expected_after_se.powi(2) + (self.eta / 2.0 * self.mse_se).powi(2)).sqrt();
        self.expected_after <= self.bound + z * se + 1e-12 * self.loss_before.abs().max(1.0)
    }
}

pub fn descent_check(
    pop: &Population,
    rule: &UpdateRule,
    n: usize,
    m: usize,
    eta: f64,
    trials: usize,
    seed: u64,
) -> Result<DescentCheck> {
    let beta = pop.spec.beta;
    if !(eta > 0.0 && eta <= 1.0 / beta) {
        return Err(SimError::Rule(format!("η={eta} must lie in (0, 1/β]")));
    }
    let gs_sq: f64 = pop.spec.g_star.iter().map(|x| x * x).sum();
    let loss_before = gs_sq / (2.0 * beta);
    let per = run_trials(pop, std::slice::from_ref(rule), n, m, trials, seed)?;
    // L⋆(θ_t − ηu) = (β/2)‖g⋆/β − ηu‖² = ‖g⋆‖²/(2β) − η⟨g⋆,u⟩ + (βη²/2)‖u‖².
    let after = |o: &TrialOutcome| loss_before - eta * o.u_dot_gstar + beta * eta * eta / 2.0 * o.u_sq;
    let (expected_after, expected_after_se) = mean_se(per.iter().map(|t| after(&t[0])));
    let (mse, mse_se) = mean_se(per.iter().map(|t| t[0].err));
    Ok(DescentCheck {
        eta,
        loss_before,
        expected_after,
        expected_after_se,
        mse,
        mse_se,
        bound: loss_before - eta / 2.0 * gs_sq + eta / 2.0 * mse,
    })
}

#[cfg(test)]
mod tests;

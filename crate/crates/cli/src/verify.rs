//! Invariant suites behind `datareg verify`.
//!
//! Every suite returns named checks; the command fails when any check
//! fails. The helpers are public so that integration tests can reuse the
//! same instances with their own tolerances.

use serde::{Deserialize, Serialize};

use datareg::compression::{
    project_back, project_general, project_outer_sum, refresh_first_moment, refresh_second_moment, AdamHyper,
    Projector, ProjectorSpec, SecondMomentMode,
};
use datareg::net::{
    per_sample_grad, Activation, Batch, LayerSpec, LayerView, Loss, Model, ModelSpec, SampleSet, Side, SIDES,
};
use datareg::oracle::{self, random_batch};
use datareg::rng::Rng;
use datareg::scheduler::{replay, Phase};
use datareg::scoring::Method;
use datareg::selection::{FeasibleSetSpec, Mode, Partition, SelectionRule, Span};
use datareg::tensor::{Factor, Meter, Tensor};
use datareg::updates::{run_step, MesoConfig, Optimizer, Schedule, StepConfig, StepKind, StepReport, TrainState};
use datareg_sim::{PopulationSpec, UpdateRule};

use crate::bench::{self, BenchGrid, Scored};
use crate::report::Check;
use crate::simulate::{self, RegimeSweep, SimConfig};
use crate::Result;

pub use datareg::net::Fault;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Scoring,
    Gradients,
    Updates,
    Ledger,
    Compression,
    Theory,
}

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Scoring, Suite::Gradients, Suite::Updates, Suite::Ledger, Suite::Compression, Suite::Theory];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Scoring => "scoring",
            Suite::Gradients => "gradients",
            Suite::Updates => "updates",
            Suite::Ledger => "ledger",
            Suite::Compression => "compression",
            Suite::Theory => "theory",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub suites: Vec<Suite>,
    pub seed: u64,
    /// Injected into every ledger-suite step.
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { suites: Suite::ALL.to_vec(), seed: 0, fault: None }
    }
}

pub fn run(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = vec![];
    for &s in &opts.suites {
        out.extend(match s {
            Suite::Scoring => scoring_suite(opts.seed)?,
            Suite::Gradients => gradients_suite(opts.seed)?,
            Suite::Updates => updates_suite(opts.seed)?,
            Suite::Ledger => ledger_suite(opts.seed, opts.fault)?,
            Suite::Compression => compression_suite(opts.seed)?,
            Suite::Theory => theory_suite(opts.seed)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- scoring

/// Random dense or LoRA stack with n training and m target samples.
pub fn random_instance(seed: u64) -> (Model, Batch) {
    let mut rng = Rng::keyed(seed, &[0x5c]);
    let layers = 1 + rng.below(3);
    let t = 1 + rng.below(4);
    let (n, m) = (1 + rng.below(5), 1 + rng.below(3));
    let mut widths: Vec<usize> = (0..=layers).map(|_| 1 + rng.below(6)).collect();
    widths[0] = widths[0].max(2);
    let ls = (0..layers)
        .map(|l| {
            let (w_in, w_out) = (widths[l], widths[l + 1]);
            let max_rank = w_in.min(w_out).saturating_sub(1);
            if max_rank >= 1 && rng.below(3) == 0 {
                LayerSpec::Lora { w_in, w_out, rank: 1 + rng.below(max_rank.min(2)) }
            } else {
                LayerSpec::Dense { w_in, w_out }
            }
        })
        .collect();
    let spec = ModelSpec { layers: ls, activation: Activation::Tanh, loss: Loss::Squared, tokens: t };
    let model = Model::init(spec.clone(), &mut rng).expect("valid spec");
    let batch = random_batch(&spec, n, m, &mut rng);
    (model, batch)
}

/// Largest |Direct − GIP| or |Direct − PIP| over every layer of every
/// instance.
pub fn scoring_max_diff(instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances as u64 {
        let (model, batch) = random_instance(seed.wrapping_mul(1_000_003).wrapping_add(i));
        let layers = model.len();
        let mut s = Scored::new(model, &batch)?;
        for l in 0..layers {
            let (d, _) = s.score(l, Method::Direct, None)?;
            for method in [Method::Gip, Method::Pip] {
                let (x, _) = s.score(l, method, None)?;
                worst = d.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            }
        }
    }
    Ok(worst)
}

fn scoring_suite(seed: u64) -> Result<Vec<Check>> {
    let diff = scoring_max_diff(100, seed)?;
    let grid = BenchGrid { sweeps: vec![], seed, ..BenchGrid::default() };
    let report = bench::run(&grid)?;
    let inexact: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.exact())
        .map(|r| format!("{} {:?}", r.method.name(), (r.n, r.m, r.t, r.w)))
        .collect();
    Ok(vec![
        Check::new("scoring", "methods_agree", diff < 1e-9, format!("max |Δscore| {diff:.3e} over 100 instances")),
        Check::new(
            "scoring",
            "costs_match_closed_forms",
            inexact.is_empty(),
            if inexact.is_empty() {
                format!("{} rows exact", report.rows.len())
            } else {
                format!("inexact: {}", inexact.join("; "))
            },
        ),
    ])
}

// ---------------------------------------------------------------- gradients

pub fn gradient_models() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("dense", ModelSpec::square(3, 3, 2)),
        (
            "lora",
            ModelSpec {
                layers: vec![
                    LayerSpec::Dense { w_in: 3, w_out: 4 },
                    LayerSpec::Lora { w_in: 4, w_out: 4, rank: 2 },
                    LayerSpec::Dense { w_in: 4, w_out: 2 },
                ],
                activation: Activation::Tanh,
                loss: Loss::Squared,
                tokens: 2,
            },
        ),
        ("embedding", oracle::embedding_spec(5, 3, 2, 3)),
        ("cross_entropy", ModelSpec { loss: Loss::CrossEntropy, ..ModelSpec::square(2, 3, 2) }),
    ]
}

/// Worst relative error between per-sample gradients and central finite
/// differences, over every sample of both sides and every layer.
pub fn gradient_max_rel_err(spec: &ModelSpec, seed: u64, h: f64) -> Result<f64> {
    let mut rng = Rng::keyed(seed, &[0x9d]);
    let model = Model::init(spec.clone(), &mut rng)?;
    let batch = random_batch(spec, 3, 2, &mut rng);
    let mut s = Scored::new(model.clone(), &batch)?;
    let mut worst = 0.0f64;
    for l in 0..model.len() {
        let view = LayerView::new(&mut s.meter, &s.model, &s.caches, l)?;
        for side in SIDES {
            let count = if side == Side::Train { batch.n() } else { batch.m() };
            for i in 0..count {
                let g: Vec<f64> = per_sample_grad(&mut s.meter, &view, &s.caches, side, i)?
                    .iter()
                    .flat_map(|t| t.data().to_vec())
                    .collect();
                let fd = oracle::fd_sample_grad(&model, &batch, side, i, l, h);
                worst = worst.max(oracle::rel_err(&g, &fd));
            }
        }
        view.finish(&mut s.meter)?;
    }
    Ok(worst)
}

fn gradients_suite(seed: u64) -> Result<Vec<Check>> {
    gradient_models()
        .into_iter()
        .map(|(name, spec)| {
            let e = gradient_max_rel_err(&spec, seed, 1e-5)?;
            Ok(Check::new("gradients", name, e < 1e-5, format!("max relative error {e:.3e}")))
        })
        .collect()
}

// ---------------------------------------------------------------- updates

pub fn step_config(mode: Mode, rule: SelectionRule, partition: Partition) -> StepConfig {
    StepConfig::new(0.1, FeasibleSetSpec { mode, rule, partition })
}

pub fn run_once(model: &Model, batch: &Batch, cfg: &StepConfig) -> Result<(Model, StepReport)> {
    let mut m = model.clone();
    let r = run_step(&mut m, batch, cfg, &mut TrainState::default())?;
    Ok((m, r))
}

/// Global, layer-wise, two-group-per-layer and mixed partitions.
pub fn partitions(model: &Model) -> Vec<(&'static str, Partition)> {
    let sizes = model.spec.layer_sizes();
    let split = sizes
        .iter()
        .enumerate()
        .flat_map(|(l, &s)| {
            [vec![Span { layer: l, start: 0, end: s / 2 }], vec![Span { layer: l, start: s / 2, end: s }]]
        })
        .collect();
    let mut out = vec![
        ("global", Partition::global(&sizes)),
        ("layerwise", Partition::layerwise(&sizes)),
        ("split", Partition::from_spans(&sizes, split).expect("valid split")),
    ];
    if sizes.len() >= 2 {
        out.push(("layer_pairs", Partition::blocks(&sizes, 2)));
    }
    out
}

pub fn rules(n: usize) -> Vec<(&'static str, SelectionRule)> {
    let k = (n / 2).max(1);
    vec![
        ("topk", SelectionRule::topk(k)),
        ("threshold", SelectionRule::threshold(0.0)),
        ("greedy", SelectionRule::greedy(k)),
        ("bruteforce", SelectionRule::bruteforce(k)),
    ]
}

fn same_step(a: &(Model, StepReport), b: &(Model, StepReport)) -> bool {
    a.0 == b.0 && a.1.update == b.1.update
}

/// k = n against standard training, per partition.
pub fn k_equals_n_cases(model: &Model, batch: &Batch) -> Result<Vec<(String, bool)>> {
    let sizes = model.spec.layer_sizes();
    let std =
        run_once(model, batch, &step_config(Mode::FullTraining, SelectionRule::topk(1), Partition::global(&sizes)))?;
    partitions(model)
        .into_iter()
        .map(|(name, p)| {
            let sub = run_once(model, batch, &step_config(Mode::Subset, SelectionRule::topk(batch.n()), p))?;
            Ok((name.to_string(), same_step(&sub, &std)))
        })
        .collect()
}

/// One-pass against two-pass, for every rule and partition.
pub fn one_vs_two_pass_cases(model: &Model, batch: &Batch) -> Result<Vec<(String, bool)>> {
    let mut out = vec![];
    for (pn, p) in partitions(model) {
        for (rn, r) in rules(batch.n()) {
            let one = step_config(Mode::Subset, r, p.clone());
            let mut two = one.clone();
            two.schedule = Schedule::TwoPass;
            let (a, b) = (run_once(model, batch, &one)?, run_once(model, batch, &two)?);
            out.push((format!("{pn}/{rn}"), same_step(&a, &b) && a.1.selections == b.1.selections));
        }
    }
    Ok(out)
}

/// Gradient-accumulated thresholding against whole-batch thresholding.
pub fn grad_accum_cases(model: &Model, batch: &Batch) -> Result<Vec<(String, bool)>> {
    let mut out = vec![];
    for (pn, p) in partitions(model) {
        for micro in [1, 2, batch.n()] {
            let whole = step_config(Mode::Subset, SelectionRule::threshold(0.0), p.clone());
            let mut acc = whole.clone();
            acc.schedule = Schedule::GradAccum { micro };
            let (a, b) = (run_once(model, batch, &whole)?, run_once(model, batch, &acc)?);
            out.push((format!("{pn}/micro{micro}"), same_step(&a, &b)));
        }
    }
    Ok(out)
}

fn summarize(suite: &str, name: &str, cases: Vec<(String, bool)>) -> Check {
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    let detail = if failed.is_empty() {
        format!("{} cases bit-identical", cases.len())
    } else {
        format!("differ: {}", failed.join(", "))
    };
    Check::new(suite, name, failed.is_empty(), detail)
}

fn updates_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::keyed(seed, &[0x0b]);
    let spec = ModelSpec::square(3, 4, 2);
    let model = Model::init(spec.clone(), &mut rng)?;
    let batch = random_batch(&spec, 6, 2, &mut rng);
    Ok(vec![
        summarize("updates", "k_equals_n_is_standard", k_equals_n_cases(&model, &batch)?),
        summarize("updates", "one_pass_equals_two_pass", one_vs_two_pass_cases(&model, &batch)?),
        summarize("updates", "grad_accum_equals_whole_batch", grad_accum_cases(&model, &batch)?),
    ])
}

// ---------------------------------------------------------------- ledger

/// One configuration per step kind.
pub fn kind_configs(model: &Model, n: usize) -> Vec<(StepKind, StepConfig)> {
    let sizes = model.spec.layer_sizes();
    let k = (n / 2).max(1);
    let sub = |p: Partition| step_config(Mode::Subset, SelectionRule::topk(k), p);
    let mut two = sub(Partition::layerwise(&sizes));
    two.schedule = Schedule::TwoPass;
    let mut acc = step_config(Mode::Subset, SelectionRule::threshold(0.0), Partition::layerwise(&sizes));
    acc.schedule = Schedule::GradAccum { micro: 2 };
    let mut meso = sub(Partition::layerwise(&sizes));
    meso.optimizer = Optimizer::Meso(MesoConfig {
        projector: Some(ProjectorSpec::square(3, 2)),
        refresh_every: None,
        second_moment: SecondMomentMode::Exact,
        adam: Some(AdamHyper::default()),
    });
    let split = partitions(model).into_iter().find(|p| p.0 == "split").expect("split partition").1;
    vec![
        (StepKind::Standard, step_config(Mode::FullTraining, SelectionRule::topk(1), Partition::global(&sizes))),
        (StepKind::TargetOnly, step_config(Mode::TargetOnly, SelectionRule::topk(1), Partition::global(&sizes))),
        (StepKind::GlobalOnePass, sub(Partition::global(&sizes))),
        (StepKind::LayerWise, sub(Partition::layerwise(&sizes))),
        (StepKind::GroupWise, sub(split)),
        (StepKind::TwoPass, two),
        (StepKind::GradAccum, acc),
        (StepKind::MesoLayerWise, meso),
    ]
}

/// Runs every step kind, optionally with a fault, and reports legality.
pub fn legality_checks(model: &Model, batch: &Batch, fault: Option<Fault>) -> Result<Vec<Check>> {
    kind_configs(model, batch.n())
        .into_iter()
        .map(|(kind, mut cfg)| {
            cfg.fault = fault;
            let (_, r) = run_once(model, batch, &cfg)?;
            let name = format!("legal_{}", serde_json::to_value(kind)?.as_str().unwrap_or("kind"));
            Ok(match (r.kind == kind, r.legality()) {
                (false, _) => Check::new("ledger", &name, false, format!("dispatched as {:?}", r.kind)),
                (true, Ok(())) => {
                    Check::new("ledger", &name, true, format!("{} events replay legally", r.events.len()))
                }
                (true, Err(v)) => Check::new("ledger", &name, false, format!("violation: {v}")),
            })
        })
        .collect()
}

/// Layer-wise backward occupancy against standard training on the merged
/// batch, and the global one-pass cache held when scoring starts.
pub fn occupancy(model: &Model, batch: &Batch) -> Result<(bool, u64, u64)> {
    let sizes = model.spec.layer_sizes();
    let k = (batch.n() / 2).max(1);
    let (_, lw) =
        run_once(model, batch, &step_config(Mode::Subset, SelectionRule::topk(k), Partition::layerwise(&sizes)))?;
    let merged = Batch {
        tokens: batch.tokens,
        train: batch.train.concat(&batch.target, batch.tokens),
        target: SampleSet::empty(&model.spec),
    };
    let (_, st) =
        run_once(model, &merged, &step_config(Mode::FullTraining, SelectionRule::topk(1), Partition::global(&sizes)))?;
    let (pl, ps) = (replay(&lw.events)?, replay(&st.events)?);
    let same = pl.layer_boundaries(&lw.events, 1) == ps.layer_boundaries(&st.events, 1);
    let (_, g) = run_once(model, batch, &step_config(Mode::Subset, SelectionRule::topk(k), Partition::global(&sizes)))?;
    let pg = replay(&g.events)?;
    let first = g.events.iter().position(|e| matches!(e.phase, Phase::Scoring(_))).unwrap_or(0);
    let held = if first == 0 { 0 } else { pg.live[first - 1] };
    let cols = ((batch.n() + batch.m()) * batch.tokens) as u64;
    let want: u64 = model.spec.layers.iter().map(|ls| cols * (ls.w_in() + ls.w_out()) as u64).sum();
    Ok((same, held, want))
}

fn ledger_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<Check>> {
    let mut rng = Rng::keyed(seed, &[0x1e]);
    let spec = ModelSpec::square(3, 4, 2);
    let model = Model::init(spec.clone(), &mut rng)?;
    let batch = random_batch(&spec, 6, 2, &mut rng);
    let mut out = legality_checks(&model, &batch, fault)?;
    let (same, held, want) = occupancy(&model, &batch)?;
    out.push(Check::new(
        "ledger",
        "layerwise_matches_standard",
        same,
        "per-layer boundaries equal on the merged batch",
    ));
    out.push(Check::new(
        "ledger",
        "global_holds_all_caches",
        held == want,
        format!("{held} entries live at scoring, expected {want}"),
    ));
    Ok(out)
}

// ---------------------------------------------------------------- compression

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.at(r, c) * x[c]).sum()).collect()
}

/// Worst deviation of factorized forward, back and general projections
/// from dense Kronecker oracles, over random shapes up to 32 per side.
pub fn projection_max_diff(seed: u64, cases: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in 0..cases as u64 {
        let mut rng = Rng::keyed(seed, &[0xc0, c]);
        let (rows, cols) = (1 + rng.below(32), 1 + rng.below(32));
        let (ko, ki) = (1 + rng.below(4), 1 + rng.below(4));
        let kf = (rng.below(2) == 0).then(|| 1 + rng.below(ko * ki));
        let t = 1 + rng.below(4);
        let old = Projector::gaussian(&ProjectorSpec { seed: c, k_out: ko, k_in: ki, k_final: kf }, rows, cols, 0, 0);
        let new = Projector::gaussian(
            &ProjectorSpec { seed: c + 1000, k_out: 1 + rng.below(4), k_in: 1 + rng.below(4), k_final: None },
            rows,
            cols,
            0,
            0,
        );
        let l = Tensor::randn(&[rows, t], &mut rng, 1.0);
        let r = Tensor::randn(&[cols, t], &mut rng, 1.0);
        let cols_idx: Vec<usize> = (0..t).collect();
        let fwd = project_outer_sum(&mut Meter::new(), &old, Factor::Dense(&l), Factor::Dense(&r), &cols_idx)?;
        let g = oracle::matmul_naive(&l, &r.transpose());
        let dense_old = old.dense();
        worst = worst.max(max_diff(&fwd, &mv(&dense_old, g.data())));
        let x: Vec<f64> = (0..old.kappa()).map(|_| rng.normal()).collect();
        let back = project_back(&mut Meter::new(), &old, &x)?;
        let back_want = mv(&dense_old.transpose(), &x);
        worst = worst.max(max_diff(back.data(), &back_want));
        let gen = project_general(&mut Meter::new(), &new, &old, &x)?;
        worst = worst.max(max_diff(&gen, &mv(&new.dense(), &back_want)));
        let m1 = refresh_first_moment(&mut Meter::new(), &x, &old, &new)?;
        worst = worst.max(max_diff(&m1, &mv(&new.dense(), &back_want)));
    }
    Ok(worst)
}

/// Worst deviation of the exact second-moment transfer from (M⊙M)v̂ with
/// M = Π_new Π_oldᵀ.
pub fn second_moment_max_diff(seed: u64, cases: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in 0..cases as u64 {
        let mut rng = Rng::keyed(seed, &[0x2d, c]);
        let (rows, cols) = (1 + rng.below(8), 1 + rng.below(8));
        let old = Projector::gaussian(&ProjectorSpec::square(c, 1 + rng.below(3)), rows, cols, 0, 0);
        let new = Projector::gaussian(&ProjectorSpec::square(c + 500, 1 + rng.below(3)), rows, cols, 0, 0);
        let v: Vec<f64> = (0..old.kappa()).map(|_| rng.uniform()).collect();
        let (got, used) =
            refresh_second_moment(&mut Meter::new(), &v, &old, &new, SecondMomentMode::Exact, &mut rng, 1)?;
        if used != SecondMomentMode::Exact {
            return Ok(f64::INFINITY);
        }
        let m = oracle::matmul_naive(&new.dense(), &old.dense().transpose());
        let want: Vec<f64> = (0..m.rows()).map(|a| (0..m.cols()).map(|j| m.at(a, j).powi(2) * v[j]).sum()).collect();
        worst = worst.max(max_diff(&got, &want));
    }
    Ok(worst)
}

/// Relative error of the Hutchinson second-moment estimate against the
/// exact transfer, for κ = 16 projectors on 8×8 layers.
pub fn hutchinson_rel_err(seed: u64, probes: usize) -> Result<f64> {
    let old = Projector::gaussian(&ProjectorSpec::square(1000 + seed, 4), 8, 8, 0, 0);
    let new = Projector::gaussian(&ProjectorSpec::square(2000 + seed, 4), 8, 8, 0, 0);
    let mut rng = Rng::keyed(seed, &[0x4b]);
    let v: Vec<f64> = (0..16).map(|_| rng.uniform() + 0.1).collect();
    let (exact, _) = refresh_second_moment(&mut Meter::new(), &v, &old, &new, SecondMomentMode::Exact, &mut rng, 1)?;
    let (est, _) =
        refresh_second_moment(&mut Meter::new(), &v, &old, &new, SecondMomentMode::Hutchinson { probes }, &mut rng, 1)?;
    Ok(oracle::rel_err(&est, &exact))
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn compression_suite(seed: u64) -> Result<Vec<Check>> {
    let p = projection_max_diff(seed, 40)?;
    let s = second_moment_max_diff(seed, 20)?;
    let h = median((0..20).map(|i| hutchinson_rel_err(seed * 100 + i, 1024)).collect::<Result<Vec<_>>>()?);
    Ok(vec![
        Check::new("compression", "factorized_equals_dense", p < 1e-10, format!("max deviation {p:.3e}")),
        Check::new("compression", "second_moment_exact", s < 1e-10, format!("max deviation {s:.3e}")),
        Check::new("compression", "hutchinson_within_5pct", h < 0.05, format!("median relative error {h:.4}")),
    ])
}

// ---------------------------------------------------------------- theory

fn theory_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![];
    let base = SimConfig { seed, trials: 5000, ms: vec![1, 4], ..SimConfig::default() };
    out.extend(simulate::run(&base)?.checks);
    let clipped = SimConfig {
        seed,
        trials: 2000,
        ms: vec![1, 8],
        population: PopulationSpec::isotropic(8, 1.0, 0.5, 0.5, 1.0).with_clip(4.0),
        rules: vec![UpdateRule::Global { k: 3 }, UpdateRule::GroupWise { k: 3, groups: 2 }],
        ..SimConfig::default()
    };
    out.extend(simulate::run(&clipped)?.checks);
    let sweep = SimConfig {
        seed,
        ms: vec![],
        sweep: Some(RegimeSweep { mismatches: vec![0.0, 2.0], ms: vec![2, 12, 64, 512], trials: 500 }),
        ..SimConfig::default()
    };
    out.extend(simulate::run(&sweep)?.checks);
    for c in &mut out {
        c.suite = "theory".into();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_at_the_default_seed() {
        let checks = run(&VerifyOptions::default()).unwrap();
        let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(Check::line).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        for s in Suite::ALL {
            assert!(checks.iter().any(|c| c.suite == s.name()), "{}", s.name());
        }
    }

    #[test]
    fn selector_runs_only_the_named_suites() {
        let checks = run(&VerifyOptions { suites: vec![Suite::Ledger], ..VerifyOptions::default() }).unwrap();
        assert!(checks.iter().all(|c| c.suite == "ledger"));
    }

    #[test]
    fn skip_swap_fault_names_the_consumer() {
        let opts =
            VerifyOptions { suites: vec![Suite::Ledger], fault: Some(Fault::SkipSwap), ..VerifyOptions::default() };
        let checks = run(&opts).unwrap();
        let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed).collect();
        assert!(!failed.is_empty());
        assert!(
            failed.iter().any(|c| c.detail.contains("violation") && c.detail.contains("reads tensor")),
            "{failed:?}"
        );
    }
}

//! One optimization step per feasible-set design.
//!
//! Every step kind runs against a [`Meter`], so its FLOPs and the lifetime
//! of every cached tensor are recorded. The kinds differ in when tensors
//! are released:
//! - standard: each layer's input and gradient are dropped as soon as its
//!   block of u is assembled.
//! - global one-pass: every (a, ∂ℓ/∂e) pair survives a full backward; a
//!   scoring sweep then drops the target side, the global subset is solved,
//!   and an assembly sweep drops the training side.
//! - interleaved (layer-wise and group-wise): scoring happens inside the
//!   backward sweep. A group resolves at its lowest layer. A layer's tensors
//!   are dropped once every group touching it has resolved.
//! - two-pass: scoring uses the standard release order, then a second
//!   forward/backward on the union of selected samples assembles u.
//! - gradient accumulation: micro-batches run the interleaved engine in
//!   turn and raw sums accumulate across them (threshold rules only).
//! - MeSO: per-sample gradients are compressed right after each layer's
//!   backward, and the update lives in the compressed space until the end.
//!
//! Averages are formed as raw sums over selected columns in ascending order
//! followed by one division, so every kind that selects the same samples
//! produces bit-identical updates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::compression::{
    apply_adamw, project_back, project_outer_sum, AdamHyper, MomentState, Projector, ProjectorSpec, SecondMomentMode,
};
use crate::error::{Error, Result};
use crate::net::{
    backward_layer, forward, mean_loss, sample_columns, Batch, Caches, Fault, LayerSpec, LayerView, Model, Side,
};
use crate::rng::Rng;
use crate::scheduler::{
    check_legality, plan_under_checkpointing, Dependency, LedgerEvent, PassPlan, Phase, SegmentPlan, Violation,
};
use crate::scoring::{range_objective, score_groups_at_layer, Method, ScoreTable};
use crate::selection::{
    select_threshold, solve_group, EmptyPolicy, FeasibleSetSpec, GroupInput, GroupSelection, Mode, RuleKind,
    SubsetObjective,
};
use crate::tensor::{accumulate_outer, dot, outer_sum_flops, CostMeter, Meter, Precision, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    OnePass,
    TwoPass,
    GradAccum {
        micro: usize,
    },
}

/// Compressed-subspace optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MesoConfig {
    /// `None` uses identity projectors.
    #[serde(default)]
    pub projector: Option<ProjectorSpec>,
    /// Regenerate projectors every this many steps.
    #[serde(default)]
    pub refresh_every: Option<u64>,
    #[serde(default)]
    pub second_moment: SecondMomentMode,
    /// AdamW moments in the subspace; plain SGD on Πᵀũ when absent.
    #[serde(default)]
    pub adam: Option<AdamHyper>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Meso(MesoConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub eta: f64,
    pub spec: FeasibleSetSpec,
    #[serde(default)]
    pub method: Method,
    /// Projector used by compressed scoring.
    #[serde(default)]
    pub score_projector: Option<ProjectorSpec>,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub segments: Option<SegmentPlan>,
    #[serde(default)]
    pub fault: Option<Fault>,
    #[serde(default)]
    pub precision: Precision,
}

impl StepConfig {
    pub fn new(eta: f64, spec: FeasibleSetSpec) -> Self {
        Self {
            eta,
            spec,
            method: Method::Direct,
            score_projector: None,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::OnePass,
            segments: None,
            fault: None,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !self.eta.is_finite() {
            return Err(Error::Config("learning rate must be finite".into()));
        }
        if self.spec.partition.layer_sizes() != model.spec.layer_sizes().as_slice() {
            return Err(Error::Config("partition does not match the model's layer sizes".into()));
        }
        if self.method == Method::Compressed && self.score_projector.is_none() {
            return Err(Error::Config("compressed scoring needs score_projector".into()));
        }
        if let Schedule::GradAccum { micro } = self.schedule {
            if micro == 0 {
                return Err(Error::Config("micro-batch size must be positive".into()));
            }
            if self.spec.mode == Mode::Subset && !matches!(self.spec.rule.kind, RuleKind::Threshold { .. }) {
                return Err(Error::Config(format!(
                    "gradient accumulation needs a rule that decomposes over micro-batches; {} is batch-global, use schedule two_pass",
                    self.spec.rule.kind.name()
                )));
            }
        }
        if let Optimizer::Meso(_) = self.optimizer {
            if !self.spec.partition.is_layerwise() {
                return Err(Error::Config("MeSO updates need a layer-wise partition".into()));
            }
            if model.spec.layers.iter().any(|l| !matches!(l, LayerSpec::Dense { .. })) {
                return Err(Error::Config("MeSO updates support dense layers only".into()));
            }
            if self.schedule != Schedule::OnePass {
                return Err(Error::Config("MeSO updates run in a single pass".into()));
            }
        }
        if let Some(seg) = &self.segments {
            seg.validate(model.len())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Standard,
    TargetOnly,
    GlobalOnePass,
    LayerWise,
    GroupWise,
    TwoPass,
    GradAccum,
    MesoLayerWise,
}

/// What a step produced, independent of the ledger.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub selections: Vec<GroupSelection>,
    /// Flattened u before scaling by η.
    pub update: Vec<f64>,
    pub scores: Option<ScoreTable>,
    /// FLOPs spent before the second pass started (two-pass only).
    pub pass1_flops: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub kind: StepKind,
    pub selections: Vec<GroupSelection>,
    pub update_norms: Vec<f64>,
    pub cost: CostMeter,
    pub pass1_flops: Option<u64>,
    pub target_loss_before: Option<f64>,
    pub target_loss_after: Option<f64>,
    /// Why the dispatcher deviated from the configured schedule.
    pub note: Option<String>,
    #[serde(skip)]
    pub update: Vec<f64>,
    #[serde(skip)]
    pub scores: Option<ScoreTable>,
    #[serde(skip)]
    pub events: Vec<LedgerEvent>,
    #[serde(skip)]
    pub reads: Vec<Dependency>,
}

impl StepReport {
    pub fn legality(&self) -> std::result::Result<(), Violation> {
        check_legality(&self.events, &self.reads)
    }
}

/// State carried between steps.
#[derive(Debug, Default)]
pub struct TrainState {
    pub step: u64,
    pub meso: Option<MesoState>,
}

/// Per-layer projectors and compressed moments.
#[derive(Debug)]
pub struct MesoState {
    pub config: MesoConfig,
    pub projectors: Vec<Projector>,
    pub moments: Vec<Option<MomentState>>,
    pub epoch: u64,
}

impl MesoState {
    pub fn new(model: &Model, config: MesoConfig) -> Self {
        let projectors = Self::make(model, &config, 0);
        let moments = projectors.iter().map(|p| config.adam.map(|h| MomentState::new(p.kappa(), h))).collect();
        Self { config, projectors, moments, epoch: 0 }
    }

    fn make(model: &Model, config: &MesoConfig, epoch: u64) -> Vec<Projector> {
        model
            .spec
            .layers
            .iter()
            .enumerate()
            .map(|(l, ls)| match &config.projector {
                Some(spec) => Projector::gaussian(spec, ls.w_out(), ls.w_in(), l, epoch),
                None => Projector::identity(ls.w_out(), ls.w_in(), l),
            })
            .collect()
    }

    /// Moves to fresh projectors and transfers the moments.
    pub fn refresh(&mut self, meter: &mut Meter, model: &Model) -> Result<()> {
        self.epoch += 1;
        let new = Self::make(model, &self.config, self.epoch);
        let seed = self.config.projector.map_or(0, |p| p.seed);
        for (l, (old, st)) in self.projectors.iter().zip(self.moments.iter_mut()).enumerate() {
            if let Some(st) = st {
                let mut rng = Rng::keyed(seed, &[l as u64, self.epoch, 0x5eed]);
                st.refresh(meter, old, &new[l], self.config.second_moment, &mut rng)?;
            }
        }
        self.projectors = new;
        Ok(())
    }
}

fn layer_offsets(model: &Model) -> Vec<usize> {
    let mut off = vec![0];
    for s in model.spec.layer_sizes() {
        off.push(off.last().unwrap() + s);
    }
    off
}

fn alloc_update(meter: &mut Meter, d: usize) -> Result<Tensor> {
    meter.set_phase(Phase::Optimizer);
    let u = Tensor::zeros(&[d]);
    meter.alloc(&u)?;
    Ok(u)
}

/// Adds Σ_{i∈samples} g_i restricted to `ranges` of layer l into `acc`
/// (the layer's slice of u). `samples` index the cached training side and
/// must be ascending.
fn accumulate_layer(
    meter: &mut Meter,
    model: &Model,
    caches: &Caches,
    l: usize,
    samples: &[usize],
    ranges: &[Range<usize>],
    acc: &mut [f64],
) -> Result<()> {
    meter.set_phase(Phase::Assembly(l));
    let view = LayerView::new(meter, model, caches, l)?;
    view.note_reads(meter, caches, Side::Train, &format!("assembly:{l}"))?;
    let cols = sample_columns(samples, caches.tokens);
    for (b, r) in view.pieces(ranges) {
        let off = view.block_offset(b);
        let (rows, ncols) = view.block_dims(b);
        let (lf, rf) = view.block(caches, b, Side::Train)?;
        accumulate_outer(&mut acc[off..off + rows * ncols], lf, rf, &cols, r.clone());
        meter.add_flops(outer_sum_flops(cols.len(), r.len()));
    }
    view.finish(meter)
}

/// Divides each group's ranges of u by its divisor (zero when skipped).
fn finalize(meter: &mut Meter, model: &Model, spec: &FeasibleSetSpec, sels: &[GroupSelection], u: &mut [f64]) {
    let off = layer_offsets(model);
    let part = &spec.partition;
    for (p, sel) in sels.iter().enumerate() {
        for l in part.layers_of(p) {
            for r in part.ranges(p, l) {
                let slice = &mut u[off[l] + r.start..off[l] + r.end];
                if sel.divisor == 0 {
                    slice.iter_mut().for_each(|x| *x = 0.0);
                } else {
                    let k = sel.divisor as f64;
                    slice.iter_mut().for_each(|x| *x /= k);
                    meter.add_flops(slice.len() as u64);
                }
            }
        }
    }
}

/// θ ← θ − η·u.
fn apply_sgd(meter: &mut Meter, model: &mut Model, u: &[f64], eta: f64) {
    meter.set_phase(Phase::Optimizer);
    let off = layer_offsets(model);
    for l in 0..model.len() {
        let mut pos = off[l];
        for b in model.blocks_mut(l) {
            for x in b.data_mut() {
                *x -= eta * u[pos];
                pos += 1;
            }
        }
    }
    meter.add_flops(2 * u.len() as u64);
}

fn release_all(meter: &mut Meter, caches: &mut Caches) -> Result<()> {
    for l in 0..caches.layers.len() {
        for s in [Side::Train, Side::Target] {
            caches.release_side(meter, l, s)?;
        }
    }
    Ok(())
}

fn projector_for(cfg: &StepConfig, model: &Model, l: usize, step: u64) -> Option<Projector> {
    let spec = cfg.score_projector?;
    let ls = &model.spec.layers[l];
    (ls.blocks().len() == 1).then(|| {
        let (rows, cols) = ls.blocks()[0];
        Projector::gaussian(&spec, rows, cols, l, step)
    })
}

/// Scores layer l into `table` (and Gram objectives when the rule needs them).
fn score_layer_groups(
    meter: &mut Meter,
    model: &Model,
    caches: &Caches,
    cfg: &StepConfig,
    l: usize,
    step: u64,
    table: &mut ScoreTable,
    objectives: &mut [Option<SubsetObjective>],
) -> Result<()> {
    let part = &cfg.spec.partition;
    let view = LayerView::new(meter, model, caches, l)?;
    if cfg.spec.rule.kind.needs_gram() {
        for p in part.groups_of_layer(l) {
            let obj = range_objective(meter, &view, caches, &part.ranges(p, l))?;
            table.add(p, &obj.scores);
            objectives[p].get_or_insert_with(|| SubsetObjective::zeros(obj.n())).add(&obj);
        }
    } else {
        let proj = projector_for(cfg, model, l, step);
        score_groups_at_layer(meter, cfg.method, &view, caches, part, proj.as_ref(), table)?;
    }
    view.finish(meter)
}

fn check_train(batch: &Batch) -> Result<()> {
    if batch.n() == 0 {
        return Err(Error::Invalid("step needs at least one training sample".into()));
    }
    Ok(())
}

/// Plain SGD on the training-batch mean gradient.
pub fn step_standard(meter: &mut Meter, model: &mut Model, batch: &Batch, cfg: &StepConfig) -> Result<StepOutcome> {
    check_train(batch)?;
    let train_only = Batch { target: crate::net::SampleSet::empty(&model.spec), ..batch.clone() };
    let n = batch.n();
    let (_, mut caches) = forward(meter, model, &train_only)?;
    caches.set_fault(cfg.fault);
    let off = layer_offsets(model);
    let mut u = alloc_update(meter, *off.last().unwrap())?;
    let all: Vec<usize> = (0..n).collect();
    let nl = model.len();
    for l in (0..nl).rev() {
        backward_layer(meter, model, &mut caches, l)?;
        if l + 1 < nl {
            caches.release_grad(meter, l + 1, Side::Train)?;
        }
        let size = off[l + 1] - off[l];
        accumulate_layer(meter, model, &caches, l, &all, &[0..size], &mut u.data_mut()[off[l]..off[l + 1]])?;
        caches.release_input(meter, l, Side::Train)?;
    }
    caches.release_grad(meter, 0, Side::Train)?;
    meter.set_phase(Phase::Optimizer);
    let kf = n as f64;
    u.data_mut().iter_mut().for_each(|x| *x /= kf);
    meter.add_flops(u.len() as u64);
    apply_sgd(meter, model, u.data(), cfg.eta);
    let update = u.data().to_vec();
    meter.release(u)?;
    let groups = cfg.spec.partition.len();
    let full = GroupSelection { indices: all, divisor: n, fallback: false, objective: None };
    Ok(StepOutcome { selections: vec![full; groups], update, ..Default::default() })
}

/// Gradient descent on the target batch alone.
pub fn step_target_only(meter: &mut Meter, model: &mut Model, batch: &Batch, cfg: &StepConfig) -> Result<StepOutcome> {
    if batch.m() == 0 {
        return Err(Error::Invalid("target-only step needs at least one target sample".into()));
    }
    let swapped = Batch { tokens: batch.tokens, train: batch.target.clone(), target: batch.train.clone() };
    step_standard(meter, model, &swapped, cfg)
}

/// Full backward with every pair retained, post-hoc scoring and assembly.
pub fn step_global_onepass(
    meter: &mut Meter,
    model: &mut Model,
    batch: &Batch,
    cfg: &StepConfig,
    step: u64,
) -> Result<StepOutcome> {
    check_train(batch)?;
    let part = &cfg.spec.partition;
    let (n, nl) = (batch.n(), model.len());
    let (_, mut caches) = forward(meter, model, batch)?;
    caches.set_fault(cfg.fault);
    for l in (0..nl).rev() {
        backward_layer(meter, model, &mut caches, l)?;
    }
    let mut table = ScoreTable::new(cfg.method, part.len(), n);
    let mut objectives = vec![None; part.len()];
    for l in (0..nl).rev() {
        score_layer_groups(meter, model, &caches, cfg, l, step, &mut table, &mut objectives)?;
        caches.release_side(meter, l, Side::Target)?;
    }
    let sels = solve_all(cfg, &table, objectives)?;
    let off = layer_offsets(model);
    let mut u = alloc_update(meter, *off.last().unwrap())?;
    for l in (0..nl).rev() {
        for p in part.groups_of_layer(l) {
            accumulate_layer(
                meter,
                model,
                &caches,
                l,
                &sels[p].indices,
                &part.ranges(p, l),
                &mut u.data_mut()[off[l]..off[l + 1]],
            )?;
        }
        caches.release_side(meter, l, Side::Train)?;
    }
    finish_update(meter, model, cfg, sels, u, Some(table))
}

fn solve_all(
    cfg: &StepConfig,
    table: &ScoreTable,
    objectives: Vec<Option<SubsetObjective>>,
) -> Result<Vec<GroupSelection>> {
    table
        .scores
        .iter()
        .zip(objectives)
        .map(|(s, o)| solve_group(&cfg.spec.rule, &GroupInput { scores: s.clone(), objective: o }))
        .collect()
}

fn finish_update(
    meter: &mut Meter,
    model: &mut Model,
    cfg: &StepConfig,
    sels: Vec<GroupSelection>,
    mut u: Tensor,
    scores: Option<ScoreTable>,
) -> Result<StepOutcome> {
    meter.set_phase(Phase::Optimizer);
    finalize(meter, model, &cfg.spec, &sels, u.data_mut());
    apply_sgd(meter, model, u.data(), cfg.eta);
    let update = u.data().to_vec();
    meter.release(u)?;
    Ok(StepOutcome { selections: sels, update, scores, pass1_flops: None })
}

/// How a pass of the interleaved engine turns group scores into selections.
enum Resolve<'a> {
    /// Full solve with the configured rule and empty policy.
    Solve,
    /// Threshold only, no empty policy; indices are shifted by `offset`.
    /// `full` accumulates every sample for the full-batch fallback.
    Threshold { tau: f64, offset: usize, full: Option<&'a mut [f64]> },
}

/// Interleaved sweep over one batch. Raw sums go into `acc` (flat d);
/// returned selections carry indices relative to `batch` plus the offset.
fn interleaved_pass(
    meter: &mut Meter,
    model: &Model,
    batch: &Batch,
    cfg: &StepConfig,
    step: u64,
    u: &mut Option<Tensor>,
    mut resolve: Resolve,
) -> Result<(Vec<GroupSelection>, ScoreTable)> {
    let part = &cfg.spec.partition;
    let (n, nl, np) = (batch.n(), model.len(), part.len());
    let (_, mut caches) = forward(meter, model, batch)?;
    caches.set_fault(cfg.fault);
    let off = layer_offsets(model);
    if u.is_none() {
        *u = Some(alloc_update(meter, *off.last().unwrap())?);
    }
    let min_layer: Vec<usize> = (0..np).map(|p| part.layers_of(p)[0]).collect();
    let mut resolved = vec![false; np];
    let mut sels: Vec<Option<GroupSelection>> = vec![None; np];
    let mut table = ScoreTable::new(cfg.method, np, n);
    let mut objectives = vec![None; np];
    let layer_done = |resolved: &[bool], j: usize| part.groups_of_layer(j).iter().all(|&p| resolved[p]);
    let mut input_gone = vec![false; nl];
    let mut grad_gone = vec![false; nl];
    for l in (0..nl).rev() {
        backward_layer(meter, model, &mut caches, l)?;
        if l + 1 < nl {
            caches.release_grad(meter, l + 1, Side::Target)?;
        }
        meter.set_phase(Phase::Scoring(l));
        score_layer_groups(meter, model, &caches, cfg, l, step, &mut table, &mut objectives)?;
        caches.release_input(meter, l, Side::Target)?;
        for p in (0..np).filter(|&p| min_layer[p] == l) {
            let sel = match &mut resolve {
                Resolve::Solve => solve_group(
                    &cfg.spec.rule,
                    &GroupInput { scores: table.scores[p].clone(), objective: objectives[p].take() },
                )?,
                Resolve::Threshold { tau, .. } => {
                    let idx = select_threshold(&table.scores[p], *tau);
                    GroupSelection { divisor: idx.len(), indices: idx, fallback: false, objective: None }
                }
            };
            let acc = u.as_mut().expect("allocated above").data_mut();
            for j in part.layers_of(p) {
                let ranges = part.ranges(p, j);
                accumulate_layer(meter, model, &caches, j, &sel.indices, &ranges, &mut acc[off[j]..off[j + 1]])?;
                if let Resolve::Threshold { full: Some(full), .. } = &mut resolve {
                    let all: Vec<usize> = (0..n).collect();
                    accumulate_layer(meter, model, &caches, j, &all, &ranges, &mut full[off[j]..off[j + 1]])?;
                }
            }
            resolved[p] = true;
            sels[p] = Some(sel);
        }
        for j in l..nl {
            if !layer_done(&resolved, j) {
                continue;
            }
            if !input_gone[j] {
                caches.release_input(meter, j, Side::Train)?;
                input_gone[j] = true;
            }
            if !grad_gone[j] && (j > l || l == 0) {
                caches.release_grad(meter, j, Side::Train)?;
                grad_gone[j] = true;
            }
        }
    }
    release_all(meter, &mut caches)?;
    let shift = match resolve {
        Resolve::Threshold { offset, .. } => offset,
        Resolve::Solve => 0,
    };
    let sels = sels
        .into_iter()
        .map(|s| {
            let mut s = s.expect("every group has a lowest layer");
            s.indices.iter_mut().for_each(|i| *i += shift);
            s
        })
        .collect();
    Ok((sels, table))
}

/// Layer-wise and group-wise updates resolved inside the backward sweep.
pub fn step_interleaved(
    meter: &mut Meter,
    model: &mut Model,
    batch: &Batch,
    cfg: &StepConfig,
    step: u64,
) -> Result<StepOutcome> {
    check_train(batch)?;
    let mut u = None;
    let (sels, table) = interleaved_pass(meter, model, batch, cfg, step, &mut u, Resolve::Solve)?;
    finish_update(meter, model, cfg, sels, u.expect("allocated"), Some(table))
}

/// Scoring pass with the standard release order, then forward/backward on
/// the union of selected samples for assembly.
pub fn step_twopass(
    meter: &mut Meter,
    model: &mut Model,
    batch: &Batch,
    cfg: &StepConfig,
    step: u64,
) -> Result<StepOutcome> {
    check_train(batch)?;
    let part = &cfg.spec.partition;
    let (n, nl) = (batch.n(), model.len());
    let (_, mut caches) = forward(meter, model, batch)?;
    caches.set_fault(cfg.fault);
    let mut table = ScoreTable::new(cfg.method, part.len(), n);
    let mut objectives = vec![None; part.len()];
    for l in (0..nl).rev() {
        backward_layer(meter, model, &mut caches, l)?;
        if l + 1 < nl {
            caches.release_grad(meter, l + 1, Side::Train)?;
            caches.release_grad(meter, l + 1, Side::Target)?;
        }
        meter.set_phase(Phase::Scoring(l));
        score_layer_groups(meter, model, &caches, cfg, l, step, &mut table, &mut objectives)?;
        caches.release_input(meter, l, Side::Train)?;
        caches.release_input(meter, l, Side::Target)?;
    }
    release_all(meter, &mut caches)?;
    let sels = solve_all(cfg, &table, objectives)?;
    let pass1_flops = meter.flops();

    meter.set_pass(2);
    let mut union: Vec<usize> = sels.iter().flat_map(|s| s.indices.iter().copied()).collect();
    union.sort_unstable();
    union.dedup();
    let off = layer_offsets(model);
    let mut u = None;
    if !union.is_empty() {
        let sub = batch.train_subset(&model.spec, &union);
        let pos = |i: usize| union.binary_search(&i).expect("index in union");
        let local: Vec<Vec<usize>> = sels.iter().map(|s| s.indices.iter().map(|&i| pos(i)).collect()).collect();
        let (_, mut caches) = forward(meter, model, &sub)?;
        caches.set_fault(cfg.fault);
        u = Some(alloc_update(meter, *off.last().unwrap())?);
        let acc = u.as_mut().unwrap();
        for l in (0..nl).rev() {
            backward_layer(meter, model, &mut caches, l)?;
            if l + 1 < nl {
                caches.release_grad(meter, l + 1, Side::Train)?;
            }
            for p in part.groups_of_layer(l) {
                accumulate_layer(
                    meter,
                    model,
                    &caches,
                    l,
                    &local[p],
                    &part.ranges(p, l),
                    &mut acc.data_mut()[off[l]..off[l + 1]],
                )?;
            }
            caches.release_input(meter, l, Side::Train)?;
        }
        release_all(meter, &mut caches)?;
    }
    let u = match u {
        Some(u) => u,
        None => alloc_update(meter, *off.last().unwrap())?,
    };
    let mut out = finish_update(meter, model, cfg, sels, u, Some(table))?;
    out.pass1_flops = Some(pass1_flops);
    Ok(out)
}

/// Micro-batches processed in turn with raw sums accumulated across them.
pub fn step_grad_accum(
    meter: &mut Meter,
    model: &mut Model,
    batch: &Batch,
    cfg: &StepConfig,
    step: u64,
) -> Result<StepOutcome> {
    check_train(batch)?;
    let Schedule::GradAccum { micro } = cfg.schedule else {
        return Err(Error::Config("step_grad_accum needs a grad_accum schedule".into()));
    };
    let RuleKind::Threshold { tau } = cfg.spec.rule.kind else {
        return Err(Error::Config(format!(
            "{} does not decompose over micro-batches; use schedule two_pass",
            cfg.spec.rule.kind.name()
        )));
    };
    let part = &cfg.spec.partition;
    let n = batch.n();
    let d = model.spec.d();
    let mut u = None;
    let mut full = match cfg.spec.rule.empty_policy {
        EmptyPolicy::FullBatch => {
            meter.set_phase(Phase::Optimizer);
            let t = Tensor::zeros(&[d]);
            meter.alloc(&t)?;
            Some(t)
        }
        EmptyPolicy::SkipGroup => None,
    };
    let mut picked: Vec<Vec<usize>> = vec![vec![]; part.len()];
    let mut table = ScoreTable::new(cfg.method, part.len(), n);
    let mut start = 0;
    while start < n {
        let end = (start + micro).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk =
            Batch { tokens: batch.tokens, train: batch.train.select(&idx, batch.tokens), target: batch.target.clone() };
        let resolve = Resolve::Threshold { tau, offset: start, full: full.as_mut().map(|t| t.data_mut()) };
        let (sels, t) = interleaved_pass(meter, model, &chunk, cfg, step, &mut u, resolve)?;
        for (p, s) in sels.into_iter().enumerate() {
            picked[p].extend(s.indices);
            table.scores[p][start..end].copy_from_slice(&t.scores[p]);
        }
        start = end;
    }
    let mut u = u.expect("at least one micro-batch");
    let off = layer_offsets(model);
    let sels: Vec<GroupSelection> = picked
        .into_iter()
        .enumerate()
        .map(|(p, indices)| {
            if !indices.is_empty() {
                return GroupSelection { divisor: indices.len(), indices, fallback: false, objective: None };
            }
            if let Some(full) = &full {
                for l in part.layers_of(p) {
                    for r in part.ranges(p, l) {
                        let (a, b) = (off[l] + r.start, off[l] + r.end);
                        u.data_mut()[a..b].copy_from_slice(&full.data()[a..b]);
                    }
                }
                GroupSelection { indices: (0..n).collect(), divisor: n, fallback: true, objective: None }
            } else {
                GroupSelection { indices: vec![], divisor: 0, fallback: true, objective: None }
            }
        })
        .collect();
    if let Some(full) = full {
        meter.release(full)?;
    }
    finish_update(meter, model, cfg, sels, u, Some(table))
}

/// Layer-wise subset update driven by compressed per-sample gradients.
pub fn step_meso_layerwise(
    meter: &mut Meter,
    model: &mut Model,
    batch: &Batch,
    cfg: &StepConfig,
    state: &mut MesoState,
) -> Result<StepOutcome> {
    check_train(batch)?;
    if batch.m() == 0 {
        return Err(Error::Invalid("MeSO scoring needs target samples".into()));
    }
    let (n, m, nl, t) = (batch.n(), batch.m(), model.len(), batch.tokens);
    for (l, p) in state.projectors.iter().enumerate() {
        let (rows, cols) = model.spec.layers[l].blocks()[0];
        if p.rows() != rows || p.cols() != cols {
            return Err(Error::Dimension(format!("projector for layer {l} does not match the layer shape")));
        }
    }
    let (_, mut caches) = forward(meter, model, batch)?;
    caches.set_fault(cfg.fault);
    meter.set_phase(Phase::Optimizer);
    let mut moment_handles = vec![];
    for st in state.moments.iter().flatten() {
        let h = Tensor::zeros(&[2 * st.m.len()]);
        meter.alloc(&h)?;
        moment_handles.push(h);
    }
    let mut compressed_updates: Vec<Option<Tensor>> = (0..nl).map(|_| None).collect();
    let mut sels = vec![GroupSelection::default_empty(); nl];
    let mut table = ScoreTable::new(Method::Compressed, nl, n);
    for l in (0..nl).rev() {
        backward_layer(meter, model, &mut caches, l)?;
        if l + 1 < nl {
            caches.release_grad(meter, l + 1, Side::Train)?;
            caches.release_grad(meter, l + 1, Side::Target)?;
        }
        meter.set_phase(Phase::Scoring(l));
        let proj = &state.projectors[l];
        let view = LayerView::new(meter, model, &caches, l)?;
        let consumer = format!("scoring:{l}");
        view.note_reads(meter, &caches, Side::Train, &consumer)?;
        view.note_reads(meter, &caches, Side::Target, &consumer)?;
        let (lt, rt) = view.block(&caches, 0, Side::Target)?;
        let tcols: Vec<usize> = (0..m * t).collect();
        let mut target = project_outer_sum(meter, proj, lt, rt, &tcols)?;
        let inv = 1.0 / m as f64;
        target.iter_mut().for_each(|x| *x *= inv);
        meter.add_flops(target.len() as u64);
        let target = Tensor::from_vec(&[target.len()], target)?;
        meter.alloc(&target)?;
        let (lf, rf) = view.block(&caches, 0, Side::Train)?;
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let g = project_outer_sum(meter, proj, lf, rf, &sample_columns(&[i], t))?;
            let g = Tensor::from_vec(&[g.len()], g)?;
            meter.alloc(&g)?;
            grads.push(g);
        }
        view.finish(meter)?;
        caches.release_input(meter, l, Side::Train)?;
        caches.release_input(meter, l, Side::Target)?;
        let scores: Vec<f64> = grads
            .iter()
            .map(|g| {
                meter.add_flops(2 * g.len() as u64 - 1);
                dot(g.data(), target.data())
            })
            .collect();
        table.add(l, &scores);
        let objective = cfg.spec.rule.kind.needs_gram().then(|| {
            let vecs: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
            SubsetObjective::from_vectors(&vecs, target.data())
        });
        let sel = solve_group(&cfg.spec.rule, &GroupInput { scores, objective })?;
        meter.set_phase(Phase::Assembly(l));
        let mut ut = Tensor::zeros(&[proj.kappa()]);
        for &i in &sel.indices {
            ut.data_mut().iter_mut().zip(grads[i].data()).for_each(|(a, b)| *a += b);
        }
        if sel.divisor > 0 {
            let k = sel.divisor as f64;
            ut.data_mut().iter_mut().for_each(|x| *x /= k);
        }
        meter.add_flops((sel.indices.len() * proj.kappa()) as u64);
        meter.set_phase(Phase::Optimizer);
        meter.alloc(&ut)?;
        compressed_updates[l] = Some(ut);
        meter.set_phase(Phase::Assembly(l));
        for g in grads {
            meter.release(g)?;
        }
        meter.release(target)?;
        sels[l] = sel;
    }
    release_all(meter, &mut caches)?;
    meter.set_phase(Phase::Optimizer);
    let mut update = Vec::with_capacity(model.spec.d());
    for l in 0..nl {
        let ut = compressed_updates[l].take().expect("every layer assembled");
        let proj = &state.projectors[l];
        let back = project_back(meter, proj, ut.data())?;
        update.extend_from_slice(back.data());
        let w = &mut model.blocks_mut(l).into_iter().next().expect("dense layer has one block");
        match &mut state.moments[l] {
            Some(st) => apply_adamw(meter, proj, st, ut.data(), cfg.eta, w)?,
            None => {
                w.axpy(-cfg.eta, &back)?;
                meter.add_flops(2 * back.len() as u64);
            }
        }
        meter.release(ut)?;
    }
    for h in moment_handles {
        meter.release(h)?;
    }
    Ok(StepOutcome { selections: sels, update, scores: Some(table), pass1_flops: None })
}

impl GroupSelection {
    fn default_empty() -> Self {
        GroupSelection { indices: vec![], divisor: 0, fallback: false, objective: None }
    }
}

/// Picks the step kind for a configuration; the string explains any
/// deviation from the configured schedule.
pub fn choose_kind(cfg: &StepConfig) -> (StepKind, Option<String>) {
    let part = &cfg.spec.partition;
    match cfg.spec.mode {
        Mode::TargetOnly => return (StepKind::TargetOnly, None),
        Mode::FullTraining => return (StepKind::Standard, None),
        Mode::Subset => {}
    }
    if let Optimizer::Meso(_) = cfg.optimizer {
        return (StepKind::MesoLayerWise, None);
    }
    match cfg.schedule {
        Schedule::TwoPass => return (StepKind::TwoPass, None),
        Schedule::GradAccum { .. } => return (StepKind::GradAccum, None),
        Schedule::OnePass => {}
    }
    if let Some(plan) = &cfg.segments {
        if let (PassPlan::TwoPass, why) = plan_under_checkpointing(part, plan) {
            return (StepKind::TwoPass, Some(format!("switched to two_pass: {why}")));
        }
    }
    if part.len() == 1 {
        (StepKind::GlobalOnePass, None)
    } else if part.is_layerwise() {
        (StepKind::LayerWise, None)
    } else {
        (StepKind::GroupWise, None)
    }
}

/// Runs one step of the configured kind on a fresh meter and reports it.
pub fn run_step(model: &mut Model, batch: &Batch, cfg: &StepConfig, state: &mut TrainState) -> Result<StepReport> {
    cfg.validate(model)?;
    let mut meter = Meter::with_precision(cfg.precision);
    if cfg.fault.is_some() {
        meter.set_lenient(true);
    }
    let loss_of = |model: &Model| if batch.m() > 0 { mean_loss(model, &batch.target).ok() } else { None };
    let before = loss_of(model);
    let (kind, note) = choose_kind(cfg);
    let step = state.step;
    let out = match kind {
        StepKind::Standard => step_standard(&mut meter, model, batch, cfg)?,
        StepKind::TargetOnly => step_target_only(&mut meter, model, batch, cfg)?,
        StepKind::GlobalOnePass => step_global_onepass(&mut meter, model, batch, cfg, step)?,
        StepKind::LayerWise | StepKind::GroupWise => step_interleaved(&mut meter, model, batch, cfg, step)?,
        StepKind::TwoPass => step_twopass(&mut meter, model, batch, cfg, step)?,
        StepKind::GradAccum => step_grad_accum(&mut meter, model, batch, cfg, step)?,
        StepKind::MesoLayerWise => {
            let Optimizer::Meso(mc) = cfg.optimizer else { unreachable!("kind chosen from optimizer") };
            if state.meso.is_none() {
                state.meso = Some(MesoState::new(model, mc));
            }
            let meso = state.meso.as_mut().expect("set above");
            if let Some(every) = mc.refresh_every {
                if every > 0 && step > 0 && step % every == 0 {
                    meter.set_phase(Phase::Setup);
                    meso.refresh(&mut meter, model)?;
                }
            }
            step_meso_layerwise(&mut meter, model, batch, cfg, meso)?
        }
    };
    let after = loss_of(model);
    state.step += 1;
    let update_norms = group_norms(model, &cfg.spec, &out.update);
    Ok(StepReport {
        step,
        kind,
        selections: out.selections,
        update_norms,
        cost: meter.snapshot(),
        pass1_flops: out.pass1_flops,
        target_loss_before: before,
        target_loss_after: after,
        note,
        update: out.update,
        scores: out.scores,
        events: meter.events().to_vec(),
        reads: meter.reads().to_vec(),
    })
}

/// ‖u^(p)‖ for each group.
pub fn group_norms(model: &Model, spec: &FeasibleSetSpec, u: &[f64]) -> Vec<f64> {
    if u.is_empty() {
        return vec![0.0; spec.partition.len()];
    }
    let off = layer_offsets(model);
    (0..spec.partition.len())
        .map(|p| {
            let mut s = 0.0;
            for l in spec.partition.layers_of(p) {
                for r in spec.partition.ranges(p, l) {
                    s += u[off[l] + r.start..off[l] + r.end].iter().map(|x| x * x).sum::<f64>();
                }
            }
            s.sqrt()
        })
        .collect()
}

//! Tensor-lifetime traces: replay, legality checks, and checkpoint modeling.
//!
//! The pre-activation gradient of layer l+1 conceptually reuses the buffer of
//! the cached pre-activation; the ledger models every such reuse as a release
//! followed by an allocation of equal size, which gives identical entry counts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::Partition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    Setup,
    Forward,
    Backward(usize),
    Scoring(usize),
    Assembly(usize),
    Optimizer,
}

impl Phase {
    pub fn layer(&self) -> Option<usize> {
        match self {
            Phase::Backward(l) | Phase::Scoring(l) | Phase::Assembly(l) => Some(*l),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Setup => write!(f, "setup"),
            Phase::Forward => write!(f, "forward"),
            Phase::Backward(l) => write!(f, "backward:{l}"),
            Phase::Scoring(l) => write!(f, "scoring:{l}"),
            Phase::Assembly(l) => write!(f, "assembly:{l}"),
            Phase::Optimizer => write!(f, "optimizer"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Alloc,
    Release,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub id: u64,
    pub entries: u64,
    pub phase: Phase,
    /// 1 for single-pass steps and the scoring pass, 2 for a re-run pass.
    pub pass: u8,
}

impl LedgerEvent {
    pub fn signed(&self) -> i64 {
        match self.kind {
            EventKind::Alloc => self.entries as i64,
            EventKind::Release => -(self.entries as i64),
        }
    }

    /// Phase label with a pass prefix for second-pass events.
    pub fn label(&self) -> String {
        if self.pass > 1 {
            format!("pass{}/{}", self.pass, self.phase)
        } else {
            self.phase.to_string()
        }
    }
}

/// A consumer read tensor `id` after `seq` events had been recorded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub seq: u64,
    pub consumer: String,
    pub id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Live entries after each event.
    pub live: Vec<u64>,
    pub peak: u64,
    pub final_live: u64,
    /// Largest live count reached inside each phase label.
    pub phase_max: BTreeMap<String, u64>,
}

impl Profile {
    /// Live entries after the last backward-phase event of each layer, for
    /// events of the given pass. This is the occupancy a layer's backward
    /// step sees once earlier releases have happened.
    pub fn backward_boundaries(&self, events: &[LedgerEvent], pass: u8) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if let (true, Phase::Backward(l)) = (e.pass == pass, e.phase) {
                out.insert(l, self.live[i]);
            }
        }
        out
    }

    /// Live entries after the last event of each backward-sweep layer
    /// iteration (backward, scoring or assembly phases of layer l), keyed by
    /// layer, for events of the given pass.
    pub fn layer_boundaries(&self, events: &[LedgerEvent], pass: u8) -> BTreeMap<usize, u64> {
        let mut out = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if e.pass != pass {
                continue;
            }
            if let Some(l) = e.phase.layer() {
                out.insert(l, self.live[i]);
            }
        }
        out
    }
}

/// Replays an event stream into a live-entry profile.
pub fn replay(events: &[LedgerEvent]) -> Result<Profile> {
    let mut live_ids: HashMap<u64, u64> = HashMap::new();
    let mut live = 0u64;
    let mut peak = 0u64;
    let mut series = Vec::with_capacity(events.len());
    let mut phase_max: BTreeMap<String, u64> = BTreeMap::new();
    let mut last_seq: Option<u64> = None;
    for e in events {
        if let Some(s) = last_seq {
            if e.seq <= s {
                return Err(Error::Lifetime(format!("sequence not increasing at seq {}", e.seq)));
            }
        }
        last_seq = Some(e.seq);
        match e.kind {
            EventKind::Alloc => {
                if live_ids.insert(e.id, e.entries).is_some() {
                    return Err(Error::Lifetime(format!("tensor #{} allocated while live", e.id)));
                }
                live += e.entries;
            }
            EventKind::Release => match live_ids.remove(&e.id) {
                Some(n) if n == e.entries => live -= n,
                Some(n) => {
                    return Err(Error::Lifetime(format!(
                        "tensor #{} released with {} entries, allocated with {n}",
                        e.id, e.entries
                    )))
                }
                None => return Err(Error::Lifetime(format!("release before alloc of tensor #{}", e.id))),
            },
        }
        peak = peak.max(live);
        series.push(live);
        let m = phase_max.entry(e.label()).or_insert(0);
        *m = (*m).max(live);
    }
    Ok(Profile { live: series, peak, final_live: live, phase_max })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub consumer: String,
    pub id: u64,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} reads tensor #{}: {}", self.consumer, self.id, self.reason)
    }
}

/// Checks that every read happens while its tensor is live and that every
/// allocation is released exactly once by the end of the trace. Returns the
/// first violating (consumer, tensor) pair in read order.
pub fn check_legality(events: &[LedgerEvent], deps: &[Dependency]) -> std::result::Result<(), Violation> {
    let mut alloc_at: HashMap<u64, u64> = HashMap::new();
    let mut release_at: HashMap<u64, u64> = HashMap::new();
    for e in events {
        match e.kind {
            EventKind::Alloc => {
                if alloc_at.insert(e.id, e.seq).is_some() {
                    return Err(Violation { consumer: "ledger".into(), id: e.id, reason: "allocated twice".into() });
                }
            }
            EventKind::Release => {
                if !alloc_at.contains_key(&e.id) {
                    return Err(Violation {
                        consumer: "ledger".into(),
                        id: e.id,
                        reason: "released before allocation".into(),
                    });
                }
                if release_at.insert(e.id, e.seq).is_some() {
                    return Err(Violation { consumer: "ledger".into(), id: e.id, reason: "released twice".into() });
                }
            }
        }
    }
    for d in deps {
        match alloc_at.get(&d.id) {
            Some(&a) if a < d.seq => {}
            _ => {
                return Err(Violation {
                    consumer: d.consumer.clone(),
                    id: d.id,
                    reason: "tensor was never allocated before the read".into(),
                })
            }
        }
        if let Some(&r) = release_at.get(&d.id) {
            if r < d.seq {
                return Err(Violation {
                    consumer: d.consumer.clone(),
                    id: d.id,
                    reason: format!("tensor released at seq {r} before the read"),
                });
            }
        }
    }
    let mut leaked: Vec<u64> = alloc_at.keys().filter(|id| !release_at.contains_key(id)).copied().collect();
    leaked.sort_unstable();
    if let Some(&id) = leaked.first() {
        return Err(Violation { consumer: "ledger".into(), id, reason: "never released".into() });
    }
    Ok(())
}

/// Trace as CSV rows (seq, kind, id, entries, phase). Ids are renumbered in
/// order of first appearance so identical runs give identical files.
pub fn trace_csv(events: &[LedgerEvent]) -> String {
    let mut ids: HashMap<u64, u64> = HashMap::new();
    let mut out = String::from("seq,kind,id,entries,phase\n");
    for e in events {
        let next = ids.len() as u64 + 1;
        let id = *ids.entry(e.id).or_insert(next);
        let kind = match e.kind {
            EventKind::Alloc => "alloc",
            EventKind::Release => "release",
        };
        out.push_str(&format!("{},{},{},{},{}\n", e.seq, kind, id, e.entries, e.label()));
    }
    out
}

pub fn profile_csv(profile: &Profile) -> String {
    let mut out = String::from("seq,live\n");
    for (i, l) in profile.live.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Contiguous checkpoint segments over layers 0..L.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub segments: Vec<(usize, usize)>,
    #[serde(default = "default_true")]
    pub recompute: bool,
}

fn default_true() -> bool {
    true
}

impl SegmentPlan {
    /// Segments as half-open layer ranges [start, end).
    pub fn new(segments: Vec<(usize, usize)>, layers: usize) -> Result<Self> {
        let plan = Self { segments, recompute: true };
        plan.validate(layers)?;
        Ok(plan)
    }

    /// Equal segments of `size` layers (the last may be shorter).
    pub fn uniform(layers: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("segment size must be positive".into()));
        }
        let segs = (0..layers).step_by(size).map(|s| (s, (s + size).min(layers))).collect();
        Self::new(segs, layers)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let mut next = 0;
        for &(s, e) in &self.segments {
            if s != next || e <= s {
                return Err(Error::Config(format!("segments {:?} do not partition 0..{layers}", self.segments)));
            }
            next = e;
        }
        if next != layers {
            return Err(Error::Config(format!("segments {:?} do not partition 0..{layers}", self.segments)));
        }
        Ok(())
    }

    pub fn segment_of(&self, layer: usize) -> usize {
        self.segments.iter().position(|&(s, e)| (s..e).contains(&layer)).expect("layer outside plan")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassPlan {
    OnePass,
    TwoPass,
}

/// One pass is possible iff every group's layers lie inside one segment.
pub fn plan_under_checkpointing(partition: &Partition, plan: &SegmentPlan) -> (PassPlan, String) {
    for (p, layers) in (0..partition.len()).map(|p| (p, partition.layers_of(p))) {
        let segs: std::collections::BTreeSet<usize> = layers.iter().map(|&l| plan.segment_of(l)).collect();
        if segs.len() > 1 {
            return (
                PassPlan::TwoPass,
                format!(
                    "group {p} spans layers {:?} across checkpoint segments {:?}; its scores cannot be resolved before earlier segments are discarded",
                    layers, segs
                ),
            );
        }
    }
    (PassPlan::OnePass, "every group lies inside a single checkpoint segment".into())
}

/// Schedules whose checkpointed footprint can be modeled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeledSchedule {
    /// Per-group resolution inside the backward sweep (layer-wise and
    /// segment-aligned group-wise updates).
    Interleaved,
    /// All (a, ∂ℓ/∂e) pairs retained until a global selection.
    GlobalOnePass,
}

/// Synthetic trace of a checkpointed step for square layers of width `w`
/// over `cols` merged-batch columns, `d` trainable entries.
///
/// Forward keeps only each segment's input activation. When the backward
/// sweep enters a segment its activations are recomputed, modeled as fresh
/// allocations of every cached a and e of that segment. Interleaved
/// schedules drop a segment's caches once its layers resolve; the global
/// one-pass schedule has to hold every layer's pair until the end.
pub fn model_checkpointed(
    schedule: ModeledSchedule,
    layers: usize,
    w: usize,
    cols: usize,
    plan: &SegmentPlan,
) -> Result<Vec<LedgerEvent>> {
    plan.validate(layers)?;
    let block = (w * cols) as u64;
    let d = (layers * w * w) as u64;
    let mut ev = Vec::new();
    let mut next_id = 1u64;
    let push = |ev: &mut Vec<LedgerEvent>, kind, id, entries, phase| {
        let seq = ev.len() as u64;
        ev.push(LedgerEvent { seq, kind, id, entries, phase, pass: 1 });
    };
    let mut boundary = Vec::new();
    for &(s, _) in &plan.segments {
        let id = next_id;
        next_id += 1;
        push(&mut ev, EventKind::Alloc, id, block, Phase::Forward);
        boundary.push((s, id));
    }
    let u = next_id;
    next_id += 1;
    push(&mut ev, EventKind::Alloc, u, d, Phase::Optimizer);
    let mut retained: Vec<u64> = Vec::new();
    for (seg_idx, &(s, e)) in plan.segments.iter().enumerate().rev() {
        // Recompute a^(l), e^(l) for the segment; a^(s) is the boundary copy.
        let mut seg_ids = Vec::new();
        for l in s..e {
            if l > s {
                seg_ids.push(next_id);
                push(&mut ev, EventKind::Alloc, next_id, block, Phase::Backward(l));
                next_id += 1;
            }
            seg_ids.push(next_id);
            push(&mut ev, EventKind::Alloc, next_id, block, Phase::Backward(l));
            next_id += 1;
        }
        match schedule {
            ModeledSchedule::Interleaved => {
                for id in seg_ids {
                    push(&mut ev, EventKind::Release, id, block, Phase::Assembly(s));
                }
                push(&mut ev, EventKind::Release, boundary[seg_idx].1, block, Phase::Assembly(s));
            }
            ModeledSchedule::GlobalOnePass => {
                retained.extend(seg_ids);
                retained.push(boundary[seg_idx].1);
            }
        }
    }
    for id in retained {
        push(&mut ev, EventKind::Release, id, block, Phase::Assembly(0));
    }
    push(&mut ev, EventKind::Release, u, d, Phase::Optimizer);
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(seq: u64, kind: EventKind, id: u64, entries: u64) -> LedgerEvent {
        LedgerEvent { seq, kind, id, entries, phase: Phase::Forward, pass: 1 }
    }

    #[test]
    fn replay_single_pair() {
        let p = replay(&[ev(0, EventKind::Alloc, 1, 6), ev(1, EventKind::Release, 1, 6)]).unwrap();
        assert_eq!(p.peak, 6);
        assert_eq!(p.final_live, 0);
    }

    #[test]
    fn replay_rejects_release_before_alloc() {
        assert!(replay(&[ev(0, EventKind::Release, 1, 6)]).is_err());
    }

    #[test]
    fn legality_flags_read_after_release() {
        let events = [ev(0, EventKind::Alloc, 1, 4), ev(1, EventKind::Release, 1, 4)];
        let ok = [Dependency { seq: 1, consumer: "backward:0".into(), id: 1 }];
        assert!(check_legality(&events, &ok).is_ok());
        let bad = [Dependency { seq: 2, consumer: "backward:0".into(), id: 1 }];
        let v = check_legality(&events, &bad).unwrap_err();
        assert_eq!(v.consumer, "backward:0");
        assert_eq!(v.id, 1);
    }

    #[test]
    fn legality_flags_leak() {
        let events = [ev(0, EventKind::Alloc, 1, 4)];
        assert_eq!(check_legality(&events, &[]).unwrap_err().reason, "never released");
    }

    #[test]
    fn segment_plan_validation() {
        assert!(SegmentPlan::new(vec![(0, 2), (2, 4)], 4).is_ok());
        assert!(SegmentPlan::new(vec![(0, 2), (3, 4)], 4).is_err());
        assert!(SegmentPlan::new(vec![(0, 2)], 4).is_err());
        assert_eq!(SegmentPlan::uniform(5, 2).unwrap().segments, vec![(0, 2), (2, 4), (4, 5)]);
    }

    #[test]
    fn checkpoint_plans() {
        let sizes = [4, 4, 4, 4];
        let plan = SegmentPlan::uniform(4, 2).unwrap();
        assert_eq!(plan_under_checkpointing(&Partition::layerwise(&sizes), &plan).0, PassPlan::OnePass);
        assert_eq!(plan_under_checkpointing(&Partition::global(&sizes), &plan).0, PassPlan::TwoPass);
        assert_eq!(plan_under_checkpointing(&Partition::blocks(&sizes, 2), &plan).0, PassPlan::OnePass);
        let single = SegmentPlan::uniform(4, 4).unwrap();
        assert_eq!(plan_under_checkpointing(&Partition::global(&sizes), &single).0, PassPlan::OnePass);
    }

    #[test]
    fn checkpointed_layerwise_peak_below_global() {
        let plan = SegmentPlan::uniform(4, 2).unwrap();
        let lw = replay(&model_checkpointed(ModeledSchedule::Interleaved, 4, 8, 16, &plan).unwrap()).unwrap();
        let gl = replay(&model_checkpointed(ModeledSchedule::GlobalOnePass, 4, 8, 16, &plan).unwrap()).unwrap();
        assert!(lw.peak < gl.peak, "{} vs {}", lw.peak, gl.peak);
        assert_eq!(lw.final_live, 0);
        assert_eq!(gl.final_live, 0);
    }

    #[test]
    fn trace_csv_renumbers_ids() {
        let events = [ev(0, EventKind::Alloc, 77, 4), ev(1, EventKind::Release, 77, 4)];
        let csv = trace_csv(&events);
        assert_eq!(csv, "seq,kind,id,entries,phase\n0,alloc,1,4,forward\n1,release,1,4,forward\n");
    }
}

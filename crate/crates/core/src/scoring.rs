//! Per-sample alignment scores s_i = ⟨g_i, ĝ⋆⟩ at layer and group
//! granularity.
//!
//! Four layer scorers share one interface and agree to rounding:
//! - Direct materializes every per-sample gradient and the target gradient.
//! - GIP contracts over model width instead of tokens: per (i, j) pair it
//!   forms the two T×T cross-correlation matrices of the factors.
//! - PIP forms P = Ĝ⋆·A for the training columns, then one dot product per
//!   token.
//! - Compressed scores in a random κ-dimensional subspace.
//!
//! All scorers meter FLOPs exactly and allocate their working set in the
//! ledger so that [`predict_cost`] can be checked against measurements.
//! Closed forms for a dense w_out×w_in layer (s = w_out·w_in, N = n+m):
//! - Direct: 2NTs + n(s−1) FLOPs, (n+1)s entries
//! - GIP: 2nmT²(w_in+w_out) FLOPs, 2nmT² entries
//! - PIP: 2NTs + n(T·w_out−1) FLOPs, s + nT·w_out entries
//! - Compressed (κ = κ_out·κ_in, no final stage):
//!   NT[κ_in(2w_in−1) + κ_out(2w_out−1)] + n(2T−1)κ + (2mT−1)κ + κ + n(2κ−1)
//!   FLOPs, (n+1)κ entries. A final stage of size κ_f adds (n+1)κ_f(2κ−1)
//!   and replaces κ by κ_f in the last term and in the memory.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::compression::{project_outer_sum, Projector};
use crate::error::{dim_err, Error, Result};
use crate::net::{sample_columns, Caches, LayerView, Side};
use crate::scheduler::Phase;
use crate::selection::{Partition, SubsetObjective};
use crate::tensor::{accumulate_outer, dot, outer_sum_flops, Factor, Meter, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Direct,
    Gip,
    Pip,
    Compressed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Gip => "gip",
            Method::Pip => "pip",
            Method::Compressed => "compressed",
        }
    }

    pub const ALL: [Method; 4] = [Method::Direct, Method::Gip, Method::Pip, Method::Compressed];
}

/// Scores of every group of a partition, `scores[p][i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: Method,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTable {
    pub fn new(method: Method, groups: usize, n: usize) -> Self {
        Self { method, scores: vec![vec![0.0; n]; groups] }
    }

    pub fn add(&mut self, p: usize, s: &[f64]) {
        for (a, b) in self.scores[p].iter_mut().zip(s) {
            *a += b;
        }
    }

    /// CSV rows `step,group,sample,method,score` (no header).
    pub fn csv_rows(&self, step: usize) -> String {
        let mut out = String::new();
        for (p, row) in self.scores.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                out.push_str(&format!("{step},{p},{i},{},{s:e}\n", self.method.name()));
            }
        }
        out
    }
}

/// One layer's (1/m)·Σ_j target gradient, per block.
#[derive(Debug)]
pub struct TargetGrad {
    pub blocks: Vec<Tensor>,
}

impl TargetGrad {
    pub fn release(self, meter: &mut Meter) -> Result<()> {
        for b in self.blocks {
            meter.release(b)?;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

fn require_targets(caches: &Caches) -> Result<usize> {
    match caches.count(Side::Target) {
        0 => Err(Error::Invalid("scoring needs at least one target sample".into())),
        m => Ok(m),
    }
}

fn all_columns(caches: &Caches, side: Side) -> Vec<usize> {
    (0..caches.count(side) * caches.tokens).collect()
}

/// Ĝ⋆ per block via one fused outer sum over all mT target columns;
/// (2mT−1)s + s FLOPs per block. Allocated in the ledger.
pub fn target_grad(meter: &mut Meter, view: &LayerView, caches: &Caches) -> Result<TargetGrad> {
    let m = require_targets(caches)?;
    let cols = all_columns(caches, Side::Target);
    let mut blocks = vec![];
    for b in 0..view.n_blocks() {
        let (rows, ncols) = view.block_dims(b);
        let (lf, rf) = view.block(caches, b, Side::Target)?;
        let mut g = Tensor::zeros(&[rows, ncols]);
        accumulate_outer(g.data_mut(), lf, rf, &cols, 0..rows * ncols);
        let inv = 1.0 / m as f64;
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
        meter.add_flops(outer_sum_flops(cols.len(), g.len()) + g.len() as u64);
        meter.alloc(&g)?;
        blocks.push(g);
    }
    Ok(TargetGrad { blocks })
}

fn note_reads(meter: &mut Meter, view: &LayerView, caches: &Caches, sides: &[Side]) -> Result<()> {
    let consumer = format!("scoring:{}", view.layer);
    for &s in sides {
        if caches.count(s) > 0 {
            view.note_reads(meter, caches, s, &consumer)?;
        }
    }
    Ok(())
}

/// Materializes every per-sample gradient, then takes Frobenius inner
/// products with Ĝ⋆.
pub fn score_direct(meter: &mut Meter, view: &LayerView, caches: &Caches) -> Result<Vec<f64>> {
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    let target = target_grad(meter, view, caches)?;
    let n = caches.count(Side::Train);
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let cols = sample_columns(&[i], caches.tokens);
        let mut gi = vec![];
        for b in 0..view.n_blocks() {
            let (rows, ncols) = view.block_dims(b);
            let (lf, rf) = view.block(caches, b, Side::Train)?;
            let mut g = Tensor::zeros(&[rows, ncols]);
            accumulate_outer(g.data_mut(), lf, rf, &cols, 0..rows * ncols);
            meter.add_flops(outer_sum_flops(cols.len(), g.len()));
            meter.alloc(&g)?;
            gi.push(g);
        }
        grads.push(gi);
    }
    let nb = view.n_blocks();
    let mut scores = Vec::with_capacity(n);
    for gi in &grads {
        let mut s = 0.0;
        for (g, t) in gi.iter().zip(&target.blocks) {
            s += dot(g.data(), t.data());
            meter.add_flops(2 * g.len() as u64 - 1);
        }
        meter.add_flops(nb as u64 - 1);
        scores.push(s);
    }
    for g in grads.into_iter().flatten() {
        meter.release(g)?;
    }
    target.release(meter)?;
    Ok(scores)
}

/// Σ_j ⟨L_iᵀL_j, R_iᵀR_j⟩ / m with both T×T cross matrices of every pair
/// held at once.
pub fn score_gip(meter: &mut Meter, view: &LayerView, caches: &Caches) -> Result<Vec<f64>> {
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    let m = require_targets(caches)?;
    let n = caches.count(Side::Train);
    let t = caches.tokens;
    let nb = view.n_blocks();
    let mut held = vec![];
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..m {
            let mut pair = 0.0;
            for b in 0..nb {
                let (li, ri) = view.block(caches, b, Side::Train)?;
                let (lj, rj) = view.block(caches, b, Side::Target)?;
                let mut cl = Tensor::zeros(&[t, t]);
                let mut cr = Tensor::zeros(&[t, t]);
                for a in 0..t {
                    for c in 0..t {
                        cl.set(a, c, li.dot_cols(i * t + a, &lj, j * t + c));
                        cr.set(a, c, ri.dot_cols(i * t + a, &rj, j * t + c));
                    }
                }
                let tt = (t * t) as u64;
                meter.add_flops(tt * (2 * li.dim() as u64 - 1) + tt * (2 * ri.dim() as u64 - 1));
                meter.alloc(&cl)?;
                meter.alloc(&cr)?;
                pair += dot(cl.data(), cr.data());
                meter.add_flops(2 * tt - 1);
                held.push(cl);
                held.push(cr);
            }
            meter.add_flops(nb as u64 - 1);
            acc += pair;
        }
        meter.add_flops(m as u64 - 1 + 1);
        scores.push(acc / m as f64);
    }
    for x in held {
        meter.release(x)?;
    }
    Ok(scores)
}

/// Σ_τ left_τᵀ Ĝ⋆ right_τ via P = Ĝ⋆·right over all training columns.
/// Blocks with a one-hot left factor use a row lookup instead of P.
pub fn score_pip(meter: &mut Meter, view: &LayerView, caches: &Caches) -> Result<Vec<f64>> {
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    let target = target_grad(meter, view, caches)?;
    let n = caches.count(Side::Train);
    let t = caches.tokens;
    let nb = view.n_blocks();
    let mut scores = vec![0.0; n];
    for (b, g) in target.blocks.iter().enumerate() {
        let (lf, rf) = view.block(caches, b, Side::Train)?;
        let block_scores = match lf {
            Factor::OneHot { ids, .. } => {
                let Factor::Dense(delta) = rf else {
                    return Err(Error::Invalid("one-hot factors on both sides".into()));
                };
                lookup_scores(meter, ids, delta, g, t)?
            }
            Factor::Dense(left) => {
                let cols = n * t;
                let rows = g.rows();
                let mut p = Tensor::zeros(&[rows, cols]);
                for c in 0..cols {
                    let rc = rf.column(c);
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for (q, x) in rc.iter().enumerate() {
                            acc += g.at(r, q) * x;
                        }
                        p.set(r, c, acc);
                    }
                }
                meter.add_flops((rows * cols * (2 * g.cols() - 1)) as u64);
                meter.alloc(&p)?;
                let mut out = vec![0.0; n];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for c in i * t..(i + 1) * t {
                        let mut d = 0.0;
                        for r in 0..rows {
                            d += left.at(r, c) * p.at(r, c);
                        }
                        s += d;
                    }
                    meter.add_flops((t * (2 * rows - 1) + t - 1) as u64);
                    *o = s;
                }
                meter.release(p)?;
                out
            }
        };
        for (s, x) in scores.iter_mut().zip(block_scores) {
            *s += x;
        }
    }
    meter.add_flops((n * (nb - 1)) as u64);
    target.release(meter)?;
    Ok(scores)
}

fn lookup_scores(meter: &mut Meter, ids: &Tensor, delta: &Tensor, g: &Tensor, t: usize) -> Result<Vec<f64>> {
    let (vocab, dim) = g.dims();
    if delta.rows() != dim || delta.cols() != ids.len() {
        return dim_err("embedding gradient does not match the id list");
    }
    let n = ids.len() / t;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for c in i * t..(i + 1) * t {
            let id = ids.data()[c] as usize;
            if id >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            let mut d = 0.0;
            for r in 0..dim {
                d += delta.at(r, c) * g.at(id, r);
            }
            s += d;
        }
        *o = s;
    }
    meter.add_flops((n * (t * (2 * dim - 1) + t - 1)) as u64);
    Ok(out)
}

/// Embedding-layer scores s_i = Σ_τ ⟨δ_{i,τ}, Ĝ⋆[x_{i,τ}]⟩ from token ids
/// (1×NT), output gradients (D×nT) and the target table gradient (V×D).
pub fn score_embedding(
    meter: &mut Meter,
    ids: &[usize],
    delta: &Tensor,
    g_star: &Tensor,
    tokens: usize,
) -> Result<Vec<f64>> {
    if tokens == 0 || ids.len() % tokens != 0 {
        return dim_err("id count is not a multiple of the token count");
    }
    let ids_t = Tensor::from_vec(&[1, ids.len()], ids.iter().map(|&x| x as f64).collect())?;
    lookup_scores(meter, &ids_t, delta, g_star, tokens)
}

/// Scores in a random subspace: ⟨Π vec G_i, (1/m)Σ_j Π vec G_j⟩. Single-block
/// layers only.
pub fn score_compressed(meter: &mut Meter, view: &LayerView, caches: &Caches, proj: &Projector) -> Result<Vec<f64>> {
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    if view.n_blocks() != 1 {
        return Err(Error::Config(format!("compressed scoring needs a single-block layer (layer {})", view.layer)));
    }
    let m = require_targets(caches)?;
    let n = caches.count(Side::Train);
    let (lt, rt) = view.block(caches, 0, Side::Target)?;
    let mut target = project_outer_sum(meter, proj, lt, rt, &all_columns(caches, Side::Target))?;
    let inv = 1.0 / m as f64;
    target.iter_mut().for_each(|x| *x *= inv);
    meter.add_flops(target.len() as u64);
    let target = Tensor::from_vec(&[target.len()], target)?;
    meter.alloc(&target)?;
    let (l, r) = view.block(caches, 0, Side::Train)?;
    let mut held = Vec::with_capacity(n);
    for i in 0..n {
        let g = project_outer_sum(meter, proj, l, r, &sample_columns(&[i], caches.tokens))?;
        let g = Tensor::from_vec(&[g.len()], g)?;
        meter.alloc(&g)?;
        held.push(g);
    }
    let scores = held
        .iter()
        .map(|g| {
            meter.add_flops(2 * g.len() as u64 - 1);
            dot(g.data(), target.data())
        })
        .collect();
    for g in held {
        meter.release(g)?;
    }
    meter.release(target)?;
    Ok(scores)
}

/// Dispatches to one of the four layer scorers under phase `scoring:l`.
pub fn score_layer(
    meter: &mut Meter,
    method: Method,
    view: &LayerView,
    caches: &Caches,
    proj: Option<&Projector>,
) -> Result<Vec<f64>> {
    meter.set_phase(Phase::Scoring(view.layer));
    match method {
        Method::Direct => score_direct(meter, view, caches),
        Method::Gip => score_gip(meter, view, caches),
        Method::Pip => score_pip(meter, view, caches),
        Method::Compressed => {
            let p = proj.ok_or_else(|| Error::Config(format!("no projector for layer {}", view.layer)))?;
            score_compressed(meter, view, caches, p)
        }
    }
}

/// Restricted per-sample gradients (training side) and target gradient over
/// the flat layer ranges, concatenated in range order. Allocated in the
/// ledger; the caller releases the returned tensors.
pub fn restricted_grads(
    meter: &mut Meter,
    view: &LayerView,
    caches: &Caches,
    ranges: &[Range<usize>],
) -> Result<(Vec<Tensor>, Tensor)> {
    let m = require_targets(caches)?;
    let n = caches.count(Side::Train);
    let pieces = view.pieces(ranges);
    let len: usize = pieces.iter().map(|(_, r)| r.len()).sum();
    let gather = |side: Side, cols: &[usize]| -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(len);
        for (b, r) in &pieces {
            let (rows, ncols) = view.block_dims(*b);
            let (lf, rf) = view.block(caches, *b, side)?;
            let mut full = vec![0.0; rows * ncols];
            accumulate_outer(&mut full, lf, rf, cols, r.clone());
            flat.extend_from_slice(&full[r.clone()]);
        }
        Ok(flat)
    };
    let tcols = all_columns(caches, Side::Target);
    let mut tflat = gather(Side::Target, &tcols)?;
    let inv = 1.0 / m as f64;
    tflat.iter_mut().for_each(|x| *x *= inv);
    meter.add_flops(outer_sum_flops(tcols.len(), len) + len as u64);
    let target = Tensor::from_vec(&[len], tflat)?;
    meter.alloc(&target)?;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let cols = sample_columns(&[i], caches.tokens);
        let g = Tensor::from_vec(&[len], gather(Side::Train, &cols)?)?;
        meter.add_flops(outer_sum_flops(cols.len(), len));
        meter.alloc(&g)?;
        grads.push(g);
    }
    Ok((grads, target))
}

/// ⟨g_i, ĝ⋆⟩ restricted to flat layer ranges (the per-parameter path).
pub fn score_ranges(meter: &mut Meter, view: &LayerView, caches: &Caches, ranges: &[Range<usize>]) -> Result<Vec<f64>> {
    meter.set_phase(Phase::Scoring(view.layer));
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    let (grads, target) = restricted_grads(meter, view, caches, ranges)?;
    let scores = grads
        .iter()
        .map(|g| {
            meter.add_flops((2 * g.len()).saturating_sub(1) as u64);
            dot(g.data(), target.data())
        })
        .collect();
    for g in grads {
        meter.release(g)?;
    }
    meter.release(target)?;
    Ok(scores)
}

/// Gram-form objective terms over flat layer ranges, for greedy and
/// exhaustive solvers.
pub fn range_objective(
    meter: &mut Meter,
    view: &LayerView,
    caches: &Caches,
    ranges: &[Range<usize>],
) -> Result<SubsetObjective> {
    meter.set_phase(Phase::Scoring(view.layer));
    note_reads(meter, view, caches, &[Side::Train, Side::Target])?;
    let (grads, target) = restricted_grads(meter, view, caches, ranges)?;
    let vecs: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
    let obj = SubsetObjective::from_vectors(&vecs, target.data());
    let (n, len) = (vecs.len() as u64, target.len() as u64);
    let dotc = (2 * len).saturating_sub(1);
    meter.add_flops((n * (n + 1) / 2 + n + 1) * dotc);
    for g in grads {
        meter.release(g)?;
    }
    meter.release(target)?;
    Ok(obj)
}

/// s_{i,q} = g_{i,q}·ĝ⋆_q for every coordinate q of the layer.
pub fn per_parameter_scores(meter: &mut Meter, view: &LayerView, caches: &Caches) -> Result<Vec<Vec<f64>>> {
    let size: usize = (0..view.n_blocks()).map(|b| view.block_dims(b).0 * view.block_dims(b).1).sum();
    let (grads, target) = restricted_grads(meter, view, caches, &[0..size])?;
    let out = grads.iter().map(|g| g.data().iter().zip(target.data()).map(|(a, b)| a * b).collect()).collect();
    meter.add_flops((grads.len() * size) as u64);
    for g in grads {
        meter.release(g)?;
    }
    meter.release(target)?;
    Ok(out)
}

/// Scores every group of `partition` that touches layer l and adds them to
/// `table`. Groups owning the whole layer use `method`; groups holding part
/// of it use the restricted per-parameter path.
pub fn score_groups_at_layer(
    meter: &mut Meter,
    method: Method,
    view: &LayerView,
    caches: &Caches,
    partition: &Partition,
    proj: Option<&Projector>,
    table: &mut ScoreTable,
) -> Result<()> {
    let l = view.layer;
    if partition.layer_is_whole(l) {
        let s = score_layer(meter, method, view, caches, proj)?;
        for p in partition.groups_of_layer(l) {
            table.add(p, &s);
        }
    } else {
        for p in partition.groups_of_layer(l) {
            let s = score_ranges(meter, view, caches, &partition.ranges(p, l))?;
            table.add(p, &s);
        }
    }
    Ok(())
}

/// Arguments of [`predict_cost`] for one dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub method: Method,
    pub n: u64,
    pub m: u64,
    pub t: u64,
    pub w_in: u64,
    pub w_out: u64,
    pub k_out: u64,
    pub k_in: u64,
    pub k_final: Option<u64>,
}

impl CostQuery {
    pub fn square(method: Method, n: u64, m: u64, t: u64, w: u64) -> Self {
        Self { method, n, m, t, w_in: w, w_out: w, k_out: 0, k_in: 0, k_final: None }
    }

    pub fn with_projection(mut self, k_out: u64, k_in: u64, k_final: Option<u64>) -> Self {
        self.k_out = k_out;
        self.k_in = k_in;
        self.k_final = k_final;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub memory: u64,
}

/// Closed-form FLOPs and peak working-set entries of one layer's scoring.
pub fn predict_cost(q: &CostQuery) -> Cost {
    let CostQuery { method, n, m, t, w_in, w_out, k_out, k_in, k_final } = *q;
    let s = w_in * w_out;
    let big_n = n + m;
    match method {
        Method::Direct => Cost { flops: 2 * big_n * t * s + n * (s - 1), memory: (n + 1) * s },
        Method::Gip => Cost { flops: 2 * n * m * t * t * (w_in + w_out), memory: 2 * n * m * t * t },
        Method::Pip => Cost { flops: 2 * big_n * t * s + n * (t * w_out - 1), memory: s + n * t * w_out },
        Method::Compressed => {
            let k = k_out * k_in;
            let proj = big_n * t * (k_in * (2 * w_in - 1) + k_out * (2 * w_out - 1));
            let accum = n * (2 * t - 1) * k + (2 * m * t - 1) * k;
            let (fin, kf) = match k_final {
                Some(kf) => ((n + 1) * kf * (2 * k - 1), kf),
                None => (0, k),
            };
            Cost { flops: proj + accum + fin + kf + n * (2 * kf - 1), memory: (n + 1) * kf }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::ProjectorSpec;
    use crate::net::{backward_layer, forward, LayerSpec, Model, ModelSpec};
    use crate::oracle;
    use crate::rng::Rng;
    use crate::selection::Span;
    use proptest::prelude::*;

    struct Fixture {
        meter: Meter,
        model: Model,
        caches: Caches,
    }

    fn setup(spec: ModelSpec, n: usize, m: usize, seed: u64) -> Fixture {
        let mut rng = Rng::new(seed);
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        let batch = oracle::random_batch(&spec, n, m, &mut rng);
        let mut meter = Meter::new();
        let (_, mut caches) = forward(&mut meter, &model, &batch).unwrap();
        for l in (0..model.len()).rev() {
            backward_layer(&mut meter, &model, &mut caches, l).unwrap();
        }
        Fixture { meter, model, caches }
    }

    fn measure(f: &mut Fixture, l: usize, method: Method, proj: Option<&Projector>) -> (Vec<f64>, Cost) {
        let view = LayerView::new(&mut f.meter, &f.model, &f.caches, l).unwrap();
        let mark = f.meter.mark();
        let s = score_layer(&mut f.meter, method, &view, &f.caches, proj).unwrap();
        let cost = Cost { flops: f.meter.flops_since(mark), memory: f.meter.window_peak(mark) };
        view.finish(&mut f.meter).unwrap();
        (s, cost)
    }

    #[test]
    fn frozen_flop_values() {
        let mut f = setup(ModelSpec::square(1, 4, 2), 2, 1, 1);
        let (_, d) = measure(&mut f, 0, Method::Direct, None);
        let (_, g) = measure(&mut f, 0, Method::Gip, None);
        let (_, p) = measure(&mut f, 0, Method::Pip, None);
        assert_eq!((d.flops, g.flops, p.flops), (222, 128, 206));
        assert_eq!(predict_cost(&CostQuery::square(Method::Direct, 2, 1, 2, 4)).flops, 222);
        assert_eq!(predict_cost(&CostQuery::square(Method::Gip, 2, 1, 2, 4)).flops, 128);
        assert_eq!(predict_cost(&CostQuery::square(Method::Pip, 2, 1, 2, 4)).flops, 206);
    }

    #[test]
    fn table_memory_rows() {
        assert_eq!(predict_cost(&CostQuery::square(Method::Direct, 8, 1, 1, 64)).memory, 36_864);
        assert_eq!(predict_cost(&CostQuery::square(Method::Gip, 8, 1, 512, 4)).memory, 4_194_304);
    }

    #[test]
    fn gip_direct_crossover() {
        let c = |m, t| predict_cost(&CostQuery::square(m, 8, 1, t, 2048)).flops;
        assert!(c(Method::Gip, 512) < c(Method::Direct, 512));
        assert!(c(Method::Gip, 2048) > c(Method::Direct, 2048));
    }

    #[test]
    fn exact_methods_agree_and_costs_match() {
        let mut f = setup(ModelSpec::square(2, 5, 3), 3, 2, 2);
        for l in 0..2 {
            let (d, cd) = measure(&mut f, l, Method::Direct, None);
            let (g, cg) = measure(&mut f, l, Method::Gip, None);
            let (p, cp) = measure(&mut f, l, Method::Pip, None);
            for i in 0..3 {
                assert!((d[i] - g[i]).abs() < 1e-10 && (d[i] - p[i]).abs() < 1e-10);
            }
            assert_eq!(cd, predict_cost(&CostQuery::square(Method::Direct, 3, 2, 3, 5)));
            assert_eq!(cg, predict_cost(&CostQuery::square(Method::Gip, 3, 2, 3, 5)));
            assert_eq!(cp, predict_cost(&CostQuery::square(Method::Pip, 3, 2, 3, 5)));
        }
    }

    #[test]
    fn compressed_identity_is_exact_and_cost_matches() {
        let mut f = setup(ModelSpec::square(1, 4, 2), 3, 2, 3);
        let (d, _) = measure(&mut f, 0, Method::Direct, None);
        let id = Projector::identity(4, 4, 0);
        let (c, _) = measure(&mut f, 0, Method::Compressed, Some(&id));
        for i in 0..3 {
            assert!((d[i] - c[i]).abs() < 1e-10);
        }
        for kf in [None, Some(5)] {
            let p = Projector::gaussian(&ProjectorSpec { seed: 1, k_out: 3, k_in: 2, k_final: kf }, 4, 4, 0, 0);
            let (_, cost) = measure(&mut f, 0, Method::Compressed, Some(&p));
            let q = CostQuery::square(Method::Compressed, 3, 2, 2, 4).with_projection(3, 2, kf.map(|x| x as u64));
            assert_eq!(cost, predict_cost(&q));
        }
    }

    #[test]
    fn compressed_projector_mismatch_is_error() {
        let mut f = setup(ModelSpec::square(1, 4, 1), 2, 1, 4);
        let view = LayerView::new(&mut f.meter, &f.model, &f.caches, 0).unwrap();
        let p = Projector::identity(3, 4, 0);
        assert!(score_compressed(&mut f.meter, &view, &f.caches, &p).is_err());
    }

    #[test]
    fn self_alignment_is_squared_norm() {
        let spec = ModelSpec::square(2, 3, 2);
        let mut rng = Rng::new(5);
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        let mut batch = oracle::random_batch(&spec, 1, 1, &mut rng);
        batch.target = batch.train.clone();
        let mut meter = Meter::new();
        let (_, mut caches) = forward(&mut meter, &model, &batch).unwrap();
        for l in (0..2).rev() {
            backward_layer(&mut meter, &model, &mut caches, l).unwrap();
        }
        let view = LayerView::new(&mut meter, &model, &caches, 0).unwrap();
        let s = score_direct(&mut meter, &view, &caches).unwrap();
        let g = crate::net::per_sample_grad(&mut meter, &view, &caches, Side::Train, 0).unwrap();
        assert!((s[0] - g[0].norm_sq()).abs() < 1e-12 && s[0] >= 0.0);
    }

    #[test]
    fn zero_target_gradients_give_zero_scores() {
        let spec = ModelSpec::square(1, 3, 1);
        let mut rng = Rng::new(6);
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        let mut batch = oracle::random_batch(&spec, 2, 1, &mut rng);
        batch.target.inputs = crate::net::Inputs::Vectors(Tensor::zeros(&[3, 1]));
        let mut meter = Meter::new();
        let (_, mut caches) = forward(&mut meter, &model, &batch).unwrap();
        backward_layer(&mut meter, &model, &mut caches, 0).unwrap();
        let view = LayerView::new(&mut meter, &model, &caches, 0).unwrap();
        for m in [Method::Direct, Method::Gip, Method::Pip] {
            let s = score_layer(&mut meter, m, &view, &caches, None).unwrap();
            assert!(s.iter().all(|&x| x == 0.0), "{m:?}");
        }
    }

    #[test]
    fn gip_orthogonal_activations_give_zero() {
        let spec = ModelSpec::square(1, 2, 1);
        let mut rng = Rng::new(7);
        let model = Model::init(spec.clone(), &mut rng).unwrap();
        let mut batch = oracle::random_batch(&spec, 1, 1, &mut rng);
        batch.train.inputs = crate::net::Inputs::Vectors(Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap());
        batch.target.inputs = crate::net::Inputs::Vectors(Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap());
        let mut meter = Meter::new();
        let (_, mut caches) = forward(&mut meter, &model, &batch).unwrap();
        backward_layer(&mut meter, &model, &mut caches, 0).unwrap();
        let view = LayerView::new(&mut meter, &model, &caches, 0).unwrap();
        assert_eq!(score_gip(&mut meter, &view, &caches).unwrap(), vec![0.0]);
    }

    #[test]
    fn pip_identity_target() {
        let mut rng = Rng::new(8);
        let d = Tensor::randn(&[3, 4], &mut rng, 1.0);
        let a = Tensor::randn(&[3, 4], &mut rng, 1.0);
        let g = Tensor::eye(3);
        // With Ĝ⋆ = I the score is Σ_τ ⟨δ_τ, a_τ⟩.
        let want: f64 = (0..2).map(|c| oracle::dot_naive(&d.column(c), &a.column(c))).sum();
        let p = oracle::matmul_naive(&g, &a);
        let got: f64 = (0..2).map(|c| oracle::dot_naive(&d.column(c), &p.column(c))).sum();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn embedding_scores_match_dense_materialization() {
        let spec = oracle::embedding_spec(7, 3, 2, 3);
        let mut f = setup(spec, 3, 2, 9);
        let (d, _) = measure(&mut f, 0, Method::Direct, None);
        let (p, _) = measure(&mut f, 0, Method::Pip, None);
        let (g, _) = measure(&mut f, 0, Method::Gip, None);
        for i in 0..3 {
            assert!((d[i] - p[i]).abs() < 1e-10 && (d[i] - g[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn embedding_scorer_cases() {
        let mut m = Meter::new();
        let delta = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let mut g = Tensor::zeros(&[4, 2]);
        assert_eq!(score_embedding(&mut m, &[3], &delta, &g, 1).unwrap(), vec![0.0]);
        g.set(3, 0, 0.5);
        g.set(3, 1, -1.0);
        assert_eq!(score_embedding(&mut m, &[3], &delta, &g, 1).unwrap(), vec![0.5 - 2.0]);
        assert!(matches!(score_embedding(&mut m, &[4], &delta, &g, 1), Err(Error::OutOfVocab { id: 4, vocab: 4 })));
    }

    #[test]
    fn lora_scores_agree() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::Dense { w_in: 4, w_out: 5 }, LayerSpec::Lora { w_in: 5, w_out: 4, rank: 2 }],
            activation: crate::net::Activation::Tanh,
            loss: crate::net::Loss::Squared,
            tokens: 2,
        };
        let mut f = setup(spec, 3, 2, 10);
        let (d, _) = measure(&mut f, 1, Method::Direct, None);
        let (g, _) = measure(&mut f, 1, Method::Gip, None);
        let (p, _) = measure(&mut f, 1, Method::Pip, None);
        for i in 0..3 {
            assert!((d[i] - g[i]).abs() < 1e-10 && (d[i] - p[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn compressed_spearman_above_point_nine() {
        // Rank fidelity is governed by the per-factor sizes (each factor's
        // PᵀP must be close to I), not by κ alone; 256×256 factors give a
        // comfortable margin on 16-wide layers.
        fn ranks(v: &[f64]) -> Vec<f64> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        }
        let mut rhos = vec![];
        for seed in 0..20 {
            let mut f = setup(ModelSpec::square(1, 16, 2), 32, 4, 100 + seed);
            let (exact, _) = measure(&mut f, 0, Method::Direct, None);
            let p = Projector::gaussian(&ProjectorSpec::square(seed, 256), 16, 16, 0, 0);
            let (approx, _) = measure(&mut f, 0, Method::Compressed, Some(&p));
            let (ra, rb) = (ranks(&exact), ranks(&approx));
            let n = 32.0;
            let d2: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - b).powi(2)).sum();
            rhos.push(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
        }
        rhos.sort_by(f64::total_cmp);
        let median = (rhos[9] + rhos[10]) / 2.0;
        assert!(median > 0.9, "median Spearman {median}");
    }

    #[test]
    fn per_parameter_decomposition_and_ranges() {
        let mut f = setup(ModelSpec::square(1, 4, 2), 3, 2, 11);
        let view = LayerView::new(&mut f.meter, &f.model, &f.caches, 0).unwrap();
        let per = per_parameter_scores(&mut f.meter, &view, &f.caches).unwrap();
        let ranges = vec![1..5, 9..14];
        let restricted = score_ranges(&mut f.meter, &view, &f.caches, &ranges).unwrap();
        for i in 0..3 {
            let sum: f64 = ranges.iter().flat_map(|r| r.clone()).map(|q| per[i][q]).sum();
            assert!((sum - restricted[i]).abs() < 1e-12);
        }
        let whole = score_ranges(&mut f.meter, &view, &f.caches, &[0..16]).unwrap();
        let direct = score_direct(&mut f.meter, &view, &f.caches).unwrap();
        for i in 0..3 {
            assert!((whole[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_additivity_for_aligned_groups() {
        let spec = ModelSpec::square(3, 3, 2);
        let mut f = setup(spec.clone(), 4, 2, 12);
        let sizes = spec.layer_sizes();
        let part = Partition::from_spans(
            &sizes,
            vec![
                vec![Span { layer: 0, start: 0, end: 9 }, Span { layer: 2, start: 0, end: 9 }],
                vec![Span { layer: 1, start: 0, end: 9 }],
            ],
        )
        .unwrap();
        let mut table = ScoreTable::new(Method::Direct, 2, 4);
        let mut per_layer = vec![];
        for l in (0..3).rev() {
            let view = LayerView::new(&mut f.meter, &f.model, &f.caches, l).unwrap();
            score_groups_at_layer(&mut f.meter, Method::Direct, &view, &f.caches, &part, None, &mut table).unwrap();
            per_layer.push((l, score_direct(&mut f.meter, &view, &f.caches).unwrap()));
            view.finish(&mut f.meter).unwrap();
        }
        let get = |l: usize| per_layer.iter().find(|(x, _)| *x == l).unwrap().1.clone();
        for i in 0..4 {
            assert_eq!(table.scores[0][i], get(2)[i] + get(0)[i]);
            assert_eq!(table.scores[1][i], get(1)[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_exact_methods_equivalent_and_costs_exact(
            seed in 0u64..10_000, n in 1usize..4, m in 1usize..3, t in 1usize..4, w in 1usize..6
        ) {
            let mut f = setup(ModelSpec::square(1, w, t), n, m, seed);
            let (d, cd) = measure(&mut f, 0, Method::Direct, None);
            let (g, cg) = measure(&mut f, 0, Method::Gip, None);
            let (p, cp) = measure(&mut f, 0, Method::Pip, None);
            for i in 0..n {
                prop_assert!((d[i] - g[i]).abs() < 1e-9);
                prop_assert!((d[i] - p[i]).abs() < 1e-9);
            }
            let q = |method| predict_cost(&CostQuery::square(method, n as u64, m as u64, t as u64, w as u64));
            prop_assert_eq!(cd, q(Method::Direct));
            prop_assert_eq!(cg, q(Method::Gip));
            prop_assert_eq!(cp, q(Method::Pip));
        }

        #[test]
        fn prop_per_parameter_sum_matches_restricted(seed in 0u64..10_000, a in 0usize..9, len in 1usize..8) {
            let mut f = setup(ModelSpec::square(1, 3, 2), 2, 1, seed);
            let view = LayerView::new(&mut f.meter, &f.model, &f.caches, 0).unwrap();
            let per = per_parameter_scores(&mut f.meter, &view, &f.caches).unwrap();
            let r = a..(a + len).min(9);
            let restricted = score_ranges(&mut f.meter, &view, &f.caches, &[r.clone()]).unwrap();
            for i in 0..2 {
                let s: f64 = r.clone().map(|q| per[i][q]).sum();
                prop_assert_eq!(s, restricted[i]);
            }
        }
    }
}

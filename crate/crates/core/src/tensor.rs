//! Dense row-major tensors, metered kernels and the instrumented allocator.
//!
//! FLOP convention: every scalar addition and multiplication counts once.
//! A dot product of length q costs 2q−1, so `matmul` of p×q by q×r costs
//! pr(2q−1), an outer-product sum over T columns costs (2T−1) per output
//! entry, and a Frobenius inner product of s entries costs 2s−1. Copies,
//! comparisons and transcendental evaluations are free.
//!
//! Memory is counted in scalar entries. Tensors become visible to the ledger
//! only when passed to [`Meter::alloc`]; scratch vectors of a single column
//! are treated as registers and never enter the ledger.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::scheduler::{Dependency, EventKind, LedgerEvent, Phase};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    id: u64,
}

impl Clone for Tensor {
    /// A clone is a new allocation and therefore gets a new id.
    fn clone(&self) -> Self {
        Self { shape: self.shape.clone(), data: self.data.clone(), id: fresh_id() }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape).field("data", &self.data).finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; ids are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!("shape {shape:?} needs {n} entries, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data, id: fresh_id() })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n], id: fresh_id() }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. normal entries with standard deviation `std`.
    pub fn randn(shape: &[usize], rng: &mut Rng, std: f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self { shape: shape.to_vec(), data, id: fresh_id() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Same data under another tensor's handle; used only for fault injection.
    pub(crate) fn with_id(mut self, id: u64) -> Tensor {
        self.id = id;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a matrix; vectors are treated as n×1.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (self.shape[0], 1),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let (rows, cols) = self.dims();
        (0..rows).map(|r| self.data[r * cols + c]).collect()
    }

    /// New matrix made of the given columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Tensor {
        let (rows, cols) = self.dims();
        let mut out = Tensor::zeros(&[rows, idx.len()]);
        for r in 0..rows {
            for (j, &c) in idx.iter().enumerate() {
                out.data[r * idx.len() + j] = self.data[r * cols + c];
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let (rows, cols) = self.dims();
        let mut out = Tensor::zeros(&[cols, rows]);
        for r in 0..rows {
            for c in 0..cols {
                out.data[c * rows + r] = self.data[r * cols + c];
            }
        }
        out
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// self += s·other
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("axpy {:?} vs {:?}", self.shape, other.shape));
        }
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Arithmetic precision for activations and weights. Scores and ledger
/// counts are always 64-bit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_tensor(self, t: &mut Tensor) {
        if self == Precision::F32 {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Counter snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    pub flops: u64,
    pub live_entries: u64,
    pub peak_entries: u64,
}

/// Position in the event stream, used to measure peaks over a window.
#[derive(Clone, Copy, Debug)]
pub struct Mark {
    event: usize,
    live: u64,
    flops: u64,
}

/// FLOP counter plus allocation ledger.
///
/// Not `Sync`: one meter per step. `read` records which tensor a consumer
/// touched so [`crate::scheduler::check_legality`] can verify that no
/// operation reads a released tensor.
#[derive(Debug, Default)]
pub struct Meter {
    flops: u64,
    live: u64,
    peak: u64,
    events: Vec<LedgerEvent>,
    reads: Vec<Dependency>,
    live_ids: HashMap<u64, u64>,
    phase: Phase,
    pass: u8,
    precision: Precision,
    lenient: bool,
}

impl Meter {
    pub fn new() -> Self {
        Self { pass: 1, ..Default::default() }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self { precision, ..Self::new() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn set_pass(&mut self, pass: u8) {
        self.pass = pass;
    }

    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    pub fn snapshot(&self) -> CostMeter {
        CostMeter { flops: self.flops, live_entries: self.live, peak_entries: self.peak }
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn reads(&self) -> &[Dependency] {
        &self.reads
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.live_ids.contains_key(&id)
    }

    pub fn alloc(&mut self, t: &Tensor) -> Result<()> {
        self.alloc_entries(t.id(), t.len() as u64)
    }

    /// Registers an allocation of `entries` scalars under `id`.
    pub fn alloc_entries(&mut self, id: u64, entries: u64) -> Result<()> {
        if self.live_ids.contains_key(&id) {
            return Err(Error::Lifetime(format!("tensor #{id} allocated twice")));
        }
        self.live_ids.insert(id, entries);
        self.live += entries;
        self.peak = self.peak.max(self.live);
        self.push(EventKind::Alloc, id, entries);
        Ok(())
    }

    pub fn release(&mut self, t: Tensor) -> Result<()> {
        self.release_id(t.id())
    }

    /// When set, releasing a tensor that is not live is ignored instead of
    /// failing. Fault-injection runs use it so the legality checker, not the
    /// allocator, reports the broken schedule.
    pub fn set_lenient(&mut self, lenient: bool) {
        self.lenient = lenient;
    }

    pub fn release_id(&mut self, id: u64) -> Result<()> {
        if self.lenient && !self.live_ids.contains_key(&id) {
            return Ok(());
        }
        let entries = self
            .live_ids
            .remove(&id)
            .ok_or_else(|| Error::Lifetime(format!("release of tensor #{id}, which is not live")))?;
        self.live -= entries;
        self.push(EventKind::Release, id, entries);
        Ok(())
    }

    /// Records that `consumer` read tensor `id` at the current position.
    pub fn read(&mut self, id: u64, consumer: impl Into<String>) {
        self.reads.push(Dependency { seq: self.events.len() as u64, consumer: consumer.into(), id });
    }

    fn push(&mut self, kind: EventKind, id: u64, entries: u64) {
        let seq = self.events.len() as u64;
        self.events.push(LedgerEvent { seq, kind, id, entries, phase: self.phase, pass: self.pass });
    }

    pub fn mark(&self) -> Mark {
        Mark { event: self.events.len(), live: self.live, flops: self.flops }
    }

    /// Largest live count reached since `mark`, minus the live count at `mark`.
    pub fn window_peak(&self, mark: Mark) -> u64 {
        let mut live = mark.live as i64;
        let mut best = live;
        for e in &self.events[mark.event..] {
            live += e.signed();
            best = best.max(live);
        }
        (best - mark.live as i64) as u64
    }

    pub fn flops_since(&self, mark: Mark) -> u64 {
        self.flops - mark.flops
    }
}

/// Column factor of an outer-product-structured gradient Σ_τ left_τ rightᵀ_τ.
/// One-hot factors stand for embedding rows without materializing them.
#[derive(Clone, Copy, Debug)]
pub enum Factor<'a> {
    Dense(&'a Tensor),
    /// `ids` is a 1×C tensor of token ids, `dim` the vocabulary size.
    OneHot {
        ids: &'a Tensor,
        dim: usize,
    },
}

impl<'a> Factor<'a> {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Dense(t) => t.rows(),
            Factor::OneHot { dim, .. } => *dim,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Factor::Dense(t) => t.cols(),
            Factor::OneHot { ids, .. } => ids.len(),
        }
    }

    pub fn tensor_id(&self) -> u64 {
        match self {
            Factor::Dense(t) => t.id(),
            Factor::OneHot { ids, .. } => ids.id(),
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        match self {
            Factor::Dense(t) => t.at(r, c),
            Factor::OneHot { ids, .. } => {
                if ids.data()[c] as usize == r {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        match self {
            Factor::Dense(t) => t.column(c),
            Factor::OneHot { ids, dim } => {
                let mut v = vec![0.0; *dim];
                v[ids.data()[c] as usize] = 1.0;
                v
            }
        }
    }

    /// Dot product of column `c` of `self` with column `c2` of `other`.
    pub fn dot_cols(&self, c: usize, other: &Factor, c2: usize) -> f64 {
        match (self, other) {
            (Factor::OneHot { ids, .. }, Factor::OneHot { ids: o, .. }) => {
                if ids.data()[c] == o.data()[c2] {
                    1.0
                } else {
                    0.0
                }
            }
            (Factor::OneHot { ids, .. }, d) | (d, Factor::OneHot { ids, .. }) => {
                let (c_hot, c_d) = if matches!(self, Factor::OneHot { .. }) { (c, c2) } else { (c2, c) };
                d.at(ids.data()[c_hot] as usize, c_d)
            }
            (Factor::Dense(a), Factor::Dense(b)) => {
                let mut acc = 0.0;
                for r in 0..a.rows() {
                    acc += a.at(r, c) * b.at(r, c2);
                }
                acc
            }
        }
    }
}

/// acc[r·n_in + q] += Σ_{c∈cols} left[r,c]·right[q,c], restricted to flat
/// indices in `range`. Each entry is accumulated in column order, so the
/// result for an entry does not depend on which other entries are computed.
/// Unmetered; callers account the FLOPs.
pub fn accumulate_outer(acc: &mut [f64], left: Factor, right: Factor, cols: &[usize], range: Range<usize>) {
    let n_in = right.dim();
    if range.is_empty() {
        return;
    }
    let r_lo = range.start / n_in;
    let r_hi = (range.end - 1) / n_in;
    for &c in cols {
        let rvals: Vec<f64> = right.column(c);
        match left {
            Factor::OneHot { ids, .. } => {
                let r = ids.data()[c] as usize;
                if r < r_lo || r > r_hi {
                    continue;
                }
                let q_lo = if r == r_lo { range.start - r * n_in } else { 0 };
                let q_hi = if r == r_hi { range.end - r * n_in } else { n_in };
                for q in q_lo..q_hi {
                    acc[r * n_in + q] += rvals[q];
                }
            }
            Factor::Dense(lt) => {
                for r in r_lo..=r_hi {
                    let lv = lt.at(r, c);
                    let q_lo = if r == r_lo { range.start - r * n_in } else { 0 };
                    let q_hi = if r == r_hi { range.end - r * n_in } else { n_in };
                    let row = &mut acc[r * n_in..(r + 1) * n_in];
                    for q in q_lo..q_hi {
                        row[q] += lv * rvals[q];
                    }
                }
            }
        }
    }
}

/// FLOPs of an outer-product sum over `c` columns into `entries` outputs.
pub fn outer_sum_flops(c: usize, entries: usize) -> u64 {
    if c == 0 {
        0
    } else {
        ((2 * c - 1) * entries) as u64
    }
}

/// Dense product A·B; pr(2q−1) FLOPs.
pub fn matmul(meter: &mut Meter, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = a.dims();
    let (q2, r) = b.dims();
    if q != q2 {
        return dim_err(format!("matmul {p}x{q} by {q2}x{r}"));
    }
    let mut out = Tensor::zeros(&[p, r]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..q {
                acc += ad[i * q + k] * bd[k * r + j];
            }
            od[i * r + j] = acc;
        }
    }
    if q > 0 {
        meter.add_flops((p * r * (2 * q - 1)) as u64);
    }
    Ok(out)
}

/// Aᵀ·B without forming Aᵀ; same FLOP count as the explicit product.
pub fn matmul_tn(meter: &mut Meter, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (q, p) = a.dims();
    let (q2, r) = b.dims();
    if q != q2 {
        return dim_err(format!("matmul_tn {q}x{p}ᵀ by {q2}x{r}"));
    }
    let mut out = Tensor::zeros(&[p, r]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..q {
                acc += ad[k * p + i] * bd[k * r + j];
            }
            od[i * r + j] = acc;
        }
    }
    if q > 0 {
        meter.add_flops((p * r * (2 * q - 1)) as u64);
    }
    Ok(out)
}

/// Σ_τ b_τ a_τᵀ over all columns; (2T−1)·w_out·w_in FLOPs.
pub fn outer_sum(meter: &mut Meter, b: &Tensor, a: &Tensor) -> Result<Tensor> {
    if b.cols() != a.cols() {
        return dim_err(format!("outer_sum token counts {} vs {}", b.cols(), a.cols()));
    }
    let t = b.cols();
    let mut out = Tensor::zeros(&[b.rows(), a.rows()]);
    let cols: Vec<usize> = (0..t).collect();
    let n = out.len();
    accumulate_outer(out.data_mut(), Factor::Dense(b), Factor::Dense(a), &cols, 0..n);
    meter.add_flops(outer_sum_flops(t, n));
    Ok(out)
}

/// Σ elementwise products; 2·size−1 FLOPs.
pub fn frob_inner(meter: &mut Meter, x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return dim_err(format!("frob_inner {:?} vs {:?}", x.shape(), y.shape()));
    }
    meter.add_flops(outer_sum_flops(x.len(), 1));
    Ok(dot(x.data(), y.data()))
}

/// Sequential dot product (fixed summation order).
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

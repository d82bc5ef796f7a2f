//! Bias-free linear stack with manual forward caching and layer-by-layer
//! backward.
//!
//! Layer l computes e = W a and, except after the last layer, feeds
//! a' = σ(e) forward. Training and target samples share one forward and one
//! backward sweep (the merged batch) but live in separate cache tensors so
//! either side can be released on its own. Sample i of a side occupies
//! columns iT..(i+1)T.
//!
//! `backward_layer(l)` computes ∂ℓ/∂e for layer l from the loss head (last
//! layer) or from layer l+1's swapped cache, then swaps it into the slot
//! that held e. The activation gradient W⁽ˡ⁺¹⁾ᵀ∂ℓ/∂e⁽ˡ⁺¹⁾ is formed one
//! column at a time, so the swap is entry-neutral in the ledger.
//!
//! Every trainable parameter tensor of a layer is a "block". A block's
//! per-sample gradient is an outer-product sum Σ_τ left_τ right_τᵀ:
//! - dense W: (∂ℓ/∂e, a)
//! - LoRA B: (∂ℓ/∂e, A a), LoRA A: (Bᵀ∂ℓ/∂e, a)
//! - embedding table: (one-hot(x), ∂ℓ/∂e)

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::scheduler::Phase;
use crate::tensor::{accumulate_outer, matmul, outer_sum_flops, Factor, Meter, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// ½‖e − y‖² per token.
    #[default]
    Squared,
    /// Softmax cross-entropy against a class id per token.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        w_in: usize,
        w_out: usize,
    },
    /// Frozen W plus trainable B (w_out×r) and A (r×w_in).
    Lora {
        w_in: usize,
        w_out: usize,
        rank: usize,
    },
    /// Token table of shape vocab×dim; only valid as the first layer.
    Embedding {
        vocab: usize,
        dim: usize,
    },
}

impl LayerSpec {
    pub fn w_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { w_in, .. } | LayerSpec::Lora { w_in, .. } => w_in,
            LayerSpec::Embedding { vocab, .. } => vocab,
        }
    }

    pub fn w_out(&self) -> usize {
        match *self {
            LayerSpec::Dense { w_out, .. } | LayerSpec::Lora { w_out, .. } => w_out,
            LayerSpec::Embedding { dim, .. } => dim,
        }
    }

    /// (rows, cols) of each trainable block, in coordinate order.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        match *self {
            LayerSpec::Dense { w_in, w_out } => vec![(w_out, w_in)],
            LayerSpec::Lora { w_in, w_out, rank } => vec![(w_out, rank), (rank, w_in)],
            LayerSpec::Embedding { vocab, dim } => vec![(vocab, dim)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: Loss,
    /// Tokens per sample.
    pub tokens: usize,
}

impl ModelSpec {
    /// L square dense layers of width w.
    pub fn square(layers: usize, w: usize, tokens: usize) -> Self {
        Self {
            layers: vec![LayerSpec::Dense { w_in: w, w_out: w }; layers],
            activation: Activation::Tanh,
            loss: Loss::Squared,
            tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.tokens == 0 {
            return Err(Error::Config("tokens per sample must be positive".into()));
        }
        for (l, ls) in self.layers.iter().enumerate() {
            if ls.w_in() == 0 || ls.w_out() == 0 {
                return Err(Error::Config(format!("layer {l} has a zero width")));
            }
            match *ls {
                LayerSpec::Lora { w_in, w_out, rank } if rank == 0 || rank >= w_in.min(w_out) => {
                    return Err(Error::Config(format!("layer {l}: LoRA rank {rank} must be in [1, min(w_in, w_out))")))
                }
                LayerSpec::Embedding { .. } if l != 0 => {
                    return Err(Error::Config(format!("layer {l}: embedding allowed only as the first layer")))
                }
                _ => {}
            }
            if l + 1 < self.layers.len() && ls.w_out() != self.layers[l + 1].w_in() {
                return Err(Error::Config(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    ls.w_out(),
                    l + 1,
                    self.layers[l + 1].w_in()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Trainable parameter count per layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::param_count).collect()
    }

    /// Total trainable parameter count d.
    pub fn d(&self) -> usize {
        self.layer_sizes().iter().sum()
    }

    pub fn input_is_tokens(&self) -> bool {
        matches!(self.layers[0], LayerSpec::Embedding { .. })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(LayerSpec::w_out).unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense { w: Tensor },
    Lora { w: Tensor, a: Tensor, b: Tensor },
    Embedding { table: Tensor },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams>,
}

impl Model {
    /// Gaussian init with variance 1/w_in (1/r for LoRA B, 1 for embeddings).
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|ls| match *ls {
                LayerSpec::Dense { w_in, w_out } => {
                    LayerParams::Dense { w: Tensor::randn(&[w_out, w_in], rng, 1.0 / (w_in as f64).sqrt()) }
                }
                LayerSpec::Lora { w_in, w_out, rank } => LayerParams::Lora {
                    w: Tensor::randn(&[w_out, w_in], rng, 1.0 / (w_in as f64).sqrt()),
                    a: Tensor::randn(&[rank, w_in], rng, 1.0 / (w_in as f64).sqrt()),
                    b: Tensor::randn(&[w_out, rank], rng, 1.0 / (rank as f64).sqrt()),
                },
                LayerSpec::Embedding { vocab, dim } => {
                    LayerParams::Embedding { table: Tensor::randn(&[vocab, dim], rng, 1.0) }
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Trainable blocks of layer l in coordinate order.
    pub fn blocks(&self, l: usize) -> Vec<&Tensor> {
        match &self.layers[l] {
            LayerParams::Dense { w } => vec![w],
            LayerParams::Lora { a, b, .. } => vec![b, a],
            LayerParams::Embedding { table } => vec![table],
        }
    }

    pub fn blocks_mut(&mut self, l: usize) -> Vec<&mut Tensor> {
        match &mut self.layers[l] {
            LayerParams::Dense { w } => vec![w],
            LayerParams::Lora { a, b, .. } => vec![b, a],
            LayerParams::Embedding { table } => vec![table],
        }
    }

    /// Layer l's trainable coordinates, blocks concatenated row-major.
    pub fn flatten_layer(&self, l: usize) -> Vec<f64> {
        self.blocks(l).iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        (0..self.len()).flat_map(|l| self.flatten_layer(l)).collect()
    }

    /// Multiplies every trainable block of layer l by `s`.
    pub fn scale_layer(&mut self, l: usize, s: f64) {
        for b in self.blocks_mut(l) {
            b.scale(s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// w_in × count·T.
    Vectors(Tensor),
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// w_out × count·T.
    Vectors(Tensor),
    Classes(Vec<usize>),
}

/// `count` sequences of T tokens laid out column-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub count: usize,
    pub inputs: Inputs,
    pub labels: Labels,
}

fn pick_columns(t: &Tensor, idx: &[usize], tokens: usize) -> Tensor {
    let cols: Vec<usize> = idx.iter().flat_map(|&i| i * tokens..(i + 1) * tokens).collect();
    t.select_columns(&cols)
}

fn pick_items(v: &[usize], idx: &[usize], tokens: usize) -> Vec<usize> {
    idx.iter().flat_map(|&i| v[i * tokens..(i + 1) * tokens].iter().copied()).collect()
}

impl SampleSet {
    pub fn empty(spec: &ModelSpec) -> Self {
        let inputs = if spec.input_is_tokens() {
            Inputs::Tokens(vec![])
        } else {
            Inputs::Vectors(Tensor::zeros(&[spec.layers[0].w_in(), 0]))
        };
        let labels = match spec.loss {
            Loss::Squared => Labels::Vectors(Tensor::zeros(&[spec.output_dim(), 0])),
            Loss::CrossEntropy => Labels::Classes(vec![]),
        };
        Self { count: 0, inputs, labels }
    }

    /// Sub-set of samples in the order of `idx`.
    pub fn select(&self, idx: &[usize], tokens: usize) -> SampleSet {
        let inputs = match &self.inputs {
            Inputs::Vectors(t) => Inputs::Vectors(pick_columns(t, idx, tokens)),
            Inputs::Tokens(v) => Inputs::Tokens(pick_items(v, idx, tokens)),
        };
        let labels = match &self.labels {
            Labels::Vectors(t) => Labels::Vectors(pick_columns(t, idx, tokens)),
            Labels::Classes(v) => Labels::Classes(pick_items(v, idx, tokens)),
        };
        SampleSet { count: idx.len(), inputs, labels }
    }

    pub fn concat(&self, other: &SampleSet, tokens: usize) -> SampleSet {
        let total = self.count + other.count;
        let cat_t = |a: &Tensor, b: &Tensor| {
            let rows = a.rows().max(b.rows());
            let mut out = Tensor::zeros(&[rows, total * tokens]);
            for r in 0..rows {
                for c in 0..a.cols() {
                    out.set(r, c, a.at(r, c));
                }
                for c in 0..b.cols() {
                    out.set(r, a.cols() + c, b.at(r, c));
                }
            }
            out
        };
        let inputs = match (&self.inputs, &other.inputs) {
            (Inputs::Vectors(a), Inputs::Vectors(b)) => Inputs::Vectors(cat_t(a, b)),
            (Inputs::Tokens(a), Inputs::Tokens(b)) => Inputs::Tokens([a.as_slice(), b].concat()),
            _ => panic!("mixed input kinds"),
        };
        let labels = match (&self.labels, &other.labels) {
            (Labels::Vectors(a), Labels::Vectors(b)) => Labels::Vectors(cat_t(a, b)),
            (Labels::Classes(a), Labels::Classes(b)) => Labels::Classes([a.as_slice(), b].concat()),
            _ => panic!("mixed label kinds"),
        };
        SampleSet { count: total, inputs, labels }
    }

    fn check(&self, spec: &ModelSpec, what: &str) -> Result<()> {
        let cols = self.count * spec.tokens;
        match (&self.inputs, spec.input_is_tokens()) {
            (Inputs::Vectors(t), false) => {
                if t.rows() != spec.layers[0].w_in() || t.cols() != cols {
                    return dim_err(format!(
                        "{what} inputs {:?}, expected {}x{cols}",
                        t.shape(),
                        spec.layers[0].w_in()
                    ));
                }
            }
            (Inputs::Tokens(v), true) => {
                if v.len() != cols {
                    return dim_err(format!("{what} has {} token ids, expected {cols}", v.len()));
                }
                let vocab = spec.layers[0].w_in();
                if let Some(&id) = v.iter().find(|&&id| id >= vocab) {
                    return Err(Error::OutOfVocab { id, vocab });
                }
            }
            _ => return dim_err(format!("{what} input kind does not match the first layer")),
        }
        match (&self.labels, spec.loss) {
            (Labels::Vectors(t), Loss::Squared) => {
                if t.rows() != spec.output_dim() || t.cols() != cols {
                    return dim_err(format!("{what} labels {:?}, expected {}x{cols}", t.shape(), spec.output_dim()));
                }
            }
            (Labels::Classes(v), Loss::CrossEntropy) => {
                if v.len() != cols || v.iter().any(|&c| c >= spec.output_dim()) {
                    return dim_err(format!("{what} class labels malformed"));
                }
            }
            _ => return dim_err(format!("{what} label kind does not match the loss")),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: usize,
    pub train: SampleSet,
    pub target: SampleSet,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.train.count
    }

    pub fn m(&self) -> usize {
        self.target.count
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.tokens != spec.tokens {
            return dim_err(format!("batch has T={}, model expects {}", self.tokens, spec.tokens));
        }
        if self.n() + self.m() == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        self.train.check(spec, "training batch")?;
        self.target.check(spec, "target batch")
    }

    /// Batch holding only the training samples `idx` (in that order).
    pub fn train_subset(&self, spec: &ModelSpec, idx: &[usize]) -> Batch {
        Batch { tokens: self.tokens, train: self.train.select(idx, self.tokens), target: SampleSet::empty(spec) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Train = 0,
    Target = 1,
}

pub const SIDES: [Side; 2] = [Side::Train, Side::Target];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CachePhase {
    Forward,
    Swapped,
    Released,
}

#[derive(Debug, Default)]
pub struct SideCache {
    /// Layer input a (token ids as a 1×C tensor for embeddings).
    pub a: Option<Tensor>,
    /// e before the swap, ∂ℓ/∂e after.
    pub e: Option<Tensor>,
    /// LoRA only: A·a.
    pub aux: Option<Tensor>,
}

#[derive(Debug)]
pub struct LayerCache {
    pub sides: [SideCache; 2],
    pub phase: CachePhase,
}

/// Deliberate schedule faults, used to exercise the legality checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The gradient takes over e's handle without being allocated, so
    /// later consumers read a released tensor.
    SkipSwap,
}

#[derive(Debug)]
pub struct Caches {
    pub layers: Vec<LayerCache>,
    pub counts: [usize; 2],
    pub tokens: usize,
    /// Per-sample losses of each side.
    pub losses: [Vec<f64>; 2],
    labels: [Labels; 2],
    next_backward: Option<usize>,
    fault: Option<Fault>,
}

impl Caches {
    pub fn count(&self, side: Side) -> usize {
        self.counts[side as usize]
    }

    pub fn side(&self, l: usize, side: Side) -> &SideCache {
        &self.layers[l].sides[side as usize]
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    /// Next layer `backward_layer` expects, if any.
    pub fn next_backward(&self) -> Option<usize> {
        self.next_backward
    }

    fn release_opt(meter: &mut Meter, t: Option<Tensor>) -> Result<()> {
        match t {
            Some(t) => meter.release(t),
            None => Ok(()),
        }
    }

    /// Releases the input activation (and LoRA A·a) of one side.
    pub fn release_input(&mut self, meter: &mut Meter, l: usize, side: Side) -> Result<()> {
        let sc = &mut self.layers[l].sides[side as usize];
        let (a, aux) = (sc.a.take(), sc.aux.take());
        Self::release_opt(meter, a)?;
        Self::release_opt(meter, aux)?;
        self.update_phase(l);
        Ok(())
    }

    /// Releases the swapped gradient of one side.
    pub fn release_grad(&mut self, meter: &mut Meter, l: usize, side: Side) -> Result<()> {
        let t = self.layers[l].sides[side as usize].e.take();
        Self::release_opt(meter, t)?;
        self.update_phase(l);
        Ok(())
    }

    pub fn release_side(&mut self, meter: &mut Meter, l: usize, side: Side) -> Result<()> {
        self.release_input(meter, l, side)?;
        self.release_grad(meter, l, side)
    }

    fn update_phase(&mut self, l: usize) {
        let lc = &mut self.layers[l];
        if lc.sides.iter().all(|s| s.a.is_none() && s.e.is_none() && s.aux.is_none()) {
            lc.phase = CachePhase::Released;
        }
    }

    pub fn swapped(&self, l: usize) -> Result<()> {
        if self.layers[l].phase != CachePhase::Swapped {
            return Err(Error::Phase(format!("layer {l} cache is {:?}, expected Swapped", self.layers[l].phase)));
        }
        Ok(())
    }
}

/// Per-token loss value and gradient for one column.
fn loss_column(loss: Loss, e: &[f64], label: LabelRef) -> (f64, Vec<f64>) {
    match (loss, label) {
        (Loss::Squared, LabelRef::Vector(y)) => {
            let g: Vec<f64> = e.iter().zip(&y).map(|(a, b)| a - b).collect();
            (0.5 * g.iter().map(|x| x * x).sum::<f64>(), g)
        }
        (Loss::CrossEntropy, LabelRef::Class(y)) => {
            let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = e.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            let g: Vec<f64> =
                e.iter().enumerate().map(|(i, x)| (x - lse).exp() - if i == y { 1.0 } else { 0.0 }).collect();
            (lse - e[y], g)
        }
        _ => unreachable!("label kind validated against the loss"),
    }
}

enum LabelRef {
    Vector(Vec<f64>),
    Class(usize),
}

fn label_at(labels: &Labels, c: usize) -> LabelRef {
    match labels {
        Labels::Vectors(t) => LabelRef::Vector(t.column(c)),
        Labels::Classes(v) => LabelRef::Class(v[c]),
    }
}

/// e = layer(a); also returns A·a for LoRA layers.
fn layer_forward(meter: &mut Meter, params: &LayerParams, a: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    match params {
        LayerParams::Dense { w } => Ok((matmul(meter, w, a)?, None)),
        LayerParams::Lora { w, a: la, b } => {
            let mut e = matmul(meter, w, a)?;
            let aux = matmul(meter, la, a)?;
            let low = matmul(meter, b, &aux)?;
            e.axpy(1.0, &low)?;
            meter.add_flops(e.len() as u64);
            Ok((e, Some(aux)))
        }
        LayerParams::Embedding { table } => {
            let dim = table.cols();
            let ids = a.data();
            let mut e = Tensor::zeros(&[dim, ids.len()]);
            for (c, &id) in ids.iter().enumerate() {
                for r in 0..dim {
                    e.set(r, c, table.at(id as usize, r));
                }
            }
            Ok((e, None))
        }
    }
}

fn input_tensor(set: &SampleSet) -> Tensor {
    match &set.inputs {
        Inputs::Vectors(t) => t.clone(),
        Inputs::Tokens(v) => Tensor::from_vec(&[1, v.len()], v.iter().map(|&x| x as f64).collect()).expect("1×C ids"),
    }
}

/// Merged forward over both sides. Caches every layer's a and e (and A·a
/// for LoRA) in the ledger; returns the summed loss.
pub fn forward(meter: &mut Meter, model: &Model, batch: &Batch) -> Result<(f64, Caches)> {
    batch.validate(&model.spec)?;
    let nl = model.len();
    let prec = meter.precision();
    meter.set_phase(Phase::Forward);
    let sets = [&batch.train, &batch.target];
    let mut carry: [Option<Tensor>; 2] = [None, None];
    for s in 0..2 {
        if sets[s].count > 0 {
            let a = input_tensor(sets[s]);
            meter.alloc(&a)?;
            carry[s] = Some(a);
        }
    }
    let mut layers = Vec::with_capacity(nl);
    let mut outputs: [Option<Vec<f64>>; 2] = [None, None];
    for l in 0..nl {
        let mut sides = [SideCache::default(), SideCache::default()];
        for s in 0..2 {
            let Some(a) = carry[s].take() else { continue };
            let (mut e, aux) = layer_forward(meter, &model.layers[l], &a)?;
            prec.round_tensor(&mut e);
            if let Some(x) = &aux {
                meter.alloc(x)?;
            }
            meter.alloc(&e)?;
            if l + 1 < nl {
                let act = model.spec.activation;
                let mut next = e.clone();
                next.data_mut().iter_mut().for_each(|x| *x = prec.round(act.apply(*x)));
                meter.alloc(&next)?;
                carry[s] = Some(next);
            } else {
                outputs[s] = Some(e.data().to_vec());
            }
            sides[s] = SideCache { a: Some(a), e: Some(e), aux };
        }
        layers.push(LayerCache { sides, phase: CachePhase::Forward });
    }
    let t = batch.tokens;
    let out_dim = model.spec.output_dim();
    let mut losses: [Vec<f64>; 2] = [vec![], vec![]];
    for s in 0..2 {
        let Some(out) = &outputs[s] else { continue };
        let cols = sets[s].count * t;
        for i in 0..sets[s].count {
            let mut li = 0.0;
            for c in i * t..(i + 1) * t {
                let col: Vec<f64> = (0..out_dim).map(|r| out[r * cols + c]).collect();
                li += loss_column(model.spec.loss, &col, label_at(&sets[s].labels, c)).0;
            }
            losses[s].push(li);
        }
    }
    let total = losses.iter().flatten().sum();
    Ok((
        total,
        Caches {
            layers,
            counts: [batch.n(), batch.m()],
            tokens: t,
            losses,
            labels: [batch.train.labels.clone(), batch.target.labels.clone()],
            next_backward: Some(nl - 1),
            fault: None,
        },
    ))
}

/// Per-sample losses of a sample set without touching any ledger.
pub fn sample_losses(model: &Model, set: &SampleSet) -> Result<Vec<f64>> {
    let batch = Batch { tokens: model.spec.tokens, train: set.clone(), target: SampleSet::empty(&model.spec) };
    if set.count == 0 {
        return Ok(vec![]);
    }
    let mut meter = Meter::new();
    let (_, caches) = forward(&mut meter, model, &batch)?;
    Ok(caches.losses[0].clone())
}

pub fn mean_loss(model: &Model, set: &SampleSet) -> Result<f64> {
    let l = sample_losses(model, set)?;
    Ok(if l.is_empty() { 0.0 } else { l.iter().sum::<f64>() / l.len() as f64 })
}

/// Computes ∂ℓ/∂e for layer l and swaps it into the cache slot of e.
pub fn backward_layer(meter: &mut Meter, model: &Model, caches: &mut Caches, l: usize) -> Result<()> {
    if caches.next_backward != Some(l) {
        return Err(Error::Phase(format!(
            "backward_layer({l}) called out of order; expected {:?}",
            caches.next_backward
        )));
    }
    if caches.layers[l].phase != CachePhase::Forward {
        return Err(Error::Phase(format!("layer {l} cache already {:?}", caches.layers[l].phase)));
    }
    meter.set_phase(Phase::Backward(l));
    let nl = model.len();
    let act = model.spec.activation;
    let consumer = format!("backward:{l}");
    for s in 0..2 {
        let Some(e) = caches.layers[l].sides[s].e.as_ref() else { continue };
        let (rows, cols) = e.dims();
        meter.read(e.id(), consumer.clone());
        let mut grad = Tensor::zeros(&[rows, cols]);
        if l + 1 == nl {
            let labels = &caches.labels[s];
            for c in 0..cols {
                let (_, g) = loss_column(model.spec.loss, &e.column(c), label_at(labels, c));
                for r in 0..rows {
                    grad.set(r, c, g[r]);
                }
            }
        } else {
            let up = caches.layers[l + 1].sides[s]
                .e
                .as_ref()
                .ok_or_else(|| Error::Phase(format!("layer {} gradient already released", l + 1)))?;
            meter.read(up.id(), consumer.clone());
            let up_rows = up.rows();
            let mut flops = (rows * cols * (2 * up_rows - 1) + rows * cols) as u64;
            let lora = match &model.layers[l + 1] {
                LayerParams::Lora { a, b, .. } => {
                    let r = b.cols();
                    flops += (r * cols * (2 * up_rows - 1) + rows * cols * (2 * r - 1) + rows * cols) as u64;
                    Some((a, b))
                }
                _ => None,
            };
            let w = match &model.layers[l + 1] {
                LayerParams::Dense { w } | LayerParams::Lora { w, .. } => w,
                LayerParams::Embedding { .. } => unreachable!("embedding is never above another layer"),
            };
            let mut col = vec![0.0; rows];
            for c in 0..cols {
                for (i, slot) in col.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..up_rows {
                        acc += w.at(k, i) * up.at(k, c);
                    }
                    *slot = acc;
                }
                if let Some((la, lb)) = lora {
                    let r = lb.cols();
                    let t: Vec<f64> = (0..r)
                        .map(|j| {
                            let mut acc = 0.0;
                            for k in 0..up_rows {
                                acc += lb.at(k, j) * up.at(k, c);
                            }
                            acc
                        })
                        .collect();
                    for (i, slot) in col.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in 0..r {
                            acc += la.at(j, i) * t[j];
                        }
                        *slot += acc;
                    }
                }
                for r in 0..rows {
                    grad.set(r, c, act.deriv(e.at(r, c)) * col[r]);
                }
            }
            meter.add_flops(flops);
        }
        let old = caches.layers[l].sides[s].e.take().expect("checked above");
        let old_id = old.id();
        meter.release(old)?;
        if caches.fault == Some(Fault::SkipSwap) {
            grad = grad.with_id(old_id);
        } else {
            meter.alloc(&grad)?;
        }
        caches.layers[l].sides[s].e = Some(grad);
    }
    caches.layers[l].phase = CachePhase::Swapped;
    caches.next_backward = l.checked_sub(1);
    Ok(())
}

/// Factor views of one layer's blocks. Owns the LoRA Bᵀ∂ℓ/∂e transient,
/// which is allocated on creation and released by [`LayerView::finish`].
pub struct LayerView {
    pub layer: usize,
    kind: LayerSpec,
    lora_left: [Option<Tensor>; 2],
}

impl LayerView {
    pub fn new(meter: &mut Meter, model: &Model, caches: &Caches, l: usize) -> Result<Self> {
        caches.swapped(l)?;
        let kind = model.spec.layers[l];
        let mut lora_left = [None, None];
        if let LayerParams::Lora { b, .. } = &model.layers[l] {
            for s in 0..2 {
                if let Some(d) = &caches.layers[l].sides[s].e {
                    let mut scratch = Meter::new();
                    let t = crate::tensor::matmul_tn(&mut scratch, b, d)?;
                    meter.add_flops(scratch.flops());
                    meter.alloc(&t)?;
                    lora_left[s] = Some(t);
                }
            }
        }
        Ok(Self { layer: l, kind, lora_left })
    }

    pub fn n_blocks(&self) -> usize {
        self.kind.blocks().len()
    }

    pub fn block_dims(&self, b: usize) -> (usize, usize) {
        self.kind.blocks()[b]
    }

    /// Offset of block b inside the layer's flattened coordinates.
    pub fn block_offset(&self, b: usize) -> usize {
        self.kind.blocks()[..b].iter().map(|(r, c)| r * c).sum()
    }

    /// Splits flat layer ranges into (block, block-local range) pieces.
    pub fn pieces(&self, ranges: &[Range<usize>]) -> Vec<(usize, Range<usize>)> {
        let mut out = vec![];
        for r in ranges {
            for b in 0..self.n_blocks() {
                let off = self.block_offset(b);
                let (rows, cols) = self.block_dims(b);
                let lo = r.start.max(off);
                let hi = r.end.min(off + rows * cols);
                if lo < hi {
                    out.push((b, lo - off..hi - off));
                }
            }
        }
        out
    }

    /// (left, right) factors of block b on one side.
    pub fn block<'a>(&'a self, caches: &'a Caches, b: usize, side: Side) -> Result<(Factor<'a>, Factor<'a>)> {
        let sc = caches.side(self.layer, side);
        let missing = || Error::Phase(format!("layer {} cache released", self.layer));
        let a = sc.a.as_ref().ok_or_else(missing)?;
        let d = sc.e.as_ref().ok_or_else(missing)?;
        Ok(match (self.kind, b) {
            (LayerSpec::Dense { .. }, 0) => (Factor::Dense(d), Factor::Dense(a)),
            (LayerSpec::Lora { .. }, 0) => (Factor::Dense(d), Factor::Dense(sc.aux.as_ref().ok_or_else(missing)?)),
            (LayerSpec::Lora { .. }, 1) => {
                (Factor::Dense(self.lora_left[side as usize].as_ref().ok_or_else(missing)?), Factor::Dense(a))
            }
            (LayerSpec::Embedding { vocab, .. }, 0) => (Factor::OneHot { ids: a, dim: vocab }, Factor::Dense(d)),
            _ => return Err(Error::Invalid(format!("layer {} has no block {b}", self.layer))),
        })
    }

    /// Records reads of every factor used by `consumer`.
    pub fn note_reads(&self, meter: &mut Meter, caches: &Caches, side: Side, consumer: &str) -> Result<()> {
        for b in 0..self.n_blocks() {
            let (lf, rf) = self.block(caches, b, side)?;
            meter.read(lf.tensor_id(), consumer);
            meter.read(rf.tensor_id(), consumer);
        }
        Ok(())
    }

    pub fn finish(self, meter: &mut Meter) -> Result<()> {
        for t in self.lora_left.into_iter().flatten() {
            meter.release(t)?;
        }
        Ok(())
    }
}

/// Column indices of the given samples, in order.
pub fn sample_columns(samples: &[usize], tokens: usize) -> Vec<usize> {
    samples.iter().flat_map(|&i| i * tokens..(i + 1) * tokens).collect()
}

/// Per-sample gradient of sample i (per block), metered as an outer sum.
pub fn per_sample_grad(
    meter: &mut Meter,
    view: &LayerView,
    caches: &Caches,
    side: Side,
    i: usize,
) -> Result<Vec<Tensor>> {
    if i >= caches.count(side) {
        return Err(Error::Invalid(format!("sample {i} out of range")));
    }
    let cols = sample_columns(&[i], caches.tokens);
    (0..view.n_blocks())
        .map(|b| {
            let (rows, ncols) = view.block_dims(b);
            let (lf, rf) = view.block(caches, b, side)?;
            let mut g = Tensor::zeros(&[rows, ncols]);
            accumulate_outer(g.data_mut(), lf, rf, &cols, 0..rows * ncols);
            meter.add_flops(outer_sum_flops(cols.len(), rows * ncols));
            Ok(g)
        })
        .collect()
}

/// (1/k)·Σ_{i∈S} g_i per block via one fused outer sum over the selected
/// training columns. `samples` must be ascending.
pub fn batch_grad(
    meter: &mut Meter,
    view: &LayerView,
    caches: &Caches,
    samples: &[usize],
    k: usize,
) -> Result<Vec<Tensor>> {
    if samples.is_empty() {
        return Err(Error::Selection("empty selection".into()));
    }
    let cols = sample_columns(samples, caches.tokens);
    (0..view.n_blocks())
        .map(|b| {
            let (rows, ncols) = view.block_dims(b);
            let (lf, rf) = view.block(caches, b, Side::Train)?;
            let mut g = Tensor::zeros(&[rows, ncols]);
            accumulate_outer(g.data_mut(), lf, rf, &cols, 0..rows * ncols);
            let kf = k as f64;
            g.data_mut().iter_mut().for_each(|x| *x /= kf);
            meter.add_flops(outer_sum_flops(cols.len(), rows * ncols) + (rows * ncols) as u64);
            Ok(g)
        })
        .collect()
}

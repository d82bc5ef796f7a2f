//! Slow, obviously-correct reference implementations.
//!
//! Nothing here is metered or optimized. Tests and the fixture generator
//! compare the production kernels against these.

use crate::net::{Activation, Batch, Inputs, Labels, LayerParams, LayerSpec, Loss, Model, ModelSpec, SampleSet, Side};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = a.dims();
    let (q2, r) = b.dims();
    assert_eq!(q, q2, "matmul_naive shapes");
    let mut out = Tensor::zeros(&[p, r]);
    for i in 0..p {
        for j in 0..r {
            let mut acc = 0.0;
            for k in 0..q {
                acc += a.at(i, k) * b.at(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// Embedding front end followed by `layers − 1` square dense layers.
pub fn embedding_spec(vocab: usize, dim: usize, layers: usize, tokens: usize) -> ModelSpec {
    let mut ls = vec![LayerSpec::Embedding { vocab, dim }];
    ls.extend(std::iter::repeat(LayerSpec::Dense { w_in: dim, w_out: dim }).take(layers.saturating_sub(1)));
    ModelSpec { layers: ls, activation: Activation::Tanh, loss: Loss::Squared, tokens }
}

/// Gaussian inputs/labels (or uniform token ids and classes) for n training
/// and m target samples.
pub fn random_set(spec: &ModelSpec, count: usize, rng: &mut Rng) -> SampleSet {
    let cols = count * spec.tokens;
    let inputs = if spec.input_is_tokens() {
        let vocab = spec.layers[0].w_in();
        Inputs::Tokens((0..cols).map(|_| rng.below(vocab)).collect())
    } else {
        Inputs::Vectors(Tensor::randn(&[spec.layers[0].w_in(), cols], rng, 1.0))
    };
    let labels = match spec.loss {
        Loss::Squared => Labels::Vectors(Tensor::randn(&[spec.output_dim(), cols], rng, 1.0)),
        Loss::CrossEntropy => Labels::Classes((0..cols).map(|_| rng.below(spec.output_dim())).collect()),
    };
    SampleSet { count, inputs, labels }
}

pub fn random_batch(spec: &ModelSpec, n: usize, m: usize, rng: &mut Rng) -> Batch {
    let train = random_set(spec, n, rng);
    let target = random_set(spec, m, rng);
    Batch { tokens: spec.tokens, train, target }
}

fn forward_column(model: &Model, x: ColumnInput) -> Vec<f64> {
    let act = model.spec.activation;
    let nl = model.len();
    let mut a: Vec<f64> = match x {
        ColumnInput::Vector(ref v) => v.clone(),
        ColumnInput::Token(_) => vec![],
    };
    for (l, p) in model.layers.iter().enumerate() {
        let e: Vec<f64> = match p {
            LayerParams::Dense { w } => mv(w, &a),
            LayerParams::Lora { w, a: la, b } => {
                let base = mv(w, &a);
                let low = mv(b, &mv(la, &a));
                base.iter().zip(&low).map(|(x, y)| x + y).collect()
            }
            LayerParams::Embedding { table } => {
                let ColumnInput::Token(id) = x else { unreachable!() };
                (0..table.cols()).map(|c| table.at(id, c)).collect()
            }
        };
        a = if l + 1 < nl { e.iter().map(|&v| act.apply(v)).collect() } else { e };
    }
    a
}

#[derive(Clone)]
enum ColumnInput {
    Vector(Vec<f64>),
    Token(usize),
}

fn mv(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| (0..w.cols()).map(|c| w.at(r, c) * x[c]).sum()).collect()
}

fn column_loss(loss: Loss, out: &[f64], labels: &Labels, c: usize) -> f64 {
    match (loss, labels) {
        (Loss::Squared, Labels::Vectors(y)) => {
            out.iter().enumerate().map(|(r, v)| 0.5 * (v - y.at(r, c)).powi(2)).sum()
        }
        (Loss::CrossEntropy, Labels::Classes(ys)) => {
            let lse = out.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - out[ys[c]]
        }
        _ => panic!("label kind mismatch"),
    }
}

/// Loss of sample i of a set, by per-column scalar evaluation.
pub fn sample_loss(model: &Model, set: &SampleSet, i: usize) -> f64 {
    let t = model.spec.tokens;
    (i * t..(i + 1) * t)
        .map(|c| {
            let x = match &set.inputs {
                Inputs::Vectors(m) => ColumnInput::Vector(m.column(c)),
                Inputs::Tokens(v) => ColumnInput::Token(v[c]),
            };
            column_loss(model.spec.loss, &forward_column(model, x), &set.labels, c)
        })
        .sum()
}

/// Summed loss over both sides of a batch.
pub fn scalar_loss(model: &Model, batch: &Batch) -> f64 {
    let a: f64 = (0..batch.train.count).map(|i| sample_loss(model, &batch.train, i)).sum();
    let b: f64 = (0..batch.target.count).map(|i| sample_loss(model, &batch.target, i)).sum();
    a + b
}

/// Central finite-difference gradient of one sample's loss with respect to
/// layer l's trainable coordinates.
pub fn fd_sample_grad(model: &Model, batch: &Batch, side: Side, i: usize, l: usize, h: f64) -> Vec<f64> {
    let set = match side {
        Side::Train => &batch.train,
        Side::Target => &batch.target,
    };
    let mut m = model.clone();
    let sizes: Vec<usize> = m.blocks(l).iter().map(|t| t.len()).collect();
    let mut out = vec![];
    for (b, &size) in sizes.iter().enumerate() {
        for j in 0..size {
            let orig = m.blocks(l)[b].data()[j];
            m.blocks_mut(l)[b].data_mut()[j] = orig + h;
            let up = sample_loss(&m, set, i);
            m.blocks_mut(l)[b].data_mut()[j] = orig - h;
            let down = sample_loss(&m, set, i);
            m.blocks_mut(l)[b].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// ‖a − b‖ / max(‖b‖, 1e-12).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

pub fn dot_naive(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense Kronecker-structured projection: row (a,b), column (r,c) of the
/// result is p_out[a,r]·p_in[b,c]; optionally followed by a dense p_final.
pub fn dense_projection(p_out: &Tensor, p_in: &Tensor, p_final: Option<&Tensor>) -> Tensor {
    let (ko, rows) = p_out.dims();
    let (ki, cols) = p_in.dims();
    let mut m = Tensor::zeros(&[ko * ki, rows * cols]);
    for a in 0..ko {
        for b in 0..ki {
            for r in 0..rows {
                for c in 0..cols {
                    m.set(a * ki + b, r * cols + c, p_out.at(a, r) * p_in.at(b, c));
                }
            }
        }
    }
    match p_final {
        Some(f) => matmul_naive(f, &m),
        None => m,
    }
}

/// Flattened per-sample gradients of every layer via finite differences.
pub fn fd_all_grads(model: &Model, batch: &Batch, side: Side, h: f64) -> Vec<Vec<f64>> {
    let count = match side {
        Side::Train => batch.train.count,
        Side::Target => batch.target.count,
    };
    (0..count).map(|i| (0..model.len()).flat_map(|l| fd_sample_grad(model, batch, side, i, l, h)).collect()).collect()
}

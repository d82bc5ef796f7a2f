//! Synthetic two-distribution regression task.
//!
//! Target samples follow a linear teacher y = W⋆x + ε with x ~ N(0, I).
//! Training samples come from a shifted distribution: the teacher becomes
//! W⋆ + μ·Δ, where μ is the mismatch knob, and inputs may get a mean shift
//! and a scale change. A `clean_fraction` of the training pool is drawn
//! from the target distribution instead.

use serde::{Deserialize, Serialize};

use datareg::net::{Batch, Inputs, Labels, Loss, ModelSpec, SampleSet};
use datareg::rng::Rng;
use datareg::tensor::Tensor;

use crate::{CliError, Result};

/// Stream tags under the run seed.
const TAG_TEACHER: u64 = 1;
const TAG_POOL: u64 = 2;
const TAG_BATCH: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Training and target samples per step.
    pub n: usize,
    pub m: usize,
    /// Scale μ of the teacher shift.
    pub mismatch: f64,
    #[serde(default = "default_train_pool")]
    pub train_pool: usize,
    #[serde(default = "default_target_pool")]
    pub target_pool: usize,
    #[serde(default = "default_eval_pool")]
    pub eval_pool: usize,
    /// Mean shift added to every training input coordinate.
    #[serde(default)]
    pub input_shift: f64,
    /// Standard deviation of training inputs.
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Label noise standard deviation, both distributions.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fraction of the training pool drawn from the target distribution.
    #[serde(default)]
    pub clean_fraction: f64,
}

fn default_train_pool() -> usize {
    256
}
fn default_target_pool() -> usize {
    64
}
fn default_eval_pool() -> usize {
    256
}
fn one() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}

impl TaskSpec {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(format!("task: {m}")));
        if model.input_is_tokens() {
            return bad("the regression task needs a dense first layer".into());
        }
        if model.loss != Loss::Squared {
            return bad("the regression task needs the squared loss".into());
        }
        if self.n == 0 && self.m == 0 {
            return bad("n and m are both zero".into());
        }
        if self.n > self.train_pool || self.m > self.target_pool {
            return bad(format!(
                "pools ({}, {}) smaller than the per-step batch ({}, {})",
                self.train_pool, self.target_pool, self.n, self.m
            ));
        }
        if self.eval_pool == 0 {
            return bad("eval_pool must be positive".into());
        }
        for (name, v) in [("mismatch", self.mismatch), ("input_shift", self.input_shift), ("noise", self.noise)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.input_scale > 0.0) || self.noise < 0.0 {
            return bad("input_scale must be positive and noise non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.clean_fraction) {
            return bad("clean_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Materialized pools for one seed.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub tokens: usize,
    pub train: SampleSet,
    pub target: SampleSet,
    pub eval: SampleSet,
    seed: u64,
}

struct Teacher {
    w: Tensor,
}

impl Teacher {
    fn label(&self, x: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
        (0..self.w.rows())
            .map(|r| (0..self.w.cols()).map(|c| self.w.at(r, c) * x[c]).sum::<f64>() + noise * rng.normal())
            .collect()
    }
}

impl Task {
    pub fn new(spec: &TaskSpec, model: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate(model)?;
        let (w_in, w_out) = (model.layers[0].w_in(), model.output_dim());
        let std = 1.0 / (w_in as f64).sqrt();
        let star = Tensor::randn(&[w_out, w_in], &mut Rng::keyed(seed, &[TAG_TEACHER, 0]), std);
        let delta = Tensor::randn(&[w_out, w_in], &mut Rng::keyed(seed, &[TAG_TEACHER, 1]), std);
        let mut shifted = star.clone();
        shifted.axpy(spec.mismatch, &delta)?;
        let target_teacher = Teacher { w: star };
        let train_teacher = Teacher { w: shifted };
        let t = model.tokens;
        let clean = (spec.clean_fraction * spec.train_pool as f64).round() as usize;
        let build = |count: usize, pool: u64, pick: &dyn Fn(usize) -> (bool, f64, f64)| -> SampleSet {
            let mut xs = Tensor::zeros(&[w_in, count * t]);
            let mut ys = Tensor::zeros(&[w_out, count * t]);
            for i in 0..count {
                let mut rng = Rng::keyed(seed, &[TAG_POOL, pool, i as u64]);
                let (on_target, shift, scale) = pick(i);
                let teacher = if on_target { &target_teacher } else { &train_teacher };
                for tok in 0..t {
                    let col = i * t + tok;
                    let x: Vec<f64> = (0..w_in).map(|_| shift + scale * rng.normal()).collect();
                    let y = teacher.label(&x, spec.noise, &mut rng);
                    for (r, v) in x.iter().enumerate() {
                        xs.set(r, col, *v);
                    }
                    for (r, v) in y.iter().enumerate() {
                        ys.set(r, col, *v);
                    }
                }
            }
            SampleSet { count, inputs: Inputs::Vectors(xs), labels: Labels::Vectors(ys) }
        };
        let train = build(spec.train_pool, 0, &|i| {
            if i < clean {
                (true, 0.0, 1.0)
            } else {
                (false, spec.input_shift, spec.input_scale)
            }
        });
        let target = build(spec.target_pool, 1, &|_| (true, 0.0, 1.0));
        let eval = build(spec.eval_pool, 2, &|_| (true, 0.0, 1.0));
        Ok(Self { spec: spec.clone(), tokens: t, train, target, eval, seed })
    }

    /// Step batch: n training and m target samples drawn without
    /// replacement from their pools, from a stream keyed by the step.
    pub fn batch(&self, step: u64) -> Batch {
        let mut rng = Rng::keyed(self.seed, &[TAG_BATCH, step]);
        let train = self.train.select(&draw(&mut rng, self.spec.train_pool, self.spec.n), self.tokens);
        let target = self.target.select(&draw(&mut rng, self.spec.target_pool, self.spec.m), self.tokens);
        Batch { tokens: self.tokens, train, target }
    }
}

fn draw(rng: &mut Rng, pool: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        serde_json::from_value(
            serde_json::json!({"n": 4, "m": 2, "mismatch": 1.0, "train_pool": 16, "target_pool": 8, "eval_pool": 8}),
        )
        .unwrap()
    }

    #[test]
    fn pools_and_batches_are_reproducible() {
        let model = ModelSpec::square(2, 3, 2);
        let a = Task::new(&spec(), &model, 5).unwrap();
        let b = Task::new(&spec(), &model, 5).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.batch(3), b.batch(3));
        assert_ne!(a.batch(3), a.batch(4));
        let batch = a.batch(0);
        assert_eq!((batch.n(), batch.m()), (4, 2));
        batch.validate(&model).unwrap();
    }

    #[test]
    fn zero_mismatch_shares_the_teacher() {
        let model = ModelSpec::square(1, 2, 1);
        let mut s = spec();
        s.mismatch = 0.0;
        s.noise = 0.0;
        let task = Task::new(&s, &model, 1).unwrap();
        // A perfect linear fit of the target pool also fits the training pool.
        let (Inputs::Vectors(xt), Labels::Vectors(yt)) = (&task.target.inputs, &task.target.labels) else {
            unreachable!()
        };
        let (Inputs::Vectors(xr), Labels::Vectors(yr)) = (&task.train.inputs, &task.train.labels) else {
            unreachable!()
        };
        let solve = |x: &Tensor, y: &Tensor| {
            // Row 0 of W from the first two columns: W·X = Y.
            let (a, b, c, d) = (x.at(0, 0), x.at(0, 1), x.at(1, 0), x.at(1, 1));
            let (y0, y1) = (y.at(0, 0), y.at(0, 1));
            let det = a * d - c * b;
            let w00 = (y0 * d - c * y1) / det;
            let w01 = (a * y1 - b * y0) / det;
            (w00, w01)
        };
        let (p, q) = (solve(xt, yt), solve(xr, yr));
        assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let model = ModelSpec::square(1, 2, 1);
        let mut s = spec();
        s.n = 100;
        assert!(s.validate(&model).is_err());
        let mut s = spec();
        s.clean_fraction = 1.5;
        assert!(s.validate(&model).is_err());
        let emb = datareg::oracle::embedding_spec(4, 2, 1, 1);
        assert!(spec().validate(&emb).is_err());
    }
}

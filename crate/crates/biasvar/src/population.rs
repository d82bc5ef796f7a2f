//! Synthetic per-sample gradient populations.
//!
//! Training gradients are drawn from N(g_tr, Σ_tr), target gradients from
//! N(g⋆, Σ⋆). An optional norm cap C rejection-resamples training draws
//! with ‖g_i‖ > C.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use datareg::rng::Rng;

use crate::{Result, SimError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Covariance {
    /// Diagonal entries.
    Diagonal(Vec<f64>),
    /// Row-major d×d symmetric matrix.
    Full(Vec<Vec<f64>>),
    /// s²·I.
    Isotropic(f64),
}

impl Covariance {
    fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        match self {
            Covariance::Diagonal(v) => {
                if v.len() != d {
                    return Err(SimError::Spec(format!("diagonal covariance has {} entries, expected {d}", v.len())));
                }
                Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)))
            }
            Covariance::Full(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(SimError::Spec(format!("full covariance must be {d}×{d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
                    return Err(SimError::Spec("covariance is not symmetric".into()));
                }
                Ok(m)
            }
            Covariance::Isotropic(s2) => Ok(DMatrix::identity(d, d) * *s2),
        }
    }
}

/// Factorized covariance: Σ = L Lᵀ with L = V √Λ.
#[derive(Clone, Debug)]
struct Factor {
    l: DMatrix<f64>,
    trace: f64,
    lambda_max: f64,
}

impl Factor {
    fn new(cov: &Covariance, d: usize) -> Result<Self> {
        let m = cov.matrix(d)?;
        let eig = SymmetricEigen::new(m.clone());
        let tol = 1e-12 * eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if eig.eigenvalues.iter().any(|&v| v < -tol) {
            return Err(SimError::Spec("covariance is not positive semidefinite".into()));
        }
        let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let l = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
        let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v));
        Ok(Self { l, trace: m.trace(), lambda_max })
    }

    fn draw(&self, mean: &[f64], rng: &mut Rng) -> Vec<f64> {
        let d = mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        (0..d).map(|i| mean[i] + (0..d).map(|j| self.l[(i, j)] * z[j]).sum::<f64>()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub d: usize,
    pub g_star: Vec<f64>,
    pub g_tr: Vec<f64>,
    pub sigma_star: Covariance,
    pub sigma_tr: Covariance,
    /// Training-gradient norm cap C; `None` disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Smoothness constant of the quadratic target loss.
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

impl PopulationSpec {
    /// g⋆ = (1, …, 1)/√d scaled by `norm`, g_tr = g⋆ + `mismatch`·e, where e
    /// alternates sign across coordinates, with isotropic covariances.
    pub fn isotropic(d: usize, norm: f64, mismatch: f64, var_tr: f64, var_star: f64) -> Self {
        let g_star: Vec<f64> = (0..d).map(|_| norm / (d as f64).sqrt()).collect();
        let g_tr =
            (0..d).map(|i| g_star[i] + mismatch * if i % 2 == 0 { 1.0 } else { -1.0 } / (d as f64).sqrt()).collect();
        Self {
            d,
            g_star,
            g_tr,
            sigma_star: Covariance::Isotropic(var_star),
            sigma_tr: Covariance::Isotropic(var_tr),
            clip: None,
            beta: 1.0,
        }
    }

    /// Factor-model population. Training noise has extra variance
    /// `factor_var` along the unit direction e (alternating signs):
    /// Σ_tr = factor_var·eeᵀ + noise_var·I. The mean mismatch is
    /// g_tr − g⋆ = `shared`·e + `mismatch`·h, where h ⟂ e repeats the
    /// pattern (+, +, −, −). A single shared subset can correct the e part;
    /// the h part needs different subsets per coordinate block.
    pub fn factor_model(
        d: usize,
        norm: f64,
        shared: f64,
        mismatch: f64,
        factor_var: f64,
        noise_var: f64,
        var_star: f64,
    ) -> Self {
        let mut s = Self::isotropic(d, norm, 0.0, noise_var, var_star);
        let r = (d as f64).sqrt();
        let e: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / r).collect();
        let h: Vec<f64> = (0..d).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 } / r).collect();
        for i in 0..d {
            s.g_tr[i] += shared * e[i] + mismatch * h[i];
        }
        let full = (0..d)
            .map(|i| (0..d).map(|j| factor_var * e[i] * e[j] + if i == j { noise_var } else { 0.0 }).collect())
            .collect();
        s.sigma_tr = Covariance::Full(full);
        s
    }

    /// Adds `var`·h_b h_bᵀ to Σ_tr for each of `groups` contiguous
    /// coordinate blocks, where h_b is the unit restriction of the
    /// (+, +, −, −) pattern to block b. Samples then vary independently per
    /// block along the mismatch direction, which per-group subsets exploit.
    pub fn with_block_factors(mut self, groups: usize, var: f64) -> Self {
        let d = self.d;
        let mut m: Vec<Vec<f64>> = match &self.sigma_tr {
            Covariance::Full(rows) => rows.clone(),
            Covariance::Diagonal(v) => {
                (0..d).map(|i| (0..d).map(|j| if i == j { v[i] } else { 0.0 }).collect()).collect()
            }
            Covariance::Isotropic(s2) => {
                (0..d).map(|i| (0..d).map(|j| if i == j { *s2 } else { 0.0 }).collect()).collect()
            }
        };
        for b in 0..groups.max(1) {
            let r = b * d / groups.max(1)..(b + 1) * d / groups.max(1);
            let sign = |i: usize| if i % 4 < 2 { 1.0 } else { -1.0 };
            let norm = (r.len() as f64).sqrt();
            for i in r.clone() {
                for j in r.clone() {
                    m[i][j] += var * sign(i) * sign(j) / (norm * norm);
                }
            }
        }
        self.sigma_tr = Covariance::Full(m);
        self
    }

    pub fn with_clip(mut self, c: f64) -> Self {
        self.clip = Some(c);
        self
    }

    pub fn validate(&self) -> Result<Population> {
        if self.d == 0 {
            return Err(SimError::Spec("dimension must be positive".into()));
        }
        if self.g_star.len() != self.d || self.g_tr.len() != self.d {
            return Err(SimError::Spec("mean vectors must have length d".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(SimError::Spec("clip C must be positive".into()));
            }
        }
        if !(self.beta > 0.0) {
            return Err(SimError::Spec("β must be positive".into()));
        }
        let star = Factor::new(&self.sigma_star, self.d)?;
        let tr = Factor::new(&self.sigma_tr, self.d)?;
        Ok(Population { spec: self.clone(), star, tr })
    }
}

/// A validated population with factored covariances.
#[derive(Clone, Debug)]
pub struct Population {
    pub spec: PopulationSpec,
    star: Factor,
    tr: Factor,
}

/// Rejection attempts before a clipped draw is declared infeasible.
const MAX_REJECTIONS: usize = 10_000;

impl Population {
    pub fn trace_star(&self) -> f64 {
        self.star.trace
    }

    pub fn trace_tr(&self) -> f64 {
        self.tr.trace
    }

    /// Sub-Gaussian scale of one target gradient: √λ_max(Σ⋆).
    pub fn sigma(&self) -> f64 {
        self.star.lambda_max.sqrt()
    }

    pub fn train_sample(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        let Some(c) = self.spec.clip else {
            return Ok(self.tr.draw(&self.spec.g_tr, rng));
        };
        for _ in 0..MAX_REJECTIONS {
            let g = self.tr.draw(&self.spec.g_tr, rng);
            if g.iter().map(|x| x * x).sum::<f64>().sqrt() <= c {
                return Ok(g);
            }
        }
        Err(SimError::Spec(format!("clip C={c} rejects nearly every training draw")))
    }

    pub fn target_sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.star.draw(&self.spec.g_star, rng)
    }

    /// One trial's training batch and target-batch mean. Sample i of each
    /// side uses its own keyed stream, so batches are nested across n and m.
    pub fn draw_trial(&self, seed: u64, trial: u64, n: usize, m: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let train = (0..n)
            .map(|i| self.train_sample(&mut Rng::keyed(seed, &[trial, 0, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        let mut mean = vec![0.0; self.spec.d];
        for j in 0..m {
            let g = self.target_sample(&mut Rng::keyed(seed, &[trial, 1, j as u64]));
            mean.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if m > 0 {
            mean.iter_mut().for_each(|x| *x /= m as f64);
        }
        Ok((train, mean))
    }
}

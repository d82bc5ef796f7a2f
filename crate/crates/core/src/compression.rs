//! Factorized random projections of layer gradients and compressed
//! optimizer state.
//!
//! A projector maps a w_out×w_in gradient G to X = P_out G P_inᵀ
//! (κ_out×κ_in), flattened row-major, optionally followed by a dense P_final.
//! The dense equivalent has entry P_out[a,r]·P_in[b,c] at row a·κ_in+b and
//! column r·w_in+c. Outer-product-structured gradients are projected token by
//! token, so the full gradient is never formed.
//!
//! Moving compressed vectors between two projectors uses
//! M = Π_new Π_oldᵀ = (P_out' P_outᵀ) ⊗ (P_in' P_inᵀ) when neither has a
//! final stage, so M is never materialized either.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_tn, Factor, Meter, Tensor};

/// Entries above which the exact second-moment transfer refuses to build a
/// dense M and falls back to probing.
pub const DENSE_M_LIMIT: usize = 1 << 24;

/// Serializable recipe for a Gaussian projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub seed: u64,
    pub k_out: usize,
    pub k_in: usize,
    /// Optional second stage of this output size.
    #[serde(default)]
    pub k_final: Option<usize>,
}

/// Default per-factor size for compressed scoring.
pub const SCORING_FACTOR: usize = 64;
/// Default per-factor size for compressed-subspace updates.
pub const UPDATE_FACTOR: usize = 512;

impl ProjectorSpec {
    pub fn square(seed: u64, k: usize) -> Self {
        Self { seed, k_out: k, k_in: k, k_final: None }
    }

    /// 64×64 factors, no second stage.
    pub fn scoring_default(seed: u64) -> Self {
        Self::square(seed, SCORING_FACTOR)
    }

    /// 512×512 factors, no second stage.
    pub fn update_default(seed: u64) -> Self {
        Self::square(seed, UPDATE_FACTOR)
    }

    pub fn kappa(&self) -> usize {
        self.k_final.unwrap_or(self.k_out * self.k_in)
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    p_out: Tensor,
    p_in: Tensor,
    p_final: Option<Tensor>,
    pub layer: usize,
    pub epoch: u64,
}

impl Projector {
    pub fn new(p_out: Tensor, p_in: Tensor, p_final: Option<Tensor>, layer: usize) -> Result<Self> {
        if p_out.shape().len() != 2 || p_in.shape().len() != 2 {
            return dim_err("projector factors must be matrices");
        }
        if let Some(f) = &p_final {
            if f.cols() != p_out.rows() * p_in.rows() {
                return dim_err(format!(
                    "P_final has {} columns, expected κ_out·κ_in = {}",
                    f.cols(),
                    p_out.rows() * p_in.rows()
                ));
            }
        }
        Ok(Self { p_out, p_in, p_final, layer, epoch: 0 })
    }

    pub fn identity(rows: usize, cols: usize, layer: usize) -> Self {
        Self { p_out: Tensor::eye(rows), p_in: Tensor::eye(cols), p_final: None, layer, epoch: 0 }
    }

    /// I.i.d. Gaussian factors with variance 1/κ per factor, drawn from the
    /// stream keyed by (seed, layer, epoch).
    pub fn gaussian(spec: &ProjectorSpec, rows: usize, cols: usize, layer: usize, epoch: u64) -> Self {
        let mut rng = Rng::keyed(spec.seed, &[layer as u64, epoch]);
        let p_out = Tensor::randn(&[spec.k_out, rows], &mut rng, 1.0 / (spec.k_out as f64).sqrt());
        let p_in = Tensor::randn(&[spec.k_in, cols], &mut rng, 1.0 / (spec.k_in as f64).sqrt());
        let p_final =
            spec.k_final.map(|k| Tensor::randn(&[k, spec.k_out * spec.k_in], &mut rng, 1.0 / (k as f64).sqrt()));
        Self { p_out, p_in, p_final, layer, epoch }
    }

    pub fn k_out(&self) -> usize {
        self.p_out.rows()
    }

    pub fn k_in(&self) -> usize {
        self.p_in.rows()
    }

    /// Output dimension κ.
    pub fn kappa(&self) -> usize {
        self.p_final.as_ref().map_or(self.k_out() * self.k_in(), |f| f.rows())
    }

    /// Rows of the gradient this projector accepts (w_out).
    pub fn rows(&self) -> usize {
        self.p_out.cols()
    }

    /// Columns of the gradient this projector accepts (w_in).
    pub fn cols(&self) -> usize {
        self.p_in.cols()
    }

    pub fn p_out(&self) -> &Tensor {
        &self.p_out
    }

    pub fn p_in(&self) -> &Tensor {
        &self.p_in
    }

    pub fn p_final(&self) -> Option<&Tensor> {
        self.p_final.as_ref()
    }

    /// Dense κ×(w_out·w_in) matrix; for tests and small instances only.
    pub fn dense(&self) -> Tensor {
        crate::oracle::dense_projection(&self.p_out, &self.p_in, self.p_final.as_ref())
    }

    fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows() || cols != self.cols() {
            return dim_err(format!(
                "projector for layer {} expects {}x{} gradients, got {rows}x{cols}",
                self.layer,
                self.rows(),
                self.cols()
            ));
        }
        Ok(())
    }
}

fn project_factor_col(p: &Tensor, f: &Factor, c: usize, out: &mut [f64]) -> u64 {
    match f {
        Factor::OneHot { ids, .. } => {
            let r = ids.data()[c] as usize;
            for (k, o) in out.iter_mut().enumerate() {
                *o = p.at(k, r);
            }
            0
        }
        Factor::Dense(t) => {
            let w = t.rows();
            for (k, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for r in 0..w {
                    acc += p.at(k, r) * t.at(r, c);
                }
                *o = acc;
            }
            (out.len() * (2 * w - 1)) as u64
        }
    }
}

fn apply_final(meter: &mut Meter, proj: &Projector, x: Vec<f64>) -> Vec<f64> {
    match &proj.p_final {
        None => x,
        Some(f) => {
            let (k, q) = f.dims();
            meter.add_flops((k * (2 * q - 1)) as u64);
            (0..k)
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..q {
                        acc += f.at(i, j) * x[j];
                    }
                    acc
                })
                .collect()
        }
    }
}

/// Π·vec(Σ_{c∈cols} left_c right_cᵀ) from the factors. Per-token projected
/// columns are single-column scratch and stay out of the ledger.
pub fn project_outer_sum(
    meter: &mut Meter,
    proj: &Projector,
    left: Factor,
    right: Factor,
    cols: &[usize],
) -> Result<Vec<f64>> {
    proj.check_shape(left.dim(), right.dim())?;
    let (ko, ki) = (proj.k_out(), proj.k_in());
    let mut x = vec![0.0; ko * ki];
    let mut pl = vec![0.0; ko];
    let mut pr = vec![0.0; ki];
    for (t, &c) in cols.iter().enumerate() {
        let mut flops = project_factor_col(&proj.p_out, &left, c, &mut pl);
        flops += project_factor_col(&proj.p_in, &right, c, &mut pr);
        for a in 0..ko {
            for b in 0..ki {
                x[a * ki + b] += pl[a] * pr[b];
            }
        }
        flops += if t == 0 { (ko * ki) as u64 } else { (2 * ko * ki) as u64 };
        meter.add_flops(flops);
    }
    Ok(apply_final(meter, proj, x))
}

/// Mat(Πᵀx) = P_outᵀ X' P_in with X' the κ_out×κ_in reshape of P_finalᵀx.
pub fn project_back(meter: &mut Meter, proj: &Projector, x: &[f64]) -> Result<Tensor> {
    if x.len() != proj.kappa() {
        return dim_err(format!("compressed vector has {} entries, projector κ = {}", x.len(), proj.kappa()));
    }
    let inner = match &proj.p_final {
        None => x.to_vec(),
        Some(f) => {
            let xt = Tensor::from_vec(&[x.len(), 1], x.to_vec())?;
            matmul_tn(meter, f, &xt)?.into_data()
        }
    };
    let xm = Tensor::from_vec(&[proj.k_out(), proj.k_in()], inner)?;
    let left = matmul_tn(meter, &proj.p_out, &xm)?;
    matmul(meter, &left, &proj.p_in)
}

/// Π_new Π_oldᵀ x via the Kronecker factors.
pub fn project_general(meter: &mut Meter, new: &Projector, old: &Projector, x: &[f64]) -> Result<Vec<f64>> {
    if new.rows() != old.rows() || new.cols() != old.cols() {
        return dim_err("projectors bind different layer shapes");
    }
    if x.len() != old.kappa() {
        return dim_err(format!("vector has {} entries, source κ = {}", x.len(), old.kappa()));
    }
    let inner = match &old.p_final {
        None => x.to_vec(),
        Some(f) => {
            let xt = Tensor::from_vec(&[x.len(), 1], x.to_vec())?;
            matmul_tn(meter, f, &xt)?.into_data()
        }
    };
    let xm = Tensor::from_vec(&[old.k_out(), old.k_in()], inner)?;
    let a_out = kron_factor(meter, &new.p_out, &old.p_out)?;
    let a_in = kron_factor(meter, &new.p_in, &old.p_in)?;
    let tmp = matmul(meter, &a_out, &xm)?;
    let y = matmul(meter, &tmp, &a_in.transpose())?;
    Ok(apply_final(meter, new, y.into_data()))
}

/// P_new P_oldᵀ.
fn kron_factor(meter: &mut Meter, p_new: &Tensor, p_old: &Tensor) -> Result<Tensor> {
    matmul(meter, p_new, &p_old.transpose())
}

/// m̂ transfer on subspace refresh.
pub fn refresh_first_moment(meter: &mut Meter, m_old: &[f64], old: &Projector, new: &Projector) -> Result<Vec<f64>> {
    project_general(meter, new, old, m_old)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecondMomentMode {
    Exact,
    Hutchinson { probes: usize },
}

impl Default for SecondMomentMode {
    fn default() -> Self {
        SecondMomentMode::Exact
    }
}

/// (M⊙M)v̂ exactly, or its Hutchinson estimate (1/N)Σ r⊙(M diag(v̂) Mᵀ r).
/// Exact mode is factorized without final stages, dense when κ_old·κ_new
/// is small, and otherwise falls back to probing with `fallback_probes`.
/// Returns the estimate and the mode actually used.
pub fn refresh_second_moment(
    meter: &mut Meter,
    v_old: &[f64],
    old: &Projector,
    new: &Projector,
    mode: SecondMomentMode,
    rng: &mut Rng,
    fallback_probes: usize,
) -> Result<(Vec<f64>, SecondMomentMode)> {
    if let Some(x) = v_old.iter().find(|&&x| x < 0.0) {
        return Err(Error::Invalid(format!("second moment has negative entry {x}")));
    }
    if v_old.len() != old.kappa() {
        return dim_err("second moment does not match the source projector");
    }
    match mode {
        SecondMomentMode::Exact if old.p_final.is_none() && new.p_final.is_none() => {
            let sq = |t: Tensor| {
                let shape = t.shape().to_vec();
                Tensor::from_vec(&shape, t.into_data().into_iter().map(|x| x * x).collect()).expect("shape")
            };
            let a_out = sq(kron_factor(meter, &new.p_out, &old.p_out)?);
            let a_in = sq(kron_factor(meter, &new.p_in, &old.p_in)?);
            meter.add_flops((a_out.len() + a_in.len()) as u64);
            let vm = Tensor::from_vec(&[old.k_out(), old.k_in()], v_old.to_vec())?;
            let tmp = matmul(meter, &a_out, &vm)?;
            Ok((matmul(meter, &tmp, &a_in.transpose())?.into_data(), mode))
        }
        SecondMomentMode::Exact if old.kappa() * new.kappa() <= DENSE_M_LIMIT => {
            let (ko, kn) = (old.kappa(), new.kappa());
            let mut out = vec![0.0; kn];
            let mut unit = vec![0.0; ko];
            for c in 0..ko {
                unit[c] = 1.0;
                let col = project_general(meter, new, old, &unit)?;
                unit[c] = 0.0;
                for (o, m) in out.iter_mut().zip(&col) {
                    *o += m * m * v_old[c];
                }
            }
            meter.add_flops((3 * ko * kn) as u64);
            Ok((out, mode))
        }
        SecondMomentMode::Exact => {
            let probes = fallback_probes.max(1);
            Ok((hutchinson(meter, v_old, old, new, probes, rng)?, SecondMomentMode::Hutchinson { probes }))
        }
        SecondMomentMode::Hutchinson { probes } => {
            if probes == 0 {
                return Err(Error::Config("Hutchinson needs at least one probe".into()));
            }
            Ok((hutchinson(meter, v_old, old, new, probes, rng)?, mode))
        }
    }
}

fn hutchinson(
    meter: &mut Meter,
    v_old: &[f64],
    old: &Projector,
    new: &Projector,
    probes: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let kn = new.kappa();
    let mut acc = vec![0.0; kn];
    for _ in 0..probes {
        let r: Vec<f64> = (0..kn).map(|_| rng.rademacher()).collect();
        let mut y = project_general(meter, old, new, &r)?;
        y.iter_mut().zip(v_old).for_each(|(y, v)| *y *= v);
        let z = project_general(meter, new, old, &y)?;
        for ((a, zi), ri) in acc.iter_mut().zip(&z).zip(&r) {
            *a += zi * ri;
        }
        meter.add_flops((v_old.len() + 2 * kn) as u64);
    }
    let inv = 1.0 / probes as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected AdamW moments held in a κ-dimensional subspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl MomentState {
    pub fn new(kappa: usize, hyper: AdamHyper) -> Self {
        Self { m: vec![0.0; kappa], v: vec![0.0; kappa], step: 0, hyper }
    }

    /// Moves both moments to a new subspace.
    pub fn refresh(
        &mut self,
        meter: &mut Meter,
        old: &Projector,
        new: &Projector,
        mode: SecondMomentMode,
        rng: &mut Rng,
    ) -> Result<SecondMomentMode> {
        self.m = refresh_first_moment(meter, &self.m, old, new)?;
        let (v, used) = refresh_second_moment(meter, &self.v, old, new, mode, rng, 64)?;
        self.v = v;
        Ok(used)
    }
}

/// One AdamW moment update in compressed space; returns the compressed
/// parameter delta −η·m̂/(√v̂+ε). Weight decay is applied by the caller in
/// full space.
pub fn adamw_compressed_step(meter: &mut Meter, state: &mut MomentState, u: &[f64], eta: f64) -> Result<Vec<f64>> {
    if u.len() != state.m.len() {
        return dim_err(format!("update has {} entries, state κ = {}", u.len(), state.m.len()));
    }
    let AdamHyper { beta1, beta2, eps, .. } = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut delta = vec![0.0; u.len()];
    for i in 0..u.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * u[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * u[i] * u[i];
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        delta[i] = -eta * mh / (vh.sqrt() + eps);
    }
    meter.add_flops(12 * u.len() as u64);
    Ok(delta)
}

/// Applies a compressed AdamW step to full-space weights:
/// W ← W − η·λ·W + Mat(Πᵀ Δ).
pub fn apply_adamw(
    meter: &mut Meter,
    proj: &Projector,
    state: &mut MomentState,
    u: &[f64],
    eta: f64,
    w: &mut Tensor,
) -> Result<()> {
    let delta = adamw_compressed_step(meter, state, u, eta)?;
    let back = project_back(meter, proj, &delta)?;
    let wd = eta * state.hyper.weight_decay;
    if wd != 0.0 {
        w.scale(1.0 - wd);
        meter.add_flops(w.len() as u64);
    }
    w.axpy(1.0, &back)?;
    meter.add_flops(w.len() as u64);
    Ok(())
}

//! Per-layer score statistics along a training run.
//!
//! Before each step the batch is scored layer by layer with Direct
//! scoring. The global score of a sample is the sum of its layer scores;
//! each layer reports its mean |score| and the Spearman rank correlation of
//! its scores with the global ones. The step then runs as configured.

use serde::{Deserialize, Serialize};

use datareg::scoring::Method;
use datareg::updates::{run_step, TrainState};

use crate::bench::Scored;
use crate::config::RunConfig;
use crate::report::RunMeta;
use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    /// `None` for the aggregate over steps.
    pub step: Option<u64>,
    pub layer: usize,
    pub mean_abs_score: f64,
    /// Undefined for n < 2 or constant scores.
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub meta: RunMeta,
    pub per_step: Vec<LayerStat>,
    pub aggregate: Vec<LayerStat>,
}

impl CaseStudy {
    /// Layer with the largest aggregate mean |score|.
    pub fn dominant_layer(&self) -> usize {
        self.aggregate.iter().max_by(|a, b| a.mean_abs_score.total_cmp(&b.mean_abs_score)).map(|s| s.layer).unwrap_or(0)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("step,layer,mean_abs_score,spearman\n");
        for r in self.per_step.iter().chain(&self.aggregate) {
            let step = r.step.map(|v| v.to_string()).unwrap_or_else(|| "all".into());
            let rho = r.spearman.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{step},{},{:e},{rho}\n", r.layer, r.mean_abs_score));
        }
        s
    }
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman's ρ as the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Per-layer statistics of one batch: (mean |score|, ρ) per layer.
pub fn layer_stats(layer_scores: &[Vec<f64>]) -> Vec<(f64, Option<f64>)> {
    let n = layer_scores.first().map_or(0, Vec::len);
    let global: Vec<f64> = (0..n).map(|i| layer_scores.iter().map(|s| s[i]).sum()).collect();
    layer_scores
        .iter()
        .map(|s| {
            let mean_abs = if n == 0 { 0.0 } else { s.iter().map(|x| x.abs()).sum::<f64>() / n as f64 };
            (mean_abs, spearman(s, &global))
        })
        .collect()
}

pub fn run(cfg: &RunConfig) -> Result<CaseStudy> {
    let meta = RunMeta::new("case-study", cfg, cfg.seed)?;
    let prepared = cfg.prepare()?;
    let (mut model, task, step_cfg) = (prepared.model, prepared.task, prepared.step);
    if model.len() < 2 {
        return Err(CliError::Config("the case study needs at least two layers".into()));
    }
    if cfg.task.m == 0 {
        return Err(CliError::Config("the case study needs target samples (m ≥ 1)".into()));
    }
    let layers = model.len();
    let mut state = TrainState::default();
    let mut per_step = vec![];
    for s in 0..cfg.steps as u64 {
        let batch = task.batch(s);
        let mut scored = Scored::new(model.clone(), &batch)?;
        let scores = (0..layers).map(|l| Ok(scored.score(l, Method::Direct, None)?.0)).collect::<Result<Vec<_>>>()?;
        for (l, (mean_abs, rho)) in layer_stats(&scores).into_iter().enumerate() {
            per_step.push(LayerStat { step: Some(s), layer: l, mean_abs_score: mean_abs, spearman: rho });
        }
        run_step(&mut model, &batch, &step_cfg, &mut state)?;
    }
    let aggregate = (0..layers)
        .map(|l| {
            let rows: Vec<&LayerStat> = per_step.iter().filter(|r| r.layer == l).collect();
            let mean_abs = rows.iter().map(|r| r.mean_abs_score).sum::<f64>() / rows.len() as f64;
            let rhos: Vec<f64> = rows.iter().filter_map(|r| r.spearman).collect();
            let rho = (!rhos.is_empty()).then(|| rhos.iter().sum::<f64>() / rhos.len() as f64);
            LayerStat { step: None, layer: l, mean_abs_score: mean_abs, spearman: rho }
        })
        .collect();
    Ok(CaseStudy { meta, per_step, aggregate })
}

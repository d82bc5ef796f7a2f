//! Standalone scoring benchmark.
//!
//! Each cell builds one square dense layer of width w, runs the merged
//! forward and backward pass on n training and m target samples of T
//! tokens, and then meters each scoring method on its own: FLOPs spent and
//! the peak of entries allocated while it ran. Both are compared with
//! [`predict_cost`]. Sweeps over T locate where GIP and PIP stop beating
//! Direct.

use serde::{Deserialize, Serialize};

use datareg::compression::{Projector, ProjectorSpec};
use datareg::net::{backward_layer, forward, Caches, LayerView, Model, ModelSpec};
use datareg::oracle::random_batch;
use datareg::rng::Rng;
use datareg::scoring::{predict_cost, score_layer, Cost, CostQuery, Method};
use datareg::tensor::Meter;

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub w: usize,
}

/// T values at fixed (n, m, w).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sweep {
    pub n: usize,
    pub m: usize,
    pub w: usize,
    pub ts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    #[serde(default)]
    pub seed: u64,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub sweeps: Vec<Sweep>,
    /// Per-factor size of the compressed-scoring projector; 0 disables it.
    #[serde(default = "default_k")]
    pub projector_k: usize,
}

fn default_k() -> usize {
    2
}

impl Default for BenchGrid {
    /// Twenty cells mixing tiny and mid-sized shapes, plus T sweeps that
    /// bracket both crossovers.
    fn default() -> Self {
        let mut cells = vec![];
        for n in [2, 5] {
            for m in [1, 3] {
                for t in [1, 4] {
                    for w in [3, 8] {
                        cells.push(Cell { n, m, t, w });
                    }
                }
            }
        }
        cells.extend([
            Cell { n: 1, m: 1, t: 1, w: 1 },
            Cell { n: 3, m: 2, t: 7, w: 5 },
            Cell { n: 8, m: 1, t: 16, w: 16 },
            Cell { n: 8, m: 2, t: 32, w: 4 },
        ]);
        let pow2 = |hi: usize| (0..).map(|i| 1usize << i).take_while(|&t| t <= hi).collect::<Vec<_>>();
        let sweeps = vec![
            Sweep { n: 8, m: 1, w: 64, ts: pow2(256) },
            Sweep { n: 8, m: 2, w: 64, ts: pow2(256) },
            Sweep { n: 16, m: 1, w: 32, ts: pow2(128) },
            Sweep { n: 16, m: 2, w: 64, ts: pow2(256) },
        ];
        Self { seed: 0, cells, sweeps, projector_k: default_k() }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<()> {
        let cells = self
            .cells
            .iter()
            .copied()
            .chain(self.sweeps.iter().flat_map(|s| s.ts.iter().map(move |&t| Cell { n: s.n, m: s.m, t, w: s.w })));
        for c in cells {
            if c.n == 0 || c.m == 0 || c.t == 0 || c.w == 0 {
                return Err(CliError::Config(format!("grid cell {c:?} has a zero dimension")));
            }
        }
        if self.sweeps.iter().any(|s| s.ts.windows(2).any(|p| p[0] >= p[1])) {
            return Err(CliError::Config("sweep T values must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub w: usize,
    pub flops_measured: u64,
    pub flops_predicted: u64,
    pub mem_measured: u64,
    pub mem_predicted: u64,
    /// FLOPs strictly below Direct on the same cell.
    pub beats_direct: bool,
}

impl BenchRow {
    pub fn exact(&self) -> bool {
        self.flops_measured == self.flops_predicted && self.mem_measured == self.mem_predicted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub method: Method,
    pub n: usize,
    pub m: usize,
    pub w: usize,
    /// Where the method is expected to stop beating Direct: w/(2m) for
    /// GIP, w for PIP.
    pub predicted_t: f64,
    /// Smallest swept T at which the method no longer beats Direct.
    pub flip_t: Option<usize>,
    /// Grid steps between the flip and the grid point nearest the
    /// prediction (in log T).
    pub steps_off: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub sweep_rows: Vec<BenchRow>,
    pub crossovers: Vec<Crossover>,
}

pub const CSV_HEADER: &str =
    "method,n,m,T,w,flops_measured,flops_predicted,mem_measured,mem_predicted,exact,beats_direct";

impl BenchReport {
    pub fn all_exact(&self) -> bool {
        self.rows.iter().chain(&self.sweep_rows).all(BenchRow::exact)
    }

    pub fn csv(rows: &[BenchRow]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method.name(),
                r.n,
                r.m,
                r.t,
                r.w,
                r.flops_measured,
                r.flops_predicted,
                r.mem_measured,
                r.mem_predicted,
                r.exact(),
                r.beats_direct
            ));
        }
        s
    }

    pub fn crossover_csv(&self) -> String {
        let mut s = String::from("method,n,m,w,predicted_T,flip_T,steps_off\n");
        for c in &self.crossovers {
            let flip = c.flip_t.map(|t| t.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.method.name(),
                c.n,
                c.m,
                c.w,
                c.predicted_t,
                flip,
                c.steps_off
            ));
        }
        s
    }
}

/// A model whose caches hold every layer's inputs and gradients.
pub struct Scored {
    pub meter: Meter,
    pub model: Model,
    pub caches: Caches,
}

impl Scored {
    pub fn new(model: Model, batch: &datareg::net::Batch) -> Result<Self> {
        let mut meter = Meter::new();
        let (_, mut caches) = forward(&mut meter, &model, batch)?;
        for l in (0..model.len()).rev() {
            backward_layer(&mut meter, &model, &mut caches, l)?;
        }
        Ok(Self { meter, model, caches })
    }

    /// Scores of layer `l` and their metered cost.
    pub fn score(&mut self, l: usize, method: Method, proj: Option<&Projector>) -> Result<(Vec<f64>, Cost)> {
        let view = LayerView::new(&mut self.meter, &self.model, &self.caches, l)?;
        let mark = self.meter.mark();
        let s = score_layer(&mut self.meter, method, &view, &self.caches, proj)?;
        let cost = Cost { flops: self.meter.flops_since(mark), memory: self.meter.window_peak(mark) };
        view.finish(&mut self.meter)?;
        Ok((s, cost))
    }
}

fn measure_cell(c: Cell, seed: u64, k: usize) -> Result<Vec<BenchRow>> {
    let spec = ModelSpec::square(1, c.w, c.t);
    let mut rng = Rng::keyed(seed, &[c.n as u64, c.m as u64, c.t as u64, c.w as u64]);
    let model = Model::init(spec.clone(), &mut rng)?;
    let batch = random_batch(&spec, c.n, c.m, &mut rng);
    let mut scored = Scored::new(model, &batch)?;
    let pspec = ProjectorSpec::square(seed, k);
    let proj = (k > 0).then(|| Projector::gaussian(&pspec, c.w, c.w, 0, 0));
    let methods: &[Method] = if k > 0 { &Method::ALL } else { &Method::ALL[..3] };
    let mut rows = vec![];
    let mut direct_flops = 0;
    for &method in methods {
        let (_, cost) = scored.score(0, method, proj.as_ref())?;
        let mut q = CostQuery::square(method, c.n as u64, c.m as u64, c.t as u64, c.w as u64);
        if method == Method::Compressed {
            q = q.with_projection(k as u64, k as u64, None);
        }
        let pred = predict_cost(&q);
        if method == Method::Direct {
            direct_flops = cost.flops;
        }
        rows.push(BenchRow {
            method,
            n: c.n,
            m: c.m,
            t: c.t,
            w: c.w,
            flops_measured: cost.flops,
            flops_predicted: pred.flops,
            mem_measured: cost.memory,
            mem_predicted: pred.memory,
            beats_direct: cost.flops < direct_flops,
        });
    }
    Ok(rows)
}

fn crossover(method: Method, s: &Sweep, rows: &[BenchRow]) -> Crossover {
    let predicted_t = match method {
        Method::Gip => s.w as f64 / (2.0 * s.m as f64),
        _ => s.w as f64,
    };
    let series: Vec<&BenchRow> =
        s.ts.iter().map(|&t| rows.iter().find(|r| r.method == method && r.t == t).expect("row")).collect();
    let flip = series.iter().position(|r| !r.beats_direct);
    let nearest = (0..s.ts.len())
        .min_by(|&a, &b| {
            let d = |i: usize| ((s.ts[i] as f64).ln() - predicted_t.ln()).abs();
            d(a).total_cmp(&d(b))
        })
        .expect("non-empty sweep");
    let flip_idx = flip.unwrap_or(s.ts.len());
    Crossover {
        method,
        n: s.n,
        m: s.m,
        w: s.w,
        predicted_t,
        flip_t: flip.map(|i| s.ts[i]),
        steps_off: flip_idx.abs_diff(nearest),
    }
}

pub fn run(grid: &BenchGrid) -> Result<BenchReport> {
    grid.validate()?;
    let mut rows = vec![];
    for &c in &grid.cells {
        rows.extend(measure_cell(c, grid.seed, grid.projector_k)?);
    }
    let mut sweep_rows = vec![];
    let mut crossovers = vec![];
    for s in &grid.sweeps {
        let mut these = vec![];
        for &t in &s.ts {
            these.extend(measure_cell(Cell { n: s.n, m: s.m, t, w: s.w }, grid.seed, 0)?);
        }
        crossovers.push(crossover(Method::Gip, s, &these));
        crossovers.push(crossover(Method::Pip, s, &these));
        sweep_rows.extend(these);
    }
    Ok(BenchReport { rows, sweep_rows, crossovers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_is_exact() {
        let grid = BenchGrid {
            seed: 1,
            cells: vec![Cell { n: 2, m: 1, t: 2, w: 4 }, Cell { n: 3, m: 2, t: 1, w: 5 }],
            sweeps: vec![Sweep { n: 4, m: 1, w: 8, ts: vec![1, 2, 4, 8, 16] }],
            projector_k: 2,
        };
        let r = run(&grid).unwrap();
        assert!(r.all_exact());
        assert_eq!(r.rows.len(), 8);
        let d = r.rows.iter().find(|x| x.method == Method::Direct && x.w == 4).unwrap();
        assert_eq!(d.flops_measured, 222);
        let pip = r.crossovers.iter().find(|c| c.method == Method::Pip).unwrap();
        assert_eq!(pip.flip_t, Some(8));
        assert_eq!(pip.steps_off, 0);
        assert!(BenchReport::csv(&r.rows).starts_with(CSV_HEADER));
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        let grid = BenchGrid { seed: 0, cells: vec![Cell { n: 0, m: 1, t: 1, w: 1 }], sweeps: vec![], projector_k: 0 };
        assert!(run(&grid).is_err());
    }
}

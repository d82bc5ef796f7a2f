//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Tolerances and runtime limits are
//! fixed here.

use std::time::{Duration, Instant};

use datareg::net::{per_sample_grad, LayerSpec, LayerView, Model, ModelSpec, Side};
use datareg::oracle::random_batch;
use datareg::rng::Rng;
use datareg::scheduler::{model_checkpointed, replay, ModeledSchedule, SegmentPlan};
use datareg::scoring::{predict_cost, CostQuery, Method};
use datareg::selection::{Mode, Partition, SelectionRule};
use datareg_cli::bench::{self, BenchGrid, Scored};
use datareg_cli::case_study;
use datareg_cli::config::RunConfig;
use datareg_cli::simulate::{result_checks, SimConfig};
use datareg_cli::train;
use datareg_cli::verify::{self, median, run_once, step_config};
use datareg_sim::{
    estimate_many, regime_population, regime_rules, sweep_m, PopulationSpec, UpdateRule, REGIME_MISMATCHES, REGIME_MS,
    REGIME_N,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, detail: String) -> Outcome {
    ensure(elapsed.as_secs() < limit_secs, format!("{detail}; {:.1}s (limit {limit_secs}s)", elapsed.as_secs_f64()))
}

// 1. Direct, GIP and PIP agree per score.
fn scoring_equivalence() -> Outcome {
    const TOL: f64 = 1e-9;
    let start = Instant::now();
    let worst = verify::scoring_max_diff(100, 0).map_err(|e| e.to_string())?;
    ensure(worst <= TOL, format!("max |Δscore| {worst:.3e} over 100 instances (tol {TOL:e})"))?;
    within(start.elapsed(), 60, format!("max |Δscore| {worst:.3e} over 100 instances"))
}

// 2. Metered costs equal the closed forms on the 20-cell grid.
fn cost_exactness() -> Outcome {
    let grid = BenchGrid::default();
    ensure(grid.cells.len() == 20, format!("grid has {} cells", grid.cells.len()))?;
    let r = bench::run(&grid).map_err(|e| e.to_string())?;
    let kappa = (grid.projector_k * grid.projector_k) as u64;
    let mut checked = 0;
    for row in &r.rows {
        let (n, m, t, w) = (row.n as u64, row.m as u64, row.t as u64, row.w as u64);
        let big_n = n + m;
        let (flops, mem) = match row.method {
            Method::Direct => (Some(2 * big_n * t * w * w + n * (w * w - 1)), (n + 1) * w * w),
            Method::Gip => (Some(4 * n * m * t * t * w), 2 * n * m * t * t),
            Method::Pip => (Some(2 * big_n * t * w * w + n * (t * w - 1)), w * w + n * t * w),
            Method::Compressed => (None, (n + 1) * kappa),
        };
        if let Some(f) = flops {
            ensure(
                row.flops_measured == f,
                format!("{} at {:?}: flops {} vs {f}", row.method.name(), (n, m, t, w), row.flops_measured),
            )?;
        }
        ensure(
            row.mem_measured == mem,
            format!("{} at {:?}: memory {} vs {mem}", row.method.name(), (n, m, t, w), row.mem_measured),
        )?;
        ensure(
            row.exact(),
            format!("{} at {:?}: measured differs from predict_cost", row.method.name(), (n, m, t, w)),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} (method, cell) rows exact in flops and memory entries"))
}

// 3. Crossovers land within one grid step of mT = w/2 (GIP) and T = w (PIP).
fn crossovers() -> Outcome {
    let r = bench::run(&BenchGrid::default()).map_err(|e| e.to_string())?;
    let mut seen = 0;
    for sw in &BenchGrid::default().sweeps {
        for (method, predicted) in [(Method::Gip, sw.w as f64 / (2.0 * sw.m as f64)), (Method::Pip, sw.w as f64)] {
            let flops = |meth: Method, t: usize| {
                r.sweep_rows
                    .iter()
                    .find(|x| x.method == meth && x.n == sw.n && x.m == sw.m && x.w == sw.w && x.t == t)
                    .map(|x| x.flops_measured)
                    .expect("swept row")
            };
            let flip = sw.ts.iter().copied().find(|&t| flops(method, t) >= flops(Method::Direct, t)).ok_or(format!(
                "{} never flips for {:?}",
                method.name(),
                (sw.n, sw.m, sw.w)
            ))?;
            // Sweeps use powers of two, so grid steps are log2 distances.
            let steps = ((flip as f64).log2() - predicted.log2()).abs();
            ensure(
                steps <= 1.0,
                format!("{} n={} m={} w={}: flip at T={flip}, predicted {predicted}", method.name(), sw.n, sw.m, sw.w),
            )?;
            seen += 1;
        }
    }
    for row in r.rows.iter().chain(&r.sweep_rows).filter(|x| x.method == Method::Pip) {
        ensure(
            row.beats_direct == (row.t < row.w),
            format!("PIP at T={} w={}: beats Direct = {}", row.t, row.w, row.beats_direct),
        )?;
    }
    let at = |method, t| predict_cost(&CostQuery::square(method, 8, 1, t, 2048)).flops;
    ensure(at(Method::Gip, 512) < at(Method::Direct, 512), "w=2048: GIP not cheaper at T=512".into())?;
    ensure(at(Method::Direct, 2048) < at(Method::Gip, 2048), "w=2048: Direct not cheaper at T=2048".into())?;
    Ok(format!("{seen} crossovers within one grid step; PIP beats Direct exactly when T < w; w=2048 closed forms flip between T=512 and T=2048"))
}

fn models() -> Vec<ModelSpec> {
    let mut mixed = ModelSpec::square(3, 4, 2);
    mixed.layers[1] = LayerSpec::Lora { w_in: 4, w_out: 4, rank: 2 };
    vec![ModelSpec::square(3, 4, 2), mixed]
}

// 4. Bit-identical update equivalences.
fn update_equivalences() -> Outcome {
    let mut total = 0;
    for (i, spec) in models().into_iter().enumerate() {
        for seed in 0..3u64 {
            let mut rng = Rng::keyed(seed, &[4, i as u64]);
            let model = Model::init(spec.clone(), &mut rng).map_err(|e| e.to_string())?;
            let batch = random_batch(&spec, 6, 2, &mut rng);
            for (what, cases) in [
                ("k=n", verify::k_equals_n_cases(&model, &batch)),
                ("one/two-pass", verify::one_vs_two_pass_cases(&model, &batch)),
                ("grad-accum", verify::grad_accum_cases(&model, &batch)),
            ] {
                for (name, same) in cases.map_err(|e| e.to_string())? {
                    ensure(same, format!("{what} {name} differs (model {i}, seed {seed})"))?;
                    total += 1;
                }
            }
        }
    }
    Ok(format!("{total} cases bit-identical"))
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Flattened per-sample gradients of both sides, layer after layer.
fn flat_grads(model: &Model, batch: &datareg::net::Batch) -> Result<(Vec<Vec<f64>>, Vec<f64>), String> {
    let mut s = Scored::new(model.clone(), batch).map_err(|e| e.to_string())?;
    let mut train = vec![vec![]; batch.n()];
    let mut target = vec![];
    for l in 0..model.len() {
        let view = LayerView::new(&mut s.meter, &s.model, &s.caches, l).map_err(|e| e.to_string())?;
        let mut flat = |side, i| -> Result<Vec<f64>, String> {
            Ok(per_sample_grad(&mut s.meter, &view, &s.caches, side, i)
                .map_err(|e| e.to_string())?
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect())
        };
        for (i, g) in train.iter_mut().enumerate() {
            g.extend(flat(Side::Train, i)?);
        }
        let per: Vec<Vec<f64>> = (0..batch.m()).map(|j| flat(Side::Target, j)).collect::<Result<_, _>>()?;
        let mut mean = vec![0.0; per[0].len()];
        for g in &per {
            mean.iter_mut().zip(g).for_each(|(a, b)| *a += b / batch.m() as f64);
        }
        target.extend(mean);
        view.finish(&mut s.meter).map_err(|e| e.to_string())?;
    }
    Ok((train, target))
}

/// Coordinates of every group in the flattened parameter vector.
fn group_coords(p: &Partition) -> Vec<Vec<usize>> {
    let sizes = p.layer_sizes();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, s| Some(std::mem::replace(acc, *acc + s))).collect();
    (0..p.len())
        .map(|g| {
            p.layers_of(g)
                .into_iter()
                .flat_map(|l| {
                    let off = offsets[l];
                    p.ranges(g, l).into_iter().flat_map(move |r| r.map(move |c| off + c))
                })
                .collect()
        })
        .collect()
}

/// Smallest ‖mean_S g_i − ĝ‖² over every k-subset S, on the given coordinates.
fn enumerate_min(train: &[Vec<f64>], target: &[f64], coords: &[usize], k: usize) -> f64 {
    let n = train.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let v: f64 = coords
            .iter()
            .map(|&c| {
                let mean = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| train[i][c]).sum::<f64>() / k as f64;
                (mean - target[c]).powi(2)
            })
            .sum();
        best = best.min(v);
    }
    best
}

// 5. Brute-force selection attains the enumerated optimum; inclusion chain.
fn projection_optimality() -> Outcome {
    const REL: f64 = 1e-9;
    let mut instances = 0;
    for seed in 0..12u64 {
        let mut rng = Rng::keyed(seed, &[5]);
        let n = 4 + rng.below(5);
        let spec = ModelSpec { activation: datareg::net::Activation::Tanh, ..ModelSpec::square(2, 3, 2) };
        let model = Model::init(spec.clone(), &mut rng).map_err(|e| e.to_string())?;
        let batch = random_batch(&spec, n, 2, &mut rng);
        let (train, target) = flat_grads(&model, &batch)?;
        let parts = verify::partitions(&model);
        let full: Vec<f64> = (0..target.len()).map(|c| train.iter().map(|g| g[c]).sum::<f64>() / n as f64).collect();
        let full_res = dist_sq(&full, &target);
        let mut global_min = f64::INFINITY;
        for k in 1..=n {
            let mut totals = vec![];
            for (name, p) in &parts {
                let (_, rep) =
                    run_once(&model, &batch, &step_config(Mode::Subset, SelectionRule::bruteforce(k), p.clone()))
                        .map_err(|e| e.to_string())?;
                let mut total = 0.0;
                for coords in group_coords(p) {
                    let want = enumerate_min(&train, &target, &coords, k);
                    let got: f64 = coords.iter().map(|&c| (rep.update[c] - target[c]).powi(2)).sum();
                    ensure(
                        (got - want).abs() <= REL * want.max(1.0),
                        format!("seed {seed} {name} k={k}: chosen {got:.12e}, enumerated optimum {want:.12e}"),
                    )?;
                    total += want;
                }
                totals.push((*name, total));
            }
            let global = totals.iter().find(|t| t.0 == "global").expect("global partition").1;
            for (name, t) in &totals {
                ensure(
                    *t <= global + REL * global.max(1.0),
                    format!("seed {seed} k={k}: {name} optimum {t} above global {global}"),
                )?;
            }
            global_min = global_min.min(global);
            if k == n {
                ensure(
                    (global - full_res).abs() <= REL * full_res.max(1.0),
                    format!("seed {seed}: k=n global {global} vs full {full_res}"),
                )?;
            }
        }
        ensure(
            global_min <= full_res * (1.0 + REL),
            format!("seed {seed}: best global {global_min} above full-training {full_res}"),
        )?;
        instances += 1;
    }
    Ok(format!("{instances} instances, n in 4..=8, every k, 4 partitions: chosen = enumerated optimum; group-wise ≤ global; min_k global ≤ full training"))
}

// 6. Per-sample gradients against central finite differences.
fn gradient_correctness() -> Outcome {
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (name, spec) in verify::gradient_models() {
        for seed in 0..3 {
            let e = verify::gradient_max_rel_err(&spec, seed, 1e-5).map_err(|e| e.to_string())?;
            ensure(e < TOL, format!("{name} seed {seed}: relative error {e:.3e}"))?;
            worst = worst.max(e);
        }
    }
    within(
        start.elapsed(),
        120,
        format!("max relative error {worst:.3e} (tol {TOL:e}) over dense, LoRA, embedding, cross-entropy"),
    )
}

// 7. Ledger legality, occupancy and checkpointed peaks.
fn ledger() -> Outcome {
    let mut legal = 0;
    for seed in 0..2u64 {
        let mut rng = Rng::keyed(seed, &[7]);
        let spec = ModelSpec::square(3, 4, 2);
        let model = Model::init(spec.clone(), &mut rng).map_err(|e| e.to_string())?;
        let batch = random_batch(&spec, 6, 2, &mut rng);
        for c in verify::legality_checks(&model, &batch, None).map_err(|e| e.to_string())? {
            ensure(c.passed, c.line())?;
            legal += 1;
        }
        let (same, held, want) = verify::occupancy(&model, &batch).map_err(|e| e.to_string())?;
        ensure(same, format!("seed {seed}: layer-wise boundaries differ from standard training on the merged batch"))?;
        let (big_n, t, w, l) = (8u64, 2u64, 4u64, 3u64);
        ensure(
            held == want && held == 2 * big_n * t * w * l,
            format!("seed {seed}: {held} entries live at scoring, want {}", 2 * big_n * t * w * l),
        )?;
    }
    let mut peaks = vec![];
    for (layers, w, cols, seg) in [(4, 8, 6, 2), (6, 16, 10, 3), (8, 4, 32, 2), (8, 32, 4, 4)] {
        let plan = SegmentPlan::uniform(layers, seg).map_err(|e| e.to_string())?;
        ensure(plan.segments.len() >= 2, "plan needs two segments".into())?;
        let peak = |s| -> Result<u64, String> {
            let ev = model_checkpointed(s, layers, w, cols, &plan).map_err(|e| e.to_string())?;
            Ok(replay(&ev).map_err(|e| e.to_string())?.peak)
        };
        let (lw, gl) = (peak(ModeledSchedule::Interleaved)?, peak(ModeledSchedule::GlobalOnePass)?);
        ensure(lw < gl, format!("L={layers} w={w}: layer-wise peak {lw} not below global {gl}"))?;
        peaks.push(format!("{lw}<{gl}"));
    }
    Ok(format!(
        "{legal} step-kind replays legal; boundaries match standard; global holds 2NTwL; checkpointed peaks {}",
        peaks.join(" ")
    ))
}

// 8. Compression against dense oracles.
fn compression() -> Outcome {
    const TOL: f64 = 1e-10;
    let p = verify::projection_max_diff(8, 60).map_err(|e| e.to_string())?;
    ensure(p <= TOL, format!("projection deviation {p:.3e}"))?;
    let s = verify::second_moment_max_diff(8, 60).map_err(|e| e.to_string())?;
    ensure(s <= TOL, format!("second-moment deviation {s:.3e}"))?;
    let errs = (0..20)
        .map(|s| verify::hutchinson_rel_err(s, 1024))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let med = median(errs);
    ensure(med < 0.05, format!("Hutchinson median relative error {med:.4}"))?;
    Ok(format!("projections {p:.2e}, second moment {s:.2e} (tol {TOL:e}); Hutchinson median {med:.4} < 0.05"))
}

// 9. Closed-form MSE identities, variance bounds and regime orderings.
fn theory() -> Outcome {
    const Z: f64 = 3.0;
    let start = Instant::now();
    let cfg = SimConfig {
        trials: 100_000,
        rules: vec![UpdateRule::FullTraining, UpdateRule::TargetOnly],
        ..SimConfig::default()
    };
    let pop = cfg.population.validate().map_err(|e| e.to_string())?;
    let mut identities = 0;
    for &m in &cfg.ms {
        for r in estimate_many(&pop, &cfg.rules, cfg.n, m, cfg.trials, 9).map_err(|e| e.to_string())? {
            for c in result_checks(&cfg.population, &pop, &r, Z) {
                ensure(c.passed, c.line())?;
                identities += 1;
            }
        }
    }
    let mut bounds = 0;
    for clip in [2.0, 4.0] {
        for base in [
            PopulationSpec::isotropic(8, 1.0, 0.5, 0.5, 1.0),
            PopulationSpec::factor_model(8, 1.0, 0.7, 0.4, 1.5, 0.5, 2.0),
        ] {
            for (n, k, m) in [(8, 4, 2), (6, 2, 8), (8, 2, 32)] {
                let spec = base.clone().with_clip(clip);
                let pop = spec.validate().map_err(|e| e.to_string())?;
                let rules = [UpdateRule::Global { k }, UpdateRule::GroupWise { k, groups: 2 }];
                for r in estimate_many(&pop, &rules, n, m, 2000, 9).map_err(|e| e.to_string())? {
                    for c in result_checks(&spec, &pop, &r, Z) {
                        ensure(c.passed, c.line())?;
                    }
                }
                bounds += 1;
            }
        }
    }
    let order = ["full_training", "global", "group_wise_p4", "target_only"];
    let mut wins = vec![];
    let mut seqs = vec![];
    for mu in REGIME_MISMATCHES {
        let pop = regime_population(mu).validate().map_err(|e| e.to_string())?;
        let table = sweep_m(&pop, &regime_rules(), REGIME_N, &REGIME_MS, 2000, 9).map_err(|e| e.to_string())?;
        let tr = table.transitions();
        let pos: Vec<usize> = tr.iter().map(|w| order.iter().position(|o| o == w).unwrap_or(usize::MAX)).collect();
        ensure(
            pos.windows(2).all(|p| p[0] < p[1]) && tr.last().map(String::as_str) == Some("target_only"),
            format!("μ={mu}: ordering {tr:?}"),
        )?;
        if mu == 0.0 {
            ensure(tr.len() == 4, format!("μ=0: expected all four regimes, got {tr:?}"))?;
        }
        wins.push(table.wins("group_wise_p4"));
        seqs.push(format!("μ={mu}:{}", tr.len()));
    }
    ensure(
        wins.windows(2).all(|w| w[0] <= w[1]) && wins[0] < wins[wins.len() - 1],
        format!("group-wise wins by μ {wins:?} not expanding"),
    )?;
    within(
        start.elapsed(),
        300,
        format!("{identities} MSE identities at 1e5 trials; {bounds} bound specs; orderings monotone, group-wise wins {wins:?}"),
    )
}

/// Configuration for the end-to-end comparison.
fn synthetic_config(seed: u64, step: serde_json::Value) -> RunConfig {
    let mut v: serde_json::Value =
        serde_json::from_str(include_str!("../../../fixtures/train_synthetic.json")).expect("fixture parses");
    v["seed"] = seed.into();
    v["step"] = step;
    serde_json::from_value(v).expect("valid config")
}

// 10. Layer-Wise ≤ Global ≤ Full-Training on the synthetic mismatched task.
fn end_to_end() -> Outcome {
    let start = Instant::now();
    let base: serde_json::Value =
        serde_json::from_str(include_str!("../../../fixtures/train_synthetic.json")).expect("fixture parses");
    let (eta, rule) = (base["step"]["eta"].clone(), base["step"]["rule"].clone());
    let variants = [
        ("full_training", serde_json::json!({"eta": eta, "mode": "full_training"})),
        ("global", serde_json::json!({"eta": eta, "mode": "subset", "rule": rule, "partition": "global"})),
        ("layer_wise", serde_json::json!({"eta": eta, "mode": "subset", "rule": rule, "partition": "layerwise"})),
    ];
    let mut med = vec![];
    for (name, step) in &variants {
        let losses = (0..5u64)
            .map(|s| {
                Ok(train::run(&synthetic_config(s, step.clone())).map_err(|e| e.to_string())?.summary.final_target_loss)
            })
            .collect::<Result<Vec<_>, String>>()?;
        med.push((*name, median(losses)));
    }
    let detail = med.iter().map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ");
    ensure(med[2].1 <= med[1].1 && med[1].1 <= med[0].1, format!("median final target loss: {detail}"))?;
    within(start.elapsed(), 600, format!("median final target loss: {detail}"))
}

// 11. A dominant layer's ranking tracks the global one.
fn case_study_mechanism() -> Outcome {
    let base: RunConfig =
        serde_json::from_str(include_str!("../../../fixtures/case_study.json")).expect("fixture parses");
    let scaled = base.layer_scales[0].layer;
    let mut lines = vec![];
    for seed in 1..=3u64 {
        let cfg = RunConfig { seed, ..base.clone() };
        let cs = case_study::run(&cfg).map_err(|e| e.to_string())?;
        let dom = cs.dominant_layer();
        ensure(dom == scaled, format!("seed {seed}: dominant layer {dom}, scaled layer {scaled}"))?;
        let rho: Vec<f64> = cs.aggregate.iter().map(|a| a.spearman.unwrap_or(f64::NEG_INFINITY)).collect();
        let top = rho[dom];
        ensure(rho.iter().all(|&r| r <= top), format!("seed {seed}: ρ {rho:?}, dominant layer {dom} not maximal"))?;
        let low = rho.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(top - low >= 0.3, format!("seed {seed}: ρ {rho:?}, gap {:.3} < 0.3", top - low))?;
        lines.push(format!("seed {seed} ρ_dom {top:.3} min {low:.3}"));
    }
    Ok(format!("scaled layer {scaled} dominates; {}", lines.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("scoring_equivalence", scoring_equivalence),
        ("cost_exactness", cost_exactness),
        ("crossovers", crossovers),
        ("update_equivalences", update_equivalences),
        ("projection_optimality", projection_optimality),
        ("gradient_correctness", gradient_correctness),
        ("ledger", ledger),
        ("compression", compression),
        ("theory", theory),
        ("end_to_end_direction", end_to_end),
        ("case_study_mechanism", case_study_mechanism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("PASS {:02} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:02} {name}: {d}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Parameter partitions, selection rules and exact subset solvers.
//!
//! All subset objectives are evaluated through a Gram matrix:
//!
//! ‖(1/k)Σ_{i∈S} g_i − ĝ‖² = (1/k²)Σ_{i,j∈S} K_ij − (2/k)Σ_{i∈S} s_i + ‖ĝ‖²
//!
//! with K_ij = ⟨g_i, g_j⟩ and s_i = ⟨g_i, ĝ⟩, so solvers never touch the
//! gradients themselves.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open coordinate range inside one layer's flattened parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    groups: Vec<Vec<Span>>,
    layer_sizes: Vec<usize>,
}

impl Partition {
    /// Validates disjointness and full coverage of every layer.
    pub fn from_spans(layer_sizes: &[usize], groups: Vec<Vec<Span>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("partition has no groups".into()));
        }
        for (l, &size) in layer_sizes.iter().enumerate() {
            let mut spans: Vec<(usize, usize)> =
                groups.iter().flatten().filter(|s| s.layer == l).map(|s| (s.start, s.end)).collect();
            spans.sort_unstable();
            let mut next = 0;
            for (s, e) in spans {
                if s != next || e <= s {
                    return Err(Error::Config(format!("layer {l}: spans overlap or leave a gap at {next}")));
                }
                next = e;
            }
            if next != size {
                return Err(Error::Config(format!("layer {l}: spans cover {next} of {size} coordinates")));
            }
        }
        if let Some(s) = groups.iter().flatten().find(|s| s.layer >= layer_sizes.len()) {
            return Err(Error::Config(format!("span refers to missing layer {}", s.layer)));
        }
        if groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("empty parameter group".into()));
        }
        Ok(Self { groups, layer_sizes: layer_sizes.to_vec() })
    }

    pub fn global(layer_sizes: &[usize]) -> Self {
        Self::blocks(layer_sizes, layer_sizes.len().max(1))
    }

    pub fn layerwise(layer_sizes: &[usize]) -> Self {
        Self::blocks(layer_sizes, 1)
    }

    /// Consecutive blocks of `c` layers, counted from the first layer.
    pub fn blocks(layer_sizes: &[usize], c: usize) -> Self {
        let c = c.max(1);
        let groups = (0..layer_sizes.len())
            .step_by(c)
            .map(|s| {
                (s..(s + c).min(layer_sizes.len())).map(|l| Span { layer: l, start: 0, end: layer_sizes[l] }).collect()
            })
            .collect();
        Self { groups, layer_sizes: layer_sizes.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[Vec<Span>] {
        &self.groups
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Sorted distinct layers intersecting group `p`.
    pub fn layers_of(&self, p: usize) -> Vec<usize> {
        let mut ls: Vec<usize> = self.groups[p].iter().map(|s| s.layer).collect();
        ls.sort_unstable();
        ls.dedup();
        ls
    }

    /// Groups intersecting layer `l`, in group order.
    pub fn groups_of_layer(&self, l: usize) -> Vec<usize> {
        (0..self.groups.len()).filter(|&p| self.groups[p].iter().any(|s| s.layer == l)).collect()
    }

    /// Ranges of group `p` inside layer `l`, sorted.
    pub fn ranges(&self, p: usize, l: usize) -> Vec<Range<usize>> {
        let mut r: Vec<Range<usize>> = self.groups[p].iter().filter(|s| s.layer == l).map(Span::range).collect();
        r.sort_by_key(|r| r.start);
        r
    }

    /// True when layer `l` belongs entirely to one group.
    pub fn layer_is_whole(&self, l: usize) -> bool {
        self.groups_of_layer(l).len() == 1
    }

    pub fn is_layer_aligned(&self) -> bool {
        (0..self.layer_sizes.len()).all(|l| self.layer_is_whole(l))
    }

    pub fn is_layerwise(&self) -> bool {
        self.is_layer_aligned() && (0..self.groups.len()).all(|p| self.layers_of(p).len() == 1)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Use the full training batch for the group.
    #[default]
    FullBatch,
    /// Leave the group's parameters unchanged.
    SkipGroup,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyDivisor {
    /// Average over the current prefix S∪{i}.
    #[default]
    Running,
    /// Always divide by the final cardinality k.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RuleKind {
    Topk {
        k: usize,
    },
    Threshold {
        tau: f64,
    },
    Greedy {
        k: usize,
        #[serde(default)]
        divisor: GreedyDivisor,
    },
    Bruteforce {
        k: usize,
        #[serde(default = "default_cap")]
        cap: u64,
    },
}

pub fn default_cap() -> u64 {
    1_000_000
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Topk { .. } => "topk",
            RuleKind::Threshold { .. } => "threshold",
            RuleKind::Greedy { .. } => "greedy",
            RuleKind::Bruteforce { .. } => "bruteforce",
        }
    }

    pub fn fixed_k(&self) -> Option<usize> {
        match *self {
            RuleKind::Topk { k } | RuleKind::Greedy { k, .. } | RuleKind::Bruteforce { k, .. } => Some(k),
            RuleKind::Threshold { .. } => None,
        }
    }

    /// Rules that need the Gram matrix of per-sample gradients.
    pub fn needs_gram(&self) -> bool {
        matches!(self, RuleKind::Greedy { .. } | RuleKind::Bruteforce { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    #[serde(flatten)]
    pub kind: RuleKind,
    #[serde(default)]
    pub empty_policy: EmptyPolicy,
}

impl SelectionRule {
    pub fn new(kind: RuleKind) -> Self {
        Self { kind, empty_policy: EmptyPolicy::default() }
    }

    pub fn topk(k: usize) -> Self {
        Self::new(RuleKind::Topk { k })
    }

    pub fn threshold(tau: f64) -> Self {
        Self::new(RuleKind::Threshold { tau })
    }

    pub fn bruteforce(k: usize) -> Self {
        Self::new(RuleKind::Bruteforce { k, cap: default_cap() })
    }

    pub fn greedy(k: usize) -> Self {
        Self::new(RuleKind::Greedy { k, divisor: GreedyDivisor::Running })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TargetOnly,
    FullTraining,
    Subset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSetSpec {
    pub mode: Mode,
    pub rule: SelectionRule,
    pub partition: Partition,
}

/// Gram-form access to per-sample gradients of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetObjective {
    /// Row-major n×n Gram matrix K_ij = ⟨g_i, g_j⟩.
    pub gram: Vec<f64>,
    /// s_i = ⟨g_i, ĝ⟩.
    pub scores: Vec<f64>,
    /// ‖ĝ‖².
    pub target_sq: f64,
}

impl SubsetObjective {
    /// Builds the objective from explicit vectors.
    pub fn from_vectors(grads: &[Vec<f64>], target: &[f64]) -> Self {
        let n = grads.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = crate::tensor::dot(&grads[i], &grads[j]);
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        Self {
            gram,
            scores: grads.iter().map(|g| crate::tensor::dot(g, target)).collect(),
            target_sq: crate::tensor::dot(target, target),
        }
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    /// ‖(1/divisor)Σ_{i∈S} g_i − ĝ‖².
    pub fn value(&self, set: &[usize], divisor: usize) -> f64 {
        let n = self.n();
        let k = divisor as f64;
        let mut quad = 0.0;
        for &i in set {
            for &j in set {
                quad += self.gram[i * n + j];
            }
        }
        let lin: f64 = set.iter().map(|&i| self.scores[i]).sum();
        quad / (k * k) - 2.0 * lin / k + self.target_sq
    }

    /// Adds another group's terms (coordinates disjoint from this one's).
    pub fn add(&mut self, other: &SubsetObjective) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            *a += b;
        }
        self.target_sq += other.target_sq;
    }

    pub fn zeros(n: usize) -> Self {
        Self { gram: vec![0.0; n * n], scores: vec![0.0; n], target_sq: 0.0 }
    }
}

/// k largest scores, lowest index first among ties; returned ascending.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Selection(format!("k={k} exceeds n={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// {i : s_i ≥ τ}, ascending. May be empty.
pub fn select_threshold(scores: &[f64], tau: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] >= tau).collect()
}

/// k greedy steps, each adding the sample whose inclusion gives the smallest
/// objective; lowest index wins ties. Returned ascending.
pub fn select_greedy(obj: &SubsetObjective, k: usize, divisor: GreedyDivisor) -> Result<Vec<usize>> {
    let n = obj.n();
    if k > n {
        return Err(Error::Selection(format!("k={k} exceeds n={n}")));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for step in 0..k {
        let div = match divisor {
            GreedyDivisor::Running => step + 1,
            GreedyDivisor::Fixed => k,
        };
        let mut best: Option<(f64, usize)> = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let mut trial = chosen.clone();
            trial.push(i);
            let v = obj.value(&trial, div);
            if best.map_or(true, |(b, _)| v < b) {
                best = Some((v, i));
            }
        }
        chosen.push(best.expect("candidate exists").1);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// ln C(n, k) via log-gamma-free summation.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n.saturating_sub(k));
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// Exact minimizer over all k-subsets in lexicographic order; the first
/// minimum found wins, which is the lexicographically smallest subset.
pub fn solve_bruteforce(obj: &SubsetObjective, k: usize, cap: u64) -> Result<(Vec<usize>, f64)> {
    let n = obj.n();
    if k == 0 || k > n {
        return Err(Error::Selection(format!("k={k} invalid for n={n}")));
    }
    let count = ln_binomial(n, k).exp();
    if count > cap as f64 + 0.5 {
        return Err(Error::CapExceeded { n, k, count, cap });
    }
    let mut comb: Vec<usize> = (0..k).collect();
    let mut best = (comb.clone(), obj.value(&comb, k));
    loop {
        // Advance to the next combination in lexicographic order.
        let mut i = k;
        while i > 0 && comb[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        comb[i - 1] += 1;
        for j in i..k {
            comb[j] = comb[j - 1] + 1;
        }
        let v = obj.value(&comb, k);
        if v < best.1 {
            best = (comb.clone(), v);
        }
    }
    Ok(best)
}

/// Outcome of one group's solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSelection {
    /// Selected training indices, ascending.
    pub indices: Vec<usize>,
    /// Divisor used when averaging; 0 when the group is skipped.
    pub divisor: usize,
    /// The rule selected nothing and the empty policy applied.
    pub fallback: bool,
    pub objective: Option<f64>,
}

/// Per-group solver input.
#[derive(Clone, Debug, Default)]
pub struct GroupInput {
    pub scores: Vec<f64>,
    pub objective: Option<SubsetObjective>,
}

/// Solves one group's subset problem.
pub fn solve_group(rule: &SelectionRule, input: &GroupInput) -> Result<GroupSelection> {
    let n = input.scores.len();
    let need_obj = || {
        input.objective.as_ref().ok_or_else(|| Error::Selection(format!("{} needs gradient access", rule.kind.name())))
    };
    let (indices, objective) = match rule.kind {
        RuleKind::Topk { k } => (select_topk(&input.scores, k)?, None),
        RuleKind::Threshold { tau } => (select_threshold(&input.scores, tau), None),
        RuleKind::Greedy { k, divisor } => {
            let obj = need_obj()?;
            let s = select_greedy(obj, k, divisor)?;
            let v = obj.value(&s, k);
            (s, Some(v))
        }
        RuleKind::Bruteforce { k, cap } => {
            let (s, v) = solve_bruteforce(need_obj()?, k, cap)?;
            (s, Some(v))
        }
    };
    if indices.is_empty() {
        return Ok(match rule.empty_policy {
            EmptyPolicy::FullBatch => {
                GroupSelection { indices: (0..n).collect(), divisor: n, fallback: true, objective: None }
            }
            EmptyPolicy::SkipGroup => GroupSelection { indices: vec![], divisor: 0, fallback: true, objective: None },
        });
    }
    let divisor = rule.kind.fixed_k().unwrap_or(indices.len());
    let objective = objective.or_else(|| input.objective.as_ref().map(|o| o.value(&indices, divisor)));
    Ok(GroupSelection { indices, divisor, fallback: false, objective })
}

/// Independent per-group solves, returned in group order.
pub fn solve_groupwise(spec: &FeasibleSetSpec, inputs: &[GroupInput]) -> Result<Vec<GroupSelection>> {
    if inputs.len() != spec.partition.len() {
        return Err(Error::Config(format!(
            "{} group inputs for a partition of {} groups",
            inputs.len(),
            spec.partition.len()
        )));
    }
    inputs
        .iter()
        .map(|inp| match spec.mode {
            Mode::Subset => solve_group(&spec.rule, inp),
            Mode::FullTraining | Mode::TargetOnly => {
                let n = inp.scores.len();
                Ok(GroupSelection { indices: (0..n).collect(), divisor: n, fallback: false, objective: None })
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_instance(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut r = Rng::new(seed);
        let g = (0..n).map(|_| (0..d).map(|_| r.normal()).collect()).collect();
        let t = (0..d).map(|_| r.normal()).collect();
        (g, t)
    }

    fn direct_objective(g: &[Vec<f64>], t: &[f64], set: &[usize], div: usize) -> f64 {
        (0..t.len())
            .map(|q| {
                let m: f64 = set.iter().map(|&i| g[i][q]).sum::<f64>() / div as f64;
                (m - t[q]).powi(2)
            })
            .sum()
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[3., 1., 2.], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&[3., 1., 2.], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_topk(&[1., 1., 1.], 2).unwrap(), vec![0, 1]);
        assert!(select_topk(&[1.], 2).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&[-1., 2., 0.], 0.0), vec![1, 2]);
        assert_eq!(select_threshold(&[-1., 2., 0.], f64::NEG_INFINITY), vec![0, 1, 2]);
        let scores = [0.3, -0.2, -1e-9, 0.0, 4.0];
        let kept = select_threshold(&scores, 0.0);
        assert_eq!(kept, vec![0, 3, 4]);
    }

    #[test]
    fn greedy_k1_matches_bruteforce() {
        let (g, t) = random_instance(4, 6, 5);
        let obj = SubsetObjective::from_vectors(&g, &t);
        let gr = select_greedy(&obj, 1, GreedyDivisor::Running).unwrap();
        let (bf, _) = solve_bruteforce(&obj, 1, default_cap()).unwrap();
        assert_eq!(gr, bf);
    }

    #[test]
    fn greedy_picks_identical_aligned_pair() {
        let t = vec![1.0, 2.0, -1.0];
        let g = vec![t.clone(), vec![5.0, -3.0, 0.0], t.clone(), vec![-2.0, 0.5, 4.0]];
        let obj = SubsetObjective::from_vectors(&g, &t);
        let gr = select_greedy(&obj, 2, GreedyDivisor::Running).unwrap();
        let (bf, v) = solve_bruteforce(&obj, 2, default_cap()).unwrap();
        assert_eq!(gr, vec![0, 2]);
        assert_eq!(gr, bf);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn greedy_gap_is_nonnegative() {
        for seed in 0..40 {
            let (g, t) = random_instance(seed, 9, 4);
            let obj = SubsetObjective::from_vectors(&g, &t);
            for k in 1..=5 {
                let gr = select_greedy(&obj, k, GreedyDivisor::Running).unwrap();
                let (_, best) = solve_bruteforce(&obj, k, default_cap()).unwrap();
                assert!(obj.value(&gr, k) >= best - 1e-12);
                let fixed = select_greedy(&obj, k, GreedyDivisor::Fixed).unwrap();
                assert!(obj.value(&fixed, k) >= best - 1e-12);
            }
        }
    }

    #[test]
    fn bruteforce_examples() {
        let (g, t) = random_instance(1, 5, 3);
        let obj = SubsetObjective::from_vectors(&g, &t);
        let (s, v) = solve_bruteforce(&obj, 5, default_cap()).unwrap();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        assert!((v - direct_objective(&g, &t, &s, 5)).abs() < 1e-12);

        let t = vec![1.0, -0.5];
        let eps = [0.3, 0.7];
        let g = vec![
            vec![t[0] + eps[0], t[1] + eps[1]],
            vec![t[0] - eps[0], t[1] - eps[1]],
            vec![10.0 * t[0], 10.0 * t[1]],
            vec![10.0 * t[0], 10.0 * t[1]],
        ];
        let (s, v) = solve_bruteforce(&SubsetObjective::from_vectors(&g, &t), 2, default_cap()).unwrap();
        assert_eq!(s, vec![0, 1]);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn bruteforce_beats_topk() {
        for seed in 0..30 {
            let (g, t) = random_instance(100 + seed, 8, 6);
            let obj = SubsetObjective::from_vectors(&g, &t);
            let (_, best) = solve_bruteforce(&obj, 4, default_cap()).unwrap();
            let tk = select_topk(&obj.scores, 4).unwrap();
            assert!(best <= obj.value(&tk, 4) + 1e-12);
        }
    }

    #[test]
    fn bruteforce_cap() {
        let obj = SubsetObjective::zeros(30);
        assert!(matches!(solve_bruteforce(&obj, 15, 1000), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn bruteforce_tie_is_lexicographic() {
        let obj = SubsetObjective::zeros(5);
        assert_eq!(solve_bruteforce(&obj, 3, default_cap()).unwrap().0, vec![0, 1, 2]);
    }

    #[test]
    fn partition_constructors() {
        let sizes = [4, 6, 2, 3];
        assert_eq!(Partition::global(&sizes).len(), 1);
        assert_eq!(Partition::layerwise(&sizes).len(), 4);
        let b = Partition::blocks(&sizes, 3);
        assert_eq!(b.len(), 2);
        assert_eq!(b.layers_of(1), vec![3]);
        assert!(Partition::layerwise(&sizes).is_layerwise());
        assert!(!Partition::global(&sizes).is_layerwise());
        let split = Partition::from_spans(
            &[4, 6],
            vec![
                vec![Span { layer: 0, start: 0, end: 4 }, Span { layer: 1, start: 0, end: 3 }],
                vec![Span { layer: 1, start: 3, end: 6 }],
            ],
        )
        .unwrap();
        assert!(!split.is_layer_aligned());
        assert_eq!(split.groups_of_layer(1), vec![0, 1]);
        let bad = Partition::from_spans(&[4], vec![vec![Span { layer: 0, start: 0, end: 3 }]]);
        assert!(bad.is_err());
        let overlap = Partition::from_spans(
            &[4],
            vec![vec![Span { layer: 0, start: 0, end: 3 }], vec![Span { layer: 0, start: 2, end: 4 }]],
        );
        assert!(overlap.is_err());
    }

    #[test]
    fn empty_threshold_policies() {
        let inp = GroupInput { scores: vec![-1.0, -2.0, -3.0], objective: None };
        let mut rule = SelectionRule::threshold(0.0);
        let s = solve_group(&rule, &inp).unwrap();
        assert_eq!((s.indices.clone(), s.divisor, s.fallback), (vec![0, 1, 2], 3, true));
        rule.empty_policy = EmptyPolicy::SkipGroup;
        let s = solve_group(&rule, &inp).unwrap();
        assert_eq!((s.indices.len(), s.divisor), (0, 0));
    }

    fn blocks_objectives(g: &[Vec<f64>], t: &[f64], bounds: &[usize]) -> Vec<SubsetObjective> {
        bounds
            .windows(2)
            .map(|w| {
                let gg: Vec<Vec<f64>> = g.iter().map(|v| v[w[0]..w[1]].to_vec()).collect();
                SubsetObjective::from_vectors(&gg, &t[w[0]..w[1]])
            })
            .collect()
    }

    fn groupwise_optimum(g: &[Vec<f64>], t: &[f64], bounds: &[usize], k: usize) -> f64 {
        blocks_objectives(g, t, bounds).iter().map(|o| solve_bruteforce(o, k, default_cap()).unwrap().1).sum()
    }

    proptest! {
        #[test]
        fn prop_objective_decomposition(seed in 0u64..10_000, n in 2usize..8, d in 1usize..6) {
            let (g, t) = random_instance(seed, n, d);
            let obj = SubsetObjective::from_vectors(&g, &t);
            let k = 1 + (seed as usize % n);
            let set: Vec<usize> = (0..k).collect();
            let direct = direct_objective(&g, &t, &set, k);
            prop_assert!((obj.value(&set, k) - direct).abs() <= 1e-10 * (1.0 + direct.abs()));
            // Alignment term: 2⟨g_S, ĝ⟩ = (2/k)Σ s_i.
            let gs: Vec<f64> = (0..d).map(|q| set.iter().map(|&i| g[i][q]).sum::<f64>() / k as f64).collect();
            let align = 2.0 * crate::tensor::dot(&gs, &t);
            let from_scores = 2.0 / k as f64 * set.iter().map(|&i| obj.scores[i]).sum::<f64>();
            prop_assert!((align - from_scores).abs() <= 1e-12 * (1.0 + align.abs()));
        }

        #[test]
        fn prop_groupwise_inclusion_and_refinement(seed in 0u64..10_000, k in 1usize..5) {
            let (g, t) = random_instance(seed, 7, 6);
            let global = groupwise_optimum(&g, &t, &[0, 6], k);
            let two = groupwise_optimum(&g, &t, &[0, 3, 6], k);
            let three = groupwise_optimum(&g, &t, &[0, 1, 3, 6], k);
            prop_assert!(two <= global + 1e-10);
            prop_assert!(three <= two + 1e-10);
            // With k = n the subset set collapses to the full batch.
            let full = SubsetObjective::from_vectors(&g, &t).value(&(0..7).collect::<Vec<_>>(), 7);
            prop_assert!((groupwise_optimum(&g, &t, &[0, 6], 7) - full).abs() <= 1e-10 * (1.0 + full));
        }

        #[test]
        fn prop_full_cardinality_collapses(scores in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let n = scores.len();
            let all: Vec<usize> = (0..n).collect();
            prop_assert_eq!(select_topk(&scores, n).unwrap(), all.clone());
            prop_assert_eq!(select_threshold(&scores, f64::NEG_INFINITY), all);
        }

        #[test]
        fn prop_rules_are_deterministic(seed in 0u64..1000) {
            let (g, t) = random_instance(seed, 6, 3);
            let obj = SubsetObjective::from_vectors(&g, &t);
            prop_assert_eq!(select_greedy(&obj, 3, GreedyDivisor::Running).unwrap(),
                            select_greedy(&obj, 3, GreedyDivisor::Running).unwrap());
            prop_assert_eq!(solve_bruteforce(&obj, 3, 100).unwrap().0, solve_bruteforce(&obj, 3, 100).unwrap().0);
        }
    }

    #[test]
    fn groupwise_p1_equals_global() {
        let (g, t) = random_instance(8, 6, 4);
        let obj = SubsetObjective::from_vectors(&g, &t);
        let spec = FeasibleSetSpec {
            mode: Mode::Subset,
            rule: SelectionRule::bruteforce(3),
            partition: Partition::global(&[4]),
        };
        let inp = GroupInput { scores: obj.scores.clone(), objective: Some(obj.clone()) };
        let got = solve_groupwise(&spec, &[inp]).unwrap();
        assert_eq!(got[0].indices, solve_bruteforce(&obj, 3, default_cap()).unwrap().0);
    }
}

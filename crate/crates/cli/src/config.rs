//! Run configuration: JSON schema, command-line overrides and validation.
//!
//! A run config names the model, the synthetic task, the step settings and
//! the step budget. Partitions are given by shape (`"global"`,
//! `"layerwise"`, `{"layer_blocks": {"layers": c}}`,
//! `{"split": {"per_layer": c}}`) or as explicit spans.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use datareg::compression::ProjectorSpec;
use datareg::net::{Model, ModelSpec};
use datareg::rng::Rng;
use datareg::scheduler::SegmentPlan;
use datareg::scoring::Method;
use datareg::selection::{FeasibleSetSpec, Mode, Partition, SelectionRule, Span};
use datareg::tensor::Precision;
use datareg::updates::{Optimizer, Schedule, StepConfig};

use crate::task::{Task, TaskSpec};
use crate::{CliError, Result};

const TAG_MODEL: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSpec {
    Global,
    Layerwise,
    /// Consecutive runs of `layers` layers.
    LayerBlocks {
        layers: usize,
    },
    /// `per_layer` near-equal coordinate ranges in every layer, each its own
    /// group.
    Split {
        per_layer: usize,
    },
    Spans {
        groups: Vec<Vec<Span>>,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Global
    }
}

impl PartitionSpec {
    pub fn build(&self, layer_sizes: &[usize]) -> Result<Partition> {
        Ok(match self {
            PartitionSpec::Global => Partition::global(layer_sizes),
            PartitionSpec::Layerwise => Partition::layerwise(layer_sizes),
            PartitionSpec::LayerBlocks { layers } => {
                if *layers == 0 {
                    return Err(CliError::Config("layer blocks must hold at least one layer".into()));
                }
                Partition::blocks(layer_sizes, *layers)
            }
            PartitionSpec::Split { per_layer } => {
                let c = *per_layer;
                if c == 0 || layer_sizes.iter().any(|&s| s < c) {
                    return Err(CliError::Config(format!("cannot split every layer into {c} ranges")));
                }
                let groups = layer_sizes
                    .iter()
                    .enumerate()
                    .flat_map(|(l, &size)| {
                        (0..c).map(move |j| vec![Span { layer: l, start: j * size / c, end: (j + 1) * size / c }])
                    })
                    .collect();
                Partition::from_spans(layer_sizes, groups)?
            }
            PartitionSpec::Spans { groups } => Partition::from_spans(layer_sizes, groups.clone())?,
        })
    }
}

/// Step settings in config form; see [`StepConfig`] for the semantics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSettings {
    pub eta: f64,
    pub mode: Mode,
    /// Required in subset mode.
    #[serde(default)]
    pub rule: Option<SelectionRule>,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub score_projector: Option<ProjectorSpec>,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub segments: Option<SegmentPlan>,
    #[serde(default)]
    pub precision: Precision,
}

impl StepSettings {
    pub fn build(&self, model: &Model, n: usize) -> Result<StepConfig> {
        let rule = match (self.mode, self.rule) {
            (Mode::Subset, None) => return Err(CliError::Config("subset mode needs a selection rule".into())),
            (_, Some(r)) => r,
            (_, None) => SelectionRule::topk(n),
        };
        let partition = self.partition.build(&model.spec.layer_sizes())?;
        let mut cfg = StepConfig::new(self.eta, FeasibleSetSpec { mode: self.mode, rule, partition });
        cfg.method = self.method;
        cfg.score_projector = self.score_projector;
        cfg.optimizer = self.optimizer;
        cfg.schedule = self.schedule;
        cfg.segments = self.segments.clone();
        cfg.precision = self.precision;
        cfg.validate(model)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScale {
    pub layer: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub step: StepSettings,
    pub steps: usize,
    /// Evaluate the held-out target loss every this many steps.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Multipliers applied to layer weights after initialization.
    #[serde(default)]
    pub layer_scales: Vec<LayerScale>,
    /// Not part of the hashed configuration.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}

/// A validated configuration with its model, task and step config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub model: Model,
    pub task: Task,
    pub step: StepConfig,
}

impl RunConfig {
    pub fn prepare(&self) -> Result<Prepared> {
        self.model.validate()?;
        if self.steps == 0 || self.eval_every == 0 {
            return Err(CliError::Config("steps and eval_every must be positive".into()));
        }
        if self.model.tokens == 0 {
            return Err(CliError::Config("tokens per sample must be positive".into()));
        }
        let task = Task::new(&self.task, &self.model, self.seed)?;
        let mut model = Model::init(self.model.clone(), &mut Rng::keyed(self.seed, &[TAG_MODEL]))?;
        for s in &self.layer_scales {
            if s.layer >= model.len() || !s.factor.is_finite() {
                return Err(CliError::Config(format!("layer scale for layer {} is invalid", s.layer)));
            }
            model.scale_layer(s.layer, s.factor);
        }
        let step = self.step.build(&model, self.task.n)?;
        Ok(Prepared { model, task, step })
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub precision: Option<Precision>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(p) = self.precision {
            cfg.step.precision = p;
        }
    }
}

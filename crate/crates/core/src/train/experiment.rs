//! Experiment presets: named matrices of training configurations with a
//! summary table.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::SceneKind;

use super::config::{ContinuousVariant, GaugeKind, LogitKind, RegKind, TrainConfig};
use super::data::Dataset;
use super::metrics::evaluate;
use super::run::{train_on, TrainOutput};

/// Seeds used when a preset is run without an explicit seed list.
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    CollapseContinuous,
    CollapseDiscrete,
    RegCompare,
    PredefinedVsLearned,
    TopkSweep,
    WeightSweep,
    InfoinvGain,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::CollapseContinuous,
        Preset::CollapseDiscrete,
        Preset::RegCompare,
        Preset::PredefinedVsLearned,
        Preset::TopkSweep,
        Preset::WeightSweep,
        Preset::InfoinvGain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::CollapseContinuous => "collapse-continuous",
            Preset::CollapseDiscrete => "collapse-discrete",
            Preset::RegCompare => "reg-compare",
            Preset::PredefinedVsLearned => "predefined-vs-learned",
            Preset::TopkSweep => "topk-sweep",
            Preset::WeightSweep => "weight-sweep",
            Preset::InfoinvGain => "infoinv-gain",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|p| p.name()).collect()
    }

    /// Labelled configurations for one seed.
    pub fn variants(self, seed: u64) -> Vec<(String, TrainConfig)> {
        let v = |label: &str, cfg: TrainConfig| (label.to_string(), cfg);
        match self {
            Preset::CollapseContinuous => vec![
                v("none", continuous_base(seed)),
                v("inforeg", continuous_inforeg(seed)),
            ],
            Preset::CollapseDiscrete => vec![
                v("none", discrete_base(seed)),
                v("inforeg", discrete_inforeg(seed)),
            ],
            Preset::RegCompare => {
                let mut structural = continuous_base(seed);
                structural.continuous.variant = ContinuousVariant::Offset;
                vec![
                    v("none", continuous_base(seed)),
                    v("structural", with_reg(structural, RegKind::Structural)),
                    v("cycle", with_reg(continuous_base(seed), RegKind::Cycle)),
                    v("inforeg", continuous_inforeg(seed)),
                ]
            }
            Preset::PredefinedVsLearned => {
                let mut ortho = continuous_base(seed);
                ortho.gauge = GaugeKind::Orthogonal;
                vec![
                    v("orthogonal", ortho),
                    v("learned+inforeg", continuous_inforeg(seed)),
                ]
            }
            Preset::TopkSweep => [1, 2, 4, 8]
                .iter()
                .map(|&k| {
                    let mut cfg = discrete_base(seed);
                    cfg.discrete.k = k;
                    (format!("k={k}"), cfg)
                })
                .collect(),
            Preset::WeightSweep => {
                let mut out = Vec::new();
                for gamma in [0.0, 0.1, 1.0, 10.0] {
                    let mut cfg = discrete_inforeg(seed);
                    cfg.regularizer.inforeg.gamma = gamma;
                    cfg.regularizer.inforeg.epsilon = 0.1;
                    out.push((format!("gamma={gamma} eps=0.1"), cfg));
                }
                for eps in [0.01, 1.0, 10.0] {
                    let mut cfg = discrete_inforeg(seed);
                    cfg.regularizer.inforeg.gamma = 1.0;
                    cfg.regularizer.inforeg.epsilon = eps;
                    out.push((format!("gamma=1 eps={eps}"), cfg));
                }
                out
            }
            Preset::InfoinvGain => {
                let mut infoinv = grid_base(seed);
                infoinv.gauge = GaugeKind::Infoinv;
                vec![v("grid", grid_base(seed)), v("grid+infoinv", infoinv)]
            }
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}; valid presets: {}", Self::names().join(", "))))
    }
}

fn with_reg(mut cfg: TrainConfig, kind: RegKind) -> TrainConfig {
    cfg.regularizer.kind = kind;
    cfg
}

/// Shared desk-scale scene and optimisation settings.
fn desk(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.scene.kind = SceneKind::Sphere;
    cfg.scene.seed = seed;
    cfg.scene.width = 32;
    cfg.scene.height = 32;
    cfg.scene.gt_samples = 64;
    cfg.rays_per_batch = 128;
    cfg.samples_per_ray = 24;
    cfg.eval_samples = 32;
    cfg.log_every = 50;
    cfg
}

/// Texture-style model with a learned continuous gauge, no regularizer.
pub fn continuous_base(seed: u64) -> TrainConfig {
    let mut cfg = desk(seed);
    cfg.gauge = GaugeKind::Continuous;
    cfg.field.hidden = vec![64, 64];
    cfg.continuous.hidden = vec![64, 64];
    cfg.continuous.out_scale = 0.1;
    cfg.steps = 600;
    cfg.lr = 5e-3;
    cfg
}

pub fn continuous_inforeg(seed: u64) -> TrainConfig {
    let mut cfg = with_reg(continuous_base(seed), RegKind::Inforeg);
    cfg.regularizer.inforeg.gamma = 3.0;
    cfg
}

/// Codebook model with MLP logits, no regularizer.
pub fn discrete_base(seed: u64) -> TrainConfig {
    let mut cfg = desk(seed);
    cfg.gauge = GaugeKind::Discrete;
    cfg.discrete.resolutions = vec![16];
    cfg.discrete.entries = 64;
    cfg.discrete.dim = 16;
    cfg.discrete.logits = LogitKind::Mlp;
    cfg.discrete.logit_hidden = vec![64];
    cfg.discrete.logit_frequencies = 2;
    cfg.field.head_hidden = vec![64];
    cfg.steps = 500;
    cfg.lr = 1e-2;
    cfg
}

pub fn discrete_inforeg(seed: u64) -> TrainConfig {
    let mut cfg = with_reg(discrete_base(seed), RegKind::Inforeg);
    cfg.regularizer.inforeg.epsilon = 1.0;
    cfg
}

/// Plain feature-grid field; switch `gauge` to `Infoinv` for the encoded variant.
pub fn grid_base(seed: u64) -> TrainConfig {
    let mut cfg = desk(seed);
    cfg.gauge = GaugeKind::Grid;
    cfg.grid.resolution = 8;
    cfg.grid.channels = 36;
    cfg.grid.frequencies = 6;
    cfg.steps = 400;
    cfg.lr = 5e-3;
    cfg.cosine = true;
    cfg.eval_every = 50;
    cfg
}

/// Outcome of one configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    /// Mean held-out PSNR of the final model.
    pub psnr: f64,
    pub occupancy: Option<f64>,
    pub utilization: Option<f64>,
    /// Per-step total loss.
    pub losses: Vec<f64>,
    /// `(step, held-out PSNR)` at the evaluation cadence.
    pub heldout: Vec<(usize, f64)>,
    pub metrics_csv: String,
}

impl RunSummary {
    /// First evaluated step whose held-out PSNR reaches `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.heldout.iter().find(|(_, p)| *p >= target).map(|&(s, _)| s)
    }
}

/// Trains one configuration and summarises it.
pub fn run_config(label: &str, cfg: &TrainConfig) -> Result<RunSummary> {
    let data = Dataset::build(cfg)?;
    let out = train_on(cfg, &data)?;
    summarize(label, cfg, &data, &out)
}

pub fn summarize(label: &str, cfg: &TrainConfig, data: &Dataset, out: &TrainOutput) -> Result<RunSummary> {
    let report = evaluate(&out.model, &data.test_rig, &data.test_images, cfg.eval_samples, cfg.background)?;
    let last = out.log.last();
    Ok(RunSummary {
        label: label.to_string(),
        seed: cfg.seed,
        config_hash: cfg.hash_hex(),
        psnr: report.mean,
        occupancy: last.and_then(|r| r.occupancy),
        utilization: last.and_then(|r| r.utilization),
        losses: out.losses.clone(),
        heldout: out.heldout.clone(),
        metrics_csv: out.log.to_csv(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub preset: Preset,
    pub runs: Vec<RunSummary>,
}

/// Runs every variant of `preset` for each seed, in order. `overrides` are
/// dotted `key=value` pairs applied to every configuration.
pub fn run_preset<S: AsRef<str>>(preset: Preset, seeds: &[u64], overrides: &[S]) -> Result<ExperimentResult> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for (label, cfg) in preset.variants(seed) {
            let cfg = cfg.with_overrides(overrides)?;
            runs.push(run_config(&label, &cfg)?);
        }
    }
    Ok(ExperimentResult { preset, runs })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl ExperimentResult {
    /// Methods as rows, seeds as column groups, plus a mean column.
    pub fn table(&self) -> String {
        let mut labels: Vec<&str> = Vec::new();
        let mut seeds: Vec<u64> = Vec::new();
        for r in &self.runs {
            if !labels.contains(&r.label.as_str()) {
                labels.push(&r.label);
            }
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let width = labels.iter().map(|l| l.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{}\n", self.preset.name());
        let _ = write!(s, "{:<width$}", "method");
        for seed in &seeds {
            let _ = write!(s, " | seed {seed:<3} psnr  occ     util  ");
        }
        let _ = writeln!(s, " | mean psnr");
        for label in labels {
            let _ = write!(s, "{label:<width$}");
            let mut total = 0.0;
            let mut n = 0;
            for seed in &seeds {
                match self.runs.iter().find(|r| r.label == label && r.seed == *seed) {
                    Some(r) => {
                        let _ = write!(s, " | {:>9.3} {:>6} {:>6}", r.psnr, opt(r.occupancy), opt(r.utilization));
                        total += r.psnr;
                        n += 1;
                    }
                    None => {
                        let _ = write!(s, " | {:>9} {:>6} {:>6}", "-", "-", "-");
                    }
                }
            }
            let _ = writeln!(s, " | {:>9.3}", if n > 0 { total / n as f64 } else { f64::NAN });
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("preset,method,seed,config_hash,psnr,occupancy,utilization\n");
        for r in &self.runs {
            let o = r.occupancy.map(|v| v.to_string()).unwrap_or_default();
            let u = r.utilization.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{},{}", self.preset.name(), r.label, r.seed, r.config_hash, r.psnr, o, u);
        }
        s
    }
}

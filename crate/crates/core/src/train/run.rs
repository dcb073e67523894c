//! The optimization loop.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::regularize::{
    cycle_loss_inverse, inforeg_loss_tape, js_mi_batch, prior_continuous, prior_discrete_tape, radiance_weighted_sample,
    structural_loss, CriticNetwork, InverseGauge,
};
use crate::render::Ray;

use super::checkpoint::Checkpoint;
use super::config::{RegKind, TrainConfig};
use super::data::Dataset;
use super::metrics::{evaluate, model_occupancy, utilization_metric, MetricLog, MetricRow};
use super::model::{Model, RayBatch};
use super::optim::Adam;

const STREAM_INIT: u64 = 0;
const STREAM_RAYS: u64 = 1;
const STREAM_REG: u64 = 2;

/// Independent deterministic stream for one purpose of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Freshly initialised model for `cfg`.
pub fn init_model(cfg: &TrainConfig) -> Result<Model> {
    Model::new(cfg, &mut stream_rng(cfg.seed, STREAM_INIT))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    /// Total loss of every step.
    pub losses: Vec<f64>,
    /// `(step, mean held-out PSNR)` at the evaluation cadence.
    pub heldout: Vec<(usize, f64)>,
}

/// Builds the dataset for `cfg` and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    let data = Dataset::build(cfg)?;
    train_on(cfg, &data)
}

/// Learning rate at `step` for the configured schedule.
pub fn learning_rate(cfg: &TrainConfig, base: f64, step: usize) -> f64 {
    if !cfg.cosine || cfg.steps == 0 {
        return base;
    }
    let r = cfg.lr_final_ratio;
    let phase = std::f64::consts::PI * step as f64 / cfg.steps as f64;
    base * (r + (1.0 - r) * 0.5 * (1.0 + phase.cos()))
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    let mut ray_rng = stream_rng(cfg.seed, STREAM_RAYS);
    let mut reg_rng = stream_rng(cfg.seed, STREAM_REG);
    let mut adam = Adam::default();
    let mut critic_adam = Adam::default();
    let trainable = model.trainable_ids();
    let critic_ids = model.critic_ids();
    let mut log = MetricLog::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut heldout = Vec::new();
    let target_rows: Vec<f64> = data.targets.iter().flatten().copied().collect();

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.rays_per_batch).map(|_| ray_rng.gen_range(0..data.rays.len())).collect();
        let rays: Vec<&Ray> = idx.iter().map(|&i| &data.rays[i]).collect();
        let batch = RayBatch::new(&rays, cfg.samples_per_ray, Some(&mut ray_rng))?;
        let target: Vec<f64> = idx.iter().flat_map(|&i| target_rows[3 * i..3 * i + 3].iter().copied()).collect();

        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape, true);
        let (out, comp) = model.render(&mut tape, &p, &batch, cfg.background)?;
        let target = tape.constant(Tensor::new(vec![batch.rays, 3], target)?);
        let diff = tape.sub(comp.rgb, target)?;
        let sq = tape.mul(diff, diff)?;
        let color_loss = tape.mean(sq)?;
        let mse = tape.value(color_loss).item();

        let active = cfg.regularizer.kind != RegKind::None
            && step >= cfg.regularizer.start
            && cfg.regularizer.end.is_none_or(|e| step < e);
        let mut total = color_loss;
        let mut critic_pair: Option<(Var, Tensor, Tensor, Vec<f64>)> = None;
        if active {
            let weights = tape.value(comp.weights).data().to_vec();
            if let Some(reg) = regularizer_term(cfg, &model, &mut tape, &p, &batch, &out, &weights, &mut reg_rng, &mut critic_pair)? {
                total = tape.add(total, reg)?;
            }
        }
        let loss = tape.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);

        let mut grads = tape.backward(total)?;
        let all = model.store.gradients(&p, &mut grads);
        let lr = learning_rate(cfg, cfg.lr, step);
        let picked: Vec<Tensor> = trainable.iter().map(|id| all[id.0].clone()).collect();
        adam.step(&mut model.store, &trainable, &picked, lr)?;

        if let (Some((mi, x, y, w)), Some(critic)) = (critic_pair, model.critic.clone()) {
            let critic_lr = learning_rate(cfg, cfg.critic_lr, step);
            let neg = tape.neg(mi)?;
            let mut cg = tape.backward(neg)?;
            let all = model.store.gradients(&p, &mut cg);
            let picked: Vec<Tensor> = critic_ids.iter().map(|id| all[id.0].clone()).collect();
            critic_adam.step(&mut model.store, &critic_ids, &picked, critic_lr)?;
            for _ in 0..cfg.regularizer.inforeg.critic_updates {
                critic_step(&mut model.store, &critic, &critic_ids, &mut critic_adam, &x, &y, &w, critic_lr, &mut reg_rng)?;
            }
        }

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let occupancy = match &data.surface {
                Some((pts, w)) => model_occupancy(&model, pts, w, cfg.occupancy_grid)?,
                None => None,
            };
            let utilization = match model.discrete_gauge() {
                Some((g, _)) => Some(utilization_metric(g, &model.store)?),
                None => None,
            };
            log.rows.push(MetricRow {
                step,
                loss,
                psnr: -10.0 * mse.max(1e-10).log10(),
                occupancy,
                utilization,
            });
        }
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            let r = evaluate(&model, &data.test_rig, &data.test_images, cfg.eval_samples, cfg.background)?;
            heldout.push((step, r.mean));
        }
    }
    let checkpoint = Checkpoint::from_store(&model.store, cfg.steps as u64, cfg.hash());
    Ok(TrainOutput {
        model,
        checkpoint,
        log,
        losses,
        heldout,
    })
}

/// Indices of up to `cap` samples whose weight reaches `min_weight`.
fn regularizer_subset(weights: &[f64], min_weight: f64, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let candidates: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= min_weight).collect();
    if candidates.len() <= cap {
        return candidates;
    }
    let mut pick = sample(rng, candidates.len(), cap).into_vec();
    pick.sort_unstable();
    pick.into_iter().map(|i| candidates[i]).collect()
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = t.last_dim();
    let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data)
}

#[allow(clippy::too_many_arguments)]
fn regularizer_term(
    cfg: &TrainConfig,
    model: &Model,
    tape: &mut Tape,
    p: &crate::diffcore::Bound,
    batch: &RayBatch,
    out: &super::model::PointOutput,
    weights: &[f64],
    rng: &mut ChaCha8Rng,
    critic_pair: &mut Option<(Var, Tensor, Tensor, Vec<f64>)>,
) -> Result<Option<Var>> {
    let rc = &cfg.regularizer;
    let subset = regularizer_subset(weights, rc.min_weight, rc.points, rng);
    if subset.len() < 2 {
        return Ok(None);
    }
    let sub_w: Vec<f64> = subset.iter().map(|&i| weights[i]).collect();
    let sub_idx = Arc::new(subset.clone());
    let x_sub = rows_of(&batch.points, &subset)?;
    match rc.kind {
        RegKind::None => Ok(None),
        RegKind::Inforeg => {
            let y = match (&out.gauge, out.feature) {
                (Some(g), _) => g.coords,
                (None, Some(f)) => f,
                _ => return Err(Error::Config("inforeg needs a learned gauge".into())),
            };
            let mi = match &model.critic {
                Some(critic) => {
                    let x = tape.constant(x_sub.clone());
                    let y_sub = tape.gather_rows(y, Arc::clone(&sub_idx))?;
                    let mi = js_mi_batch(tape, p, critic, x, y_sub, &sub_w, rng)?;
                    *critic_pair = Some((mi, x_sub, tape.value(y_sub).clone(), sub_w.clone()));
                    mi
                }
                None => tape.constant(Tensor::scalar(0.0)),
            };
            let prior = if out.gauge.is_some() {
                prior_continuous(tape, y, weights, rc.inforeg.prior_samples, true, rng)?
            } else {
                let mut acc: Option<Var> = None;
                for &s in &out.soft {
                    let kl = prior_discrete_tape(tape, s)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, kl)?,
                        None => kl,
                    });
                }
                let acc = acc.ok_or_else(|| Error::Config("discrete gauge produced no distributions".into()))?;
                tape.scale(acc, 1.0 / out.soft.len() as f64)?
            };
            inforeg_loss_tape(tape, mi, Some(prior), &rc.inforeg).map(Some)
        }
        RegKind::Cycle => {
            let (Some(g), Some(inv)) = (&out.gauge, &model.inverse) else {
                return Err(Error::Config("cycle regularizer needs a learned continuous gauge".into()));
            };
            let x = tape.constant(x_sub);
            let y_sub = tape.gather_rows(g.coords, sub_idx)?;
            let l = cycle_loss_inverse(tape, p, x, y_sub, inv)?;
            tape.scale(l, rc.cycle_weight).map(Some)
        }
        RegKind::Structural => {
            let g = out.gauge.as_ref().ok_or_else(|| Error::Config("structural regularizer needs a gauge".into()))?;
            let l = structural_loss(tape, g)?;
            tape.scale(l, rc.structural_weight).map(Some)
        }
    }
}

/// One critic-only ascent step on fixed pairs with a fresh shuffle.
#[allow(clippy::too_many_arguments)]
fn critic_step(
    store: &mut ParamStore,
    critic: &CriticNetwork,
    ids: &[crate::diffcore::ParamId],
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    w: &[f64],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let mi = js_mi_batch(&mut tape, &p, critic, xv, yv, w, rng)?;
    let neg = tape.neg(mi)?;
    let mut g = tape.backward(neg)?;
    let all = store.gradients(&p, &mut g);
    let picked: Vec<Tensor> = ids.iter().map(|id| all[id.0].clone()).collect();
    adam.step(store, ids, &picked, lr)
}

/// Settings for [`fit_inverse_gauge`].
#[derive(Clone, Debug, PartialEq)]
pub struct InverseFit {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for InverseFit {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 256,
            lr: 3e-3,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// A trained inverse gauge in its own parameter store.
#[derive(Clone, Debug)]
pub struct FittedInverse {
    pub store: ParamStore,
    pub net: InverseGauge,
    pub losses: Vec<f64>,
}

impl FittedInverse {
    /// `mean ‖x − inv(y)‖²` over all rows.
    pub fn loss(&self, points: &Tensor, coords: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let x = tape.constant(points.clone());
        let y = tape.constant(coords.clone());
        let l = cycle_loss_inverse(&mut tape, &p, x, y, &self.net)?;
        Ok(tape.value(l).item())
    }

    pub fn apply(&self, coords: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let y = tape.constant(coords.clone());
        let x = self.net.forward(&mut tape, &p, y)?;
        Ok(tape.value(x).clone())
    }
}

/// Fits a network from gauge coordinates back to 3D on radiance-weighted
/// draws of `(points, coords)` pairs.
pub fn fit_inverse_gauge(points: &Tensor, coords: &Tensor, weights: &[f64], fit: &InverseFit) -> Result<FittedInverse> {
    if points.outer_len() != coords.outer_len() || points.last_dim() != 3 {
        return Err(Error::shape("fit_inverse_gauge", points.shape(), coords.shape()));
    }
    let mut rng = stream_rng(fit.seed, STREAM_INIT);
    let mut store = ParamStore::new();
    let net = InverseGauge::new(&mut store, "inverse", coords.last_dim(), &fit.hidden, &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(fit.steps);
    let mut draw = stream_rng(fit.seed, STREAM_RAYS);
    for _ in 0..fit.steps {
        let idx = radiance_weighted_sample(weights, fit.batch, &mut draw)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(rows_of(points, &idx)?);
        let y = tape.constant(rows_of(coords, &idx)?);
        let l = cycle_loss_inverse(&mut tape, &p, x, y, &net)?;
        losses.push(tape.value(l).item());
        let mut g = tape.backward(l)?;
        let grads = store.gradients(&p, &mut g);
        adam.step(&mut store, &ids, &grads, fit.lr)?;
    }
    Ok(FittedInverse { store, net, losses })
}

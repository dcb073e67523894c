//! Information-conservation regularizer and baselines.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::Mlp;
use crate::gauge::GaugeOutput;

pub const CRITIC_HIDDEN: [usize; 3] = [64, 64, 64];

/// Scalar critic `T(x, y)` over concatenated pairs.
#[derive(Clone, Debug)]
pub struct CriticNetwork {
    net: Mlp,
    x_dim: usize,
    y_dim: usize,
}

impl CriticNetwork {
    pub fn new(store: &mut ParamStore, name: &str, x_dim: usize, y_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_hidden(store, name, x_dim, y_dim, &CRITIC_HIDDEN, rng)
    }

    pub fn with_hidden(
        store: &mut ParamStore,
        name: &str,
        x_dim: usize,
        y_dim: usize,
        hidden: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![x_dim + y_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Self {
            net: Mlp::new(store, name, &widths, rng)?,
            x_dim,
            y_dim,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    /// Scores `[n]` for paired rows of `x: [n, x_dim]` and `y: [n, y_dim]`.
    pub fn score(&self, tape: &mut Tape, p: &Bound, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (tape.shape(x).to_vec(), tape.shape(y).to_vec());
        if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[0] || sx[1] != self.x_dim || sy[1] != self.y_dim {
            return Err(Error::shape("critic", &sx, &sy));
        }
        let xy = tape.concat(&[x, y])?;
        let out = self.net.forward(tape, p, xy)?;
        tape.reshape(out, vec![sx[0]])
    }
}

/// Jensen-Shannon bound from critic scores: weighted mean of `-sp(-T+)`
/// minus mean of `sp(T-)`. Weights are rescaled to mean 1.
pub fn js_bound_from_scores(tape: &mut Tape, positive: Var, weights: &[f64], negative: Var) -> Result<Var> {
    let n = tape.value(positive).len();
    let m = tape.value(negative).len();
    if n == 0 || m == 0 {
        return Err(Error::invalid("js bound needs at least one positive and one negative pair"));
    }
    if weights.len() != n {
        return Err(Error::shape("js_bound weights", &[n], &[weights.len()]));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("js bound weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("js bound weights sum to zero"));
    }
    let w = tape.constant(Tensor::vector(weights.iter().map(|&w| w / total).collect()));
    let pos = tape.reshape(positive, vec![n])?;
    let neg_pos = tape.neg(pos)?;
    let sp_pos = tape.softplus(neg_pos)?;
    let weighted = tape.mul(sp_pos, w)?;
    let pos_term = tape.sum(weighted)?;
    let neg = tape.reshape(negative, vec![m])?;
    let sp_neg = tape.softplus(neg)?;
    let neg_term = tape.mean(sp_neg)?;
    let both = tape.add(pos_term, neg_term)?;
    tape.neg(both)
}

/// Full bound on explicit positive and negative pairs.
#[allow(clippy::too_many_arguments)]
pub fn js_mi_bound(
    tape: &mut Tape,
    p: &Bound,
    critic: &CriticNetwork,
    pos_x: Var,
    pos_y: Var,
    weights: &[f64],
    neg_x: Var,
    neg_y: Var,
) -> Result<Var> {
    if tape.shape(pos_x)[0] == 0 || tape.shape(neg_x)[0] == 0 {
        return Err(Error::invalid("js bound needs at least one positive and one negative pair"));
    }
    let pos = critic.score(tape, p, pos_x, pos_y)?;
    let neg = critic.score(tape, p, neg_x, neg_y)?;
    js_bound_from_scores(tape, pos, weights, neg)
}

/// Bound on a batch where negatives pair each `x` with a shuffled `y`.
pub fn js_mi_batch(
    tape: &mut Tape,
    p: &Bound,
    critic: &CriticNetwork,
    x: Var,
    y: Var,
    weights: &[f64],
    rng: &mut impl Rng,
) -> Result<Var> {
    let n = tape.shape(y)[0];
    let perm = shuffled_indices(n, rng);
    let y_neg = tape.gather_rows(y, perm)?;
    js_mi_bound(tape, p, critic, x, y, weights, x, y_neg)
}

/// Uniform random permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Arc<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Arc::new(idx)
}

/// Scalar reference form of the bound, used by tests and diagnostics.
pub fn js_bound_value(positive: &[f64], weights: &[f64], negative: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let pos = tape.constant(Tensor::vector(positive.to_vec()));
    let neg = tape.constant(Tensor::vector(negative.to_vec()));
    let b = js_bound_from_scores(&mut tape, pos, weights, neg)?;
    Ok(tape.value(b).item())
}

/// Regularizer weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoRegConfig {
    pub gamma: f64,
    pub epsilon: f64,
    /// Prior sample count `h` for the continuous case.
    pub prior_samples: usize,
    /// Extra critic-only updates per training step.
    pub critic_updates: usize,
}

impl Default for InfoRegConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 0.1,
            prior_samples: 64,
            critic_updates: 1,
        }
    }
}

impl InfoRegConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.prior_samples == 0 {
            return Err(Error::Config("prior_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.gamma == 0.0 && self.epsilon == 0.0
    }
}

/// `-(γ + ε) · mi + ε · prior`.
pub fn inforeg_loss(mi_bound: f64, prior: f64, cfg: &InfoRegConfig) -> f64 {
    -(cfg.gamma + cfg.epsilon) * mi_bound + cfg.epsilon * prior
}

/// Tape form of [`inforeg_loss`]; a missing prior counts as zero.
pub fn inforeg_loss_tape(tape: &mut Tape, mi_bound: Var, prior: Option<Var>, cfg: &InfoRegConfig) -> Result<Var> {
    let mi = tape.scale(mi_bound, -(cfg.gamma + cfg.epsilon))?;
    match prior {
        Some(pr) => {
            let pr = tape.scale(pr, cfg.epsilon)?;
            tape.add(mi, pr)
        }
        None => Ok(mi),
    }
}

/// Equal-mass transport between two 2D point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub source: Vec<[f64; 2]>,
    pub target: Vec<[f64; 2]>,
    /// Row-major `h × h` Euclidean distances.
    pub cost: Vec<f64>,
}

/// Optimal plan: `assignment[i]` is the target matched to source `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transport {
    pub cost: f64,
    pub assignment: Vec<usize>,
}

impl Transport {
    /// Dense `h × h` plan with mass `1/h` on matched pairs.
    pub fn plan(&self) -> Vec<f64> {
        let h = self.assignment.len();
        let mut m = vec![0.0; h * h];
        for (i, &j) in self.assignment.iter().enumerate() {
            m[i * h + j] = 1.0 / h as f64;
        }
        m
    }
}

pub const MAX_TRANSPORT_POINTS: usize = 512;

impl TransportProblem {
    pub fn new(source: &[[f64; 2]], target: &[[f64; 2]]) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::invalid(format!(
                "emd needs equal point counts, got {} and {}",
                source.len(),
                target.len()
            )));
        }
        if source.is_empty() || source.len() > MAX_TRANSPORT_POINTS {
            return Err(Error::invalid(format!(
                "emd point count must be in 1..={MAX_TRANSPORT_POINTS}, got {}",
                source.len()
            )));
        }
        if source.iter().chain(target).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("emd input points".into()));
        }
        let cost = source
            .iter()
            .flat_map(|a| target.iter().map(move |b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()))
            .collect();
        Ok(Self {
            source: source.to_vec(),
            target: target.to_vec(),
            cost,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn solve(&self) -> Transport {
        let h = self.len();
        let assignment = solve_assignment(h, &self.cost);
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| self.cost[i * h + j]).sum();
        Transport {
            cost: total / h as f64,
            assignment,
        }
    }
}

/// Minimum-cost perfect matching on a square cost matrix by successive
/// shortest augmenting paths with potentials.
fn solve_assignment(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based with column 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

/// Exact equal-mass earth mover's distance: mean matched distance.
pub fn emd_exact(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<Transport> {
    Ok(TransportProblem::new(a, b)?.solve())
}

/// EMD from the rows of `pred: [h, 2]` to fixed `targets`. The optimal
/// matching is held fixed and gradients flow through the distances.
pub fn emd_tape(tape: &mut Tape, pred: Var, targets: &[[f64; 2]]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::shape("emd", &shape, &[targets.len(), 2]));
    }
    let points: Vec<[f64; 2]> = tape.value(pred).data().chunks(2).map(|r| [r[0], r[1]]).collect();
    let plan = emd_exact(&points, targets)?;
    let matched: Vec<f64> = plan.assignment.iter().flat_map(|&j| targets[j]).collect();
    let matched = tape.constant(Tensor::new(vec![points.len(), 2], matched)?);
    let diff = tape.sub(pred, matched)?;
    let dist = tape.norm_rows(diff)?;
    tape.mean(dist)
}

/// `h` targets on a `√h × √h` lattice over the unit square: cell centers,
/// or one uniform draw per cell when `rng` is given.
pub fn lattice_targets(h: usize, rng: Option<&mut dyn rand::RngCore>) -> Result<Vec<[f64; 2]>> {
    let side = (h as f64).sqrt().round() as usize;
    if side == 0 || side * side != h {
        return Err(Error::invalid(format!("prior sample count must be a perfect square, got {h}")));
    }
    let s = side as f64;
    let mut out = Vec::with_capacity(h);
    match rng {
        Some(rng) => {
            for i in 0..side {
                for j in 0..side {
                    out.push([(i as f64 + rng.gen::<f64>()) / s, (j as f64 + rng.gen::<f64>()) / s]);
                }
            }
        }
        None => {
            for i in 0..side {
                for j in 0..side {
                    out.push([(i as f64 + 0.5) / s, (j as f64 + 0.5) / s]);
                }
            }
        }
    }
    Ok(out)
}

/// Draws `h` indices with replacement, probability proportional to `weights`.
pub fn radiance_weighted_sample(weights: &[f64], h: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("sample weights must be finite and non-negative"));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::invalid("sample weights sum to zero"));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(format!("sample weights: {e}")))?;
    Ok((0..h).map(|_| dist.sample(rng)).collect())
}

/// Continuous prior: EMD between `h` radiance-weighted draws of the
/// predicted coordinates `[n, 2]` and `h` lattice targets.
pub fn prior_continuous(
    tape: &mut Tape,
    coords: Var,
    weights: &[f64],
    h: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let n = tape.shape(coords)[0];
    if weights.len() != n {
        return Err(Error::shape("prior_continuous weights", &[n], &[weights.len()]));
    }
    if n < h {
        return Err(Error::invalid(format!("prior needs at least {h} points, got {n}")));
    }
    let idx = radiance_weighted_sample(weights, h, rng)?;
    let targets = if jitter {
        lattice_targets(h, Some(rng as &mut dyn rand::RngCore))?
    } else {
        lattice_targets(h, None)?
    };
    let sampled = tape.gather_rows(coords, Arc::new(idx))?;
    emd_tape(tape, sampled, &targets)
}

/// `KL(p̄ ‖ uniform)` with `p̄` the row mean of `dists: [B, N]`.
pub fn prior_discrete_tape(tape: &mut Tape, dists: Var) -> Result<Var> {
    let shape = tape.shape(dists).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid(format!("prior_discrete needs a [B, N] batch, got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    let total = tape.sum_rows(dists)?;
    let mean = tape.scale(total, 1.0 / b as f64)?;
    // Keeps ln finite when a softmax entry underflows; its contribution is 0 either way.
    let guarded = tape.add_scalar(mean, 1e-300)?;
    let scaled = tape.scale(guarded, n as f64)?;
    let log = tape.ln(scaled)?;
    let terms = tape.mul(mean, log)?;
    tape.sum(terms)
}

/// Value form of the discrete prior with `0 · ln 0 = 0`.
pub fn prior_discrete(dists: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = dists.first() else {
        return Err(Error::invalid("prior_discrete needs at least one distribution"));
    };
    let n = first.len();
    let mut mean = vec![0.0; n];
    for d in dists {
        if d.len() != n {
            return Err(Error::shape("prior_discrete", &[n], &[d.len()]));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 || d.iter().any(|&x| x < 0.0) {
            return Err(Error::invalid(format!("distribution sums to {s}, expected 1")));
        }
        for (m, &x) in mean.iter_mut().zip(d) {
            *m += x / dists.len() as f64;
        }
    }
    Ok(mean
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * n as f64).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Network from gauge space back to the unit cube.
#[derive(Clone, Debug)]
pub struct InverseGauge {
    net: Mlp,
}

impl InverseGauge {
    pub fn new(store: &mut ParamStore, name: &str, target_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![target_dim];
        widths.extend_from_slice(hidden);
        widths.push(3);
        Ok(Self {
            net: Mlp::new(store, name, &widths, rng)?,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    /// Reconstructed points `[n, 3]` in the open unit cube.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let h = self.net.forward(tape, p, y)?;
        tape.sigmoid(h)
    }
}

/// Mean of `‖x − recon‖²` over rows.
pub fn cycle_loss(tape: &mut Tape, x: Var, recon: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let d = tape.sub(x, recon)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Cycle loss through an inverse network: `mean ‖x − inv(y)‖²`.
pub fn cycle_loss_inverse(tape: &mut Tape, p: &Bound, x: Var, y: Var, inverse: &InverseGauge) -> Result<Var> {
    let recon = inverse.forward(tape, p, y)?;
    cycle_loss(tape, x, recon)
}

/// Mean squared offset norm of an offset-mode gauge output.
pub fn structural_loss(tape: &mut Tape, out: &GaugeOutput) -> Result<Var> {
    let Some(delta) = out.offset else {
        return Err(Error::invalid("structural loss needs a gauge in offset mode"));
    };
    let n = tape.shape(delta)[0];
    let sq = tape.mul(delta, delta)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::gauge::{ContinuousGauge, OrthogonalGauge};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_critic_gives_minus_two_ln2() {
        let b = js_bound_value(&[0.0; 3], &[1.0, 2.0, 0.5], &[0.0; 5]).unwrap();
        assert!((b + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((b + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_critic_approaches_zero() {
        let b = js_bound_value(&[60.0, 80.0], &[1.0, 1.0], &[-60.0, -70.0]).unwrap();
        assert!(b < 0.0 && b > -1e-20);
    }

    #[test]
    fn empty_pairs_rejected() {
        let mut tape = Tape::new();
        let pos = tape.constant(Tensor::vector(vec![0.0]));
        let neg = tape.constant(Tensor::vector(vec![0.0]));
        assert!(js_bound_from_scores(&mut tape, pos, &[], neg).is_err());
        assert!(js_bound_from_scores(&mut tape, pos, &[-1.0], neg).is_err());
        assert!(js_bound_from_scores(&mut tape, pos, &[0.0], neg).is_err());
    }

    #[test]
    fn critic_scores_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let critic = CriticNetwork::new(&mut store, "critic", 3, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(crate::diffcore::uniform(vec![7, 3], 1.0, &mut rng));
        let y = tape.constant(crate::diffcore::uniform(vec![7, 2], 1.0, &mut rng));
        let s = critic.score(&mut tape, &p, x, y).unwrap();
        assert_eq!(tape.shape(s), &[7]);
        assert!(tape.value(s).all_finite());
        let bad = tape.constant(Tensor::zeros(vec![7, 4]));
        assert!(critic.score(&mut tape, &p, x, bad).is_err());
    }

    #[test]
    fn inforeg_arithmetic() {
        let mut cfg = InfoRegConfig {
            gamma: 0.0,
            epsilon: 0.0,
            ..Default::default()
        };
        assert_eq!(inforeg_loss(0.7, 3.0, &cfg), 0.0);
        cfg.gamma = 1.0;
        assert_eq!(inforeg_loss(0.7, 3.0, &cfg), -0.7);
        cfg.epsilon = 0.1;
        assert!((inforeg_loss(0.5, 2.0, &cfg) + 0.35).abs() < 1e-15);
        let mut tape = Tape::new();
        let mi = tape.constant(Tensor::scalar(0.5));
        let pr = tape.constant(Tensor::scalar(2.0));
        let l = inforeg_loss_tape(&mut tape, mi, Some(pr), &cfg).unwrap();
        assert_eq!(tape.value(l).item(), inforeg_loss(0.5, 2.0, &cfg));
    }

    #[test]
    fn config_rejects_negative_weights() {
        let cfg = InfoRegConfig {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = InfoRegConfig {
            epsilon: f64::NAN,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(InfoRegConfig::default().validate().is_ok());
    }

    #[test]
    fn emd_trivial_cases() {
        let pts = [[0.1, 0.2], [0.7, 0.3], [0.5, 0.9]];
        assert_eq!(emd_exact(&pts, &pts).unwrap().cost, 0.0);
        assert_eq!(emd_exact(&[[0.0, 0.0]], &[[1.0, 0.0]]).unwrap().cost, 1.0);
        assert!(emd_exact(&pts, &pts[..2]).is_err());
    }

    #[test]
    fn emd_plan_is_doubly_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<[f64; 2]> = (0..9).map(|_| [rng.gen(), rng.gen()]).collect();
        let b: Vec<[f64; 2]> = (0..9).map(|_| [rng.gen(), rng.gen()]).collect();
        let t = emd_exact(&a, &b).unwrap();
        let m = t.plan();
        for i in 0..9 {
            let row: f64 = m[i * 9..(i + 1) * 9].iter().sum();
            let col: f64 = (0..9).map(|r| m[r * 9 + i]).sum();
            assert!((row - 1.0 / 9.0).abs() < 1e-9);
            assert!((col - 1.0 / 9.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lattice_targets_give_zero_cost_to_themselves() {
        let t = lattice_targets(16, None).unwrap();
        assert_eq!(t[0], [0.125, 0.125]);
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(vec![16, 2], t.iter().flatten().copied().collect()).unwrap(), true);
        let c = emd_tape(&mut tape, pred, &t).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        assert!(lattice_targets(15, None).is_err());
    }

    #[test]
    fn collapsed_corner_cost_matches_lattice_mean() {
        let t = lattice_targets(16, None).unwrap();
        let oracle: f64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| ((i as f64 + 0.5) / 4.0, (j as f64 + 0.5) / 4.0)))
            .map(|(x, y)| (x * x + y * y).sqrt())
            .sum::<f64>()
            / 16.0;
        let collapsed = vec![[0.0, 0.0]; 16];
        let c = emd_exact(&collapsed, &t).unwrap().cost;
        assert!((c - oracle).abs() < 1e-12);
        assert!((c - 0.760_861_308_630_675_6).abs() < 1e-12);
    }

    #[test]
    fn cost_decreases_along_interpolation() {
        let t = lattice_targets(16, None).unwrap();
        let costs: Vec<f64> = (0..5)
            .map(|s| {
                let a = s as f64 / 4.0;
                let pts: Vec<[f64; 2]> = t.iter().map(|p| [a * p[0], a * p[1]]).collect();
                emd_exact(&pts, &t).unwrap().cost
            })
            .collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]), "{costs:?}");
        assert_eq!(costs[4], 0.0);
    }

    #[test]
    fn emd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = lattice_targets(9, None).unwrap();
        let start = crate::diffcore::uniform(vec![9, 2], 1.0, &mut rng).map(|v| 0.5 + 0.4 * v);
        let err = grad_check(|tape, x| emd_tape(tape, x, &targets), &start, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn weighted_sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = radiance_weighted_sample(&[0.0, 0.0, 2.0, 0.0], 50, &mut rng).unwrap();
        assert!(idx.iter().all(|&i| i == 2));
        assert!(radiance_weighted_sample(&[0.0, 0.0], 5, &mut rng).is_err());
        let a = radiance_weighted_sample(&[1.0, 3.0, 2.0], 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = radiance_weighted_sample(&[1.0, 3.0, 2.0], 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_weights_give_binomial_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 10_000;
        let idx = radiance_weighted_sample(&[1.0; 4], h, &mut rng).unwrap();
        let sigma = (h as f64 * 0.25 * 0.75).sqrt();
        for k in 0..4 {
            let count = idx.iter().filter(|&&i| i == k).count() as f64;
            assert!((count - 0.25 * h as f64).abs() <= 3.0 * sigma, "{k}: {count}");
        }
    }

    #[test]
    fn prior_continuous_zero_weights_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(vec![16, 2], 0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(prior_continuous(&mut tape, c, &[0.0; 16], 4, false, &mut rng).is_err());
    }

    #[test]
    fn discrete_prior_values() {
        assert_eq!(prior_discrete(&[vec![0.25; 4]]).unwrap(), 0.0);
        let mut one_hot = vec![0.0; 256];
        one_hot[17] = 1.0;
        assert!((prior_discrete(&[one_hot]).unwrap() - 256f64.ln()).abs() < 1e-12);
        let half = prior_discrete(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert!((half - 2f64.ln()).abs() < 1e-12);
        assert!(prior_discrete(&[]).is_err());
        assert!(prior_discrete(&[vec![0.5, 0.4]]).is_err());
    }

    #[test]
    fn discrete_prior_tape_matches_value() {
        let rows = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]];
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::from_rows(&rows).unwrap());
        let k = prior_discrete_tape(&mut tape, d).unwrap();
        assert!((tape.value(k).item() - prior_discrete(&rows).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.9, 0.5, 0.4]]).unwrap());
        let zero = cycle_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);
        let c = tape.constant(Tensor::from_rows(&[vec![0.5; 3], vec![0.5; 3]]).unwrap());
        let l = cycle_loss(&mut tape, x, c).unwrap();
        let oracle = ((0.4f64.powi(2) + 0.3f64.powi(2) + 0.2f64.powi(2)) + (0.4f64.powi(2) + 0.0 + 0.1f64.powi(2))) / 2.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-15);
    }

    #[test]
    fn cycle_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let inv = InverseGauge::new(&mut store, "inv", 2, &[8], &mut rng).unwrap();
        let x = crate::diffcore::uniform(vec![5, 3], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
        let y = crate::diffcore::uniform(vec![5, 2], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
        let err = grad_check(
            |tape, yv| {
                let p = store.bind(tape, false);
                let xv = tape.constant(x.clone());
                cycle_loss_inverse(tape, &p, xv, yv, &inv)
            },
            &y,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn structural_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let g = ContinuousGauge::offset(&mut store, "g", &[8], OrthogonalGauge::Single { drop_axis: 2 }, 0.0, &mut rng).unwrap();
        let pts = Tensor::from_rows(&[vec![0.2, 0.3, 0.4], vec![0.6, 0.1, 0.9]]).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let out = g.forward(&mut tape, &p, &pts).unwrap();
        let l = structural_loss(&mut tape, &out).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let delta = tape.constant(Tensor::from_rows(&[vec![0.1, 0.0], vec![0.1, 0.0]]).unwrap());
        let fake = GaugeOutput {
            coords: out.coords,
            offset: Some(delta),
        };
        let l = structural_loss(&mut tape, &fake).unwrap();
        assert!((tape.value(l).item() - 0.01).abs() < 1e-15);
        let absolute = GaugeOutput {
            coords: out.coords,
            offset: None,
        };
        assert!(structural_loss(&mut tape, &absolute).is_err());
    }
}

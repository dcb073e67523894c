//! Gauge transformations: learned continuous and discrete remappings,
//! the sinusoidal information-invariant gauge, and pre-defined baselines.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_row, topk_indices, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{frequency_encoding, grid_corners, Codebook, Corners, FeatureGrid, Mlp};

fn check_unit_cube(op: &'static str, points: &Tensor) -> Result<()> {
    for (i, &v) in points.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::domain(
                op,
                format!("coordinate {v} (element {i}) lies outside the unit cube"),
            ));
        }
    }
    Ok(())
}

/// Result of a top-k selection over a probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TopkSelection {
    /// Selected entries, most probable first (ties toward the lowest index).
    pub indices: Vec<usize>,
    /// Forward mixture: selected probabilities renormalised, zero elsewhere.
    pub weights: Vec<f64>,
    /// Distribution whose Jacobian replaces the hard selection in backward.
    pub surrogate: Vec<f64>,
}

/// Differentiable top-k selection on a probability vector.
///
/// The forward pass scatters the `k` largest probabilities into a zero
/// vector and divides by their sum. The backward pass treats the selection
/// as the soft distribution itself (see [`Tape::topk_st`] for the tape form).
pub fn topk_select(p: &[f64], k: usize) -> Result<TopkSelection> {
    let n = p.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-k needs 1 <= k <= {n}, got k = {k}")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::domain("topk_select", "probabilities must be finite and non-negative"));
    }
    let total: f64 = p.iter().sum();
    if total == 0.0 {
        return Err(Error::domain("topk_select", "all-zero probability vector"));
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain("topk_select", format!("probabilities sum to {total}, not 1")));
    }
    let indices = topk_indices(p, k);
    let value_sum: f64 = indices.iter().map(|&i| p[i]).sum();
    let mut weights = vec![0.0; n];
    for &i in &indices {
        weights[i] = p[i] / value_sum;
    }
    Ok(TopkSelection {
        indices,
        weights,
        surrogate: p.to_vec(),
    })
}

/// How a continuous gauge produces its output.
#[derive(Clone, Debug)]
pub enum ContinuousMode {
    /// `y = sigmoid(M(x))`.
    Absolute,
    /// `y = clamp(proj(x) + M(x))`, the residual-offset form.
    Offset(OrthogonalGauge),
    /// `y = sigmoid(G(x))` with `G` a trilinear grid of 2-vectors.
    Grid(FeatureGrid),
}

/// Learned map from the unit cube to the open unit square.
#[derive(Clone, Debug)]
pub struct ContinuousGauge {
    net: Option<Mlp>,
    mode: ContinuousMode,
    target_dim: usize,
}

/// Output of a continuous gauge on a batch.
#[derive(Clone, Copy, Debug)]
pub struct GaugeOutput {
    /// `[n, target_dim]` target coordinates.
    pub coords: Var,
    /// `[n, target_dim]` residual offsets (offset mode only).
    pub offset: Option<Var>,
}

impl ContinuousGauge {
    /// MLP gauge; `hidden` are the hidden widths, `out_scale` scales the
    /// initial output layer (0 gives the constant map to the square's center).
    pub fn mlp(
        store: &mut ParamStore,
        name: &str,
        hidden: &[usize],
        target_dim: usize,
        out_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![3];
        widths.extend_from_slice(hidden);
        widths.push(target_dim);
        let net = Mlp::new(store, name, &widths, rng)?;
        net.init_output(store, out_scale, &[0.0]);
        Ok(Self {
            net: Some(net),
            mode: ContinuousMode::Absolute,
            target_dim,
        })
    }

    /// Residual-offset gauge around an orthogonal projection.
    pub fn offset(
        store: &mut ParamStore,
        name: &str,
        hidden: &[usize],
        proj: OrthogonalGauge,
        out_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !matches!(proj, OrthogonalGauge::Single { .. }) {
            return Err(Error::invalid("offset gauge needs a single-plane projection"));
        }
        let mut gauge = Self::mlp(store, name, hidden, 2, out_scale, rng)?;
        gauge.mode = ContinuousMode::Offset(proj);
        Ok(gauge)
    }

    /// Grid-parameterised gauge: the transformation itself is a tensor.
    pub fn grid(
        store: &mut ParamStore,
        name: &str,
        resolution: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let grid = FeatureGrid::new(store, name, &[resolution; 3], 2, init_std, rng)?;
        Ok(Self {
            net: None,
            mode: ContinuousMode::Grid(grid),
            target_dim: 2,
        })
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn mode(&self) -> &ContinuousMode {
        &self.mode
    }

    pub fn is_offset(&self) -> bool {
        matches!(self.mode, ContinuousMode::Offset(_))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, points: &Tensor) -> Result<GaugeOutput> {
        check_unit_cube("continuous_forward", points)?;
        if points.last_dim() != 3 {
            return Err(Error::shape("continuous_forward", points.shape(), &[3]));
        }
        match &self.mode {
            ContinuousMode::Absolute => {
                let x = tape.constant(points.clone());
                let raw = self.net.as_ref().unwrap().forward(tape, p, x)?;
                Ok(GaugeOutput {
                    coords: tape.sigmoid(raw)?,
                    offset: None,
                })
            }
            ContinuousMode::Offset(proj) => {
                let x = tape.constant(points.clone());
                let delta = self.net.as_ref().unwrap().forward(tape, p, x)?;
                let base = tape.constant(proj.project_batch(points)?);
                let y = tape.add(base, delta)?;
                Ok(GaugeOutput {
                    coords: tape.clamp01(y)?,
                    offset: Some(delta),
                })
            }
            ContinuousMode::Grid(grid) => {
                let raw = grid.query(tape, p, points)?;
                Ok(GaugeOutput {
                    coords: tape.sigmoid(raw)?,
                    offset: None,
                })
            }
        }
    }

    /// Evaluates the gauge without recording gradients.
    pub fn map_points(&self, store: &ParamStore, points: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, points)?;
        Ok(tape.value(out.coords).clone())
    }
}

/// How per-grid-point logits are produced.
#[derive(Clone, Debug)]
pub enum LogitSource {
    /// One learnable logit row per grid point (`[M^3, N]` per level).
    Tensor(Vec<ParamId>),
    /// An MLP evaluated at frequency-encoded grid-point coordinates, one
    /// per level, with the number of encoding bands.
    Mlp(Vec<Mlp>, usize),
}

/// Learned map from grid points to codebook entries.
#[derive(Clone, Debug)]
pub struct DiscreteGauge {
    resolutions: Vec<usize>,
    entries: usize,
    k: usize,
    logits: LogitSource,
}

/// Output of a discrete gauge on a batch of `n` points.
#[derive(Clone, Debug)]
pub struct DiscreteOutput {
    /// `[n, levels * D]`, level features concatenated.
    pub feature: Var,
    /// Per level, `[g, N]` softmax distributions of the distinct grid points touched by the batch.
    pub soft: Vec<Var>,
}

/// Sorted distinct values and, per input, its position among them.
fn dedup_indices(index: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut unique = index.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let remap = index.iter().map(|i| unique.binary_search(i).unwrap_or(0)).collect();
    (unique, remap)
}

impl DiscreteGauge {
    /// Tensor-parameterised logits, drawn as `init_std * N(0, 1)`.
    pub fn new_tensor(
        store: &mut ParamStore,
        name: &str,
        resolutions: &[usize],
        entries: usize,
        k: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::validate(resolutions, entries, k)?;
        let ids = resolutions
            .iter()
            .enumerate()
            .map(|(l, &m)| {
                store.add(
                    format!("{name}.logits.{l}"),
                    crate::diffcore::randn([m * m * m, entries], init_std, rng),
                )
            })
            .collect();
        Ok(Self {
            resolutions: resolutions.to_vec(),
            entries,
            k,
            logits: LogitSource::Tensor(ids),
        })
    }

    /// MLP-parameterised logits (`3 (1 + 2 bands) -> hidden -> N` per level).
    #[allow(clippy::too_many_arguments)]
    pub fn new_mlp(
        store: &mut ParamStore,
        name: &str,
        resolutions: &[usize],
        entries: usize,
        k: usize,
        hidden: &[usize],
        bands: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::validate(resolutions, entries, k)?;
        let mut nets = Vec::with_capacity(resolutions.len());
        for l in 0..resolutions.len() {
            let mut widths = vec![3 * (1 + 2 * bands)];
            widths.extend_from_slice(hidden);
            widths.push(entries);
            nets.push(Mlp::new(store, &format!("{name}.net.{l}"), &widths, rng)?);
        }
        Ok(Self {
            resolutions: resolutions.to_vec(),
            entries,
            k,
            logits: LogitSource::Mlp(nets, bands),
        })
    }

    fn validate(resolutions: &[usize], entries: usize, k: usize) -> Result<()> {
        if resolutions.is_empty() || resolutions.iter().any(|&m| m < 2) {
            return Err(Error::invalid(format!("grid resolutions must be >= 2, got {resolutions:?}")));
        }
        if k == 0 || k > entries {
            return Err(Error::invalid(format!("top-k needs 1 <= k <= {entries}, got {k}")));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        Self::validate(&self.resolutions, self.entries, k)?;
        self.k = k;
        Ok(())
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn logit_source(&self) -> &LogitSource {
        &self.logits
    }

    fn grid_coords(m: usize, index: &[usize]) -> Tensor {
        let step = 1.0 / (m - 1) as f64;
        let mut data = Vec::with_capacity(index.len() * 3);
        for &flat in index {
            let (i, j, k) = (flat / (m * m), (flat / m) % m, flat % m);
            data.extend_from_slice(&[i as f64 * step, j as f64 * step, k as f64 * step]);
        }
        Tensor::from_parts(vec![index.len(), 3], data)
    }

    /// Logit rows for the given grid points of one level.
    fn level_logits(&self, tape: &mut Tape, p: &Bound, level: usize, index: &Arc<Vec<usize>>) -> Result<Var> {
        match &self.logits {
            LogitSource::Tensor(ids) => tape.gather_rows(p[ids[level]], Arc::clone(index)),
            LogitSource::Mlp(nets, bands) => {
                let coords = tape.constant(Self::grid_coords(self.resolutions[level], index));
                let enc = frequency_encoding(tape, coords, *bands)?;
                nets[level].forward(tape, p, enc)
            }
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        book: &Codebook,
        points: &Tensor,
    ) -> Result<DiscreteOutput> {
        check_unit_cube("discrete_forward", points)?;
        if book.layer_count() != self.resolutions.len() || book.entries() != self.entries {
            return Err(Error::invalid(format!(
                "codebook has {} layers x {} entries, gauge expects {} x {}",
                book.layer_count(),
                book.entries(),
                self.resolutions.len(),
                self.entries
            )));
        }
        let mut feats = Vec::with_capacity(self.resolutions.len());
        let mut soft = Vec::with_capacity(self.resolutions.len());
        for (level, &m) in self.resolutions.iter().enumerate() {
            let corners = grid_corners(&[m, m, m], points)?;
            // Selection runs once per distinct grid point, then fans out to corners.
            let (unique, remap) = dedup_indices(&corners.index);
            let logits = self.level_logits(tape, p, level, &Arc::new(unique))?;
            let weights = tape.topk_st(logits, self.k)?;
            let rows = book.lookup_batch(tape, p, level, weights)?;
            let rows = tape.gather_rows(rows, Arc::new(remap))?;
            let w = tape.constant(Tensor::vector(corners.weight.clone()));
            let rows = tape.mul_col(rows, w)?;
            feats.push(tape.sum_groups(rows, corners.per_point)?);
            soft.push(tape.softmax(logits)?);
        }
        let feature = if feats.len() == 1 {
            feats[0]
        } else {
            tape.concat(&feats)?
        };
        Ok(DiscreteOutput { feature, soft })
    }

    /// Top-1 entry of every grid point, per level.
    pub fn argmax_all(&self, store: &ParamStore) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(self.resolutions.len());
        for (level, &m) in self.resolutions.iter().enumerate() {
            let count = m * m * m;
            let logits = match &self.logits {
                LogitSource::Tensor(ids) => store.get(ids[level]).clone(),
                LogitSource::Mlp(..) => {
                    let mut tape = Tape::new();
                    let p = store.bind(&mut tape, false);
                    let v = self.level_logits(&mut tape, &p, level, &Arc::new((0..count).collect()))?;
                    tape.value(v).clone()
                }
            };
            let mut sel = Vec::with_capacity(count);
            let mut probs = vec![0.0; self.entries];
            for r in 0..count {
                softmax_row(logits.row(r), &mut probs);
                sel.push(topk_indices(&probs, 1)[0]);
            }
            out.push(sel);
        }
        Ok(out)
    }
}

/// Sinusoidal gauge whose cosine similarity depends only on coordinate
/// differences.
///
/// For input `m` with `d` axes and frequencies `θ_1..θ_F` the encoding is
/// `[cos(m_a θ_j) for a, j] ++ [sin(m_a θ_j) for a, j]`, so the pair for
/// `(a, j)` sits at positions `a*F + j` and `d*F + a*F + j`.
#[derive(Clone, Debug)]
pub struct InfoInvEncoder {
    input_dims: usize,
    frequencies: Frequencies,
}

#[derive(Clone, Debug)]
enum Frequencies {
    Fixed(Vec<f64>),
    Learned(ParamId),
}

impl InfoInvEncoder {
    /// Geometric frequencies `θ_j = 2^j π`, `j = 0..count`.
    pub fn geometric(input_dims: usize, count: usize) -> Self {
        let f = (0..count).map(|j| (1u64 << j) as f64 * PI).collect();
        Self::with_frequencies(input_dims, f)
    }

    pub fn with_frequencies(input_dims: usize, frequencies: Vec<f64>) -> Self {
        Self {
            input_dims,
            frequencies: Frequencies::Fixed(frequencies),
        }
    }

    /// Frequencies registered as learnable parameters, initialised geometric.
    pub fn learnable(store: &mut ParamStore, name: &str, input_dims: usize, count: usize) -> Self {
        let init = (0..count).map(|j| (1u64 << j) as f64 * PI).collect();
        let id = store.add(format!("{name}.theta"), Tensor::vector(init));
        Self {
            input_dims,
            frequencies: Frequencies::Learned(id),
        }
    }

    pub fn frequency_count(&self, store: &ParamStore) -> usize {
        match &self.frequencies {
            Frequencies::Fixed(f) => f.len(),
            Frequencies::Learned(id) => store.get(*id).len(),
        }
    }

    /// Encoding width `2 * F * d`.
    pub fn output_dim(&self, store: &ParamStore) -> usize {
        2 * self.frequency_count(store) * self.input_dims
    }

    fn theta(&self, store: &ParamStore) -> Vec<f64> {
        match &self.frequencies {
            Frequencies::Fixed(f) => f.clone(),
            Frequencies::Learned(id) => store.get(*id).data().to_vec(),
        }
    }

    /// Unit-amplitude encoding of a single coordinate vector.
    pub fn encode_point(&self, store: &ParamStore, m: &[f64]) -> Result<Vec<f64>> {
        if m.len() != self.input_dims {
            return Err(Error::shape("infoinv_encode", &[m.len()], &[self.input_dims]));
        }
        let theta = self.theta(store);
        let mut cos = Vec::with_capacity(m.len() * theta.len());
        let mut sin = Vec::with_capacity(m.len() * theta.len());
        for &x in m {
            for &t in &theta {
                cos.push((x * t).cos());
                sin.push((x * t).sin());
            }
        }
        cos.extend(sin);
        Ok(cos)
    }

    /// Encodes `[n, d]` coordinates; if `amplitude` is given (same width as
    /// the encoding) it multiplies the stacked vector elementwise.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        m: Var,
        amplitude: Option<Var>,
    ) -> Result<Var> {
        let d = self.input_dims;
        if tape.value(m).last_dim() != d {
            return Err(Error::shape("infoinv_encode", tape.shape(m), &[d]));
        }
        let f = self.frequency_count(store);
        let phase = match &self.frequencies {
            Frequencies::Fixed(theta) => {
                let mut block = Tensor::zeros([d, d * f]);
                for a in 0..d {
                    for (j, &t) in theta.iter().enumerate() {
                        block.data_mut()[a * d * f + a * f + j] = t;
                    }
                }
                let block = tape.constant(block);
                tape.matmul(m, block)?
            }
            Frequencies::Learned(id) => {
                let mut expand = Tensor::zeros([d, d * f]);
                for a in 0..d {
                    for j in 0..f {
                        expand.data_mut()[a * d * f + a * f + j] = 1.0;
                    }
                }
                let expand = tape.constant(expand);
                let spread = tape.matmul(m, expand)?;
                let col = tape_reshape_col(tape, p[*id])?;
                let tiled = tape.gather_rows(col, Arc::new((0..d * f).map(|c| c % f).collect()))?;
                let tiled = tape.reshape(tiled, [d * f])?;
                tape.mul_row(spread, tiled)?
            }
        };
        let c = tape.cos(phase)?;
        let s = tape.sin(phase)?;
        let enc = tape.concat(&[c, s])?;
        match amplitude {
            Some(a) => tape.mul(enc, a),
            None => Ok(enc),
        }
    }
}

fn tape_reshape_col(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    tape.reshape(v, [n, 1])
}

/// Pre-defined orthogonal projection of 3D points onto coordinate planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthogonalGauge {
    /// Drops one axis, keeping the other two in order.
    Single { drop_axis: usize },
    /// The three planes `(x, y)`, `(x, z)`, `(y, z)`.
    Triplane,
}

impl OrthogonalGauge {
    pub fn planes(&self) -> Vec<[usize; 2]> {
        match *self {
            OrthogonalGauge::Single { drop_axis } => {
                let kept: Vec<usize> = (0..3).filter(|&a| a != drop_axis).collect();
                vec![[kept[0], kept[1]]]
            }
            OrthogonalGauge::Triplane => vec![[0, 1], [0, 2], [1, 2]],
        }
    }

    pub fn project(&self, x: [f64; 3]) -> Vec<[f64; 2]> {
        self.planes().iter().map(|&[a, b]| [x[a], x[b]]).collect()
    }

    /// First plane of the projection for a `[n, 3]` batch.
    pub fn project_batch(&self, points: &Tensor) -> Result<Tensor> {
        self.project_plane(points, 0)
    }

    pub fn project_plane(&self, points: &Tensor, plane: usize) -> Result<Tensor> {
        if points.last_dim() != 3 {
            return Err(Error::shape("orthogonal_project", points.shape(), &[3]));
        }
        let [a, b] = self.planes()[plane];
        let mut data = Vec::with_capacity(points.outer_len() * 2);
        for r in 0..points.outer_len() {
            let q = points.row(r);
            data.push(q[a]);
            data.push(q[b]);
        }
        Ok(Tensor::from_parts(vec![points.outer_len(), 2], data))
    }
}

pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// `(i_x π1 XOR i_y π2 XOR i_z π3) mod T`, with wrapping 64-bit products.
pub fn spatial_hash(i: [u64; 3], table_size: usize) -> Result<usize> {
    if table_size == 0 {
        return Err(Error::invalid("hash table size must be positive"));
    }
    let h = i
        .iter()
        .zip(HASH_PRIMES)
        .fold(0u64, |acc, (&c, p)| acc ^ c.wrapping_mul(p));
    Ok((h % table_size as u64) as usize)
}

/// Pre-defined discrete gauge: hashes grid corners into a feature table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashGauge {
    pub table_size: usize,
}

impl HashGauge {
    pub fn new(table_size: usize) -> Result<Self> {
        if table_size == 0 {
            return Err(Error::invalid("hash table size must be positive"));
        }
        Ok(Self { table_size })
    }

    /// Trilinear corners on an `m^3` grid with hashed row indices.
    pub fn corners(&self, m: usize, points: &Tensor) -> Result<Corners> {
        check_unit_cube("spatial_hash", points)?;
        let c = grid_corners(&[m, m, m], points)?;
        let index = c
            .index
            .iter()
            .map(|&flat| {
                let (i, j, k) = (flat / (m * m), (flat / m) % m, flat % m);
                spatial_hash([i as u64, j as u64, k as u64], self.table_size)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corners {
            index: Arc::new(index),
            weight: c.weight,
            per_point: c.per_point,
        })
    }
}

//! Neural-field backbones: coordinate MLPs, interpolated feature grids and
//! layered codebooks.

use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{randn, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    widths: Vec<usize>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("mlp {name}: bad widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = i == widths.len() - 2;
            // He init for ReLU layers, unit-gain for the linear output.
            let std = if last {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let wid = store.add(format!("{name}.{i}.weight"), randn([fan_in, fan_out], std, rng));
            let bid = store.add(format!("{name}.{i}.bias"), Tensor::zeros([fan_out]));
            layers.push((wid, bid));
        }
        Ok(Self {
            layers,
            widths: widths.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Scales the final layer's weights and sets its bias.
    pub fn init_output(&self, store: &mut ParamStore, weight_scale: f64, bias: &[f64]) {
        let (w, b) = *self.layers.last().unwrap();
        for v in store.get_mut(w).data_mut() {
            *v *= weight_scale;
        }
        let bt = store.get_mut(b);
        for (dst, &src) in bt.data_mut().iter_mut().zip(bias.iter().cycle()) {
            *dst = src;
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let dim = tape.value(x).last_dim();
        if dim != self.input_dim() {
            return Err(Error::shape(
                "mlp_forward",
                tape.shape(x),
                &[self.input_dim()],
            ));
        }
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, p[w])?;
            h = tape.add_row(h, p[b])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Density/color field: an MLP trunk with a softplus density head and a
/// sigmoid color head. The color head optionally sees the view direction.
#[derive(Clone, Debug)]
pub struct MlpField {
    trunk: Mlp,
    density_head: Mlp,
    color_head: Mlp,
    view_dependent: bool,
}

/// Output of a radiance field query on a batch of `n` points.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[n]`, non-negative.
    pub density: Var,
    /// `[n, 3]`, in `[0, 1]`.
    pub color: Var,
}

impl MlpField {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        view_dependent: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::invalid(format!("field {name} needs at least one hidden layer")));
        }
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        let feat = *widths.last().unwrap();
        let trunk = Mlp::new(store, &format!("{name}.trunk"), &widths, rng)?;
        let density_head = Mlp::new(store, &format!("{name}.density"), &[feat, 1], rng)?;
        let color_in = feat + if view_dependent { 3 } else { 0 };
        let color_head = Mlp::new(store, &format!("{name}.color"), &[color_in, 3], rng)?;
        Ok(Self {
            trunk,
            density_head,
            color_head,
            view_dependent,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn view_dependent(&self) -> bool {
        self.view_dependent
    }

    pub fn density_head(&self) -> &Mlp {
        &self.density_head
    }

    /// Every parameter of the field, in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.trunk, &self.density_head, &self.color_head]
            .iter()
            .flat_map(|m| m.layers().iter().flat_map(|&(w, b)| [w, b]))
            .collect()
    }

    /// Trunk features before the heads; ReLU-activated.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.trunk.forward(tape, p, x)?;
        tape.relu(h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        view_dir: Option<Var>,
    ) -> Result<FieldOutput> {
        let h = self.features(tape, p, x)?;
        let d = self.density_head.forward(tape, p, h)?;
        let d = tape.softplus(d)?;
        let n = tape.value(d).len();
        let density = tape.reshape(d, [n])?;
        let color_in = match (self.view_dependent, view_dir) {
            (true, Some(v)) => tape.concat(&[h, v])?,
            (true, None) => {
                return Err(Error::invalid("view-dependent field queried without view direction"))
            }
            (false, _) => h,
        };
        let c = self.color_head.forward(tape, p, color_in)?;
        let color = tape.sigmoid(c)?;
        Ok(FieldOutput { density, color })
    }
}

/// Regular grid of feature vectors over the closed unit hypercube.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    resolution: Vec<usize>,
    feature_dim: usize,
    values: ParamId,
}

/// Corner indices and multilinear weights for a batch of queries.
#[derive(Clone, Debug)]
pub struct Corners {
    /// `n * 2^d` row indices into the grid values.
    pub index: Arc<Vec<usize>>,
    /// Matching interpolation weights; each block of `2^d` sums to one.
    pub weight: Vec<f64>,
    pub per_point: usize,
}

impl FeatureGrid {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        resolution: &[usize],
        feature_dim: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if resolution.is_empty() || resolution.iter().any(|&r| r < 2) || feature_dim == 0 {
            return Err(Error::invalid(format!(
                "grid {name}: every axis needs >= 2 points, got {resolution:?} x {feature_dim}"
            )));
        }
        let count: usize = resolution.iter().product();
        let values = store.add(
            format!("{name}.values"),
            randn([count, feature_dim], init_std, rng),
        );
        Ok(Self {
            resolution: resolution.to_vec(),
            feature_dim,
            values,
        })
    }

    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn values(&self) -> ParamId {
        self.values
    }

    /// Multilinear corner weights for each row of `points` (`[n, d]`).
    pub fn corners(&self, points: &Tensor) -> Result<Corners> {
        grid_corners(&self.resolution, points)
    }

    /// Interpolated features `[n, feature_dim]` for `points` (`[n, d]`).
    pub fn query(&self, tape: &mut Tape, p: &Bound, points: &Tensor) -> Result<Var> {
        let c = self.corners(points)?;
        interpolate_rows(tape, p[self.values], &c)
    }
}

/// Computes corner indices and weights for points on a grid with the given
/// per-axis resolution. Points must lie in the closed unit cube.
pub fn grid_corners(resolution: &[usize], points: &Tensor) -> Result<Corners> {
    let d = resolution.len();
    if points.last_dim() != d {
        return Err(Error::shape("grid_interpolate", points.shape(), &[d]));
    }
    let per_point = 1usize << d;
    let n = points.outer_len();
    let mut index = Vec::with_capacity(n * per_point);
    let mut weight = Vec::with_capacity(n * per_point);
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0f64; d];
    for r in 0..n {
        let q = points.row(r);
        for a in 0..d {
            let u = q[a];
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::domain(
                    "grid_interpolate",
                    format!("coordinate {u} on axis {a} lies outside [0, 1]"),
                ));
            }
            let s = u * (resolution[a] - 1) as f64;
            let i0 = (s.floor() as usize).min(resolution[a] - 2);
            base[a] = i0;
            frac[a] = s - i0 as f64;
        }
        for corner in 0..per_point {
            let mut flat = 0usize;
            let mut w = 1.0;
            for a in 0..d {
                let bit = (corner >> (d - 1 - a)) & 1;
                flat = flat * resolution[a] + base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            index.push(flat);
            weight.push(w);
        }
    }
    Ok(Corners {
        index: Arc::new(index),
        weight,
        per_point,
    })
}

/// Gathers corner rows of `values` and blends them with the corner weights.
/// `[x, sin(2^k π x), cos(2^k π x)]` for `k < bands`; width `d (1 + 2 bands)`.
pub fn frequency_encoding(tape: &mut Tape, x: Var, bands: usize) -> Result<Var> {
    if bands == 0 {
        return Ok(x);
    }
    let mut parts = vec![x];
    for k in 0..bands {
        let s = tape.scale(x, std::f64::consts::PI * (1u64 << k) as f64)?;
        parts.push(tape.sin(s)?);
        parts.push(tape.cos(s)?);
    }
    tape.concat(&parts)
}

pub fn interpolate_rows(tape: &mut Tape, values: Var, c: &Corners) -> Result<Var> {
    let rows = tape.gather_rows(values, Arc::clone(&c.index))?;
    let w = tape.constant(Tensor::from_parts(vec![c.weight.len()], c.weight.clone()));
    let rows = tape.mul_col(rows, w)?;
    tape.sum_groups(rows, c.per_point)
}

/// Direct (tape-free) multilinear interpolation of a single point.
pub fn grid_interpolate(grid: &FeatureGrid, store: &ParamStore, point: &[f64]) -> Result<Vec<f64>> {
    let pts = Tensor::new([1, point.len()], point.to_vec())?;
    let c = grid.corners(&pts)?;
    let values = store.get(grid.values);
    let mut out = vec![0.0; grid.feature_dim];
    for (&i, &w) in c.index.iter().zip(&c.weight) {
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Layered table of learnable feature vectors.
#[derive(Clone, Debug)]
pub struct Codebook {
    layers: Vec<ParamId>,
    entries: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        entries: usize,
        dim: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 || entries == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "codebook {name}: layers, entries and dim must be positive"
            )));
        }
        let layers = (0..layers)
            .map(|l| store.add(format!("{name}.{l}"), randn([entries, dim], init_std, rng)))
            .collect();
        Ok(Self {
            layers,
            entries,
            dim,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, l: usize) -> ParamId {
        self.layers[l]
    }

    /// `weights^T V` for one weight vector; exact selection for one-hot weights.
    pub fn lookup(&self, store: &ParamStore, layer: usize, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.entries {
            return Err(Error::shape("codebook_lookup", &[weights.len()], &[self.entries]));
        }
        if layer >= self.layers.len() {
            return Err(Error::invalid(format!("codebook has no layer {layer}")));
        }
        let v = store.get(self.layers[layer]);
        let mut out = vec![0.0; self.dim];
        for (i, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, &x) in out.iter_mut().zip(v.row(i)) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }

    /// Batched lookup on the tape: `weights` is `[n, entries]`.
    pub fn lookup_batch(&self, tape: &mut Tape, p: &Bound, layer: usize, weights: Var) -> Result<Var> {
        if tape.value(weights).last_dim() != self.entries {
            return Err(Error::shape("codebook_lookup", tape.shape(weights), &[self.entries]));
        }
        tape.matmul(weights, p[self.layers[layer]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn corner_query_returns_corner_exactly() {
        let mut store = ParamStore::new();
        let g = FeatureGrid::new(&mut store, "g", &[3, 3, 3], 4, 1.0, &mut rng()).unwrap();
        let v = store.get(g.values()).clone();
        // Grid point (1, 2, 0) sits at (0.5, 1.0, 0.0).
        let f = grid_interpolate(&g, &store, &[0.5, 1.0, 0.0]).unwrap();
        let flat = (3 + 2) * 3;
        assert_eq!(f.as_slice(), v.row(flat));
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let mut store = ParamStore::new();
        let g = FeatureGrid::new(&mut store, "g", &[2, 2, 2], 3, 1.0, &mut rng()).unwrap();
        let v = store.get(g.values()).clone();
        let f = grid_interpolate(&g, &store, &[0.5, 0.5, 0.5]).unwrap();
        for k in 0..3 {
            let mean: f64 = (0..8).map(|i| v.row(i)[k]).sum::<f64>() / 8.0;
            assert!((f[k] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn one_dimensional_interpolation() {
        let mut store = ParamStore::new();
        let g = FeatureGrid::new(&mut store, "g", &[2], 1, 1.0, &mut rng()).unwrap();
        store.set(g.values(), Tensor::new([2, 1], vec![2.0, 10.0]).unwrap()).unwrap();
        let f = grid_interpolate(&g, &store, &[0.25]).unwrap();
        assert_eq!(f[0], 0.75 * 2.0 + 0.25 * 10.0);
    }

    #[test]
    fn query_outside_unit_cube_is_rejected() {
        let mut store = ParamStore::new();
        let g = FeatureGrid::new(&mut store, "g", &[4, 4], 2, 1.0, &mut rng()).unwrap();
        assert!(matches!(
            grid_interpolate(&g, &store, &[0.5, 1.0001]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn zero_weight_field_outputs_ln2_and_half_gray() {
        let mut store = ParamStore::new();
        let f = MlpField::new(&mut store, "f", 3, &[8, 8], false, &mut rng()).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new([2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap());
        let out = f.forward(&mut tape, &p, x, None).unwrap();
        for &d in tape.value(out.density).data() {
            assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        }
        for &c in tape.value(out.color).data() {
            assert_eq!(c, 0.5);
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, "m", &[3, 4, 1], &mut rng()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros([5, 2]));
        assert!(m.forward(&mut tape, &p, x).is_err());
    }

    #[test]
    fn codebook_lookup_cases() {
        let mut store = ParamStore::new();
        let book = Codebook::new(&mut store, "cb", 2, 4, 3, 1.0, &mut rng()).unwrap();
        let v = store.get(book.layer(1)).clone();
        let one_hot = book.lookup(&store, 1, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(one_hot.as_slice(), v.row(2));
        let half = book.lookup(&store, 1, &[0.5, 0.5, 0.0, 0.0]).unwrap();
        for k in 0..3 {
            assert!((half[k] - (v.row(0)[k] + v.row(1)[k]) / 2.0).abs() < 1e-15);
        }
        let zero = book.lookup(&store, 0, &[0.0; 4]).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
        assert!(book.lookup(&store, 0, &[1.0; 3]).is_err());
    }
}

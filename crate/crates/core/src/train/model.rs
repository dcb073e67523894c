//! Gauge + field compositions for every configured gauge kind.

use std::ops::Range;

use rand::Rng;

use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{frequency_encoding, interpolate_rows, Codebook, FeatureGrid, Mlp, MlpField};
use crate::gauge::{ContinuousGauge, DiscreteGauge, GaugeOutput, HashGauge, InfoInvEncoder, OrthogonalGauge};
use crate::regularize::{CriticNetwork, InverseGauge};
use crate::render::{composite_tape, stratified_sample, CompositeVars, Ray, Vec3};

use super::config::{ContinuousVariant, GaugeKind, LogitKind, RegKind, TrainConfig};

/// Gauge feeding a texture-style field (color looked up in 2D).
#[derive(Clone, Debug)]
pub enum TextureGauge {
    Learned(ContinuousGauge),
    Fixed(OrthogonalGauge),
}

#[derive(Clone, Debug)]
pub enum Body {
    /// Density from 3D, color from gauge coordinates.
    Texture {
        gauge: TextureGauge,
        density: Mlp,
        color: Mlp,
        density_bands: usize,
        texture_bands: usize,
    },
    Discrete {
        gauge: DiscreteGauge,
        book: Codebook,
        head: MlpField,
    },
    Hash {
        gauge: HashGauge,
        resolutions: Vec<usize>,
        tables: Vec<ParamId>,
        head: MlpField,
    },
    Grid {
        grid: FeatureGrid,
        encoder: Option<InfoInvEncoder>,
        head: MlpField,
        /// Feed the raw grid feature alongside the encoded one.
        keep_features: bool,
    },
}

/// Per-point outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct PointOutput {
    /// `[n]`.
    pub sigma: Var,
    /// `[n, 3]`.
    pub color: Var,
    /// Learned continuous gauge output.
    pub gauge: Option<GaugeOutput>,
    /// Looked-up discrete feature `[n, L * D]`.
    pub feature: Option<Var>,
    /// Per-level corner softmax distributions of a discrete gauge.
    pub soft: Vec<Var>,
}

/// Stratified samples of a batch of rays, flattened ray-major.
#[derive(Clone, Debug)]
pub struct RayBatch {
    /// `[rays * samples, 3]` unit-cube coordinates.
    pub points: Tensor,
    /// `[rays * samples, 3]` unit directions.
    pub dirs: Tensor,
    /// `[rays, samples]`.
    pub delta: Tensor,
    pub rays: usize,
    pub samples: usize,
}

impl RayBatch {
    /// Rays must already be clipped to the scene box.
    pub fn new(rays: &[&Ray], samples: usize, mut rng: Option<&mut dyn rand::RngCore>) -> Result<Self> {
        if rays.is_empty() {
            return Err(Error::invalid("ray batch is empty"));
        }
        let n = rays.len() * samples;
        let mut points = Vec::with_capacity(n * 3);
        let mut dirs = Vec::with_capacity(n * 3);
        let mut delta = Vec::with_capacity(n);
        for ray in rays {
            let s = match rng {
                Some(ref mut r) => stratified_sample(ray, samples, Some(&mut **r))?,
                None => stratified_sample(ray, samples, None)?,
            };
            for &t in &s.t {
                let p = ray.at(t);
                points.extend(p.iter().map(|c| (c + crate::render::HALF_EXTENT).clamp(0.0, 1.0)));
                dirs.extend_from_slice(&ray.direction);
            }
            delta.extend(s.delta);
        }
        Ok(Self {
            points: Tensor::new(vec![n, 3], points)?,
            dirs: Tensor::new(vec![n, 3], dirs)?,
            delta: Tensor::new(vec![rays.len(), samples], delta)?,
            rays: rays.len(),
            samples,
        })
    }
}

/// A trainable scene model: field, gauge and auxiliary networks in one store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub body: Body,
    pub critic: Option<CriticNetwork>,
    pub inverse: Option<InverseGauge>,
    view_dependent: bool,
    main: Range<usize>,
    critic_ids: Range<usize>,
    inverse_ids: Range<usize>,
}

impl Model {
    /// Builds the model for `cfg`. Field and gauge parameters are drawn
    /// first, so auxiliary networks never perturb them.
    pub fn new(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let view_dependent = cfg.field.view_dependent;
        let body = build_body(cfg, &mut store, rng)?;
        let main = 0..store.len();
        let mut critic = None;
        let mut inverse = None;
        let start = store.len();
        if cfg.regularizer.kind == RegKind::Inforeg && !cfg.regularizer.prior_only {
            let y_dim = match cfg.gauge {
                GaugeKind::Continuous => 2,
                _ => cfg.discrete.resolutions.len() * cfg.discrete.dim,
            };
            critic = Some(CriticNetwork::new(&mut store, "critic", 3, y_dim, rng)?);
        }
        let critic_ids = start..store.len();
        let start = store.len();
        if cfg.regularizer.kind == RegKind::Cycle {
            inverse = Some(InverseGauge::new(&mut store, "inverse", 2, &cfg.regularizer.inverse_hidden, rng)?);
        }
        let inverse_ids = start..store.len();
        Ok(Self {
            store,
            body,
            critic,
            inverse,
            view_dependent,
            main,
            critic_ids,
            inverse_ids,
        })
    }

    /// Field and gauge parameters plus the inverse network, if any.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.main.clone().chain(self.inverse_ids.clone()).map(ParamId).collect()
    }

    pub fn critic_ids(&self) -> Vec<ParamId> {
        self.critic_ids.clone().map(ParamId).collect()
    }

    pub fn continuous_gauge(&self) -> Option<&ContinuousGauge> {
        match &self.body {
            Body::Texture {
                gauge: TextureGauge::Learned(g),
                ..
            } => Some(g),
            _ => None,
        }
    }

    pub fn discrete_gauge(&self) -> Option<(&DiscreteGauge, &Codebook)> {
        match &self.body {
            Body::Discrete { gauge, book, .. } => Some((gauge, book)),
            _ => None,
        }
    }

    /// 2D gauge coordinates of unit-cube points for texture-style models.
    pub fn gauge_coords(&self, points: &Tensor) -> Result<Option<Tensor>> {
        match &self.body {
            Body::Texture {
                gauge: TextureGauge::Learned(g),
                ..
            } => g.map_points(&self.store, points).map(Some),
            Body::Texture {
                gauge: TextureGauge::Fixed(proj),
                ..
            } => match proj {
                OrthogonalGauge::Single { .. } => proj.project_batch(points).map(Some),
                OrthogonalGauge::Triplane => Ok(None),
            },
            _ => Ok(None),
        }
    }

    /// Field query at unit-cube `points` (`[n, 3]`).
    pub fn forward_points(&self, tape: &mut Tape, p: &Bound, points: &Tensor, dirs: Option<&Tensor>) -> Result<PointOutput> {
        let n = points.outer_len();
        let view = match (self.view_dependent, dirs) {
            (true, Some(d)) => Some(tape.constant(d.clone())),
            (true, None) => return Err(Error::invalid("view-dependent model queried without directions")),
            (false, _) => None,
        };
        match &self.body {
            Body::Texture {
                gauge,
                density,
                color,
                density_bands,
                texture_bands,
            } => {
                let x = tape.constant(points.clone());
                let x = frequency_encoding(tape, x, *density_bands)?;
                let (uv, gout) = match gauge {
                    TextureGauge::Learned(g) => {
                        let out = g.forward(tape, p, points)?;
                        (out.coords, Some(out))
                    }
                    TextureGauge::Fixed(proj) => (tape.constant(proj.project_batch(points)?), None),
                };
                let d = density.forward(tape, p, x)?;
                let d = tape.softplus(d)?;
                let sigma = tape.reshape(d, [n])?;
                let enc = frequency_encoding(tape, uv, *texture_bands)?;
                let cin = match view {
                    Some(v) => tape.concat(&[enc, v])?,
                    None => enc,
                };
                let c = color.forward(tape, p, cin)?;
                let color = tape.sigmoid(c)?;
                Ok(PointOutput {
                    sigma,
                    color,
                    gauge: gout,
                    feature: None,
                    soft: Vec::new(),
                })
            }
            Body::Discrete { gauge, book, head } => {
                let out = gauge.forward(tape, p, book, points)?;
                let f = head.forward(tape, p, out.feature, view)?;
                Ok(PointOutput {
                    sigma: f.density,
                    color: f.color,
                    gauge: None,
                    feature: Some(out.feature),
                    soft: out.soft,
                })
            }
            Body::Hash {
                gauge,
                resolutions,
                tables,
                head,
            } => {
                let mut feats = Vec::with_capacity(tables.len());
                for (&m, &t) in resolutions.iter().zip(tables) {
                    let c = gauge.corners(m, points)?;
                    feats.push(interpolate_rows(tape, p[t], &c)?);
                }
                let feat = if feats.len() == 1 { feats[0] } else { tape.concat(&feats)? };
                let f = head.forward(tape, p, feat, view)?;
                Ok(PointOutput {
                    sigma: f.density,
                    color: f.color,
                    gauge: None,
                    feature: None,
                    soft: Vec::new(),
                })
            }
            Body::Grid {
                grid,
                encoder,
                head,
                keep_features,
            } => {
                let mut feat = grid.query(tape, p, points)?;
                if let Some(enc) = encoder {
                    let m = tape.constant(points.clone());
                    let encoded = enc.encode(tape, p, &self.store, m, Some(feat))?;
                    feat = if *keep_features { tape.concat(&[feat, encoded])? } else { encoded };
                }
                let f = head.forward(tape, p, feat, view)?;
                Ok(PointOutput {
                    sigma: f.density,
                    color: f.color,
                    gauge: None,
                    feature: None,
                    soft: Vec::new(),
                })
            }
        }
    }

    /// Renders a ray batch; returns per-point outputs and composited colors.
    pub fn render(&self, tape: &mut Tape, p: &Bound, batch: &RayBatch, background: Vec3) -> Result<(PointOutput, CompositeVars)> {
        let out = self.forward_points(tape, p, &batch.points, Some(&batch.dirs))?;
        let sigma = tape.reshape(out.sigma, [batch.rays, batch.samples])?;
        let comp = composite_tape(tape, sigma, out.color, &batch.delta, background)?;
        Ok((out, comp))
    }

    /// Renders clipped rays without recording gradients, in chunks.
    pub fn render_rays(&self, rays: &[Option<Ray>], samples: usize, background: Vec3) -> Result<Vec<Vec3>> {
        const CHUNK: usize = 512;
        let mut out = vec![background; rays.len()];
        let hits: Vec<usize> = (0..rays.len()).filter(|&i| rays[i].is_some()).collect();
        for chunk in hits.chunks(CHUNK) {
            let rs: Vec<&Ray> = chunk.iter().map(|&i| rays[i].as_ref().unwrap()).collect();
            let batch = RayBatch::new(&rs, samples, None)?;
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false);
            let (_, comp) = self.render(&mut tape, &p, &batch, background)?;
            let rgb = tape.value(comp.rgb);
            for (k, &i) in chunk.iter().enumerate() {
                let r = rgb.row(k);
                out[i] = [r[0], r[1], r[2]];
            }
        }
        Ok(out)
    }

    /// Rendering weights `[rays * samples]` and sample points for clipped rays.
    pub fn sample_weights(&self, rays: &[&Ray], samples: usize, background: Vec3) -> Result<(Tensor, Vec<f64>)> {
        let batch = RayBatch::new(rays, samples, None)?;
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let (_, comp) = self.render(&mut tape, &p, &batch, background)?;
        let w = tape.value(comp.weights).data().to_vec();
        Ok((batch.points, w))
    }
}

fn build_body(cfg: &TrainConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Body> {
    let view_extra = if cfg.field.view_dependent { 3 } else { 0 };
    let texture = |store: &mut ParamStore, gauge: TextureGauge, uv_dim: usize, rng: &mut _| -> Result<Body> {
        let density_bands = cfg.field.density_frequencies;
        let texture_bands = cfg.field.texture_frequencies;
        let mut dw = vec![3 * (1 + 2 * density_bands)];
        dw.extend_from_slice(&cfg.field.hidden);
        dw.push(1);
        let density = Mlp::new(store, "field.density", &dw, rng)?;
        let mut cw = vec![uv_dim * (1 + 2 * texture_bands) + view_extra];
        cw.extend_from_slice(&cfg.field.hidden);
        cw.push(3);
        let color = Mlp::new(store, "field.color", &cw, rng)?;
        Ok(Body::Texture {
            gauge,
            density,
            color,
            density_bands,
            texture_bands,
        })
    };
    match cfg.gauge {
        GaugeKind::Continuous => {
            let c = &cfg.continuous;
            let g = match c.variant {
                ContinuousVariant::Mlp => ContinuousGauge::mlp(store, "gauge", &c.hidden, 2, c.out_scale, rng)?,
                ContinuousVariant::Offset => {
                    ContinuousGauge::offset(store, "gauge", &c.hidden, c.projection, c.out_scale, rng)?
                }
                ContinuousVariant::Grid => ContinuousGauge::grid(store, "gauge", c.grid_resolution, c.grid_init_std, rng)?,
            };
            texture(store, TextureGauge::Learned(g), 2, rng)
        }
        GaugeKind::Orthogonal => {
            let proj = cfg.continuous.projection;
            let dim = 2 * proj.planes().len();
            texture(store, TextureGauge::Fixed(proj), dim, rng)
        }
        GaugeKind::Discrete => {
            let d = &cfg.discrete;
            let gauge = match d.logits {
                LogitKind::Tensor => {
                    DiscreteGauge::new_tensor(store, "gauge", &d.resolutions, d.entries, d.k, d.logit_init_std, rng)?
                }
                LogitKind::Mlp => DiscreteGauge::new_mlp(
                    store,
                    "gauge",
                    &d.resolutions,
                    d.entries,
                    d.k,
                    &d.logit_hidden,
                    d.logit_frequencies,
                    rng,
                )?,
            };
            let book = Codebook::new(store, "codebook", d.resolutions.len(), d.entries, d.dim, d.codebook_init_std, rng)?;
            let head = MlpField::new(
                store,
                "field",
                d.resolutions.len() * d.dim,
                &cfg.field.head_hidden,
                cfg.field.view_dependent,
                rng,
            )?;
            Ok(Body::Discrete { gauge, book, head })
        }
        GaugeKind::Hash => {
            let h = &cfg.hash;
            let gauge = HashGauge::new(h.table_size)?;
            let tables = (0..h.resolutions.len())
                .map(|l| store.add(format!("hash.table.{l}"), crate::diffcore::randn([h.table_size, h.dim], h.init_std, rng)))
                .collect();
            let head = MlpField::new(
                store,
                "field",
                h.resolutions.len() * h.dim,
                &cfg.field.head_hidden,
                cfg.field.view_dependent,
                rng,
            )?;
            Ok(Body::Hash {
                gauge,
                resolutions: h.resolutions.clone(),
                tables,
                head,
            })
        }
        GaugeKind::Grid | GaugeKind::Infoinv => {
            let g = &cfg.grid;
            let grid = FeatureGrid::new(store, "grid", &[g.resolution; 3], g.channels, g.init_std, rng)?;
            let encoder = (cfg.gauge == GaugeKind::Infoinv).then(|| {
                if g.learnable_frequencies {
                    InfoInvEncoder::learnable(store, "infoinv", 3, g.frequencies)
                } else {
                    InfoInvEncoder::geometric(3, g.frequencies)
                }
            });
            let keep = encoder.is_some() && g.keep_features;
            let width = if keep { 2 * g.channels } else { g.channels };
            let head = MlpField::new(store, "field", width, &cfg.field.head_hidden, cfg.field.view_dependent, rng)?;
            Ok(Body::Grid {
                grid,
                encoder,
                head,
                keep_features: keep,
            })
        }
    }
}

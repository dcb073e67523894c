//! Occupancy, utilization, held-out evaluation and the metric log.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::gauge::{ContinuousGauge, DiscreteGauge};
use crate::render::{psnr, Image, Ray, Vec3};
use crate::scene::{render_scene_ray, CameraRig, RenderSettings, VoxelScene};

use super::data::{rig_rays, SURFACE_WEIGHT};
use super::model::Model;

/// Fraction of the `g × g` cells of the unit square hit by at least one
/// coordinate row of `coords` (`[n, 2]`).
pub fn occupancy_from_coords(coords: &Tensor, g: usize) -> Result<f64> {
    if coords.last_dim() != 2 || g == 0 {
        return Err(Error::shape("occupancy", coords.shape(), &[2]));
    }
    let cell = |v: f64| ((v * g as f64).floor() as i64).clamp(0, g as i64 - 1) as usize;
    let occupied: HashSet<usize> = coords.data().chunks(2).map(|r| cell(r[0]) * g + cell(r[1])).collect();
    Ok(occupied.len() as f64 / (g * g) as f64)
}

/// Keeps points whose weight reaches [`SURFACE_WEIGHT`].
fn significant(points: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if weights.len() != points.outer_len() {
        return Err(Error::shape("occupancy weights", &[points.outer_len()], &[weights.len()]));
    }
    let d = points.last_dim();
    let data: Vec<f64> = points
        .data()
        .chunks(d)
        .zip(weights)
        .filter(|(_, &w)| w >= SURFACE_WEIGHT)
        .flat_map(|(r, _)| r.to_vec())
        .collect();
    if data.is_empty() {
        return Err(Error::invalid("no point reaches the radiance-weight threshold"));
    }
    let n = data.len() / d;
    Tensor::new(vec![n, d], data)
}

/// Occupied fraction of the target square for the radiance-significant
/// `points` mapped through `gauge`.
pub fn occupancy_metric(
    gauge: &ContinuousGauge,
    store: &ParamStore,
    points: &Tensor,
    weights: &[f64],
    g: usize,
) -> Result<f64> {
    let kept = significant(points, weights)?;
    occupancy_from_coords(&gauge.map_points(store, &kept)?, g)
}

/// Occupancy for any texture-style model (learned or single-plane fixed gauge).
pub fn model_occupancy(model: &Model, points: &Tensor, weights: &[f64], g: usize) -> Result<Option<f64>> {
    let kept = significant(points, weights)?;
    match model.gauge_coords(&kept)? {
        Some(c) => occupancy_from_coords(&c, g).map(Some),
        None => Ok(None),
    }
}

/// Fraction of entries that are the top-1 choice of at least one grid
/// point, averaged over levels.
pub fn utilization_from_selection(selection: &[Vec<usize>], entries: usize) -> f64 {
    let total: f64 = selection
        .iter()
        .map(|level| level.iter().collect::<HashSet<_>>().len() as f64 / entries as f64)
        .sum();
    total / selection.len() as f64
}

pub fn utilization_metric(gauge: &DiscreteGauge, store: &ParamStore) -> Result<f64> {
    Ok(utilization_from_selection(&gauge.argmax_all(store)?, gauge.entries()))
}

/// Anything that renders world rays to colors.
pub trait RayRenderer {
    fn render(&self, rays: &[Option<Ray>], samples: usize, background: Vec3) -> Result<Vec<Vec3>>;
}

impl RayRenderer for Model {
    fn render(&self, rays: &[Option<Ray>], samples: usize, background: Vec3) -> Result<Vec<Vec3>> {
        self.render_rays(rays, samples, background)
    }
}

impl RayRenderer for VoxelScene {
    fn render(&self, rays: &[Option<Ray>], samples: usize, background: Vec3) -> Result<Vec<Vec3>> {
        let settings = RenderSettings { samples, background };
        rays.iter()
            .map(|r| match r {
                Some(r) => render_scene_ray(self, r, &settings),
                None => Ok(background),
            })
            .collect()
    }
}

/// Renders every view of a rig.
pub fn render_views(renderer: &dyn RayRenderer, rig: &CameraRig, samples: usize, background: Vec3) -> Result<Vec<Image>> {
    let rays = rig_rays(rig)?;
    let colors = renderer.render(&rays, samples, background)?;
    let per = rig.width * rig.height;
    Ok(colors
        .chunks(per)
        .map(|c| Image {
            width: rig.width,
            height: rig.height,
            data: c.iter().flatten().copied().collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_view: Vec<f64>,
    pub mean: f64,
}

impl EvalReport {
    /// `view,psnr` rows plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr\n");
        for (i, v) in self.per_view.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        let _ = writeln!(s, "mean,{}", self.mean);
        s
    }
}

/// Held-out PSNR per view and their arithmetic mean.
pub fn evaluate(renderer: &dyn RayRenderer, rig: &CameraRig, references: &[Image], samples: usize, background: Vec3) -> Result<EvalReport> {
    if references.len() != rig.len() {
        return Err(Error::invalid(format!("{} reference images for {} views", references.len(), rig.len())));
    }
    if let Some(r) = references.iter().find(|r| (r.width, r.height) != (rig.width, rig.height)) {
        return Err(Error::invalid(format!(
            "reference is {}x{} but the rig renders {}x{}",
            r.width, r.height, rig.width, rig.height
        )));
    }
    let images = render_views(renderer, rig, samples, background)?;
    let per_view = images.iter().zip(references).map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
    let mean = per_view.iter().sum::<f64>() / per_view.len().max(1) as f64;
    Ok(EvalReport { per_view, mean })
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: f64,
    pub occupancy: Option<f64>,
    pub utilization: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const METRIC_HEADER: &str = "step,loss,psnr,occupancy,utilization";

impl MetricLog {
    /// CSV with [`METRIC_HEADER`]; metrics that do not apply are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = format!("{METRIC_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.psnr, opt(r.occupancy), opt(r.utilization));
        }
        s
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

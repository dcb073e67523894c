//! Supervision built from a procedural scene or a loaded dataset.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::render::{composite, make_rays, pixel_centers, stratified_sample, Image, Ray, Vec3};
use crate::scene::{
    load_nerf_dataset, look_at_origin, orbit_cameras, render_ground_truth, world_to_unit, CameraRig, RenderSettings,
    VoxelScene,
};

use super::config::{SceneConfig, TrainConfig};

/// Minimum radiance weight of a surface sample.
pub const SURFACE_WEIGHT: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_rig: CameraRig,
    pub test_rig: CameraRig,
    pub train_images: Vec<Image>,
    pub test_images: Vec<Image>,
    /// Training rays clipped to the scene box, with their pixel colors.
    pub rays: Vec<Ray>,
    pub targets: Vec<Vec3>,
    /// Radiance-significant ground-truth samples (unit coordinates), when the
    /// scene is procedural.
    pub surface: Option<(Tensor, Vec<f64>)>,
    pub scene: Option<VoxelScene>,
}

/// Training and held-out rigs: held-out views sit halfway between training
/// azimuths.
pub fn scene_rigs(sc: &SceneConfig) -> Result<(CameraRig, CameraRig)> {
    let train = orbit_cameras(sc.train_views, sc.radius, sc.elevation, sc.width, sc.height, sc.fov)?;
    let offset = std::f64::consts::PI / sc.train_views as f64;
    let poses = (0..sc.test_views)
        .map(|i| {
            let az = offset + 2.0 * std::f64::consts::PI * i as f64 / sc.test_views.max(1) as f64;
            look_at_origin([
                sc.radius * sc.elevation.cos() * az.cos(),
                sc.radius * sc.elevation.cos() * az.sin(),
                sc.radius * sc.elevation.sin(),
            ])
        })
        .collect();
    let test = CameraRig {
        poses,
        ..train.clone()
    };
    Ok((train, test))
}

/// Clipped rays through every pixel of every view, `None` where the ray
/// misses the scene box.
pub fn rig_rays(rig: &CameraRig) -> Result<Vec<Option<Ray>>> {
    let pixels = pixel_centers(rig.width, rig.height);
    let mut out = Vec::with_capacity(rig.len() * pixels.len());
    for v in 0..rig.len() {
        out.extend(make_rays(&rig.camera(v), &pixels)?.iter().map(Ray::clip_to_scene));
    }
    Ok(out)
}

impl Dataset {
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let sc = &cfg.scene;
        let settings = RenderSettings {
            samples: sc.gt_samples,
            background: cfg.background,
        };
        let (train_rig, test_rig, train_images, test_images, scene) = match &sc.dataset {
            Some(dir) => {
                let (rig, images) = load_nerf_dataset(Path::new(dir))?;
                if images.len() < 2 {
                    return Err(Error::Config("a loaded dataset needs at least two views".into()));
                }
                let n_test = sc.test_views.clamp(1, images.len() - 1);
                let n_train = images.len() - n_test;
                let train_rig = rig.select(&(0..n_train).collect::<Vec<_>>());
                let test_rig = rig.select(&(n_train..images.len()).collect::<Vec<_>>());
                (train_rig, test_rig, images[..n_train].to_vec(), images[n_train..].to_vec(), None)
            }
            None => {
                let scene = VoxelScene::new(sc.kind, sc.seed);
                let (train_rig, test_rig) = scene_rigs(sc)?;
                let train_images = render_ground_truth(&scene, &train_rig, &settings)?;
                let test_images = render_ground_truth(&scene, &test_rig, &settings)?;
                (train_rig, test_rig, train_images, test_images, Some(scene))
            }
        };
        let mut rays = Vec::new();
        let mut targets = Vec::new();
        for (i, ray) in rig_rays(&train_rig)?.into_iter().enumerate() {
            if let Some(r) = ray {
                let img = &train_images[i / (train_rig.width * train_rig.height)];
                let px = i % (train_rig.width * train_rig.height);
                rays.push(r);
                targets.push(img.pixel(px % img.width, px / img.width));
            }
        }
        if rays.is_empty() {
            return Err(Error::Config("no training ray intersects the scene box".into()));
        }
        let surface = match &scene {
            Some(s) => {
                let k = cfg.occupancy_supersample;
                let dense = train_rig.with_resolution(train_rig.width * k, train_rig.height * k);
                let dense: Vec<Ray> = rig_rays(&dense)?.into_iter().flatten().collect();
                Some(surface_samples(s, &dense, cfg.eval_samples, cfg.occupancy_points, cfg.seed)?)
            }
            None => None,
        };
        Ok(Self {
            train_rig,
            test_rig,
            train_images,
            test_images,
            rays,
            targets,
            surface,
            scene,
        })
    }
}

/// Ground-truth samples with radiance weight at least [`SURFACE_WEIGHT`]
/// along the given rays, subsampled to at most `cap` points.
pub fn surface_samples(scene: &VoxelScene, rays: &[Ray], samples: usize, cap: usize, seed: u64) -> Result<(Tensor, Vec<f64>)> {
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    for ray in rays {
        let s = stratified_sample(ray, samples, None)?;
        let mut sigma = Vec::with_capacity(samples);
        let mut color = Vec::with_capacity(samples);
        let mut unit = Vec::with_capacity(samples);
        for &t in &s.t {
            let p = world_to_unit(ray.at(t));
            sigma.push(scene.density(p));
            color.push(scene.color(p));
            unit.push(p);
        }
        let c = composite(&sigma, &color, &s.delta, [0.0; 3])?;
        for (p, &w) in unit.iter().zip(&c.weights) {
            if w >= SURFACE_WEIGHT {
                pts.push(*p);
                ws.push(w);
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::invalid("scene has no radiance-significant samples"));
    }
    if pts.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5u64.rotate_left(40));
        let mut keep = sample(&mut rng, pts.len(), cap).into_vec();
        keep.sort_unstable();
        pts = keep.iter().map(|&i| pts[i]).collect();
        ws = keep.iter().map(|&i| ws[i]).collect();
    }
    let n = pts.len();
    Ok((Tensor::new(vec![n, 3], pts.into_iter().flatten().collect())?, ws))
}

//! Procedural scenes, orbit camera rigs and dataset I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{
    composite, cross, make_rays, normalize, pixel_centers, stratified_sample, Camera, Image, Pose, Vec3,
    HALF_EXTENT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Checkered sphere.
    Sphere,
    /// Axis-aligned box with a color gradient and stripes.
    Box,
    /// Two overlapping soft blobs with contrasting colors.
    Blobs,
    /// Nothing at all; every ray sees the background.
    Empty,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(SceneKind::Sphere),
            "box" => Ok(SceneKind::Box),
            "blobs" => Ok(SceneKind::Blobs),
            "empty" => Ok(SceneKind::Empty),
            other => Err(Error::invalid(format!(
                "unknown scene kind {other:?} (expected sphere, box, blobs or empty)"
            ))),
        }
    }
}

/// Analytic density and color over the unit cube.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelScene {
    pub kind: SceneKind,
    pub seed: u64,
    palette: [Vec3; 2],
    max_density: f64,
}

/// Creates a procedural scene; `kind` is parsed from its name.
pub fn make_toy_scene(kind: &str, seed: u64) -> Result<VoxelScene> {
    Ok(VoxelScene::new(kind.parse()?, seed))
}

impl VoxelScene {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |c: Vec3| -> Vec3 {
            let mut out = c;
            for v in out.iter_mut() {
                *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
            out
        };
        let palette = [jitter([0.95, 0.55, 0.15]), jitter([0.15, 0.35, 0.85])];
        Self {
            kind,
            seed,
            palette,
            max_density: 60.0,
        }
    }

    /// Density at a unit-cube point; zero outside the object's shell.
    pub fn density(&self, p: Vec3) -> f64 {
        let ramp = |signed: f64, width: f64| (signed / width + 0.5).clamp(0.0, 1.0);
        match self.kind {
            SceneKind::Sphere => {
                let d = dist(p, [0.5, 0.5, 0.5]);
                self.max_density * ramp(0.3 - d, 0.02)
            }
            SceneKind::Box => {
                let inside = p.iter().map(|&c| 0.22 - (c - 0.5).abs()).fold(f64::INFINITY, f64::min);
                self.max_density * ramp(inside, 0.02)
            }
            SceneKind::Blobs => {
                let a = ramp(0.22 - dist(p, [0.4, 0.45, 0.5]), 0.04);
                let b = ramp(0.16 - dist(p, [0.65, 0.6, 0.5]), 0.04);
                self.max_density * a.max(b)
            }
            SceneKind::Empty => 0.0,
        }
    }

    /// Albedo at a unit-cube point.
    pub fn color(&self, p: Vec3) -> Vec3 {
        let [a, b] = self.palette;
        match self.kind {
            SceneKind::Sphere => {
                // Checker over hemisphere and longitude quadrant.
                let hemi = (p[2] >= 0.5) as i64;
                let lon = (p[1] - 0.5).atan2(p[0] - 0.5) + std::f64::consts::PI;
                let sector = ((lon * 2.0 / std::f64::consts::PI).floor() as i64).min(3);
                let base = if (hemi + sector).rem_euclid(2) == 0 { a } else { b };
                let shade = 0.75 + 0.25 * p[2];
                base.map(|c| c * shade)
            }
            SceneKind::Box => {
                let stripe = ((p[0] + p[1]) * 5.0).floor() as i64;
                let base = if stripe.rem_euclid(2) == 0 { a } else { b };
                [base[0] * (0.6 + 0.4 * p[2]), base[1], base[2] * (0.6 + 0.4 * p[0])]
            }
            SceneKind::Blobs => {
                if dist(p, [0.4, 0.45, 0.5]) - 0.22 < dist(p, [0.65, 0.6, 0.5]) - 0.16 {
                    a
                } else {
                    b
                }
            }
            SceneKind::Empty => [0.0; 3],
        }
    }
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// World-space point to unit-cube coordinates, clamped against rounding.
pub fn world_to_unit(p: Vec3) -> Vec3 {
    p.map(|c| (c + HALF_EXTENT).clamp(0.0, 1.0))
}

/// Set of camera poses sharing intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub poses: Vec<Pose>,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn camera(&self, i: usize) -> Camera {
        Camera {
            pose: self.poses[i],
            focal: self.focal,
            width: self.width,
            height: self.height,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Same poses at a different image size, field of view preserved.
    pub fn with_resolution(&self, width: usize, height: usize) -> CameraRig {
        CameraRig {
            poses: self.poses.clone(),
            focal: self.focal * width as f64 / self.width as f64,
            width,
            height,
        }
    }

    /// Sub-rig of the given views.
    pub fn select(&self, views: &[usize]) -> CameraRig {
        CameraRig {
            poses: views.iter().map(|&i| self.poses[i]).collect(),
            ..self.clone()
        }
    }
}

/// Pose at `position` looking at the origin with world `+z` up.
pub fn look_at_origin(position: Vec3) -> Pose {
    let back = normalize(position);
    let mut right = cross([0.0, 0.0, 1.0], back);
    if right.iter().map(|v| v * v).sum::<f64>() < 1e-20 {
        right = [1.0, 0.0, 0.0];
    }
    let right = normalize(right);
    let up = cross(back, right);
    Pose {
        rotation: [
            [right[0], up[0], back[0]],
            [right[1], up[1], back[1]],
            [right[2], up[2], back[2]],
        ],
        position,
    }
}

/// `n` cameras at equal azimuths (starting at 0) on a circle of `radius`,
/// raised by `elevation` radians, all looking at the origin.
pub fn orbit_cameras(n: usize, radius: f64, elevation: f64, width: usize, height: usize, fov_x: f64) -> Result<CameraRig> {
    if n == 0 || !(radius > 0.0) {
        return Err(Error::invalid(format!("orbit needs n >= 1 and radius > 0, got {n}, {radius}")));
    }
    let poses = (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let pos = [
                radius * elevation.cos() * az.cos(),
                radius * elevation.cos() * az.sin(),
                radius * elevation.sin(),
            ];
            look_at_origin(pos)
        })
        .collect();
    Ok(CameraRig {
        poses,
        focal: focal_from_fov(width, fov_x),
        width,
        height,
    })
}

/// `0.5 W / tan(0.5 fov_x)`.
pub fn focal_from_fov(width: usize, fov_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * fov_x).tan()
}

/// Settings shared by ground-truth rendering and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub samples: usize,
    pub background: Vec3,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples: 128,
            background: [0.0; 3],
        }
    }
}

/// Renders the analytic scene along one world ray.
pub fn render_scene_ray(scene: &VoxelScene, ray: &crate::render::Ray, settings: &RenderSettings) -> Result<Vec3> {
    let Some(clipped) = ray.clip_to_scene() else {
        return Ok(settings.background);
    };
    let s = stratified_sample(&clipped, settings.samples, None)?;
    let mut sigma = Vec::with_capacity(s.t.len());
    let mut color = Vec::with_capacity(s.t.len());
    for &t in &s.t {
        let p = world_to_unit(clipped.at(t));
        sigma.push(scene.density(p));
        color.push(scene.color(p));
    }
    Ok(composite(&sigma, &color, &s.delta, settings.background)?.color)
}

/// Renders every view of the rig with the analytic scene.
pub fn render_ground_truth(scene: &VoxelScene, rig: &CameraRig, settings: &RenderSettings) -> Result<Vec<Image>> {
    let pixels = pixel_centers(rig.width, rig.height);
    (0..rig.len())
        .map(|v| {
            let rays = make_rays(&rig.camera(v), &pixels)?;
            let mut img = Image::new(rig.width, rig.height);
            for (i, ray) in rays.iter().enumerate() {
                let c = render_scene_ray(scene, ray, settings)?;
                img.set_pixel(i % rig.width, i / rig.width, c);
            }
            Ok(img)
        })
        .collect()
}

/// Writes a binary P6 PPM with 8-bit channels.
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary P6 PPM with maxval 255.
pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::format(path, "only binary P6 PPM with maxval 255 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PPM size {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::format(path, "truncated PPM data"))?;
    Ok(Image {
        width: w,
        height: h,
        data: body.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("unreadable image: {e}")))?
        .to_rgb8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => read_png(path),
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    camera_angle_x: f64,
    frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct Frame {
    file_path: String,
    transform_matrix: [[f64; 4]; 4],
}

const MANIFEST: &str = "transforms.json";

fn resolve_frame(dir: &Path, file: &str) -> PathBuf {
    let p = dir.join(file);
    if p.extension().is_some() && p.exists() {
        return p;
    }
    for ext in ["png", "ppm"] {
        let candidate = dir.join(format!("{file}.{ext}"));
        if candidate.exists() {
            return candidate;
        }
    }
    p
}

/// Loads a camera-transforms manifest (`transforms.json`) and its images.
pub fn load_nerf_dataset(dir: &Path) -> Result<(CameraRig, Vec<Image>)> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.frames.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no frames"));
    }
    let mut poses = Vec::with_capacity(manifest.frames.len());
    let mut images = Vec::with_capacity(manifest.frames.len());
    for frame in &manifest.frames {
        let path = resolve_frame(dir, &frame.file_path);
        let img = read_image(&path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if (first.width, first.height) != (img.width, img.height) {
                return Err(Error::format(&path, "image size differs from the first frame"));
            }
        }
        poses.push(Pose::from_matrix(&frame.transform_matrix).map_err(|e| Error::format(&manifest_path, e.to_string()))?);
        images.push(img);
    }
    let (w, h) = (images[0].width, images[0].height);
    Ok((
        CameraRig {
            poses,
            focal: focal_from_fov(w, manifest.camera_angle_x),
            width: w,
            height: h,
        },
        images,
    ))
}

/// Writes `transforms.json` plus one PPM per view.
pub fn write_nerf_dataset(dir: &Path, rig: &CameraRig, images: &[Image]) -> Result<()> {
    if rig.len() != images.len() {
        return Err(Error::invalid(format!("{} poses but {} images", rig.len(), images.len())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(rig.len());
    for (i, (pose, img)) in rig.poses.iter().zip(images).enumerate() {
        let name = format!("r_{i}.ppm");
        write_ppm(&dir.join(&name), img)?;
        frames.push(Frame {
            file_path: name,
            transform_matrix: pose.to_matrix(),
        });
    }
    let manifest = Manifest {
        camera_angle_x: 2.0 * (0.5 * rig.width as f64 / rig.focal).atan(),
        frames,
    };
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::dot;

    #[test]
    fn sphere_density_inside_and_corner() {
        let s = make_toy_scene("sphere", 0).unwrap();
        assert!(s.density([0.5, 0.5, 0.5]) > 0.0);
        assert_eq!(s.density([0.0, 0.0, 0.0]), 0.0);
        assert_eq!(s.density([1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(make_toy_scene("teapot", 0).is_err());
    }

    #[test]
    fn scenes_repeat_per_seed() {
        let a = make_toy_scene("blobs", 11).unwrap();
        let b = make_toy_scene("blobs", 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let p = [rng.gen(), rng.gen(), rng.gen()];
            assert_eq!(a.density(p).to_bits(), b.density(p).to_bits());
            assert_eq!(a.color(p), b.color(p));
        }
    }

    #[test]
    fn checker_differs_across_mirror() {
        let s = make_toy_scene("sphere", 0).unwrap();
        assert_ne!(s.color([0.6, 0.55, 0.45]), s.color([0.6, 0.55, 0.55]));
        assert_ne!(s.color([0.6, 0.55, 0.45]), s.color([0.4, 0.55, 0.45]));
    }

    #[test]
    fn orbit_azimuths_and_forward_axes() {
        let rig = orbit_cameras(4, 2.0, 0.0, 8, 8, 0.8).unwrap();
        let expected = [[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0], [0.0, -2.0]];
        for (pose, e) in rig.poses.iter().zip(expected) {
            assert!((pose.position[0] - e[0]).abs() < 1e-12);
            assert!((pose.position[1] - e[1]).abs() < 1e-12);
        }
        let rig = orbit_cameras(7, 1.7, 0.4, 8, 8, 0.8).unwrap();
        for pose in &rig.poses {
            pose.validate(1e-9).unwrap();
            let to_origin = normalize(pose.position.map(|c| -c));
            let f = pose.forward();
            for a in 0..3 {
                assert!((to_origin[a] - f[a]).abs() < 1e-9);
            }
            assert!((dot(f, f) - 1.0).abs() < 1e-12);
        }
        let one = orbit_cameras(1, 2.0, 0.0, 8, 8, 0.8).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.poses[0].position[0] - 2.0).abs() < 1e-12);
        assert!(orbit_cameras(0, 2.0, 0.0, 8, 8, 0.8).is_err());
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = make_toy_scene("empty", 0).unwrap();
        let rig = orbit_cameras(2, 2.0, 0.3, 6, 5, 0.9).unwrap();
        let settings = RenderSettings {
            samples: 16,
            background: [1.0, 1.0, 1.0],
        };
        for img in render_ground_truth(&scene, &rig, &settings).unwrap() {
            assert!(img.data.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn focal_formula() {
        let f = focal_from_fov(800, 0.6911112);
        assert!((f - 1111.11).abs() < 0.01, "{f}");
    }
}

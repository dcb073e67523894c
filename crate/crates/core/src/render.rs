//! Rays, stratified sampling, volume compositing and image metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Half side length of the world-space box that holds the scene. World
/// point `p` maps to unit-cube coordinates `p + HALF_EXTENT`.
pub const HALF_EXTENT: f64 = 0.5;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }

    /// Restricts `[near, far]` to the scene box; `None` if the ray misses it.
    pub fn clip_to_scene(&self) -> Option<Ray> {
        let (mut t0, mut t1) = (self.near, self.far);
        for a in 0..3 {
            let d = self.direction[a];
            let o = self.origin[a];
            if d.abs() < 1e-15 {
                if !(-HALF_EXTENT..=HALF_EXTENT).contains(&o) {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-HALF_EXTENT - o) / d, (HALF_EXTENT - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 - t0 > 1e-9).then_some(Ray {
            near: t0,
            far: t1,
            ..*self
        })
    }
}

/// Camera-to-world pose. Columns of `rotation` are the camera's right, up
/// and backward axes (the camera looks along `-backward`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
}

impl Pose {
    pub fn right(&self) -> Vec3 {
        self.column(0)
    }

    pub fn up(&self) -> Vec3 {
        self.column(1)
    }

    /// Viewing direction (`-backward`).
    pub fn forward(&self) -> Vec3 {
        let b = self.column(2);
        [-b[0], -b[1], -b[2]]
    }

    fn column(&self, c: usize) -> Vec3 {
        [self.rotation[0][c], self.rotation[1][c], self.rotation[2][c]]
    }

    /// Row-major 4x4 camera-to-world matrix.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.position;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Pose> {
        let pose = Pose {
            rotation: [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
            position: [m[0][3], m[1][3], m[2][3]],
        };
        pose.validate(1e-6)?;
        Ok(pose)
    }

    /// Checks that the rotation is orthonormal within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let finite = self.rotation.iter().flatten().chain(&self.position).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera pose contains non-finite values"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(self.column(i), self.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > tol {
                    return Err(Error::invalid(format!(
                        "degenerate camera pose: columns {i} and {j} have dot product {d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pinhole camera with shared intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub pose: Pose,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

/// Generates world-space rays through continuous pixel coordinates; pixel
/// `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
pub fn make_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Ray>> {
    if !(camera.focal > 0.0) || !camera.focal.is_finite() {
        return Err(Error::invalid(format!("focal length must be positive, got {}", camera.focal)));
    }
    camera.pose.validate(1e-6)?;
    let (cx, cy) = (camera.width as f64 / 2.0, camera.height as f64 / 2.0);
    let (r, u, b) = (camera.pose.right(), camera.pose.up(), camera.pose.column(2));
    Ok(pixels
        .iter()
        .map(|&(px, py)| {
            let x = (px - cx) / camera.focal;
            let y = -(py - cy) / camera.focal;
            let d = [
                x * r[0] + y * u[0] - b[0],
                x * r[1] + y * u[1] - b[1],
                x * r[2] + y * u[2] - b[2],
            ];
            Ray {
                origin: camera.pose.position,
                direction: normalize(d),
                near: 0.0,
                far: f64::INFINITY,
            }
        })
        .collect())
}

/// Pixel-center coordinates of a full image, row by row.
pub fn pixel_centers(width: usize, height: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            out.push((i as f64 + 0.5, j as f64 + 0.5));
        }
    }
    out
}

/// Sample distances along a ray with the interval length each one covers.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Stratified samples: one per equal sub-interval of `[near, far]`, at the
/// stratum midpoint or uniformly jittered within it.
///
/// `delta[i]` spans from halfway to the previous sample (or `near`) to
/// halfway to the next one (or `far`), so the intervals tile `[near, far]`.
pub fn stratified_sample(ray: &Ray, n: usize, rng: Option<&mut dyn rand::RngCore>) -> Result<Samples> {
    if n == 0 {
        return Err(Error::invalid("stratified_sample needs at least one sample"));
    }
    if !(ray.far > ray.near) || !ray.far.is_finite() {
        return Err(Error::invalid(format!(
            "ray interval [{}, {}] is empty or unbounded",
            ray.near, ray.far
        )));
    }
    let step = (ray.far - ray.near) / n as f64;
    let t: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * step)
            .collect(),
        None => (0..n).map(|i| ray.near + (i as f64 + 0.5) * step).collect(),
    };
    let mut delta = Vec::with_capacity(n);
    let mut lo = ray.near;
    for i in 0..n {
        let hi = if i + 1 < n { 0.5 * (t[i] + t[i + 1]) } else { ray.far };
        delta.push(hi - lo);
        lo = hi;
    }
    Ok(Samples { t, delta })
}

/// Per-ray compositing result.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: Vec3,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub final_transmittance: f64,
}

/// Alpha compositing along one ray:
/// `T_i = exp(-Σ_{j<i} σ_j δ_j)`, `w_i = T_i (1 - exp(-σ_i δ_i))`,
/// `I = Σ w_i c_i + (1 - Σ w_i) background`.
pub fn composite(sigma: &[f64], color: &[Vec3], delta: &[f64], background: Vec3) -> Result<Composite> {
    if sigma.len() != color.len() || sigma.len() != delta.len() {
        return Err(Error::shape("composite", &[sigma.len(), color.len()], &[delta.len()]));
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s >= 0.0)) {
        return Err(Error::domain("composite", format!("negative or NaN density {s}")));
    }
    if let Some(d) = delta.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::domain("composite", format!("non-positive interval {d}")));
    }
    let mut acc = 0.0f64;
    let mut out = [0.0; 3];
    let mut weights = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    for i in 0..sigma.len() {
        let tau = sigma[i] * delta[i];
        let t = (-acc).exp();
        let w = t * -(-tau).exp_m1();
        for (o, c) in out.iter_mut().zip(color[i]) {
            *o += w * c;
        }
        weights.push(w);
        trans.push(t);
        acc += tau;
    }
    let total: f64 = weights.iter().sum();
    for (o, bg) in out.iter_mut().zip(background) {
        *o += (1.0 - total) * bg;
    }
    Ok(Composite {
        color: out,
        weights,
        transmittance: trans,
        final_transmittance: (-acc).exp(),
    })
}

/// Batched, differentiable compositing.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars {
    /// `[rays, 3]`.
    pub rgb: Var,
    /// `[rays, samples]`.
    pub weights: Var,
}

/// `sigma`: `[rays, samples]`; `color`: `[rays * samples, 3]`; `delta`:
/// `[rays, samples]` constant intervals.
pub fn composite_tape(
    tape: &mut Tape,
    sigma: Var,
    color: Var,
    delta: &Tensor,
    background: Vec3,
) -> Result<CompositeVars> {
    let shape = tape.shape(sigma).to_vec();
    if shape.len() != 2 || delta.shape() != shape.as_slice() {
        return Err(Error::shape("composite", &shape, delta.shape()));
    }
    if tape.value(sigma).data().iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::domain("composite", "negative or NaN density"));
    }
    let (rays, samples) = (shape[0], shape[1]);
    let d = tape.constant(delta.clone());
    let tau = tape.mul(sigma, d)?;
    let cum = tape.cumsum_exclusive(tau)?;
    let neg_cum = tape.neg(cum)?;
    let trans = tape.exp(neg_cum)?;
    let neg_tau = tape.neg(tau)?;
    let keep = tape.exp(neg_tau)?;
    let alpha = tape.neg(keep)?;
    let alpha = tape.add_scalar(alpha, 1.0)?;
    let weights = tape.mul(trans, alpha)?;
    let flat = tape.reshape(weights, [rays * samples])?;
    let weighted = tape.mul_col(color, flat)?;
    let mut rgb = tape.sum_groups(weighted, samples)?;
    if background != [0.0; 3] {
        let acc = tape.sum_last(weights)?;
        let rest = tape.neg(acc)?;
        let rest = tape.add_scalar(rest, 1.0)?;
        let bg = tape.constant(Tensor::from_parts(
            vec![rays, 3],
            background.iter().copied().cycle().take(rays * 3).collect(),
        ));
        let fill = tape.mul_col(bg, rest)?;
        rgb = tape.add(rgb, fill)?;
    }
    Ok(CompositeVars { rgb, weights })
}

/// RGB image with `f64` channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: Vec3) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: Vec3) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                "image",
                &[self.height, self.width, 3],
                &[other.height, other.width, 3],
            ));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Peak signal-to-noise ratio for `[0, 1]` images, capped at 100 dB.
pub fn psnr(image: &Image, reference: &Image) -> Result<f64> {
    let mse = image.mse(reference)?;
    Ok(-10.0 * mse.max(1e-10).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera_at(z: f64) -> Camera {
        Camera {
            pose: Pose {
                rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                position: [0.0, 0.0, z],
            },
            focal: 10.0,
            width: 4,
            height: 4,
        }
    }

    #[test]
    fn center_pixel_looks_down_negative_z() {
        let r = make_rays(&camera_at(2.0), &[(2.0, 2.0)]).unwrap();
        assert_eq!(r[0].direction, [0.0, 0.0, -1.0]);
    }

    #[test]
    fn mirrored_pixels_mirror_x() {
        let cam = camera_at(2.0);
        let r = make_rays(&cam, &pixel_centers(4, 4)).unwrap();
        for ray in &r {
            assert!((dot(ray.direction, ray.direction) - 1.0).abs() < 1e-12);
        }
        // Pixels 0 and 3 of the first row are mirror images about the center.
        assert!((r[0].direction[0] + r[3].direction[0]).abs() < 1e-15);
        assert_eq!(r[0].direction[1], r[3].direction[1]);
    }

    #[test]
    fn degenerate_pose_and_focal_are_rejected() {
        let mut cam = camera_at(2.0);
        cam.focal = 0.0;
        assert!(make_rays(&cam, &[(0.0, 0.0)]).is_err());
        let mut cam = camera_at(2.0);
        cam.pose.rotation[0][0] = 2.0;
        assert!(make_rays(&cam, &[(0.0, 0.0)]).is_err());
    }

    #[test]
    fn midpoints_without_jitter() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near: 0.0,
            far: 1.0,
        };
        let s = stratified_sample(&ray, 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert!((s.delta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(stratified_sample(&ray, 0, None).is_err());
    }

    #[test]
    fn jittered_samples_tile_the_interval_and_repeat_per_seed() {
        let ray = Ray {
            origin: [0.0; 3],
            direction: [1.0, 0.0, 0.0],
            near: 0.3,
            far: 2.1,
        };
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let sa = stratified_sample(&ray, 16, Some(&mut a)).unwrap();
        let sb = stratified_sample(&ray, 16, Some(&mut b)).unwrap();
        assert_eq!(sa, sb);
        assert!((sa.delta.iter().sum::<f64>() - 1.8).abs() < 1e-12);
        assert!(sa.delta.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn composite_closed_forms() {
        let c = composite(&[0.0; 3], &[[1.0; 3]; 3], &[0.1; 3], [0.0; 3]).unwrap();
        assert_eq!(c.color, [0.0; 3]);
        assert!(c.weights.iter().all(|&w| w == 0.0));
        assert_eq!(c.final_transmittance, 1.0);

        let c = composite(&[2.0], &[[1.0; 3]], &[0.5], [0.0; 3]).unwrap();
        assert!((c.weights[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-15);

        let c = composite(&[1.0, 1.0], &[[1.0; 3]; 2], &[1.0, 1.0], [0.0; 3]).unwrap();
        assert!((c.transmittance[1] - (-1.0f64).exp()).abs() < 1e-15);
        let total: f64 = c.weights.iter().sum();
        assert!((total - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn composite_rejects_negative_density() {
        assert!(composite(&[-1.0], &[[0.0; 3]], &[1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn tape_composite_matches_direct() {
        let sigma = vec![0.5, 3.0, 0.0, 1.5, 2.0, 0.1];
        let delta = vec![0.2, 0.3, 0.1, 0.25, 0.25, 0.5];
        let colors: Vec<Vec3> = (0..6).map(|i| [0.1 * i as f64, 0.5, 1.0 - 0.1 * i as f64]).collect();
        let bg = [1.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::new([2, 3], sigma.clone()).unwrap());
        let c = tape.constant(Tensor::new([6, 3], colors.iter().flatten().copied().collect()).unwrap());
        let out = composite_tape(&mut tape, s, c, &Tensor::new([2, 3], delta.clone()).unwrap(), bg).unwrap();
        for r in 0..2 {
            let direct = composite(&sigma[r * 3..r * 3 + 3], &colors[r * 3..r * 3 + 3], &delta[r * 3..r * 3 + 3], bg)
                .unwrap();
            for k in 0..3 {
                assert!((tape.value(out.rgb).row(r)[k] - direct.color[k]).abs() < 1e-14);
                assert!((tape.value(out.weights).row(r)[k] - direct.weights[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(2, 2, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = Image::filled(2, 2, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::new(3, 2)).is_err());
    }

    #[test]
    fn rays_clip_to_scene_box() {
        let cam = camera_at(2.0);
        let r = make_rays(&cam, &[(2.0, 2.0)]).unwrap()[0].clip_to_scene().unwrap();
        assert!((r.near - 1.5).abs() < 1e-12 && (r.far - 2.5).abs() < 1e-12);
        let miss = Ray {
            origin: [0.0, 2.0, 2.0],
            direction: [0.0, 0.0, -1.0],
            near: 0.0,
            far: f64::INFINITY,
        };
        assert!(miss.clip_to_scene().is_none());
    }
}

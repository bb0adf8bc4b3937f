//! Ray-cast synthetic scenes with analytic ground-truth depth.
//!
//! Cameras sit on a horizontal arc around a look-at point and face it. World
//! `y` points down, matching the image `v` axis of an upright camera.

use std::f64::consts::PI;

use mvstr_tensor::{Scalar, Tensor};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{look_at, Camera, CameraView};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    pub rig: RigSpec,
    pub geometry: Geometry,
    pub texture: TextureSpec,
    /// Depth range written to the cameras; derived from the rendered depths
    /// with a 10% margin when absent.
    pub depth_range: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub count: usize,
    /// Distance from each camera to `look_at`.
    pub radius: f64,
    /// Angle between neighbouring cameras, degrees.
    pub spacing_deg: f64,
    /// Camera height above the look-at point (negative `y` is up).
    pub elevation: f64,
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    /// Plane through `point` with unit normal `normal`.
    Plane { point: [f64; 3], normal: [f64; 3] },
    /// The plane through `point`, with the half `x ≥ point.x` moved by `step`
    /// along the normal.
    TwoPlanes { point: [f64; 3], normal: [f64; 3], step: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Checker cell size in scene units.
    pub checker: f64,
    /// Number of random sinusoids layered over the checker.
    pub waves: usize,
    /// Shortest sinusoid wavelength in scene units.
    pub min_wavelength: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 64,
            height: 64,
            focal: 64.0,
            rig: RigSpec::default(),
            geometry: Geometry::Plane {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 0.0, -1.0],
            },
            texture: TextureSpec::default(),
            depth_range: None,
        }
    }
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            count: 3,
            radius: 3.0,
            spacing_deg: 8.0,
            elevation: -0.3,
            look_at: [0.0, 0.0, 0.0],
        }
    }
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            checker: 0.5,
            waves: 4,
            min_wavelength: 0.6,
        }
    }
}

/// One rendered view. Invalid pixels have depth 0 and a black image.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// `[3, H, W]` in `[0, 1]`
    pub image: Tensor<f64>,
    pub camera: Camera,
    /// `[H, W]` camera-frame z-depth
    pub depth: Tensor<f64>,
    /// `[H, W]`, 1 where the ray hits the geometry
    pub valid: Tensor<f64>,
    pub view_id: usize,
}

impl RenderedView {
    pub fn view<T: Scalar>(&self) -> CameraView<T> {
        CameraView {
            image: self.image.cast(),
            camera: self.camera.clone(),
            view_id: self.view_id,
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.width == 0 || self.height == 0 || self.width % 4 != 0 || self.height % 4 != 0 {
            return fail(format!("resolution {}×{} must be positive multiples of 4", self.width, self.height));
        }
        if !(self.focal > 0.0) || self.rig.count == 0 || !(self.rig.radius > 0.0) {
            return fail("focal, camera count and rig radius must be positive".into());
        }
        if !(self.texture.checker > 0.0 && self.texture.min_wavelength > 0.0) {
            return fail("texture scales must be positive".into());
        }
        match &self.geometry {
            Geometry::Plane { normal, .. } | Geometry::TwoPlanes { normal, .. } if vec3(*normal).norm() < 1e-9 => {
                return fail("plane normal must be non-zero".into())
            }
            Geometry::Sphere { radius, .. } if !(*radius > 0.0) => return fail("sphere radius must be positive".into()),
            _ => {}
        }
        if let Some([lo, hi]) = self.depth_range {
            if !(lo > 0.0 && lo < hi) {
                return fail(format!("bad depth range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Camera centers, left to right along the arc.
    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        let r = &self.rig;
        let target = vec3(r.look_at);
        let mid = (r.count as f64 - 1.0) / 2.0;
        (0..r.count)
            .map(|i| {
                let a = (i as f64 - mid) * r.spacing_deg.to_radians();
                target + Vector3::new(r.radius * a.sin(), r.elevation, -r.radius * a.cos())
            })
            .collect()
    }
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Solid RGB texture: a soft checker on world `x`, `y` plus seeded sinusoids
/// whose phase differs per channel.
struct Texture {
    cell: f64,
    waves: Vec<(Vector3<f64>, [f64; 3], f64)>,
}

impl Texture {
    fn new(spec: &TextureSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = (0..spec.waves)
            .map(|_| {
                let theta = rng.gen_range(0.0..2.0 * PI);
                let phi = rng.gen_range(-0.5..0.5f64);
                let dir = Vector3::new(theta.cos() * phi.cos(), theta.sin() * phi.cos(), phi.sin());
                let wavelength = spec.min_wavelength * rng.gen_range(1.0..2.0);
                let phase = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
                (dir * (2.0 * PI / wavelength), phase, rng.gen_range(0.05..0.12))
            })
            .collect();
        Self { cell: spec.checker, waves }
    }

    fn shade(&self, x: &Vector3<f64>) -> [f64; 3] {
        let k = PI / self.cell;
        let checker = (2.0 * (k * x.x).sin()).tanh() * (2.0 * (k * x.y).sin()).tanh();
        let mut rgb = [0.5 + 0.22 * checker; 3];
        for (freq, phase, amp) in &self.waves {
            let t = freq.dot(x);
            for (c, v) in rgb.iter_mut().enumerate() {
                *v += amp * (t + phase[c]).sin();
            }
        }
        rgb.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Ray parameter of the first hit along `origin + t·dir`, if any.
fn intersect(geometry: &Geometry, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
    let plane = |p: Vector3<f64>, n: Vector3<f64>| {
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(p - origin)) / denom;
        (t > 0.0).then_some(t)
    };
    match geometry {
        Geometry::Plane { point, normal } => plane(vec3(*point), vec3(*normal).normalize()),
        Geometry::TwoPlanes { point, normal, step } => {
            let (p, n) = (vec3(*point), vec3(*normal).normalize());
            let left = plane(p, n).filter(|&t| (origin + dir * t).x < p.x);
            let right = plane(p + n * *step, n).filter(|&t| (origin + dir * t).x >= p.x);
            match (left, right) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        }
        Geometry::Sphere { center, radius } => {
            let oc = origin - vec3(*center);
            let (a, b, c) = (dir.dot(dir), oc.dot(dir), oc.dot(&oc) - radius * radius);
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            (t > 0.0).then_some(t)
        }
    }
}

fn check_rig(geometry: &Geometry, eye: &Vector3<f64>) -> Result<()> {
    match geometry {
        Geometry::Sphere { center, radius } if (eye - vec3(*center)).norm() <= *radius => {
            Err(Error::Spec(format!("camera at {eye:?} is inside the sphere")))
        }
        Geometry::Plane { point, normal } | Geometry::TwoPlanes { point, normal, .. }
            if vec3(*normal).normalize().dot(&(eye - vec3(*point))).abs() < 1e-9 =>
        {
            Err(Error::Spec(format!("camera at {eye:?} lies on the plane")))
        }
        _ => Ok(()),
    }
}

/// Renders every camera of the rig. Deterministic for a given spec.
pub fn render_scene(spec: &SceneSpec) -> Result<Vec<RenderedView>> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let k = Camera::intrinsics(spec.focal, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let k_inv = k.try_inverse().expect("positive focal");
    let texture = Texture::new(&spec.texture, spec.seed);
    let target = vec3(spec.rig.look_at);

    let mut raw = Vec::with_capacity(spec.rig.count);
    for eye in spec.camera_centers() {
        check_rig(&spec.geometry, &eye)?;
        let (r, t) = look_at(&eye, &target)?;
        let rt = r.transpose();
        let mut image = vec![0.0; 3 * h * w];
        let mut depth = vec![0.0; h * w];
        let mut valid = vec![0.0; h * w];
        for v in 0..h {
            for u in 0..w {
                let ray_cam = k_inv * Vector3::new(u as f64, v as f64, 1.0);
                let dir = rt * ray_cam;
                if let Some(s) = intersect(&spec.geometry, &eye, &dir) {
                    let x = eye + dir * s;
                    let rgb = texture.shade(&x);
                    for c in 0..3 {
                        image[(c * h + v) * w + u] = rgb[c];
                    }
                    depth[v * w + u] = s;
                    valid[v * w + u] = 1.0;
                }
            }
        }
        raw.push((r, t, image, depth, valid));
    }

    let [lo, hi] = match spec.depth_range {
        Some(range) => range,
        None => {
            let hits = raw.iter().flat_map(|(_, _, _, d, m)| d.iter().zip(m).filter(|(_, &m)| m > 0.0).map(|(&d, _)| d));
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for d in hits {
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if !lo.is_finite() {
                return Err(Error::Spec("no camera sees the geometry".into()));
            }
            let margin = 0.1 * (hi - lo).max(0.1 * lo);
            [lo - margin, hi + margin]
        }
    };

    raw.into_iter()
        .enumerate()
        .map(|(id, (r, t, image, depth, valid))| {
            Ok(RenderedView {
                image: Tensor::new(vec![3, h, w], image)?,
                camera: Camera::new(k, r, t, lo, hi)?,
                depth: Tensor::new(vec![h, w], depth)?,
                valid: Tensor::new(vec![h, w], valid)?,
                view_id: id,
            })
        })
        .collect()
}

/// The two-scene toy dataset: a tilted textured plane and a stepped pair of
/// planes, each seen by three cameras.
pub fn toy_specs(size: usize) -> Vec<SceneSpec> {
    let base = SceneSpec {
        width: size,
        height: size,
        focal: size as f64,
        ..SceneSpec::default()
    };
    let tilted = [0.25, -0.1, -1.0];
    vec![
        SceneSpec {
            seed: 11,
            geometry: Geometry::Plane {
                point: [0.0, 0.0, 0.0],
                normal: tilted,
            },
            ..base.clone()
        },
        SceneSpec {
            seed: 12,
            geometry: Geometry::TwoPlanes {
                point: [0.1, 0.0, 0.0],
                normal: [-0.2, 0.1, -1.0],
                step: 0.4,
            },
            ..base
        },
    ]
}

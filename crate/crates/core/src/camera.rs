//! Pinhole cameras and the plain-text camera file format.
//!
//! Pixel coordinates put integer values at pixel centers, `p = (u, v, 1)`.
//! Extrinsics map world to camera: `X_cam = R X_world + t`.

use std::fmt::Write as _;
use std::path::Path;

use mvstr_tensor::{Scalar, Tensor};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Camera {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, depth_min: f64, depth_max: f64) -> Result<Self> {
        let rtr = r.transpose() * r - Matrix3::identity();
        if rtr.amax() >= ORTHO_TOL || (r.determinant() - 1.0).abs() >= ORTHO_TOL {
            return Err(Error::Geometry(format!("rotation is not orthonormal: {r}")));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::Geometry(format!("intrinsics are not upper-triangular: {k}")));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::Geometry("focal lengths must be positive".into()));
        }
        if !(depth_min > 0.0 && depth_min < depth_max) {
            return Err(Error::Geometry(format!("bad depth range [{depth_min}, {depth_max}]")));
        }
        Ok(Self {
            k,
            r,
            t,
            depth_min,
            depth_max,
        })
    }

    /// Intrinsics with focal `f` and principal point `(cx, cy)`, no skew.
    pub fn intrinsics(f: f64, cx: f64, cy: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn k_inv(&self) -> Result<Matrix3<f64>> {
        self.k
            .try_inverse()
            .ok_or_else(|| Error::Geometry(format!("singular intrinsics: {}", self.k)))
    }

    /// Camera for features downsampled by `factor` (1, 1/2 or 1/4).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            k: scale_intrinsics(&self.k, factor),
            ..self.clone()
        }
    }

    /// World point to `(u, v, z)` with `z` the camera-frame depth.
    pub fn project(&self, x: &Vector3<f64>) -> (f64, f64, f64) {
        let xc = self.r * x + self.t;
        let q = self.k * xc;
        (q.x / q.z, q.y / q.z, xc.z)
    }

    /// Pixel and z-depth to a world point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        let ray = self.k_inv()? * Vector3::new(u, v, 1.0);
        Ok(self.unproject_ray(&ray, depth))
    }

    /// `ray` is `K⁻¹ p`, so its z component is 1 and `depth` is the z-depth.
    pub(crate) fn unproject_ray(&self, ray: &Vector3<f64>, depth: f64) -> Vector3<f64> {
        self.r.transpose() * (ray * depth - self.t)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("extrinsic\n");
        for i in 0..3 {
            let _ = writeln!(s, "{} {} {} {}", self.r[(i, 0)], self.r[(i, 1)], self.r[(i, 2)], self.t[i]);
        }
        s.push_str("0 0 0 1\n\nintrinsic\n");
        for i in 0..3 {
            let _ = writeln!(s, "{} {} {}", self.k[(i, 0)], self.k[(i, 1)], self.k[(i, 2)]);
        }
        let _ = writeln!(s, "\n{} {}", self.depth_min, self.depth_max);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Input(format!("camera file: {msg}"));
        let mut tokens = text.split_whitespace();
        let mut expect = |word: &str| match tokens.next() {
            Some(w) if w == word => Ok(()),
            other => Err(bad(&format!("expected '{word}', found {other:?}"))),
        };
        expect("extrinsic")?;
        let rest: Vec<&str> = text.split_whitespace().collect();
        let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
            rest.get(range.clone())
                .ok_or_else(|| bad("truncated"))?
                .iter()
                .map(|t| t.parse::<f64>().map_err(|e| bad(&format!("'{t}': {e}"))))
                .collect()
        };
        let ext = nums(1..17)?;
        if rest.get(17) != Some(&"intrinsic") {
            return Err(bad("expected 'intrinsic'"));
        }
        let int = nums(18..27)?;
        let range = nums(27..29)?;
        if rest.len() != 29 {
            return Err(bad("trailing tokens"));
        }
        if ext[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(bad("extrinsic bottom row must be 0 0 0 1"));
        }
        let r = Matrix3::new(ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10]);
        let t = Vector3::new(ext[3], ext[7], ext[11]);
        let k = Matrix3::from_row_slice(&int);
        Camera::new(k, r, t, range[0], range[1])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Scales focal lengths, skew and principal point by `factor`. A pixel `u`
/// at full resolution lands on `u·factor`, matching stride-2 convolutions
/// whose output pixel `i` is centered on input pixel `2i`.
pub fn scale_intrinsics(k: &Matrix3<f64>, factor: f64) -> Matrix3<f64> {
    let mut out = *k;
    for c in 0..3 {
        out[(0, c)] *= factor;
        out[(1, c)] *= factor;
    }
    out
}

/// One input view: an RGB image in `[0, 1]` with its camera.
#[derive(Debug, Clone)]
pub struct CameraView<T: Scalar> {
    /// `[3, H, W]`
    pub image: Tensor<T>,
    pub camera: Camera,
    pub view_id: usize,
}

impl<T: Scalar> CameraView<T> {
    pub fn new(image: Tensor<T>, camera: Camera, view_id: usize) -> Result<Self> {
        if image.rank() != 3 || image.shape()[0] != 3 {
            return Err(Error::Input(format!("image must be [3, H, W], got {:?}", image.shape())));
        }
        Ok(Self { image, camera, view_id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// World point per pixel, `[H, W, 3]`.
pub fn unproject_depth<T: Scalar>(camera: &Camera, depth: &Tensor<T>) -> Result<Tensor<T>> {
    let &[h, w] = depth.shape() else {
        return Err(Error::Input(format!("depth must be [H, W], got {:?}", depth.shape())));
    };
    let k_inv = camera.k_inv()?;
    let mut out = Vec::with_capacity(h * w * 3);
    for v in 0..h {
        for u in 0..w {
            let ray = k_inv * Vector3::new(u as f64, v as f64, 1.0);
            let x = camera.unproject_ray(&ray, depth.get(&[v, u]).to_f64());
            out.extend([T::lit(x.x), T::lit(x.y), T::lit(x.z)]);
        }
    }
    Ok(Tensor::new(vec![h, w, 3], out)?)
}

/// Rotation whose rows are the camera axes for a camera at `eye` looking at
/// `target`, with image y pointing along world +y as far as possible.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let z = (target - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::Geometry("camera eye coincides with its target".into()))?;
    let x = Vector3::y()
        .cross(&z)
        .try_normalize(1e-9)
        .ok_or_else(|| Error::Geometry("viewing direction parallel to the up axis".into()))?;
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok((r, -(r * eye)))
}

//! Plane-sweep warp grids: where each reference pixel lands in a source view
//! for every depth hypothesis.

use mvstr_tensor::Tensor;
use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::Result;
use crate::hypotheses::DepthHypotheses;

/// Source-pixel coordinates `[D, h, w, 2]` (x then y) and validity `[D, h, w]`.
#[derive(Debug, Clone)]
pub struct WarpGrid {
    pub coords: Tensor<f64>,
    pub valid: Tensor<f64>,
}

/// Coordinate written for points that cannot be sampled (behind the camera).
const OUTSIDE: f64 = -2.0;

/// Both cameras must already be scaled to the hypotheses' resolution; the
/// source image is assumed to share that resolution.
pub fn build_warp_grid(reference: &Camera, source: &Camera, hyp: &DepthHypotheses) -> Result<WarpGrid> {
    let (dn, h, w) = (hyp.depth_count(), hyp.height(), hyp.width());
    if reference == source {
        // Skip the round trip through K⁻¹ so that the grid is exact.
        let coords = Tensor::from_fn(vec![dn, h, w, 2], |i| if i[3] == 0 { i[2] as f64 } else { i[1] as f64 });
        let valid = hyp.values.map(|d| if d > 0.0 { 1.0 } else { 0.0 });
        return Ok(WarpGrid { coords, valid });
    }
    let r_rel = source.r * reference.r.transpose();
    let t_rel = source.t - r_rel * reference.t;
    let m = source.k * r_rel * reference.k_inv()?;
    let kt = source.k * t_rel;
    let zrow = source.r.row(2) * reference.r.transpose();
    let z_rel = t_rel.z;
    let ref_kinv = reference.k_inv()?;

    let mut coords = vec![0.0; dn * h * w * 2];
    let mut valid = vec![0.0; dn * h * w];
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    for v in 0..h {
        for u in 0..w {
            let p = Vector3::new(u as f64, v as f64, 1.0);
            let a = m * p;
            let ray = ref_kinv * p;
            let za = (zrow * ray)[0];
            for d in 0..dn {
                let i = (d * h + v) * w + u;
                let depth = hyp.values.data()[i];
                let q = a * depth + kt;
                let z = za * depth + z_rel;
                let (x, y) = (q.x / q.z, q.y / q.z);
                let ok = z > 0.0 && x.is_finite() && y.is_finite();
                let inside = ok && (0.0..=wmax).contains(&x) && (0.0..=hmax).contains(&y);
                if ok {
                    coords[2 * i] = x;
                    coords[2 * i + 1] = y;
                } else {
                    coords[2 * i] = OUTSIDE;
                    coords[2 * i + 1] = OUTSIDE;
                }
                valid[i] = if inside { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(WarpGrid {
        coords: Tensor::new(vec![dn, h, w, 2], coords)?,
        valid: Tensor::new(vec![dn, h, w], valid)?,
    })
}

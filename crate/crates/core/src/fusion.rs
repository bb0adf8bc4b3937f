//! Depth-map filtering and fusion into a point cloud.

use mvstr_tensor::Tensor;
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::io::{PointCloud, StoredView, ViewPair};

/// A depth map with its camera. Depth 0 marks pixels without an estimate.
#[derive(Debug, Clone)]
pub struct DepthView {
    pub view_id: usize,
    pub camera: Camera,
    /// `[H, W]`
    pub depth: Tensor<f64>,
    /// `[H, W]` in `[0, 1]`; absent means fully confident.
    pub confidence: Option<Tensor<f64>>,
    /// `[3, H, W]` in `[0, 1]`, used to color fused points.
    pub image: Option<Tensor<f64>>,
}

impl DepthView {
    /// Wraps a stored view; fails if it has no depth map. Images whose size
    /// differs from the depth map are dropped.
    pub fn from_stored(view: &StoredView) -> Result<Self> {
        let depth = view
            .depth
            .clone()
            .ok_or_else(|| Error::Input(format!("view {} has no depth map", view.view_id)))?;
        let image = Some(view.image.clone()).filter(|img| img.shape()[1..] == depth.shape()[..]);
        Ok(Self {
            view_id: view.view_id,
            camera: view.camera.clone(),
            depth,
            confidence: view.confidence.clone(),
            image,
        })
    }

    fn size(&self) -> (usize, usize) {
        (self.depth.shape()[0], self.depth.shape()[1])
    }
}

/// Pixels whose confidence reaches `threshold`.
pub fn photometric_filter(view: &DepthView, threshold: f64) -> Vec<bool> {
    match &view.confidence {
        Some(c) => c.data().iter().map(|&v| v >= threshold).collect(),
        None => vec![threshold <= 1.0; view.depth.numel()],
    }
}

/// Bilinear depth lookup that refuses to blend across missing estimates.
fn sample_depth(depth: &Tensor<f64>, u: f64, v: f64) -> Option<f64> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let d = depth.data();
    let q = [d[y0 * w + x0], d[y0 * w + x1], d[y1 * w + x0], d[y1 * w + x1]];
    if q.iter().any(|&z| !(z > 0.0)) {
        return None;
    }
    let top = q[0] * (1.0 - fx) + q[1] * fx;
    let bottom = q[2] * (1.0 - fx) + q[3] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Per-pixel result of checking a reference depth map against its sources.
#[derive(Debug, Clone)]
pub struct Consistency {
    /// Number of sources that agree with each pixel.
    pub count: Vec<usize>,
    /// Sum of the agreeing sources' depths, expressed in the reference frame.
    pub depth_sum: Vec<f64>,
}

/// Reprojects every reference pixel into each source, reads the source depth
/// there, and maps that point back into the reference.
pub fn check_consistency(reference: &DepthView, sources: &[&DepthView], cfg: &FusionConfig) -> Result<Consistency> {
    let (h, w) = reference.size();
    let ref_kinv = reference.camera.k_inv()?;
    let src_kinv = sources.iter().map(|s| s.camera.k_inv()).collect::<Result<Vec<_>>>()?;
    let mut count = vec![0; h * w];
    let mut depth_sum = vec![0.0; h * w];
    let d = reference.depth.data();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !(d[i] > 0.0) {
                continue;
            }
            let x = reference.camera.unproject_ray(&(ref_kinv * Vector3::new(u as f64, v as f64, 1.0)), d[i]);
            for (src, kinv) in sources.iter().zip(&src_kinv) {
                let (us, vs, zs) = src.camera.project(&x);
                if !(zs > 0.0) {
                    continue;
                }
                let Some(ds) = sample_depth(&src.depth, us, vs) else {
                    continue;
                };
                let xs = src.camera.unproject_ray(&(kinv * Vector3::new(us, vs, 1.0)), ds);
                let (ub, vb, db) = reference.camera.project(&xs);
                let px = ((ub - u as f64).powi(2) + (vb - v as f64).powi(2)).sqrt();
                if px < cfg.reproj_px_threshold && ((db - d[i]) / d[i]).abs() < cfg.rel_depth_threshold {
                    count[i] += 1;
                    depth_sum[i] += db;
                }
            }
        }
    }
    Ok(Consistency { count, depth_sum })
}

/// Pixels with at least `min_consistent_views` agreeing sources.
pub fn geometric_filter(reference: &DepthView, sources: &[&DepthView], cfg: &FusionConfig) -> Result<Vec<bool>> {
    let c = check_consistency(reference, sources, cfg)?;
    Ok(c.count.iter().map(|&n| n >= cfg.min_consistent_views).collect())
}

/// Unprojects every masked pixel of `reference` at the mean of its own depth
/// and the depths of the sources that agree with it.
pub fn fuse_view(
    reference: &DepthView,
    sources: &[&DepthView],
    mask: &[bool],
    cfg: &FusionConfig,
) -> Result<(Vec<Vector3<f64>>, Vec<[u8; 3]>)> {
    let (h, w) = reference.size();
    if mask.len() != h * w {
        return Err(Error::Usage(format!("mask has {} entries for a {h}x{w} depth map", mask.len())));
    }
    let cons = check_consistency(reference, sources, cfg)?;
    let kinv = reference.camera.k_inv()?;
    let d = reference.depth.data();
    let (mut points, mut colors) = (Vec::new(), Vec::new());
    for i in (0..h * w).filter(|&i| mask[i] && d[i] > 0.0) {
        let depth = (d[i] + cons.depth_sum[i]) / (1 + cons.count[i]) as f64;
        let ray = kinv * Vector3::new((i % w) as f64, (i / w) as f64, 1.0);
        points.push(reference.camera.unproject_ray(&ray, depth));
        if let Some(img) = &reference.image {
            colors.push(std::array::from_fn(|c| (img.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    Ok((points, colors))
}

/// Per-reference fusion statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionStats {
    pub view_id: usize,
    pub estimated: usize,
    pub photometric: usize,
    pub geometric: usize,
    pub fused: usize,
}

/// Filters each reference of `pairs` photometrically and geometrically and
/// fuses the pixels that pass both. Every pixel contributes only through its
/// own reference view, so overlapping views yield overlapping points.
pub fn fuse(views: &[DepthView], pairs: &[ViewPair], cfg: &FusionConfig) -> Result<(PointCloud, Vec<FusionStats>)> {
    let find = |id: usize| {
        views
            .iter()
            .find(|v| v.view_id == id)
            .ok_or_else(|| Error::Input(format!("view {id} has no depth map")))
    };
    let per_view = pairs
        .par_iter()
        .map(|pair| -> Result<(Vec<Vector3<f64>>, Vec<[u8; 3]>, FusionStats)> {
            let reference = find(pair.reference)?;
            let sources = pair.sources.iter().map(|&id| find(id)).collect::<Result<Vec<_>>>()?;
            let photo = photometric_filter(reference, cfg.conf_threshold);
            let geo = geometric_filter(reference, &sources, cfg)?;
            let d = reference.depth.data();
            let est = |i: usize| d[i] > 0.0;
            let mask: Vec<bool> = (0..d.len()).map(|i| est(i) && photo[i] && geo[i]).collect();
            let (points, colors) = fuse_view(reference, &sources, &mask, cfg)?;
            let stats = FusionStats {
                view_id: pair.reference,
                estimated: (0..d.len()).filter(|&i| est(i)).count(),
                photometric: (0..d.len()).filter(|&i| est(i) && photo[i]).count(),
                geometric: (0..d.len()).filter(|&i| est(i) && geo[i]).count(),
                fused: points.len(),
            };
            Ok((points, colors, stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cloud = PointCloud::default();
    let mut all_colors = Vec::new();
    let mut stats = Vec::with_capacity(per_view.len());
    for (p, c, s) in per_view {
        cloud.points.extend(p);
        all_colors.extend(c);
        stats.push(s);
    }
    if !all_colors.is_empty() && all_colors.len() == cloud.points.len() {
        cloud.colors = Some(all_colors);
    }
    Ok((cloud, stats))
}

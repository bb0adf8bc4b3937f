//! Depth hypotheses for the plane sweep.

use mvstr_tensor::Tensor;

use crate::error::{Error, Result};

/// Per-pixel depth hypotheses `[D, h, w]`, strictly increasing along `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    pub values: Tensor<f64>,
    pub stage: usize,
}

impl DepthHypotheses {
    /// The same hypothesis list at every pixel of an `h × w` map.
    pub fn broadcast(values: &[f64], h: usize, w: usize, stage: usize) -> Self {
        let values = Tensor::from_fn(vec![values.len(), h, w], |i| values[i[0]]);
        Self { values, stage }
    }

    pub fn depth_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Hypotheses at pixel `(v, u)`.
    pub fn at(&self, v: usize, u: usize) -> Vec<f64> {
        (0..self.depth_count()).map(|d| self.values.get(&[d, v, u])).collect()
    }
}

/// `d` depths spaced uniformly in inverse depth from `depth_min` to `depth_max`.
pub fn initial_hypotheses(depth_min: f64, depth_max: f64, d: usize) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::Config(format!("need at least 2 hypotheses, got {d}")));
    }
    if !(depth_min > 0.0 && depth_min < depth_max) {
        return Err(Error::Geometry(format!("bad depth range [{depth_min}, {depth_max}]")));
    }
    let (a, b) = (1.0 / depth_min, 1.0 / depth_max);
    let last = (d - 1) as f64;
    let mut out: Vec<f64> = (0..d).map(|i| 1.0 / (a + (b - a) * i as f64 / last)).collect();
    out[0] = depth_min;
    out[d - 1] = depth_max;
    Ok(out)
}

/// `d` hypotheses per pixel with spacing `interval`, centered on `prev`.
///
/// A window that would leave `[lo, hi]` slides back inside it, keeping its
/// spacing; `lo` is raised to a small positive depth if needed.
pub fn refine_hypotheses(prev: &Tensor<f64>, d: usize, interval: f64, bounds: (f64, f64), stage: usize) -> Result<DepthHypotheses> {
    let &[h, w] = prev.shape() else {
        return Err(Error::Input(format!("previous depth must be [h, w], got {:?}", prev.shape())));
    };
    if d < 2 || !(interval > 0.0) {
        return Err(Error::Config(format!("bad refinement: {d} hypotheses, interval {interval}")));
    }
    let span = (d - 1) as f64 * interval;
    let lo = bounds.0.max(interval * 1e-3);
    let hi = bounds.1;
    let mut values = vec![0.0; d * h * w];
    for (p, &c) in prev.data().iter().enumerate() {
        let c = if c.is_finite() { c } else { lo };
        let mut start = c - span / 2.0;
        if start + span > hi {
            start = hi - span;
        }
        if start < lo {
            start = lo;
        }
        for k in 0..d {
            values[k * h * w + p] = start + k as f64 * interval;
        }
    }
    Ok(DepthHypotheses {
        values: Tensor::new(vec![d, h, w], values)?,
        stage,
    })
}

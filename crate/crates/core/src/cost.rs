//! Group-wise correlation cost volumes from warped source features.

use mvstr_tensor::{Scalar, Tensor, TensorError, Var};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::hypotheses::DepthHypotheses;
use crate::transformer::pairwise_sum;
use crate::warp::build_warp_grid;

/// `cost` is `[G, D, h, w]`; `valid_count` `[D, h, w]` counts the sources
/// whose warp landed inside their image.
#[derive(Debug, Clone)]
pub struct CostVolume<'t, T: Scalar> {
    pub cost: Var<'t, T>,
    pub valid_count: Tensor<T>,
}

/// One source view at the stage resolution.
#[derive(Debug, Clone, Copy)]
pub struct SourceFeatures<'a, 't, T: Scalar> {
    /// `[C, h, w]`
    pub features: Var<'t, T>,
    /// Camera already scaled to the stage resolution.
    pub camera: &'a Camera,
    pub view_id: usize,
}

/// Per group `g`: `(G/C) Σ_{c in g} ref[c] · warped[c, d]` masked by `valid`.
///
/// `reference` is `[C, h, w]`, `warped` `[C, D, h, w]`, `valid` `[D, h, w]`.
pub fn groupwise_correlation<'t, T: Scalar>(
    reference: Var<'t, T>,
    warped: Var<'t, T>,
    valid: &Tensor<T>,
    groups: usize,
) -> Result<Var<'t, T>> {
    let (rs, ws) = (reference.shape(), warped.shape());
    if rs.len() != 3 || ws.len() != 4 || rs[0] != ws[0] || rs[1..] != ws[2..] || valid.shape() != &ws[1..] {
        return Err(TensorError::Shape {
            op: "groupwise_correlation",
            lhs: rs,
            rhs: ws,
        }
        .into());
    }
    let (c, d, h, w) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels do not split into {groups} groups")));
    }
    let cg = c / groups;
    let r = reference.reshape(&[groups, cg, 1, h, w])?;
    let wp = warped.mul_const(valid)?.reshape(&[groups, cg, d, h, w])?;
    Ok(r.mul(wp)?.sum_dim(1)?.scale(1.0 / cg as f64))
}

/// Warps each source's features onto the reference hypotheses, correlates,
/// and averages over the sources that see each sample.
///
/// Sources are summed in ascending `view_id` order by recursive halving, so
/// the result does not depend on the order of `sources`.
pub fn build_cost_volume<'t, T: Scalar>(
    reference: Var<'t, T>,
    ref_camera: &Camera,
    sources: &[SourceFeatures<'_, 't, T>],
    hyp: &DepthHypotheses,
    groups: usize,
) -> Result<CostVolume<'t, T>> {
    if sources.is_empty() {
        return Err(Error::Usage("a cost volume needs at least one source".into()));
    }
    let rs = reference.shape();
    let (d, h, w) = (hyp.depth_count(), hyp.height(), hyp.width());
    if rs.len() != 3 || rs[1] != h || rs[2] != w {
        return Err(Error::Input(format!(
            "reference features {rs:?} do not match {h}×{w} hypotheses"
        )));
    }
    let c = rs[0];
    let mut ordered: Vec<&SourceFeatures<'_, 't, T>> = sources.iter().collect();
    ordered.sort_by_key(|s| s.view_id);

    let tape = reference.tape();
    let mut costs = Vec::with_capacity(ordered.len());
    let mut count = vec![T::zero(); d * h * w];
    for src in ordered {
        if src.features.shape() != rs {
            return Err(TensorError::Shape {
                op: "build_cost_volume",
                lhs: rs,
                rhs: src.features.shape(),
            }
            .into());
        }
        let grid = build_warp_grid(ref_camera, src.camera, hyp)?;
        let coords = tape.constant(grid.coords.cast::<T>().reshape(vec![1, d * h, w, 2])?);
        let (sampled, _) = src.features.reshape(&[1, c, h, w])?.grid_sample(coords)?;
        let warped = sampled.reshape(&[c, d, h, w])?;
        let valid = grid.valid.cast::<T>();
        for (acc, &v) in count.iter_mut().zip(valid.data()) {
            *acc += v;
        }
        costs.push(groupwise_correlation(reference, warped, &valid, groups)?);
    }
    let valid_count = Tensor::new(vec![d, h, w], count)?;
    let inv = valid_count.map(|n| T::one() / n.max(T::one()));
    let cost = pairwise_sum(&costs)?.mul_const(&inv)?;
    Ok(CostVolume { cost, valid_count })
}

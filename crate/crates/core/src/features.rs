//! Eight-layer 2-D CNN shared by all views, and the 1×1 fusion of upsampled
//! coarse features with finer CNN features.
//!
//! | layer | stride | width | tap |
//! |-------|--------|-------|-----|
//! | 1     | 1      | c1    |     |
//! | 2     | 1      | c1    | f1  |
//! | 3     | 2      | c2    |     |
//! | 4, 5  | 1      | c2    | f2 after 5 |
//! | 6     | 2      | c4    |     |
//! | 7, 8  | 1      | c4    | f4 after 8 |
//!
//! Every conv is 3×3. Taps are the raw conv outputs; the trunk continues
//! through channel layer norm and ELU.

use mvstr_tensor::{Params, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Layout};

const LAYERS: usize = 8;
const TAPS: [usize; 3] = [2, 5, 8];

/// Multi-scale features for a batch of views: `[V, c, H/s, W/s]` per scale.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub f1: Var<'t, T>,
    pub f2: Var<'t, T>,
    pub f4: Var<'t, T>,
}

fn layer_plan(channels: [usize; 3]) -> [(usize, usize, usize); LAYERS] {
    let [c1, c2, c4] = channels;
    [
        (3, c1, 1),
        (c1, c1, 1),
        (c1, c2, 2),
        (c2, c2, 1),
        (c2, c2, 1),
        (c2, c4, 2),
        (c4, c4, 1),
        (c4, c4, 1),
    ]
}

pub fn feature_layout(layout: &mut Layout, channels: [usize; 3]) {
    for (i, (inp, out, _)) in layer_plan(channels).into_iter().enumerate() {
        let n = i + 1;
        layout.conv(&format!("feat.conv{n}"), out, inp, &[3, 3]);
        if n != LAYERS {
            layout.norm(&format!("feat.norm{n}"), out);
        }
    }
}

/// Runs the CNN on `images` `[V, 3, H, W]` with `H` and `W` divisible by 4.
pub fn extract_features<'t, T: Scalar>(
    p: &Params<'t, T>,
    images: Var<'t, T>,
    channels: [usize; 3],
    eps: f64,
) -> Result<FeaturePyramid<'t, T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Input(format!(
            "images must be [V, 3, H, W] with H and W positive multiples of 4, got {s:?}"
        )));
    }
    let mut x = images;
    let mut taps = Vec::with_capacity(3);
    for (i, (_, _, stride)) in layer_plan(channels).into_iter().enumerate() {
        let n = i + 1;
        let y = nn::conv2d(p, &format!("feat.conv{n}"), x, stride)?;
        if TAPS.contains(&n) {
            taps.push(y);
        }
        if n != LAYERS {
            x = nn::norm(p, &format!("feat.norm{n}"), y, 1, eps)?.elu();
        }
    }
    Ok(FeaturePyramid {
        f1: taps[0],
        f2: taps[1],
        f4: taps[2],
    })
}

pub fn fuse_layout(layout: &mut Layout, prefix: &str, coarse: usize, fine: usize, out: usize) {
    layout.conv(prefix, out, coarse + fine, &[1, 1]);
}

/// Upsamples `coarse` `[V, C, h, w]` bilinearly to the size of `fine`
/// `[V, C', 2h, 2w]`, concatenates channels and applies a 1×1 conv.
pub fn fuse_upsampled<'t, T: Scalar>(
    p: &Params<'t, T>,
    prefix: &str,
    coarse: Var<'t, T>,
    fine: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (cs, fs) = (coarse.shape(), fine.shape());
    if cs.len() != 4 || fs.len() != 4 || cs[0] != fs[0] || fs[2] != 2 * cs[2] || fs[3] != 2 * cs[3] {
        return Err(mvstr_tensor::TensorError::Shape {
            op: "fuse_upsampled",
            lhs: cs,
            rhs: fs,
        }
        .into());
    }
    let up = coarse.resize_bilinear(fs[2], fs[3])?;
    let cat = Var::concat(&[up, fine], 1)?;
    Ok(nn::conv2d(p, prefix, cat, 1)?)
}

//! 3-D U-Net cost regularization and soft-argmin depth regression.

use mvstr_tensor::{Params, Scalar, Tensor, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Layout};

/// Settings shared by every stage's U-Net.
#[derive(Debug, Clone, Copy)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub eps: f64,
}

/// Encoder `enc0` at full resolution, then per level a stride-2 `down` conv and
/// a `conv`; decoder per level an `up` conv after nearest upsampling, added to
/// the matching encoder output; `out` maps to one channel.
pub fn unet_layout(layout: &mut Layout, prefix: &str, in_channels: usize, cfg: &UNetConfig) {
    let b = cfg.base_channels;
    let k = [3, 3, 3];
    layout.conv(&format!("{prefix}.enc0"), b, in_channels, &k);
    layout.norm(&format!("{prefix}.enc0_norm"), b);
    for l in 1..=cfg.levels {
        let (cin, cout) = (b << (l - 1), b << l);
        layout.conv(&format!("{prefix}.down{l}"), cout, cin, &k);
        layout.norm(&format!("{prefix}.down{l}_norm"), cout);
        layout.conv(&format!("{prefix}.conv{l}"), cout, cout, &k);
        layout.norm(&format!("{prefix}.conv{l}_norm"), cout);
        layout.conv(&format!("{prefix}.up{l}"), cin, cout, &k);
        layout.norm(&format!("{prefix}.up{l}_norm"), cin);
    }
    // No bias: a constant logit offset cancels in the softmax.
    layout.push(format!("{prefix}.out.weight"), &[1, b, 3, 3, 3], Init::HeUniform { fan_in: b * 27 });
}

fn conv_norm_elu<'t, T: Scalar>(p: &Params<'t, T>, name: &str, x: Var<'t, T>, stride: usize, eps: f64) -> Result<Var<'t, T>> {
    let y = nn::conv3d(p, name, x, stride)?;
    Ok(nn::norm(p, &format!("{name}_norm"), y, 1, eps)?.elu())
}

/// Regularizes `cost` `[G, D, h, w]` into logits `[D, h, w]`. The volume is
/// zero-padded up to multiples of `2^levels` and cropped back.
pub fn unet3d<'t, T: Scalar>(p: &Params<'t, T>, prefix: &str, cost: Var<'t, T>, cfg: &UNetConfig) -> Result<Var<'t, T>> {
    let s = cost.shape();
    let &[g, d, h, w] = s.as_slice() else {
        return Err(Error::Input(format!("cost volume must be [G, D, h, w], got {s:?}")));
    };
    let m = 1usize << cfg.levels;
    let up = |n: usize| n.div_ceil(m) * m;
    let x = cost
        .reshape(&[1, g, d, h, w])?
        .pad(&[(0, 0), (0, 0), (0, up(d) - d), (0, up(h) - h), (0, up(w) - w)])?;

    let mut skips = Vec::with_capacity(cfg.levels + 1);
    let mut x = conv_norm_elu(p, &format!("{prefix}.enc0"), x, 1, cfg.eps)?;
    for l in 1..=cfg.levels {
        skips.push(x);
        x = conv_norm_elu(p, &format!("{prefix}.down{l}"), x, 2, cfg.eps)?;
        x = conv_norm_elu(p, &format!("{prefix}.conv{l}"), x, 1, cfg.eps)?;
    }
    for l in (1..=cfg.levels).rev() {
        let upsampled = x.upsample_nearest(&[2, 2, 2])?;
        x = conv_norm_elu(p, &format!("{prefix}.up{l}"), upsampled, 1, cfg.eps)?.add(skips[l - 1])?;
    }
    let logits = nn::conv3d(p, &format!("{prefix}.out"), x, 1)?;
    Ok(logits
        .narrow(2, 0, d)?
        .narrow(3, 0, h)?
        .narrow(4, 0, w)?
        .reshape(&[d, h, w])?)
}

/// Output of [`soft_argmin`]: depth `[h, w]` and probabilities `[D, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct Regression<'t, T: Scalar> {
    pub depth: Var<'t, T>,
    pub prob: Var<'t, T>,
}

/// Softmax over hypotheses, then the probability-weighted mean depth.
/// `hyp` is `[D, h, w]` and matches `logits`.
pub fn soft_argmin<'t, T: Scalar>(logits: Var<'t, T>, hyp: &Tensor<T>) -> Result<Regression<'t, T>> {
    let s = logits.shape();
    if s.len() != 3 || s.as_slice() != hyp.shape() {
        return Err(TensorError::Shape {
            op: "soft_argmin",
            lhs: s,
            rhs: hyp.shape().to_vec(),
        }
        .into());
    }
    let prob = logits.softmax(0)?;
    let depth = prob.mul_const(hyp)?.sum_dim(0)?;
    Ok(Regression { depth, prob })
}

/// Largest total probability of three consecutive hypotheses, per pixel.
pub fn confidence<T: Scalar>(prob: &Tensor<T>) -> Tensor<T> {
    let s = prob.shape();
    let (d, hw) = (s[0], s[1] * s[2]);
    let p = prob.data();
    let width = d.min(3);
    let mut out = vec![T::zero(); hw];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = T::zero();
        for start in 0..=(d - width) {
            let mut acc = T::zero();
            for k in start..start + width {
                acc += p[k * hw + i];
            }
            best = best.max(acc);
        }
        *o = best.min(T::one());
    }
    Tensor::new(vec![s[1], s[2]], out).expect("numel matches")
}

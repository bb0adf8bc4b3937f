//! Global-context and cross-view transformer layers over flattened
//! quarter-resolution feature maps.
//!
//! Sequences are batched: a tensor `[B, j, C]` holds `B` sequences of `j`
//! tokens with `C` channels. Row `k` of a flattened `h × w` map is pixel
//! `(k / w, k % w)`.

use mvstr_tensor::{Params, Scalar, TensorError, Var};

use crate::error::{Error, Result};
use crate::nn::{self, Init, Layout};

pub const POS: &str = "pos";

/// Which of the three layer kinds a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Self-attention within each view.
    S,
    /// Reference queries attending to each source.
    Cr,
    /// Source queries attending to the averaged reference output.
    Cs,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::S => "s",
            LayerKind::Cr => "cr",
            LayerKind::Cs => "cs",
        }
    }
}

pub fn layer_prefix(z: usize, kind: LayerKind) -> String {
    format!("tf{z}.{}", kind.tag())
}

pub fn block_layout(layout: &mut Layout, prefix: &str, c: usize) {
    for proj in ["q", "k", "v", "o"] {
        layout.linear(&format!("{prefix}.{proj}"), c, c);
    }
    layout.norm(&format!("{prefix}.norm1"), c);
    layout.linear(&format!("{prefix}.fc1"), 2 * c, 2 * c);
    layout.linear(&format!("{prefix}.fc2"), 2 * c, c);
    layout.norm(&format!("{prefix}.norm2"), c);
}

/// Positional table `[j, C]` plus `z_layers` rounds of the three layers.
pub fn transformer_layout(layout: &mut Layout, j: usize, c: usize, z_layers: usize) {
    layout.push(POS, &[j, c], Init::Uniform(0.1));
    for z in 0..z_layers {
        for kind in [LayerKind::S, LayerKind::Cr, LayerKind::Cs] {
            block_layout(layout, &layer_prefix(z, kind), c);
        }
    }
}

/// `[V, C, h, w]` to `[V, h·w, C]`, adding `pos` `[h·w, C]` to every view.
pub fn encode_and_flatten<'t, T: Scalar>(f: Var<'t, T>, pos: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = f.shape();
    let &[v, c, h, w] = s.as_slice() else {
        return Err(Error::Input(format!("features must be [V, C, h, w], got {s:?}")));
    };
    if pos.shape() != [h * w, c] {
        return Err(TensorError::Shape {
            op: "encode_and_flatten",
            lhs: s,
            rhs: pos.shape(),
        }
        .into());
    }
    let x = f.reshape(&[v, c, h * w])?.permute(&[0, 2, 1])?;
    Ok(x.add(pos.reshape(&[1, h * w, c])?)?)
}

/// Inverse of the flattening in [`encode_and_flatten`].
pub fn unflatten<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let &[v, j, c] = s.as_slice() else {
        return Err(Error::Input(format!("sequences must be [V, j, C], got {s:?}")));
    };
    if j != h * w {
        return Err(Error::Input(format!("{j} tokens do not fill a {h}×{w} map")));
    }
    Ok(x.permute(&[0, 2, 1])?.reshape(&[v, c, h, w])?)
}

/// Positional table for an `h × w` map, bilinearly resized when the map
/// differs from the `h0 × w0` training size.
pub fn positional_table<'t, T: Scalar>(pos: Var<'t, T>, (h0, w0): (usize, usize), h: usize, w: usize) -> Result<Var<'t, T>> {
    if (h, w) == (h0, w0) {
        return Ok(pos);
    }
    let c = pos.shape()[1];
    let grid = pos.reshape(&[1, h0, w0, c])?.permute(&[0, 3, 1, 2])?;
    let resized = grid.resize_bilinear(h, w)?;
    Ok(resized.permute(&[0, 2, 3, 1])?.reshape(&[h * w, c])?)
}

fn split_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, j, c) = (s[0], s[1], s[2]);
    let dh = c / heads;
    Ok(x.reshape(&[b, j, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, j, dh])?)
}

fn merge_heads<'t, T: Scalar>(x: Var<'t, T>, b: usize, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (j, dh) = (s[1], s[2]);
    Ok(x.reshape(&[b, heads, j, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, j, heads * dh])?)
}

/// Multi-head linearized attention with feature map `φ(x) = elu(x) + 1`:
/// `out_i = φ(q_i)ᵀ Σ_k φ(k_k) v_kᵀ / φ(q_i)ᵀ Σ_k φ(k_k)` per head.
///
/// Inputs are `[B, j, C]` (queries may have a different `j` than keys).
pub fn linear_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks != v.shape() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(TensorError::Shape {
            op: "linear_attention",
            lhs: qs,
            rhs: ks,
        }
        .into());
    }
    if heads == 0 || qs[2] % heads != 0 {
        return Err(Error::Config(format!("{} channels do not split into {heads} heads", qs[2])));
    }
    let b = qs[0];
    let fq = split_heads(q, heads)?.elu().add_scalar(1.0);
    let fk = split_heads(k, heads)?.elu().add_scalar(1.0);
    let vh = split_heads(v, heads)?;
    let kv = fk.transpose()?.matmul(vh)?;
    let num = fq.matmul(kv)?;
    let ksum = fk.sum_dim(1)?.unsqueeze(2)?;
    let den = fq.matmul(ksum)?;
    merge_heads(num.div(den)?, b, heads)
}

/// One attention block: `LN(FFN(Concat(LN(MHA(q, kv, kv)), q))) + q`.
pub fn attention_block<'t, T: Scalar>(
    p: &Params<'t, T>,
    prefix: &str,
    query: Var<'t, T>,
    context: Var<'t, T>,
    heads: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    let q = nn::linear(p, &format!("{prefix}.q"), query)?;
    let k = nn::linear(p, &format!("{prefix}.k"), context)?;
    let v = nn::linear(p, &format!("{prefix}.v"), context)?;
    let att = linear_attention(q, k, v, heads)?;
    let att = nn::linear(p, &format!("{prefix}.o"), att)?;
    let att = nn::norm(p, &format!("{prefix}.norm1"), att, 2, eps)?;
    let cat = Var::concat(&[att, query], 2)?;
    let hidden = nn::linear(p, &format!("{prefix}.fc1"), cat)?.elu();
    let out = nn::linear(p, &format!("{prefix}.fc2"), hidden)?;
    let out = nn::norm(p, &format!("{prefix}.norm2"), out, 2, eps)?;
    Ok(out.add(query)?)
}

/// Self-attention layer applied to every sequence of the batch `[V, j, C]`.
pub fn layer_s<'t, T: Scalar>(p: &Params<'t, T>, z: usize, x: Var<'t, T>, heads: usize, eps: f64) -> Result<Var<'t, T>> {
    attention_block(p, &layer_prefix(z, LayerKind::S), x, x, heads, eps)
}

/// Sum of `parts` by recursive halving, so the result depends only on the
/// order of `parts`.
pub fn pairwise_sum<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    match parts {
        [] => Err(Error::Usage("nothing to sum".into())),
        [one] => Ok(*one),
        _ => {
            let mid = parts.len() / 2;
            Ok(pairwise_sum(&parts[..mid])?.add(pairwise_sum(&parts[mid..])?)?)
        }
    }
}

fn repeat<'t, T: Scalar>(x: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    if n == 1 {
        return Ok(x);
    }
    Ok(Var::concat(&vec![x; n], 0)?)
}

/// Reference layer: the reference `[1, j, C]` attends to each source of
/// `sources` `[N, j, C]`; the N outputs are averaged in batch order.
pub fn layer_cr<'t, T: Scalar>(
    p: &Params<'t, T>,
    z: usize,
    reference: Var<'t, T>,
    sources: Var<'t, T>,
    heads: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    let n = sources.shape()[0];
    if n == 0 {
        return Err(Error::Usage("the reference layer needs at least one source".into()));
    }
    let per_source = attention_block(p, &layer_prefix(z, LayerKind::Cr), repeat(reference, n)?, sources, heads, eps)?;
    let parts = (0..n).map(|i| per_source.narrow(0, i, 1)).collect::<Result<Vec<_>, _>>()?;
    Ok(pairwise_sum(&parts)?.scale(1.0 / n as f64))
}

/// Source layer: every source `[N, j, C]` attends to the reference output `[1, j, C]`.
pub fn layer_cs<'t, T: Scalar>(
    p: &Params<'t, T>,
    z: usize,
    sources: Var<'t, T>,
    reference: Var<'t, T>,
    heads: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    let n = sources.shape()[0];
    attention_block(p, &layer_prefix(z, LayerKind::Cs), sources, repeat(reference, n)?, heads, eps)
}

/// Settings for [`transformer_stack`].
#[derive(Debug, Clone, Copy)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub eps: f64,
    /// Quarter-resolution map size the positional table was built for.
    pub table_size: (usize, usize),
}

/// Runs the stack on `features` `[V, C, h, w]`, where index 0 is the
/// reference and `view_ids[i]` identifies view `i`. Sources are processed in
/// ascending id order; outputs keep the input order.
pub fn transformer_stack<'t, T: Scalar>(
    p: &Params<'t, T>,
    features: Var<'t, T>,
    view_ids: &[usize],
    cfg: &StackConfig,
) -> Result<Var<'t, T>> {
    let s = features.shape();
    let &[v, _, h, w] = s.as_slice() else {
        return Err(Error::Input(format!("features must be [V, C, h, w], got {s:?}")));
    };
    if view_ids.len() != v || v < 2 {
        return Err(Error::Usage(format!("{} view ids for {v} views; need a reference and a source", view_ids.len())));
    }
    let mut order: Vec<usize> = (1..v).collect();
    order.sort_by_key(|&i| view_ids[i]);
    let forward: Vec<usize> = std::iter::once(0).chain(order.iter().copied()).collect();
    let mut inverse = vec![0; v];
    for (pos, &i) in forward.iter().enumerate() {
        inverse[i] = pos;
    }

    let pos = positional_table(p.get(POS), cfg.table_size, h, w)?;
    let x = encode_and_flatten(features, pos)?;
    let mut x = gather(x, &forward)?;
    for z in 0..cfg.layers {
        let c = layer_s(p, z, x, cfg.heads, cfg.eps)?;
        let c_ref = c.narrow(0, 0, 1)?;
        let c_src = c.narrow(0, 1, v - 1)?;
        let t_ref = layer_cr(p, z, c_ref, c_src, cfg.heads, cfg.eps)?;
        let t_src = layer_cs(p, z, c_src, t_ref, cfg.heads, cfg.eps)?;
        x = Var::concat(&[t_ref, t_src], 0)?;
    }
    unflatten(gather(x, &inverse)?, h, w)
}

/// Reorders the batch dim: output `i` is input `index[i]`.
fn gather<'t, T: Scalar>(x: Var<'t, T>, index: &[usize]) -> Result<Var<'t, T>> {
    if index.iter().enumerate().all(|(i, &k)| i == k) {
        return Ok(x);
    }
    let parts = index.iter().map(|&k| x.narrow(0, k, 1)).collect::<Result<Vec<_>, _>>()?;
    Ok(Var::concat(&parts, 0)?)
}

//! Tape-free forward and backward kernels. `ops` wires these onto the tape.

use crate::error::{invalid, shape_err, Result};
use crate::{Scalar, Tensor};

/// Splits `shape` around `dim` into (outer, size, inner) element counts.
pub fn split_at_dim(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer = shape[..dim].iter().product();
    let inner = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed at the rank of `out`, zero along broadcast dims.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, offset_a, offset_b)` for every element of `out` in
/// row-major order.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut lin = 0;
    loop {
        for k in 0..last {
            f(lin, oa + k * la, ob + k * lb);
            lin += 1;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn binary_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    walk2(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub fn sum_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let st = broadcast_strides(shape, g.shape());
    let sg = contiguous_strides(g.shape());
    let gd = g.data();
    walk2(g.shape(), &sg, &st, |_, ig, it| out[it] += gd[ig]);
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let own = contiguous_strides(x.shape());
    let out: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let dst = contiguous_strides(&out);
    let mut data = vec![T::zero(); x.numel()];
    let xd = x.data();
    walk2(&out, &src, &dst, |_, is, id| data[id] = xd[is]);
    Ok(Tensor::from_parts(out, data))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], dim: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    if dim >= first.rank() {
        return Err(invalid("concat", format!("dim {dim} out of range for rank {}", first.rank())));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == dim || a == b);
        if !ok {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
        total += p.shape()[dim];
    }
    let mut shape = first.shape().to_vec();
    shape[dim] = total;
    let (outer, _, inner) = split_at_dim(&shape, dim);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[dim] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, dim: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if dim >= x.rank() || start + len > x.shape()[dim] {
        return Err(invalid(
            "narrow",
            format!("range {start}..{} on dim {dim} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, n, inner) = split_at_dim(x.shape(), dim);
    let mut shape = x.shape().to_vec();
    shape[dim] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Zero padding, `(before, after)` per dim.
pub fn pad<T: Scalar>(x: &Tensor<T>, widths: &[(usize, usize)]) -> Result<Tensor<T>> {
    if widths.len() != x.rank() {
        return Err(invalid("pad", format!("{} widths for rank {}", widths.len(), x.rank())));
    }
    let out: Vec<usize> = x.shape().iter().zip(widths).map(|(&d, &(b, a))| d + b + a).collect();
    let dst_strides = contiguous_strides(&out);
    let base: usize = widths.iter().zip(&dst_strides).map(|(&(b, _), &s)| b * s).sum();
    let mut data = vec![T::zero(); out.iter().product()];
    let xd = x.data();
    let own = contiguous_strides(x.shape());
    walk2(x.shape(), &own, &dst_strides, |_, is, id| data[base + id] = xd[is]);
    Ok(Tensor::from_parts(out, data))
}

/// Inverse of [`pad`]: keeps the interior.
pub fn unpad<T: Scalar>(x: &Tensor<T>, widths: &[(usize, usize)]) -> Tensor<T> {
    let out: Vec<usize> = x.shape().iter().zip(widths).map(|(&d, &(b, a))| d - b - a).collect();
    let src_strides = contiguous_strides(x.shape());
    let base: usize = widths.iter().zip(&src_strides).map(|(&(b, _), &s)| b * s).sum();
    let mut data = vec![T::zero(); out.iter().product()];
    let xd = x.data();
    let dst = contiguous_strides(&out);
    walk2(&out, &src_strides, &dst, |_, is, id| data[id] = xd[base + is]);
    Tensor::from_parts(out, data)
}

/// Sum over `dim`, removing it.
pub fn sum_dim<T: Scalar>(x: &Tensor<T>, dim: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_dim(x.shape(), dim);
    let mut data = vec![T::zero(); outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for k in 0..n {
            let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(dim);
    Tensor::from_parts(shape, data)
}

/// Repeats `g` (the shape of `x` with `dim` removed) `n` times along `dim`.
pub fn expand_dim<T: Scalar>(g: &Tensor<T>, dim: usize, n: usize) -> Tensor<T> {
    let mut shape = g.shape().to_vec();
    shape.insert(dim, n);
    let (outer, _, inner) = split_at_dim(&shape, dim);
    let gd = g.data();
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(shape, data)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, dim: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_dim(x.shape(), dim);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(xd[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, dim: usize) -> Tensor<T> {
    let (outer, n, inner) = split_at_dim(y.shape(), dim);
    let (yd, gd) = (y.data(), g.data());
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: T = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..n {
                dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Layer normalization over `dim`. Returns the output, the normalized values
/// and the per-position reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    dim: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (outer, n, inner) = split_at_dim(x.shape(), dim);
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); outer * inner];
    let nt = T::lit(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mean = (0..n).map(|k| xd[at(k)]).sum::<T>() / nt;
            let var = (0..n).map(|k| (xd[at(k)] - mean).powi(2)).sum::<T>() / nt;
            let r = (var + eps).sqrt().recip();
            rstd[o * inner + i] = r;
            for k in 0..n {
                let h = (xd[at(k)] - mean) * r;
                xhat[at(k)] = h;
                out[at(k)] = h * gamma[k] + beta[k];
            }
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
}

/// Gradients of [`layer_norm`] for input, gamma and beta.
pub fn layer_norm_backward<T: Scalar>(
    shape: &[usize],
    dim: usize,
    g: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (outer, n, inner) = split_at_dim(shape, dim);
    let gd = g.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); n];
    let mut dbeta = vec![T::zero(); n];
    let nt = T::lit(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mean_dh = T::zero();
            let mut mean_dh_h = T::zero();
            for k in 0..n {
                let dh = gd[at(k)] * gamma[k];
                mean_dh += dh;
                mean_dh_h += dh * xhat[at(k)];
                dgamma[k] += gd[at(k)] * xhat[at(k)];
                dbeta[k] += gd[at(k)];
            }
            mean_dh /= nt;
            mean_dh_h /= nt;
            let r = rstd[o * inner + i];
            for k in 0..n {
                let dh = gd[at(k)] * gamma[k];
                dx[at(k)] = r * (dh - mean_dh - xhat[at(k)] * mean_dh_h);
            }
        }
    }
    (Tensor::from_parts(shape.to_vec(), dx), dgamma, dbeta)
}

/// Matrix product over the last two dims. Operands are rank 2 or rank 3; a
/// rank-2 operand or a batch of 1 is broadcast against the other batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, k) = batch_dims("matmul", a, b)?;
    let (bb, k2, n) = batch_dims("matmul", b, a)?;
    if k != k2 || (ba != bb && ba != 1 && bb != 1) {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let batch = ba.max(bb);
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let ao = if ba == 1 { 0 } else { i * m * k };
        let bo = if bb == 1 { 0 } else { i * k * n };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[ao..ao + m * k],
            (k, 1),
            &b.data()[bo..bo + k * n],
            (n, 1),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            (n, 1),
        );
    }
    let shape = if a.rank() == 2 && b.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Tensor::from_parts(shape, out))
}

fn batch_dims<T: Scalar>(op: &'static str, t: &Tensor<T>, other: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [m, k] => Ok((1, m, k)),
        [b, m, k] => Ok((b, m, k)),
        _ => Err(shape_err(op, t.shape(), other.shape())),
    }
}

/// Gradients of [`matmul`] given the upstream gradient `g`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (ba, m, k) = batch_dims("matmul", a, b).expect("validated in forward");
    let (bb, _, n) = batch_dims("matmul", b, a).expect("validated in forward");
    let batch = ba.max(bb);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    let gd = g.data();
    for i in 0..batch {
        let ao = if ba == 1 { 0 } else { i * m * k };
        let bo = if bb == 1 { 0 } else { i * k * n };
        let gs = &gd[i * m * n..(i + 1) * m * n];
        // dA += G · Bᵀ
        T::gemm(
            m,
            n,
            k,
            T::one(),
            gs,
            (n, 1),
            &b.data()[bo..bo + k * n],
            (1, n),
            T::one(),
            &mut da[ao..ao + m * k],
            (k, 1),
        );
        // dB += Aᵀ · G
        T::gemm(
            k,
            m,
            n,
            T::one(),
            &a.data()[ao..ao + m * k],
            (1, k),
            gs,
            (n, 1),
            T::one(),
            &mut db[bo..bo + k * n],
            (n, 1),
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    )
}

/// Geometry of a 3-D convolution over `[B, C, D, H, W]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let (&[batch, in_ch, d, h, wd], &[out_ch, wc, kd, kh, kw]) = (x, w) else {
            return Err(shape_err("conv", x, w));
        };
        if wc != in_ch {
            return Err(shape_err("conv", x, w));
        }
        if stride.contains(&0) {
            return Err(invalid("conv", "stride must be positive"));
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for i in 0..3 {
            if kernel[i] == 0 || input[i] + 2 * pad[i] < kernel[i] {
                return Err(invalid(
                    "conv",
                    format!("kernel {kernel:?} does not fit input {input:?} with padding {pad:?}"),
                ));
            }
            output[i] = (input[i] + 2 * pad[i] - kernel[i]) / stride[i] + 1;
        }
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.input.iter().product::<usize>()
    }

    /// 1x1x1 kernel, unit stride, no padding: the input already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, self.out_ch, d, h, w]
    }
}

/// Source index along one axis, or `None` when it falls in the padding.
#[inline]
fn src_index(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let i = (o * stride + k).checked_sub(pad)?;
    (i < size).then_some(i)
}

/// Output positions `[lo, hi)` along one axis whose source index is in bounds.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sz, sy, sx] = g.stride;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.in_ch {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(kx, sx, g.pad[2], iw, ow);
                    let mut o = 0;
                    for oz in 0..od {
                        let z = src_index(oz, kz, sz, g.pad[0], id);
                        for oy in 0..oh {
                            let y = src_index(oy, ky, sy, g.pad[1], ih);
                            let line = &mut dst[o..o + ow];
                            match (z, y) {
                                (Some(z), Some(y)) => {
                                    let base = ((c * id + z) * ih + y) * iw;
                                    line[..lo].fill(T::zero());
                                    line[hi..].fill(T::zero());
                                    if lo < hi {
                                        let first = base + lo * sx + kx - g.pad[2];
                                        if sx == 1 {
                                            line[lo..hi].copy_from_slice(&x[first..first + hi - lo]);
                                        } else {
                                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                                *v = x[first + j * sx];
                                            }
                                        }
                                    }
                                }
                                _ => line.fill(T::zero()),
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let [sz, sy, sx] = g.stride;
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.in_ch {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(kx, sx, g.pad[2], iw, ow);
                    let mut o = 0;
                    for oz in 0..od {
                        let z = src_index(oz, kz, sz, g.pad[0], id);
                        for oy in 0..oh {
                            let y = src_index(oy, ky, sy, g.pad[1], ih);
                            if let (Some(z), Some(y), true) = (z, y, lo < hi) {
                                let first = ((c * id + z) * ih + y) * iw + lo * sx + kx - g.pad[2];
                                let line = &src[o + lo..o + hi];
                                if sx == 1 {
                                    for (d, &v) in dx[first..first + hi - lo].iter_mut().zip(line) {
                                        *d += v;
                                    }
                                } else {
                                    for (j, &v) in line.iter().enumerate() {
                                        dx[first + j * sx] += v;
                                    }
                                }
                            }
                            o += ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Result<Tensor<T>> {
    if let Some(b) = bias {
        if b.shape() != [g.out_ch] {
            return Err(shape_err("conv bias", b.shape(), &[g.out_ch]));
        }
    }
    let (k, p) = (g.patch_len(), g.out_len());
    let mut out = vec![T::zero(); g.batch * g.out_ch * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.in_len()..(bi + 1) * g.in_len()];
        let colmat: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[bi * g.out_ch * p..(bi + 1) * g.out_ch * p];
        if let Some(b) = bias {
            for (o, row) in ob.chunks_mut(p).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            g.out_ch,
            k,
            p,
            T::one(),
            w.data(),
            (k, 1),
            colmat,
            (p, 1),
            T::one(),
            ob,
            (p, 1),
        );
    }
    Ok(Tensor::from_parts(g.output_shape(), out))
}

/// Gradients of [`conv3d`] for input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (k, p) = (g.patch_len(), g.out_len());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); g.out_ch];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.in_len()..(bi + 1) * g.in_len()];
        let gb = &gout.data()[bi * g.out_ch * p..(bi + 1) * g.out_ch * p];
        for (o, row) in gb.chunks(p).enumerate() {
            db[o] += row.iter().copied().sum();
        }
        let colmat: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        // dW += G · colsᵀ
        T::gemm(g.out_ch, p, k, T::one(), gb, (p, 1), colmat, (1, p), T::one(), &mut dw, (k, 1));
        // dcols = Wᵀ · G
        let dxb = &mut dx[bi * g.in_len()..(bi + 1) * g.in_len()];
        if g.is_pointwise() {
            T::gemm(k, g.out_ch, p, T::one(), w.data(), (1, k), gb, (p, 1), T::zero(), dxb, (p, 1));
        } else {
            T::gemm(k, g.out_ch, p, T::one(), w.data(), (1, k), gb, (p, 1), T::zero(), &mut dcols, (p, 1));
            col2im(&dcols, g, dxb);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.out_ch], db),
    )
}

/// Bilinear corner lookup for a continuous coordinate along an axis of `size`.
///
/// Returns the lower index and the fractional weight of the upper neighbour,
/// or `None` when the coordinate lies outside `[0, size - 1]`.
#[inline]
fn bilinear_axis<T: Scalar>(c: T, size: usize) -> Option<(usize, T)> {
    let max = T::lit((size - 1) as f64);
    if !(c >= T::zero() && c <= max) {
        return None;
    }
    if size == 1 {
        return Some((0, T::zero()));
    }
    let lo = c.floor().to_f64().min((size - 2) as f64) as usize;
    Some((lo, c - T::lit(lo as f64)))
}

/// Bilinear sampling of `x: [B, C, H, W]` at `grid: [B, Ho, Wo, 2]` holding
/// (u, v) pixel coordinates with integer values at pixel centers. Samples
/// outside `[0, W-1] x [0, H-1]` are zero and flagged invalid in the returned
/// `[B, Ho, Wo]` mask (1 valid, 0 invalid).
pub fn grid_sample<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[b, c, h, w], &[gb, ho, wo, two]) = (x.shape(), grid.shape()) else {
        return Err(shape_err("grid_sample", x.shape(), grid.shape()));
    };
    if gb != b || two != 2 {
        return Err(shape_err("grid_sample", x.shape(), grid.shape()));
    }
    let (xd, gd) = (x.data(), grid.data());
    let plane = h * w;
    let p = ho * wo;
    let mut out = vec![T::zero(); b * c * p];
    let mut mask = vec![T::zero(); b * p];
    for bi in 0..b {
        for s in 0..p {
            let gi = (bi * p + s) * 2;
            let (Some((x0, fx)), Some((y0, fy))) = (bilinear_axis(gd[gi], w), bilinear_axis(gd[gi + 1], h)) else {
                continue;
            };
            mask[bi * p + s] = T::one();
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (w00, w01) = ((T::one() - fx) * (T::one() - fy), fx * (T::one() - fy));
            let (w10, w11) = ((T::one() - fx) * fy, fx * fy);
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let v = w00 * xd[base + y0 * w + x0]
                    + w01 * xd[base + y0 * w + x1]
                    + w10 * xd[base + y1 * w + x0]
                    + w11 * xd[base + y1 * w + x1];
                out[(bi * c + ci) * p + s] = v;
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![b, c, ho, wo], out),
        Tensor::from_parts(vec![b, ho, wo], mask),
    ))
}

/// Gradients of [`grid_sample`] for the sampled tensor and the grid.
pub fn grid_sample_backward<T: Scalar>(x: &Tensor<T>, grid: &Tensor<T>, gout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = x.shape()[..] else { unreachable!("validated in forward") };
    let [_, ho, wo, _] = grid.shape()[..] else { unreachable!("validated in forward") };
    let (xd, gd, god) = (x.data(), grid.data(), gout.data());
    let plane = h * w;
    let p = ho * wo;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgrid = vec![T::zero(); grid.numel()];
    for bi in 0..b {
        for s in 0..p {
            let gi = (bi * p + s) * 2;
            let (Some((x0, fx)), Some((y0, fy))) = (bilinear_axis(gd[gi], w), bilinear_axis(gd[gi + 1], h)) else {
                continue;
            };
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (w00, w01) = ((T::one() - fx) * (T::one() - fy), fx * (T::one() - fy));
            let (w10, w11) = ((T::one() - fx) * fy, fx * fy);
            let (mut du, mut dv) = (T::zero(), T::zero());
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let go = god[(bi * c + ci) * p + s];
                let (i00, i01, i10, i11) = (base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1);
                dx[i00] += w00 * go;
                dx[i01] += w01 * go;
                dx[i10] += w10 * go;
                dx[i11] += w11 * go;
                let (v00, v01, v10, v11) = (xd[i00], xd[i01], xd[i10], xd[i11]);
                if w > 1 {
                    du += go * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                if h > 1 {
                    dv += go * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            dgrid[gi] = du;
            dgrid[gi + 1] = dv;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(grid.shape().to_vec(), dgrid),
    )
}

/// Nearest-neighbour upsampling of the trailing dims by integer factors.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factors: &[usize]) -> Result<Tensor<T>> {
    if factors.len() > x.rank() || factors.contains(&0) {
        return Err(invalid("upsample_nearest", format!("factors {factors:?} for shape {:?}", x.shape())));
    }
    let lead = x.rank() - factors.len();
    let mut full = vec![1; lead];
    full.extend_from_slice(factors);
    let out: Vec<usize> = x.shape().iter().zip(&full).map(|(&d, &f)| d * f).collect();
    let own = contiguous_strides(x.shape());
    let xd = x.data();
    let mut data = vec![T::zero(); out.iter().product()];
    let mut idx = vec![0usize; out.len()];
    for v in data.iter_mut() {
        let src: usize = idx.iter().zip(&full).zip(&own).map(|((&i, &f), &s)| (i / f) * s).sum();
        *v = xd[src];
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out, data))
}

pub fn upsample_nearest_backward<T: Scalar>(g: &Tensor<T>, in_shape: &[usize], factors: &[usize]) -> Tensor<T> {
    let lead = in_shape.len() - factors.len();
    let mut full = vec![1; lead];
    full.extend_from_slice(factors);
    let own = contiguous_strides(in_shape);
    let gd = g.data();
    let mut data = vec![T::zero(); in_shape.iter().product()];
    let mut idx = vec![0usize; g.rank()];
    for &v in gd {
        let dst: usize = idx.iter().zip(&full).zip(&own).map(|((&i, &f), &s)| (i / f) * s).sum();
        data[dst] += v;
        for d in (0..g.rank()).rev() {
            idx[d] += 1;
            if idx[d] < g.shape()[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_parts(in_shape.to_vec(), data)
}

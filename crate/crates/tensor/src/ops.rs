//! Differentiable operations on [`Var`].

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::{Scalar, Tensor, Var};

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "operands live on different tapes");
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'t, T> {
        self.tape.record(value, &[self], Box::new(move |g| vec![Some(backward(g))]))
    }

    fn elementwise(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        self.unary(y, move |g| x.zip_map(g, &df).expect("same shape"))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_op("add", other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_op("sub", other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_op("mul", other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.broadcast_op("div", other, |a, b| a / b, |g, _, b| g / b, |g, a, b| -g * a / (b * b))
    }

    /// Element-wise binary op with broadcasting. `da`/`db` map
    /// (upstream grad, a, b) to the local gradient contribution.
    fn broadcast_op(
        self,
        op: &'static str,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let out = kernels::binary_broadcast(op, &a, &b, f)?;
        let out_shape = out.shape().to_vec();
        let need = (self.requires_grad(), other.requires_grad());
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g| {
                let ab = |x: &Tensor<T>| {
                    if x.shape() == out_shape.as_slice() {
                        x.clone()
                    } else {
                        kernels::binary_broadcast(op, x, g, |v, _| v).expect("broadcastable")
                    }
                };
                let (ae, be) = (ab(&a), ab(&b));
                let ga = need.0.then(|| {
                    let full = Tensor::from_parts(
                        out_shape.clone(),
                        g.data()
                            .iter()
                            .zip(ae.data().iter().zip(be.data()))
                            .map(|(&gv, (&x, &y))| da(gv, x, y))
                            .collect(),
                    );
                    kernels::sum_to_shape(&full, a.shape())
                });
                let gb = need.1.then(|| {
                    let full = Tensor::from_parts(
                        out_shape.clone(),
                        g.data()
                            .iter()
                            .zip(ae.data().iter().zip(be.data()))
                            .map(|(&gv, (&x, &y))| db(gv, x, y))
                            .collect(),
                    );
                    kernels::sum_to_shape(&full, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Multiplies by a constant tensor (no gradient to `mask`).
    pub fn mul_const(self, mask: &Tensor<T>) -> Result<Var<'t, T>> {
        let c = self.tape.constant(mask.clone());
        self.mul(c)
    }

    pub fn add_const(self, t: &Tensor<T>) -> Result<Var<'t, T>> {
        let c = self.tape.constant(t.clone());
        self.add(c)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        let y = self.value().map(|v| v * s);
        self.unary(y, move |g| g.map(|v| v * s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        let y = self.value().map(|v| v + c);
        self.unary(y, |g| g.clone())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t, T> {
        let y = self.value().map(T::exp);
        let saved = y.clone();
        self.unary(y, move |g| saved.zip_map(g, |e, gv| e * gv).expect("same shape"))
    }

    pub fn square(self) -> Var<'t, T> {
        self.elementwise(|v| v * v, |x, g| T::lit(2.0) * x * g)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.elementwise(
            |v| v.max(T::zero()),
            |x, g| if x > T::zero() { g } else { T::zero() },
        )
    }

    /// ELU with alpha = 1, so `elu(x) + 1 > 0` everywhere.
    pub fn elu(self) -> Var<'t, T> {
        self.elementwise(
            |v| if v > T::zero() { v } else { v.exp_m1() },
            |x, g| if x > T::zero() { g } else { x.exp() * g },
        )
    }

    /// Element-wise Huber loss with unit threshold: `0.5 d²` if `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &target);
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(shape_err("smooth_l1", a.shape(), b.shape()));
        }
        let half = T::lit(0.5);
        let y = a.zip_map(&b, |x, t| {
            let d = x - t;
            if d.abs() < T::one() {
                half * d * d
            } else {
                d.abs() - half
            }
        })?;
        Ok(self.tape.record(
            y,
            &[self, target],
            Box::new(move |g| {
                let da = a
                    .zip_map(&b, |x, t| (x - t).max(-T::one()).min(T::one()))
                    .and_then(|d| d.zip_map(g, |d, gv| d * gv))
                    .expect("same shape");
                let db = da.map(|v| -v);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = x.reshape(shape.to_vec())?;
        Ok(self.unary(y, move |g| g.reshape(in_shape.clone()).expect("same numel")))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let y = kernels::permute(&self.value(), perm)?;
        let inv = kernels::inverse_permutation(perm);
        Ok(self.unary(y, move |g| kernels::permute(g, &inv).expect("valid permutation")))
    }

    /// Swaps the last two dims.
    pub fn transpose(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'t, T>], dim: usize) -> Result<Var<'t, T>> {
        let first = *parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let y = kernels::concat(&refs, dim)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[dim]).collect();
        Ok(first.tape.record(
            y,
            parts,
            Box::new(move |g| {
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let part = kernels::narrow(g, dim, start, n).expect("in range");
                        start += n;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    pub fn narrow(self, dim: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = kernels::narrow(&x, dim, start, len)?;
        let n = x.shape()[dim];
        let rank = x.rank();
        Ok(self.unary(y, move |g| {
            let mut widths = vec![(0, 0); rank];
            widths[dim] = (start, n - start - len);
            kernels::pad(g, &widths).expect("rank matches")
        }))
    }

    /// Zero padding, `(before, after)` per dim.
    pub fn pad(self, widths: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let y = kernels::pad(&self.value(), widths)?;
        let widths = widths.to_vec();
        Ok(self.unary(y, move |g| kernels::unpad(g, &widths)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over `dim`, removing it.
    pub fn sum_dim(self, dim: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if dim >= x.rank() {
            return Err(invalid("sum_dim", format!("dim {dim} out of range for {:?}", x.shape())));
        }
        let n = x.shape()[dim];
        let y = kernels::sum_dim(&x, dim);
        Ok(self.unary(y, move |g| kernels::expand_dim(g, dim, n)))
    }

    pub fn mean_dim(self, dim: usize) -> Result<Var<'t, T>> {
        let n = *self
            .shape()
            .get(dim)
            .ok_or_else(|| invalid("mean_dim", format!("dim {dim} out of range")))?;
        Ok(self.sum_dim(dim)?.scale(1.0 / n as f64))
    }

    /// Inserts a size-1 dim at `dim`.
    pub fn unsqueeze(self, dim: usize) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        if dim > shape.len() {
            return Err(invalid("unsqueeze", format!("dim {dim} out of range")));
        }
        shape.insert(dim, 1);
        self.reshape(&shape)
    }

    /// Removes a size-1 dim.
    pub fn squeeze(self, dim: usize) -> Result<Var<'t, T>> {
        let mut shape = self.shape();
        if shape.get(dim) != Some(&1) {
            return Err(invalid("squeeze", format!("dim {dim} of {shape:?} is not 1")));
        }
        shape.remove(dim);
        self.reshape(&shape)
    }

    pub fn softmax(self, dim: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if dim >= x.rank() {
            return Err(invalid("softmax", format!("dim {dim} out of range for {:?}", x.shape())));
        }
        let y = kernels::softmax(&x, dim);
        let saved = y.clone();
        Ok(self.unary(y, move |g| kernels::softmax_backward(&saved, g, dim)))
    }

    /// Layer normalization over `dim` with per-channel affine `gamma`, `beta`.
    pub fn layer_norm(self, dim: usize, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        if dim >= x.rank() || gv.shape() != [x.shape()[dim]] || bv.shape() != gv.shape() {
            return Err(shape_err("layer_norm", x.shape(), gv.shape()));
        }
        let (y, xhat, rstd) = kernels::layer_norm(&x, dim, gv.data(), bv.data(), T::lit(eps));
        let shape = x.shape().to_vec();
        Ok(self.tape.record(
            y,
            &[self, gamma, beta],
            Box::new(move |g| {
                let (dx, dg, db) = kernels::layer_norm_backward(&shape, dim, g, &xhat, &rstd, gv.data());
                let n = dg.len();
                vec![
                    Some(dx),
                    Some(Tensor::from_parts(vec![n], dg)),
                    Some(Tensor::from_parts(vec![n], db)),
                ]
            }),
        ))
    }

    /// Matrix product over the last two dims (rank 2 or 3 operands).
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other);
        let (a, b) = (self.value(), other.value());
        let y = kernels::matmul(&a, &b)?;
        Ok(self.tape.record(
            y,
            &[self, other],
            Box::new(move |g| {
                let (da, db) = kernels::matmul_backward(&a, &b, g);
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// 3-D cross-correlation of `[B, C, D, H, W]` with `[O, C, kd, kh, kw]`.
    pub fn conv3d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
        let b = bias.map(|b| b.value());
        let y = kernels::conv3d(&x, &w, b.as_ref(), &geom)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(
            y,
            &parents,
            Box::new(move |g| {
                let (dx, dw, db) = kernels::conv3d_backward(&x, &w, g, &geom);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    out.push(Some(db));
                }
                out
            }),
        ))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        let (&[b, c, h, w], &[o, wc, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(shape_err("conv2d", &xs, &ws));
        };
        let y = self.reshape(&[b, c, 1, h, w])?.conv3d(
            weight.reshape(&[o, wc, 1, kh, kw])?,
            bias,
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let s = y.shape();
        y.reshape(&[s[0], s[1], s[3], s[4]])
    }

    /// Bilinear sampling at continuous pixel coordinates. Returns the samples
    /// and a constant validity mask `[B, Ho, Wo]`; out-of-bounds samples are 0.
    pub fn grid_sample(self, grid: Var<'t, T>) -> Result<(Var<'t, T>, Tensor<T>)> {
        same_tape(&self, &grid);
        let (x, gr) = (self.value(), grid.value());
        let (y, mask) = kernels::grid_sample(&x, &gr)?;
        let var = self.tape.record(
            y,
            &[self, grid],
            Box::new(move |g| {
                let (dx, dgrid) = kernels::grid_sample_backward(&x, &gr, g);
                vec![Some(dx), Some(dgrid)]
            }),
        );
        Ok((var, mask))
    }

    /// Bilinear resize of the last two dims of a `[B, C, H, W]` tensor.
    ///
    /// Output pixel `(y, x)` reads the input at `(y·H/oh, x·W/ow)`, clamped to
    /// the last row/column, so input pixel `i` aligns with output pixel `i·oh/H`.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let &[b, _, h, w] = s.as_slice() else {
            return Err(invalid("resize_bilinear", format!("expected rank 4, got {s:?}")));
        };
        let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
        let grid = Tensor::from_fn(vec![b, out_h, out_w, 2], |i| {
            let v = if i[3] == 0 {
                (i[2] as f64 * sx).min((w - 1) as f64)
            } else {
                (i[1] as f64 * sy).min((h - 1) as f64)
            };
            T::lit(v)
        });
        let (y, _) = self.grid_sample(self.tape.constant(grid))?;
        Ok(y)
    }

    /// Nearest-neighbour upsampling of the trailing dims.
    pub fn upsample_nearest(self, factors: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = kernels::upsample_nearest(&x, factors)?;
        let in_shape = x.shape().to_vec();
        let factors = factors.to_vec();
        Ok(self.unary(y, move |g| kernels::upsample_nearest_backward(g, &in_shape, &factors)))
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }
}

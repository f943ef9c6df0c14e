use std::sync::Arc;

use super::kernels::{self, ConvGeom, MatRef};
use super::{numel, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec;

/// Divisors with magnitude below this are reported by `div`.
pub const NEAR_ZERO_DIVISOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeTarget {
    /// Bilinear upsampling to twice the extent.
    Double,
    /// 2×2 average pooling.
    Half,
    /// Bilinear resampling to an explicit (height, width).
    Size(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }
}

fn chw(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{op} expects C×H×W, got {shape:?}"))),
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y_shared = Arc::new(y.clone());
        self.tape.record(op, y, &[self], move |g, _| {
            let dx = g
                .iter()
                .zip(x.data())
                .zip(y_shared.data())
                .map(|((&g, &xi), &yi)| g * df(xi, yi))
                .collect();
            vec![Some(dx)]
        })
    }

    /// Element-wise op with a caller-supplied derivative `df(input, output)`.
    pub fn map_with_grad(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        self.unary(op, f, df)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary("neg", |v| -v, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary("exp", |v| v.exp(), |_, y| y)
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            "abs",
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(
            "sigmoid",
            |v| {
                // split on sign so exp never overflows
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            "relu",
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        let two = T::one() + T::one();
        self.unary("square", |v| v * v, move |x, _| two * x)
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        self.unary("scale", move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        self.unary("add_scalar", move |v| v + s, |_, _| T::one())
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinaryKind::Div)
    }

    fn binary(self, rhs: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let out_shape =
            kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Broadcast {
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;

        if kind == BinaryKind::Div {
            let tiny = T::from_f64_lossy(NEAR_ZERO_DIVISOR);
            let positions: Vec<usize> = b
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() < tiny)
                .map(|(i, _)| i)
                .collect();
            if !positions.is_empty() {
                if self.tape.is_strict() {
                    return Err(Error::Domain(format!(
                        "division by |x| < 1e-12 at {} position(s), first {}",
                        positions.len(),
                        positions[0]
                    )));
                }
                self.tape.log_near_zero_division(positions);
            }
        }

        let f = move |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let sa = kernels::broadcast_strides(a.shape(), &out_shape);
            let sb = kernels::broadcast_strides(b.shape(), &out_shape);
            let mut out = Vec::with_capacity(numel(&out_shape));
            kernels::for_each_offset(&out_shape, [&sa, &sb], |_, [oa, ob]| {
                out.push(f(a.data()[oa], b.data()[ob]))
            });
            out
        };
        let out = Tensor::new(out_shape.clone(), value)?;
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        Ok(self.tape.record(op, out, &[self, rhs], move |g, needs| {
            let same = a.shape() == b.shape();
            let sa = kernels::broadcast_strides(a.shape(), &out_shape);
            let sb = kernels::broadcast_strides(b.shape(), &out_shape);
            // expand a gradient rule over the broadcast output, then fold back
            let expand = |rule: &dyn Fn(T, T, T) -> T, shape: &[usize]| -> Vec<T> {
                if same {
                    return g
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gi, (&x, &y))| rule(gi, x, y))
                        .collect();
                }
                let mut full = Vec::with_capacity(g.len());
                kernels::for_each_offset(&out_shape, [&sa, &sb], |lin, [oa, ob]| {
                    full.push(rule(g[lin], a.data()[oa], b.data()[ob]))
                });
                kernels::reduce_to_shape(&full, &out_shape, shape)
            };
            let ga = needs[0].then(|| match kind {
                BinaryKind::Add | BinaryKind::Sub => expand(&|g, _, _| g, a.shape()),
                BinaryKind::Mul => expand(&|g, _, y| g * y, a.shape()),
                BinaryKind::Div => expand(&|g, _, y| g / y, a.shape()),
            });
            let gb = needs[1].then(|| match kind {
                BinaryKind::Add => expand(&|g, _, _| g, b.shape()),
                BinaryKind::Sub => expand(&|g, _, _| -g, b.shape()),
                BinaryKind::Mul => expand(&|g, x, _| g * x, b.shape()),
                BinaryKind::Div => expand(&|g, x, y| -g * x / (y * y), b.shape()),
            });
            vec![ga, gb]
        }))
    }

    /// 2-D matrix product.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [kb, n]) if k == kb => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
            }
        };
        let out = kernels::matmul(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n));
        let out = Tensor::new([m, n], out)?;
        Ok(self
            .tape
            .record("matmul", out, &[self, rhs], move |g, needs| {
                let gm = MatRef::new(g, m, n);
                let ga = needs[0].then(|| kernels::matmul(gm, MatRef::new(b.data(), k, n).t()));
                let gb = needs[1].then(|| kernels::matmul(MatRef::new(a.data(), m, k).t(), gm));
                vec![ga, gb]
            }))
    }

    /// Batched matrix product over a shared leading extent:
    /// [B, m, k] · [B, k, n] → [B, m, n].
    pub fn bmm(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = rhs.value();
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            ([ba, m, k], [bb, kb, n]) if ba == bb && k == kb => (*ba, *m, *k, *n),
            (sa, sb) => return Err(Error::shape(format!("bmm of {sa:?} and {sb:?}"))),
        };
        let mut out = vec![T::zero(); batch * m * n];
        exec::for_each_chunk_mut(&mut out, m * n, |i, c| {
            let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n);
            kernels::gemm(am, bm, T::zero(), c);
        });
        let out = Tensor::new([batch, m, n], out)?;
        Ok(self.tape.record("bmm", out, &[self, rhs], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); batch * m * k];
                exec::for_each_chunk_mut(&mut ga, m * k, |i, c| {
                    let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let bm = MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n);
                    kernels::gemm(gm, bm.t(), T::zero(), c);
                });
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); batch * k * n];
                exec::for_each_chunk_mut(&mut gb, k * n, |i, c| {
                    let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
                    let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    kernels::gemm(am.t(), gm, T::zero(), c);
                });
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::shape(format!(
                "softmax axis {axis} on {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
        let mut y = vec![T::zero(); x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - mx).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    y[at(j)] /= total;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), y)?;
        let ys = Arc::new(y.clone());
        Ok(self.tape.record("softmax", y, &[self], move |g, _| {
            let yd = ys.data();
            let mut dx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: T = (0..n).map(|j| g[at(j)] * yd[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// 2-D cross-correlation of a C_in×H×W map with C_out×C_in×k×k kernels,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        spec: ConvSpec,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (c_in, h, wd) = chw(x.shape(), "conv2d")?;
        let (c_out, k) = match *w.shape() {
            [co, ci, kh, kw] if ci == c_in && kh == kw && kh > 0 => (co, kh),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {:?} for input {:?}",
                    w.shape(),
                    x.shape()
                )))
            }
        };
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::config("conv2d stride and dilation must be positive"));
        }
        let extent = |n: usize| -> Result<usize> {
            let span =
                n as isize + 2 * spec.padding as isize - (spec.dilation * (k - 1)) as isize - 1;
            if span < 0 || !(span as usize).is_multiple_of(spec.stride) {
                return Err(Error::config(format!(
                    "conv2d: extent {n} with k={k}, stride={}, padding={}, dilation={} \
                     gives a non-integer output",
                    spec.stride, spec.padding, spec.dilation
                )));
            }
            Ok(span as usize / spec.stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            h_out: extent(h)?,
            w_out: extent(wd)?,
        };
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [c_out] {
                    return Err(Error::shape(format!(
                        "conv2d bias {:?} for {c_out} output channels",
                        bv.shape()
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let pixels = geom.out_pixels();
        let col: Arc<Vec<T>> = if geom.is_pointwise() {
            Arc::new(x.data().to_vec())
        } else {
            Arc::new(kernels::im2col(x.data(), &geom))
        };
        let mut out = vec![T::zero(); c_out * pixels];
        if let Some(bv) = &bias_val {
            for (co, row) in out.chunks_mut(pixels).enumerate() {
                row.fill(bv.data()[co]);
            }
        }
        let beta = if bias_val.is_some() {
            T::one()
        } else {
            T::zero()
        };
        kernels::gemm(
            MatRef::new(w.data(), c_out, geom.col_rows()),
            MatRef::new(&col, geom.col_rows(), pixels),
            beta,
            &mut out,
        );
        let out = Tensor::new([c_out, geom.h_out, geom.w_out], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.record("conv2d", out, &parents, move |g, needs| {
            let gm = MatRef::new(g, c_out, pixels);
            let gx = needs[0].then(|| {
                let dcol = kernels::matmul(MatRef::new(w.data(), c_out, geom.col_rows()).t(), gm);
                if geom.is_pointwise() {
                    dcol
                } else {
                    kernels::col2im(&dcol, &geom)
                }
            });
            let gw = needs[1]
                .then(|| kernels::matmul(gm, MatRef::new(&col, geom.col_rows(), pixels).t()));
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(
                    needs[2].then(|| g.chunks(pixels).map(|r| r.iter().copied().sum()).collect()),
                );
            }
            grads
        }))
    }

    /// Pooling over C×H×W maps. `GlobalAvg` ignores `window`/`stride` and
    /// yields C×1×1.
    pub fn pool2d(self, kind: PoolKind, window: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (c, h, w) = chw(x.shape(), "pool2d")?;
        if kind == PoolKind::GlobalAvg {
            let hw = h * w;
            let inv = T::one() / T::from_usize(hw).unwrap();
            let out: Vec<T> = x
                .data()
                .chunks(hw)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            let out = Tensor::new([c, 1, 1], out)?;
            return Ok(self
                .tape
                .record("global_avg_pool", out, &[self], move |g, _| {
                    let dx = (0..c * hw).map(|i| g[i / hw] * inv).collect();
                    vec![Some(dx)]
                }));
        }
        if window == 0 || stride == 0 {
            return Err(Error::config("pool2d window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::config(format!(
                "pool window {window} larger than input {h}×{w}"
            )));
        }
        if !(h - window).is_multiple_of(stride) || !(w - window).is_multiple_of(stride) {
            return Err(Error::config(format!(
                "pool window {window}/stride {stride} does not tile {h}×{w}"
            )));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let mut out = vec![T::zero(); c * ho * wo];
        // source index feeding each output (first argmax for max pooling)
        let mut argmax = vec![0usize; if kind == PoolKind::Max { out.len() } else { 0 }];
        let inv = T::one() / T::from_usize(window * window).unwrap();
        let xd = x.data();
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (ci * ho + oy) * wo + ox;
                    let mut acc = T::zero();
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = (ci * h + oy * stride + dy) * w + ox * stride + dx;
                            let v = xd[i];
                            acc += v;
                            if best_i == usize::MAX || v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    if kind == PoolKind::Max {
                        out[o] = best;
                        argmax[o] = best_i;
                    } else {
                        out[o] = acc * inv;
                    }
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        let op = if kind == PoolKind::Max {
            "max_pool"
        } else {
            "avg_pool"
        };
        Ok(self.tape.record(op, out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); c * h * w];
            if kind == PoolKind::Max {
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
            } else {
                for ci in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(ci * ho + oy) * wo + ox] * inv;
                            for dy in 0..window {
                                for dxx in 0..window {
                                    dx[(ci * h + oy * stride + dy) * w + ox * stride + dxx] += gv;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Resample a C×H×W map. Upsampling is bilinear with half-pixel centres;
    /// `Half` is 2×2 average pooling.
    pub fn resize(self, target: ResizeTarget) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let (c, h, w) = chw(&shape, "resize")?;
        let (ho, wo) = match target {
            ResizeTarget::Half => return self.pool2d(PoolKind::Avg, 2, 2),
            ResizeTarget::Double => (2 * h, 2 * w),
            ResizeTarget::Size(ho, wo) => (ho, wo),
        };
        if ho == 0 || wo == 0 {
            return Err(Error::config("resize target extents must be at least 1"));
        }
        let x = self.value();
        let out = kernels::resize_bilinear(x.data(), c, h, w, ho, wo);
        let out = Tensor::new([c, ho, wo], out)?;
        Ok(self
            .tape
            .record("resize_bilinear", out, &[self], move |g, _| {
                vec![Some(kernels::resize_bilinear_backward(g, c, h, w, ho, wo))]
            }))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on {base:?}")));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(format!(
                    "concat of {base:?} with {s:?} on axis {axis}"
                )));
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = extents.iter().sum();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let out = Tensor::new(shape.clone(), out)?;
        let total = shape[axis];
        Ok(tape.record("concat", out, parts, move |g, needs| {
            let mut start = 0;
            extents
                .iter()
                .zip(needs)
                .map(|(&e, &need)| {
                    let s = start;
                    start += e;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let row = o * total * inner;
                            gp.extend_from_slice(&g[row + s * inner..row + (s + e) * inner]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if numel(shape) != x.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                x.shape()
            )));
        }
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self
            .tape
            .record("reshape", out, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let nd = x.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd
            || axes
                .iter()
                .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!(
                "bad permutation {axes:?} for {:?}",
                x.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let out = Tensor::new(
            out_shape.clone(),
            kernels::permute(x.data(), x.shape(), axes),
        )?;
        let inv = kernels::inverse_permutation(axes);
        Ok(self.tape.record("permute", out, &[self], move |g, _| {
            vec![Some(kernels::permute(g, &out_shape, &inv))]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, T>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::shape("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Reduce along `axis`, removing it. Min/max send the gradient to the
    /// first extremal element.
    pub fn reduce(self, kind: ReduceKind, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::shape(format!(
                "reduce axis {axis} on {:?}",
                x.shape()
            )));
        }
        let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
        if n == 0 {
            return Err(Error::shape("reduce over an empty axis"));
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut pick = vec![
            0usize;
            if matches!(kind, ReduceKind::Min | ReduceKind::Max) {
                out.len()
            } else {
                0
            }
        ];
        let inv_n = T::one() / T::from_usize(n).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let r = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: T = (0..n).map(|j| xd[at(j)]).sum();
                        out[r] = if kind == ReduceKind::Mean {
                            s * inv_n
                        } else {
                            s
                        };
                    }
                    ReduceKind::Min | ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..n {
                            let better = if kind == ReduceKind::Max {
                                xd[at(j)] > xd[at(best)]
                            } else {
                                xd[at(j)] < xd[at(best)]
                            };
                            if better {
                                best = j;
                            }
                        }
                        out[r] = xd[at(best)];
                        pick[r] = at(best);
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let len = x.len();
        Ok(self.tape.record("reduce", out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); len];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let s = if kind == ReduceKind::Mean {
                        inv_n
                    } else {
                        T::one()
                    };
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                dx[o * n * inner + j * inner + i] = g[o * inner + i] * s;
                            }
                        }
                    }
                }
                ReduceKind::Min | ReduceKind::Max => {
                    for (r, &src) in pick.iter().enumerate() {
                        dx[src] += g[r];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Sum of all elements as a scalar (shape []).
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let len = x.len();
        self.tape
            .record("sum_all", Tensor::scalar(s), &[self], move |g, _| {
                vec![Some(vec![g[0]; len])]
            })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(T::one() / T::from_usize(n).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sigmoid_and_abs_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.sigmoid().value().data(), &[0.5]);
        let y = tape.constant(t(&[2], &[-2.0, 3.0]));
        assert_eq!(y.abs().value().data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_add_and_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3], &[10., 20., 30.]));
        assert_eq!(
            a.add(b).unwrap().value().data(),
            &[11., 22., 33., 14., 25., 36.]
        );
        let c = tape.constant(t(&[2], &[1., 2.]));
        assert!(matches!(a.add(c), Err(Error::Broadcast { .. })));
    }

    #[test]
    fn broadcast_gradient_folds_back() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = tape.leaf(t(&[3], &[1., 1., 1.]), true);
        a.mul(b).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap().data(), &[5., 7., 9.]);
        assert_eq!(a.grad().unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn division_near_zero_logged_or_rejected() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0.0, 2.0]));
        a.div(b).unwrap();
        assert_eq!(tape.near_zero_divisions()[0].1, vec![0]);
        tape.set_strict(true);
        assert!(matches!(a.div(b), Err(Error::Domain(_))));
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let r = tape.constant(t(&[1, 2], &[1., 0.]));
        let c = tape.constant(t(&[2, 1], &[0., 1.]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[0.]);
        assert!(m.matmul(r).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[2], &[1000., 0.]));
        let s = y.softmax(0).unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-9 && s.data()[1].abs() < 1e-9);
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn conv_scaling_and_same_size() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 3, 3]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = x.conv2d(k, None, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3]);
        assert!(y.value().data().iter().all(|&v| v == 2.0));

        let k3 = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
        let y3 = x.conv2d(k3, None, ConvSpec::same(3, 1)).unwrap();
        assert_eq!(y3.shape(), vec![1, 3, 3]);
        assert_eq!(y3.value().at(&[0, 1, 1]), 9.0);
        assert_eq!(y3.value().at(&[0, 0, 0]), 4.0);

        let x7 = tape.constant(Tensor::<f64>::ones([1, 7, 7]));
        let d2 = x7
            .conv2d(
                k3,
                None,
                ConvSpec {
                    stride: 1,
                    padding: 2,
                    dilation: 2,
                },
            )
            .unwrap();
        assert_eq!(d2.shape(), vec![1, 7, 7]);
    }

    #[test]
    fn conv_rejects_fractional_extent() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones([1, 4, 4]));
        let k = tape.constant(Tensor::<f64>::ones([1, 1, 3, 3]));
        let err = x.conv2d(
            k,
            None,
            ConvSpec {
                stride: 2,
                padding: 0,
                dilation: 1,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn conv_is_cross_correlation() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2], &[1., 2.]));
        // kernel [[0,0,0],[0,0,1],[0,0,0]] reads the right neighbour
        let mut kv = vec![0.0; 9];
        kv[5] = 1.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kv));
        let y = x.conv2d(k, None, ConvSpec::same(3, 1)).unwrap();
        assert_eq!(y.value().data(), &[2., 0.]);
    }

    #[test]
    fn pools() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1., 3., 5., 7.]), true);
        assert_eq!(
            x.pool2d(PoolKind::GlobalAvg, 0, 0).unwrap().value().data(),
            &[4.]
        );
        let y = tape.leaf(t(&[1, 2, 2], &[1., 2., 3., 4.]), true);
        let m = y.pool2d(PoolKind::Max, 2, 2).unwrap();
        assert_eq!(m.value().data(), &[4.]);
        m.sum_all().backward().unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0., 0., 0., 1.]);
        assert!(matches!(
            y.pool2d(PoolKind::Max, 3, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn max_pool_ties_go_to_first() {
        let tape = Tape::new();
        let y = tape.leaf(t(&[1, 2, 2], &[5., 5., 5., 5.]), true);
        y.pool2d(PoolKind::Max, 2, 2)
            .unwrap()
            .sum_all()
            .backward()
            .unwrap();
        assert_eq!(y.grad().unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn resize_constant_and_single_pixel() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::full([2, 3, 3], 1.5));
        let up = c.resize(ResizeTarget::Double).unwrap();
        assert_eq!(up.shape(), vec![2, 6, 6]);
        assert!(up.value().data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        let one = tape.constant(t(&[1, 1, 1], &[7.0]));
        assert_eq!(
            one.resize(ResizeTarget::Double).unwrap().value().data(),
            &[7.0; 4]
        );
        let half = c
            .resize(ResizeTarget::Size(4, 4))
            .unwrap()
            .resize(ResizeTarget::Half)
            .unwrap();
        assert_eq!(half.shape(), vec![2, 2, 2]);
    }

    #[test]
    fn concat_and_reduce() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros([2, 3]));
        let b = tape.constant(Tensor::<f64>::ones([4, 3]));
        assert_eq!(Var::concat(&[a, b], 0).unwrap().shape(), vec![6, 3]);
        assert!(Var::concat(&[a, b], 1).is_err());

        let x = tape.leaf(t(&[3], &[1., 7., 7.]), true);
        let m = x.reduce(ReduceKind::Max, 0).unwrap();
        assert_eq!(m.value().item(), 7.0);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0.]);

        let z = tape.leaf(t(&[4], &[1., 2., 3., 4.]), true);
        z.reduce(ReduceKind::Mean, 0).unwrap().backward().unwrap();
        assert_eq!(z.grad().unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_linear_and_square() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        x.mul(x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let s = x.sum_all();
        s.backward().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2., 2.]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        assert!(matches!(x.backward(), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = x.exp().add(x).unwrap().sum_all();
        assert!(y.id() > x.id());
        assert_eq!(tape.ops(), vec!["leaf", "exp", "add", "sum_all"]);
    }
}

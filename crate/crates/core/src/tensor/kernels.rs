//! Value-level kernels shared by the forward and backward passes.

use super::{numel, strides_of, Real};
use crate::exec;

/// Rows of output handed to one worker in the row-split GEMM.
const GEMM_ROW_CHUNK: usize = 32;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, col stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major of shape m×n.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner extents");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n, "gemm output extent");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if m >= 2 * GEMM_ROW_CHUNK && exec::parallel_enabled() {
        exec::for_each_chunk_mut(c, GEMM_ROW_CHUNK * n, |chunk_idx, c_rows| {
            let r0 = chunk_idx * GEMM_ROW_CHUNK;
            let rows = c_rows.len() / n;
            let a_off = r0 as isize * rsa;
            T::gemm(
                rows,
                k,
                n,
                &a.data[a_off as usize..],
                rsa,
                csa,
                b.data,
                rsb,
                csb,
                beta,
                c_rows,
                n as isize,
                1,
            );
        });
    } else {
        T::gemm(
            m, k, n, a.data, rsa, csa, b.data, rsb, csb, beta, c, n as isize, 1,
        );
    }
}

pub(crate) fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> Vec<T> {
    let (m, _) = a.dims();
    let (_, n) = b.dims();
    let mut c = vec![T::zero(); m * n];
    gemm(a, b, T::zero(), &mut c);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold `x` (c_in×h×w) into a (c_in·k·k)×(h_out·w_out) patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pixels = g.out_pixels();
    let mut col = vec![T::zero(); g.col_rows() * pixels];
    let kk = g.k * g.k;
    exec::for_each_chunk_mut(&mut col, kk * pixels, |ci, block| {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut block[(ky * g.k + kx) * pixels..(ky * g.k + kx + 1) * pixels];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let pixels = g.out_pixels();
    let kk = g.k * g.k;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    exec::for_each_chunk_mut(&mut x, g.h * g.w, |ci, plane| {
        let block = &col[ci * kk * pixels..(ci + 1) * kk * pixels];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &block[(ky * g.k + kx) * pixels..(ky * g.k + kx + 1) * pixels];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &row[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    });
    x
}

/// Shape of the result of broadcasting `a` against `b` (trailing alignment).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visit every multi-index of `shape` in row-major order, passing the
/// linear offsets into each operand described by `strides`.
pub(crate) fn for_each_offset<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut f: impl FnMut(usize, [usize; N]),
) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; N];
    for linear in 0..total {
        f(linear, offs);
        for d in (0..nd).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(strides.iter()) {
                *o -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

/// Sum `grad` (shaped like `out`) down to `shape` along broadcast axes.
pub(crate) fn reduce_to_shape<T: Real>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); numel(shape)];
    let st = broadcast_strides(shape, out);
    for_each_offset(out, [&st], |lin, [o]| acc[o] += grad[lin]);
    acc
}

pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    for_each_offset(&out_shape, [&src_strides], |_, [o]| out.push(x[o]));
    out
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Split `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-axis bilinear sampling taps under the half-pixel (align-corners=false)
/// convention: output index → (i0, i1, weight of i1).
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn resize_bilinear<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); c * ho * wo];
    exec::for_each_chunk_mut(&mut out, ho * wo, |ci, plane| {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                plane[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    out
}

pub(crate) fn resize_bilinear_backward<T: Real>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut dx = vec![T::zero(); c * h * w];
    exec::for_each_chunk_mut(&mut dx, h * w, |ci, plane| {
        let src = &g[ci * ho * wo..(ci + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = src[oy * wo + ox];
                plane[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += v * (T::one() - fy) * fx;
                plane[y1 * w + x0] += v * fy * (T::one() - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]), Some(vec![4, 3, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        assert_eq!(
            matmul(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2)),
            vec![19.0, 22.0, 43.0, 50.0]
        );
        assert_eq!(
            matmul(MatRef::new(&a, 2, 2).t(), MatRef::new(&b, 2, 2)),
            vec![26.0, 30.0, 38.0, 44.0]
        );
        assert_eq!(
            matmul(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2).t()),
            vec![17.0, 23.0, 39.0, 53.0]
        );
    }

    #[test]
    fn bilinear_taps_half_pixel() {
        // 2 -> 4: sources at -0.25 (clamped), 0.25, 0.75, 1.25
        let taps = bilinear_taps(2, 4);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            c_in: 2,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
            h_out: 3,
            w_out: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

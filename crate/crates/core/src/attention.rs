//! Comprehensive (directional) attention and local-window multi-head
//! self-attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_tensor, Graph, Init, ParamId, ParamStore};
use crate::tensor::{Real, ReduceKind, Tensor, Var};

fn chw<T: Real>(x: &Var<'_, T>) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!("expected C×H×W, got {s:?}"))),
    }
}

/// The two directional terms of comprehensive attention, each C×H×W.
///
/// Rows: the width-pooled vector `p_h` (length C) of row h gives
/// `A_h = softmax_rows(p_h p_hᵀ / √C)`, applied to the C×W slice of row h.
/// Columns are handled the same way with height pooling.
pub fn comprehensive_attention_terms<'t, T: Real>(
    x: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (c, h, w) = chw(&x)?;
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();

    // vertical map A^H: one C×C matrix per row
    let pooled_h = x.reduce(ReduceKind::Mean, 2)?; // C×H
    let ph = pooled_h.permute(&[1, 0])?.reshape(&[h, c, 1])?;
    let a_h = ph.bmm(ph.reshape(&[h, 1, c])?)?.scale(scale).softmax(2)?;
    let rows = x.permute(&[1, 0, 2])?; // H×C×W
    let term_h = a_h.bmm(rows)?.permute(&[1, 0, 2])?;

    // horizontal map A^W: one C×C matrix per column
    let pooled_w = x.reduce(ReduceKind::Mean, 1)?; // C×W
    let pw = pooled_w.permute(&[1, 0])?.reshape(&[w, c, 1])?;
    let a_w = pw.bmm(pw.reshape(&[w, 1, c])?)?.scale(scale).softmax(2)?;
    let cols = x.permute(&[2, 0, 1])?; // W×C×H
    let term_w = a_w.bmm(cols)?.permute(&[1, 2, 0])?;

    Ok((term_h, term_w))
}

/// `x + A^H·x + A^W·x` (residual form).
pub fn comprehensive_attention<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let (term_h, term_w) = comprehensive_attention_terms(x)?;
    x.add(term_h)?.add(term_w)
}

/// The directional attention maps themselves (A^H: H×C×C, A^W: W×C×C).
pub fn directional_maps<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let tape = crate::tensor::Tape::new();
    let v = tape.constant(x.clone());
    let (c, h, w) = chw(&v)?;
    let scale = T::one() / T::from_usize(c).unwrap().sqrt();
    let ph = v
        .reduce(ReduceKind::Mean, 2)?
        .permute(&[1, 0])?
        .reshape(&[h, c, 1])?;
    let a_h = ph.bmm(ph.reshape(&[h, 1, c])?)?.scale(scale).softmax(2)?;
    let pw = v
        .reduce(ReduceKind::Mean, 1)?
        .permute(&[1, 0])?
        .reshape(&[w, c, 1])?;
    let a_w = pw.bmm(pw.reshape(&[w, 1, c])?)?.scale(scale).softmax(2)?;
    Ok((a_h.to_tensor(), a_w.to_tensor()))
}

fn check_window(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(Error::config(format!(
            "window {window} does not divide the {h}×{w} map"
        )));
    }
    Ok(())
}

/// C×H×W → P×(k·k)×C, windows in row-major order, pixels row-major within
/// each window.
pub fn window_partition<'t, T: Real>(x: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    let (c, h, w) = chw(&x)?;
    check_window(h, w, window)?;
    let (nh, nw) = (h / window, w / window);
    x.reshape(&[c, nh, window, nw, window])?
        .permute(&[1, 3, 2, 4, 0])?
        .reshape(&[nh * nw, window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge<'t, T: Real>(
    windows: Var<'t, T>,
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
) -> Result<Var<'t, T>> {
    check_window(height, width, window)?;
    let (nh, nw) = (height / window, width / window);
    if windows.shape() != [nh * nw, window * window, channels] {
        return Err(Error::shape(format!(
            "window_merge: got {:?} for {channels}×{height}×{width}, window {window}",
            windows.shape()
        )));
    }
    windows
        .reshape(&[nh, nw, window, window, channels])?
        .permute(&[4, 0, 2, 1, 3])?
        .reshape(&[channels, height, width])
}

/// Value-level partition into a list of (k·k)×C windows.
pub fn partition_windows<T: Real>(x: &Tensor<T>, window: usize) -> Result<Vec<Tensor<T>>> {
    let tape = crate::tensor::Tape::new();
    let parts = window_partition(tape.constant(x.clone()), window)?.to_tensor();
    let (p, kk, c) = (parts.shape()[0], parts.shape()[1], parts.shape()[2]);
    Ok(parts
        .data()
        .chunks(kk * c)
        .take(p)
        .map(|chunk| Tensor::new([kk, c], chunk.to_vec()).expect("window shape"))
        .collect())
}

/// Multi-head attention inside non-overlapping windows, residual on the
/// query stream: `out_p = Q_p + MHA(Q_p, K_p, V_p)·L_o`.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    /// Projections stored input-major (C×C); columns `h·d..(h+1)·d` are head h.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{channels} channels are not divisible into {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::config("attention window must be positive"));
        }
        let mut proj = |kind: &str| {
            store.add(
                format!("{name}.{kind}"),
                init_tensor(rng, &[channels, channels], channels, Init::Linear),
            )
        };
        Ok(WindowAttention {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            channels,
            heads,
            window,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Attention weights per (window, head): [P·H, k², k²].
    pub fn attention_weights<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (_, qw, kw) = self.project_qk(g, q, k)?;
        self.scores(qw, kw)
    }

    fn project_qk<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        let (c, h, w) = chw(&q)?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "attention built for {} channels, got {c}",
                self.channels
            )));
        }
        if k.shape() != [c, h, w] {
            return Err(Error::shape(format!(
                "query {:?} and key {:?} differ",
                q.shape(),
                k.shape()
            )));
        }
        let qwin = window_partition(q, self.window)?;
        let kwin = window_partition(k, self.window)?;
        let qh = self.split_heads(self.project(g, qwin, self.wq)?)?;
        let kh = self.split_heads(self.project(g, kwin, self.wk)?)?;
        Ok((qwin, qh, kh))
    }

    fn scores<'t, T: Real>(&self, qh: Var<'t, T>, kh: Var<'t, T>) -> Result<Var<'t, T>> {
        let scale = T::one() / T::from_usize(self.head_dim()).unwrap().sqrt();
        qh.bmm(kh.transpose_last()?)?.scale(scale).softmax(2)
    }

    /// [P, k², C] · W → [P, k², C]
    fn project<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        x: Var<'t, T>,
        w: ParamId,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        x.reshape(&[shape[0] * shape[1], shape[2]])?
            .matmul(g.param(w))?
            .reshape(&shape)
    }

    /// [P, k², C] → [P·H, k², d]
    fn split_heads<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (p, n) = (s[0], s[1]);
        let d = self.head_dim();
        x.reshape(&[p, n, self.heads, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[p * self.heads, n, d])
    }

    /// [P·H, k², d] → [P, k², C]
    fn merge_heads<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let p = s[0] / self.heads;
        let n = s[1];
        x.reshape(&[p, self.heads, n, self.head_dim()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[p, n, self.channels])
    }

    pub fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (c, h, w) = chw(&q)?;
        if v.shape() != [c, h, w] {
            return Err(Error::shape(format!(
                "query {:?} and value {:?} differ",
                q.shape(),
                v.shape()
            )));
        }
        let (qwin, qh, kh) = self.project_qk(g, q, k)?;
        let vh =
            self.split_heads(self.project(g, window_partition(v, self.window)?, self.wv)?)?;
        let attn = self.scores(qh, kh)?;
        let heads = self.merge_heads(attn.bmm(vh)?)?;
        let out = qwin.add(self.project(g, heads, self.wo)?)?;
        window_merge(out, c, h, w, self.window)
    }

    pub fn self_attention<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward(g, x, x, x)
    }
}

//! Texture fusion block: structural texture from directional plus windowed
//! attention, statistical texture from KSCO, merged through a gated MLP.

use rand::Rng;

use crate::attention::{comprehensive_attention, WindowAttention};
use crate::error::{Error, Result};
use crate::ksco::{Ksco, QuantizedIntensityEmbedding};
use crate::nn::{Graph, Init, Linear, ParamId, ParamStore};
use crate::tensor::{PoolKind, Real, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct StftOptions {
    pub channels: usize,
    pub n_levels: usize,
    pub heads: usize,
    pub window: usize,
    pub use_ca: bool,
    pub use_gate: bool,
    pub excess_kurtosis: bool,
}

#[derive(Clone, Debug)]
pub struct Stft {
    pub ksco: Ksco,
    pub attention: WindowAttention,
    /// Scalar gate on the structural descriptor; absent when gating is off.
    pub alpha: Option<ParamId>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub opts: StftOptions,
}

pub struct StftOutput<'t, T: Real> {
    pub fused: Var<'t, T>,
    pub structural: Var<'t, T>,
    pub embedding: QuantizedIntensityEmbedding<'t, T>,
}

impl Stft {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        opts: StftOptions,
    ) -> Result<Self> {
        let c = opts.channels;
        let ksco = Ksco::new(
            store,
            rng,
            &format!("{name}.ksco"),
            c,
            opts.n_levels,
            opts.excess_kurtosis,
        )?;
        let attention = WindowAttention::new(
            store,
            rng,
            &format!("{name}.attn"),
            c,
            opts.heads,
            opts.window,
        )?;
        let alpha = if opts.use_gate {
            Some(store.add(format!("{name}.alpha"), Tensor::ones([1]))?)
        } else {
            None
        };
        let fc1 = Linear::new(
            store,
            rng,
            &format!("{name}.mlp.fc1"),
            c + opts.n_levels,
            c,
            true,
            Init::Relu,
        )?;
        let fc2 = Linear::new(
            store,
            rng,
            &format!("{name}.mlp.fc2"),
            c,
            c,
            true,
            Init::Linear,
        )?;
        Ok(Stft {
            ksco,
            attention,
            alpha,
            fc1,
            fc2,
            opts,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        f: Var<'t, T>,
    ) -> Result<StftOutput<'t, T>> {
        let c = self.opts.channels;
        if f.shape().first() != Some(&c) {
            return Err(Error::shape(format!(
                "fusion block built for {c} channels, got {:?}",
                f.shape()
            )));
        }
        let attended = if self.opts.use_ca {
            comprehensive_attention(f)?
        } else {
            f
        };
        let structural = self.attention.self_attention(g, attended)?;

        let mut descriptor = structural
            .pool2d(PoolKind::GlobalAvg, 0, 0)?
            .reshape(&[1, c])?;
        if let Some(alpha) = self.alpha {
            descriptor = descriptor.mul(g.param(alpha))?;
        }
        let embedding = self.ksco.forward(g, f)?;
        let totals = embedding
            .level_totals()?
            .reshape(&[1, self.opts.n_levels])?;

        let hidden = self
            .fc1
            .forward(g, Var::concat(&[descriptor, totals], 1)?)?
            .relu();
        let gate = self.fc2.forward(g, hidden)?.reshape(&[c, 1, 1])?;
        let fused = structural.add(gate)?;
        Ok(StftOutput {
            fused,
            structural,
            embedding,
        })
    }
}

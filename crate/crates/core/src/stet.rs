//! Texture enhancement block on the skip path: queries from the upsampled
//! bottleneck embedding, keys and values from KSCO embeddings of the
//! shallow encoder features, then windowed attention and a dilated FFN.

use rand::Rng;

use crate::attention::{comprehensive_attention, WindowAttention};
use crate::error::{Error, Result};
use crate::ksco::{Ksco, QuantizedIntensityEmbedding};
use crate::nn::{Conv2d, Graph, Init, ParamStore};
use crate::tensor::{ConvSpec, PoolKind, Real, ResizeTarget, Var};

pub const DILATIONS: [usize; 3] = [1, 6, 12];

#[derive(Clone, Copy, Debug)]
pub struct StetOptions {
    /// Levels of the incoming bottleneck embedding.
    pub query_levels: usize,
    /// Levels of the per-scale embeddings; also the model width.
    pub n_levels: usize,
    /// Channel counts of the three shallow encoder features.
    pub feature_channels: [usize; 3],
    pub heads: usize,
    pub window: usize,
    pub use_ca: bool,
    pub use_ffn: bool,
    pub excess_kurtosis: bool,
}

impl StetOptions {
    pub fn d_model(&self) -> usize {
        self.n_levels
    }
}

/// Three parallel dilated 3×3 branches summed onto the input, then a
/// position-wise two-layer MLP, both residual.
#[derive(Clone, Debug)]
pub struct TextureFfn {
    pub branches: Vec<Conv2d>,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl TextureFfn {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        let branches = DILATIONS
            .iter()
            .map(|&dil| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dil{dil}"),
                    d,
                    d,
                    3,
                    ConvSpec::same(3, dil),
                    Init::Linear,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fc1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.mlp.fc1"),
            d,
            4 * d,
            1,
            ConvSpec::default(),
            Init::Relu,
        )?;
        let fc2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.mlp.fc2"),
            4 * d,
            d,
            1,
            ConvSpec::default(),
            Init::Linear,
        )?;
        Ok(TextureFfn { branches, fc1, fc2 })
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut y = x;
        for branch in &self.branches {
            y = y.add(branch.forward(g, x)?)?;
        }
        let hidden = self.fc1.forward(g, y)?.relu();
        y.add(self.fc2.forward(g, hidden)?)
    }
}

pub struct Embeddings<'t, T: Real> {
    pub query: Var<'t, T>,
    pub key: Var<'t, T>,
    pub value: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Stet {
    pub scales: Vec<Ksco>,
    pub query_proj: Conv2d,
    pub kv_proj: Conv2d,
    pub attention: WindowAttention,
    pub ffn: Option<TextureFfn>,
    pub opts: StetOptions,
}

impl Stet {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        opts: StetOptions,
    ) -> Result<Self> {
        let d = opts.d_model();
        let scales = opts
            .feature_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Ksco::new(
                    store,
                    rng,
                    &format!("{name}.ksco{i}"),
                    c,
                    opts.n_levels,
                    opts.excess_kurtosis,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let query_proj = Conv2d::new(
            store,
            rng,
            &format!("{name}.q_proj"),
            opts.query_levels,
            d,
            1,
            ConvSpec::default(),
            Init::Linear,
        )?;
        let kv_proj = Conv2d::new(
            store,
            rng,
            &format!("{name}.kv_proj"),
            3 * opts.n_levels,
            d,
            1,
            ConvSpec::default(),
            Init::Linear,
        )?;
        let attention = WindowAttention::new(
            store,
            rng,
            &format!("{name}.attn"),
            d,
            opts.heads,
            opts.window,
        )?;
        let ffn = if opts.use_ffn {
            Some(TextureFfn::new(store, rng, &format!("{name}.ffn"), d)?)
        } else {
            None
        };
        Ok(Stet {
            scales,
            query_proj,
            kv_proj,
            attention,
            ffn,
            opts,
        })
    }

    pub fn embeddings<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        bottleneck: &QuantizedIntensityEmbedding<'t, T>,
        features: &[Var<'t, T>],
    ) -> Result<Embeddings<'t, T>> {
        if features.len() != self.scales.len() {
            return Err(Error::config(format!(
                "expected {} encoder features, got {}",
                self.scales.len(),
                features.len()
            )));
        }
        let mut q = bottleneck.as_map()?.resize(ResizeTarget::Double)?;
        if self.opts.use_ca {
            q = comprehensive_attention(q)?;
        }
        let (qh, qw) = (q.shape()[1], q.shape()[2]);
        let query = self.query_proj.forward(g, q)?;

        let mut maps = Vec::with_capacity(features.len());
        for (ksco, &feat) in self.scales.iter().zip(features) {
            let mut m = ksco.forward(g, feat)?.as_map()?;
            while m.shape()[1] > qh {
                let (h, w) = (m.shape()[1], m.shape()[2]);
                if h % 2 != 0 || w % 2 != 0 {
                    break;
                }
                m = m.pool2d(PoolKind::Avg, 2, 2)?;
            }
            if m.shape()[1..] != [qh, qw] {
                return Err(Error::config(format!(
                    "encoder embedding {:?} cannot be pooled to the {qh}×{qw} query grid",
                    feat.shape()
                )));
            }
            maps.push(m);
        }
        let key = self.kv_proj.forward(g, Var::concat(&maps, 0)?)?;
        Ok(Embeddings {
            query,
            key,
            value: key,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        bottleneck: &QuantizedIntensityEmbedding<'t, T>,
        features: &[Var<'t, T>],
    ) -> Result<Var<'t, T>> {
        let e = self.embeddings(g, bottleneck, features)?;
        debug_assert_eq!(e.key.id(), e.value.id());
        let attended = self.attention.forward(g, e.query, e.key, e.value)?;
        match &self.ffn {
            Some(ffn) => ffn.forward(g, attended),
            None => Ok(attended),
        }
    }
}

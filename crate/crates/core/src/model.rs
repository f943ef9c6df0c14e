//! U-shaped encoder/decoder with the texture blocks wired in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, ParamStore};
use crate::stet::{Stet, StetOptions};
use crate::stft::{Stft, StftOptions};
use crate::tensor::{ConvSpec, PoolKind, Real, ResizeTarget, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    pub n_levels_stft: usize,
    pub n_levels_stet: usize,
    pub heads: usize,
    pub window: usize,
    pub enable_stft: bool,
    pub enable_stet: bool,
    pub enable_ca: bool,
    pub enable_gating: bool,
    pub enable_tffn: bool,
    pub excess_kurtosis: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small config used for desk-scale runs and tests.
    pub fn toy() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            base_channels: 8,
            depth: 3,
            n_levels_stft: 16,
            n_levels_stet: 8,
            heads: 2,
            window: 4,
            enable_stft: true,
            enable_stet: true,
            enable_ca: true,
            enable_gating: true,
            enable_tffn: true,
            excess_kurtosis: false,
            seed: 0,
        }
    }

    /// Full-size config (256×256, base 32, depth 4, 256/64 levels).
    pub fn paper() -> Self {
        ModelConfig {
            height: 256,
            width: 256,
            base_channels: 32,
            depth: 4,
            n_levels_stft: 256,
            n_levels_stet: 64,
            heads: 2,
            window: 8,
            ..Self::toy()
        }
    }

    /// Channel width at encoder level `l` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    /// Grid of the first decoder stage, where the enhancement block attaches.
    pub fn stet_size(&self) -> (usize, usize) {
        (
            self.height >> (self.depth - 1),
            self.width >> (self.depth - 1),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.height == 0 || self.width == 0 || self.base_channels == 0 {
            return fail("input size and base_channels must be positive".into());
        }
        if self.depth == 0 || self.depth > 8 {
            return fail(format!("depth {} out of range 1..=8", self.depth));
        }
        let unit = 1usize << self.depth;
        if !self.height.is_multiple_of(unit) || !self.width.is_multiple_of(unit) {
            return fail(format!(
                "input {}×{} is not divisible by 2^depth = {unit}",
                self.height, self.width
            ));
        }
        if self.enable_stet && !self.enable_stft {
            return fail(
                "enable_stet requires enable_stft (its queries come from the bottleneck embedding)"
                    .into(),
            );
        }
        if self.enable_stft {
            if self.n_levels_stft == 0 || self.heads == 0 || self.window == 0 {
                return fail("n_levels_stft, heads and window must be positive".into());
            }
            if !self.channels(self.depth).is_multiple_of(self.heads) {
                return fail(format!(
                    "bottleneck width {} is not divisible by {} heads",
                    self.channels(self.depth),
                    self.heads
                ));
            }
            let (bh, bw) = self.bottleneck_size();
            if bh % self.window != 0 || bw % self.window != 0 {
                return fail(format!(
                    "window {} does not divide the {bh}×{bw} bottleneck",
                    self.window
                ));
            }
        }
        if self.enable_stet {
            if self.depth < 3 {
                return fail(format!(
                    "the enhancement block needs depth ≥ 3, got {}",
                    self.depth
                ));
            }
            if self.n_levels_stet == 0 || !self.n_levels_stet.is_multiple_of(self.heads) {
                return fail(format!(
                    "n_levels_stet {} must be a positive multiple of {} heads",
                    self.n_levels_stet, self.heads
                ));
            }
            let (sh, sw) = self.stet_size();
            if sh % self.window != 0 || sw % self.window != 0 {
                return fail(format!(
                    "window {} does not divide the {sh}×{sw} decoder grid",
                    self.window
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

impl DoubleConv {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let spec = ConvSpec::same(3, 1);
        Ok(DoubleConv {
            first: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                c_in,
                c_out,
                3,
                spec,
                Init::Relu,
            )?,
            second: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv2"),
                c_out,
                c_out,
                3,
                spec,
                Init::Relu,
            )?,
        })
    }

    fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.first.forward(g, x)?.relu();
        Ok(self.second.forward(g, h)?.relu())
    }
}

/// Layer layout; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    encoder: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    stft: Option<Stft>,
    decoder: Vec<DoubleConv>,
    stet: Option<(Stet, Conv2d)>,
    head: Conv2d,
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Build with fan-in scaled uniform weights drawn from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let d = config.depth;

        let mut encoder = Vec::with_capacity(d);
        for level in 0..d {
            let c_in = if level == 0 {
                3
            } else {
                config.channels(level - 1)
            };
            encoder.push(DoubleConv::new(
                &mut store,
                rng,
                &format!("enc{level}"),
                c_in,
                config.channels(level),
            )?);
        }
        let bottleneck = DoubleConv::new(
            &mut store,
            rng,
            "bottleneck",
            config.channels(d - 1),
            config.channels(d),
        )?;

        let stft = if config.enable_stft {
            let opts = StftOptions {
                channels: config.channels(d),
                n_levels: config.n_levels_stft,
                heads: config.heads,
                window: config.window,
                use_ca: config.enable_ca,
                use_gate: config.enable_gating,
                excess_kurtosis: config.excess_kurtosis,
            };
            Some(Stft::new(&mut store, rng, "stft", opts)?)
        } else {
            None
        };

        let mut decoder = Vec::with_capacity(d);
        for level in (0..d).rev() {
            let c = config.channels(level);
            decoder.push(DoubleConv::new(
                &mut store,
                rng,
                &format!("dec{level}"),
                c + config.channels(level + 1),
                c,
            )?);
        }

        let stet = if config.enable_stet {
            let opts = StetOptions {
                query_levels: config.n_levels_stft,
                n_levels: config.n_levels_stet,
                feature_channels: [config.channels(0), config.channels(1), config.channels(2)],
                heads: config.heads,
                window: config.window,
                use_ca: config.enable_ca,
                use_ffn: config.enable_tffn,
                excess_kurtosis: config.excess_kurtosis,
            };
            let block = Stet::new(&mut store, rng, "stet", opts)?;
            let c = config.channels(d - 1);
            let fuse = Conv2d::new(
                &mut store,
                rng,
                "stet.fuse",
                c + opts.d_model(),
                c,
                3,
                ConvSpec::same(3, 1),
                Init::Relu,
            )?;
            Some((block, fuse))
        } else {
            None
        };

        let head = Conv2d::new(
            &mut store,
            rng,
            "head",
            config.channels(0),
            1,
            1,
            ConvSpec::default(),
            Init::Linear,
        )?;
        let net = Network {
            config: config.clone(),
            encoder,
            bottleneck,
            stft,
            decoder,
            stet,
            head,
        };
        Ok(Model { net, params: store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Convert parameters to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, value) in self.params.iter() {
            params.add(name, value.cast()).expect("names are unique");
        }
        Model {
            net: self.net.clone(),
            params,
        }
    }
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Logits (1×H×W) for one 3×H×W image.
    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        if image.shape() != [3, cfg.height, cfg.width] {
            return Err(Error::shape(format!(
                "expected a 3×{}×{} image, got {:?}",
                cfg.height,
                cfg.width,
                image.shape()
            )));
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = image;
        for block in &self.encoder {
            let feat = block.forward(g, x)?;
            skips.push(feat);
            x = feat.pool2d(PoolKind::Max, 2, 2)?;
        }
        x = self.bottleneck.forward(g, x)?;

        let mut embedding = None;
        if let Some(stft) = &self.stft {
            let out = stft.forward(g, x)?;
            x = out.fused;
            embedding = Some(out.embedding);
        }

        for (i, block) in self.decoder.iter().enumerate() {
            let level = cfg.depth - 1 - i;
            let up = x.resize(ResizeTarget::Double)?;
            x = block.forward(g, Var::concat(&[skips[level], up], 0)?)?;
            if i == 0 {
                if let (Some((stet, fuse)), Some(emb)) = (&self.stet, &embedding) {
                    let enhanced = stet.forward(g, emb, &skips[..3])?;
                    x = fuse.forward(g, Var::concat(&[x, enhanced], 0)?)?.relu();
                }
            }
        }
        self.head.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use std::collections::BTreeSet;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            base_channels: 4,
            depth: 3,
            n_levels_stft: 4,
            n_levels_stet: 4,
            heads: 2,
            window: 2,
            ..ModelConfig::toy()
        }
    }

    fn names(cfg: &ModelConfig) -> BTreeSet<String> {
        Model::<f32>::build(cfg)
            .unwrap()
            .params
            .names()
            .iter()
            .cloned()
            .collect()
    }

    #[test]
    fn toy_forward_shape() {
        let model = Model::<f32>::build(&ModelConfig::toy()).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.params, false);
        let img = tape.constant(Tensor::from_fn([3, 64, 64], |i| (i % 7) as f32 / 7.0));
        let y = model.net.forward(&g, img).unwrap();
        assert_eq!(y.shape(), vec![1, 64, 64]);
        assert!(y.value().all_finite());
    }

    #[test]
    fn plain_unet_forward() {
        let cfg = ModelConfig {
            enable_stft: false,
            enable_stet: false,
            ..tiny()
        };
        let model = Model::<f32>::build(&cfg).unwrap();
        assert!(model.params.names().iter().all(|n| !n.starts_with("st")));
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.params, false);
        let y = model
            .net
            .forward(&g, tape.constant(Tensor::zeros([3, 32, 32])))
            .unwrap();
        assert_eq!(y.shape(), vec![1, 32, 32]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::<f32>::build(&tiny()).unwrap();
        let b = Model::<f32>::build(&tiny()).unwrap();
        for ((na, va), (nb, vb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn ablation_name_deltas() {
        let base = ModelConfig {
            enable_stft: false,
            enable_stet: false,
            ..tiny()
        };
        let with_stft = ModelConfig {
            enable_stft: true,
            ..base.clone()
        };
        let full = ModelConfig {
            enable_stet: true,
            ..with_stft.clone()
        };
        let (n0, n1, n2) = (names(&base), names(&with_stft), names(&full));
        assert!(n0.is_subset(&n1) && n1.is_subset(&n2));
        assert!(n1.difference(&n0).all(|n| n.starts_with("stft.")));
        assert!(n2.difference(&n1).all(|n| n.starts_with("stet.")));
    }

    #[test]
    fn stet_without_stft_rejected() {
        let cfg = ModelConfig {
            enable_stft: false,
            enable_stet: true,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = ModelConfig {
            height: 60,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig {
            window: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let model = Model::<f32>::build(&tiny()).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.params, false);
        let img = tape.constant(Tensor::zeros([3, 16, 16]));
        assert!(matches!(model.net.forward(&g, img), Err(Error::Shape(_))));
    }

    #[test]
    fn paper_scale_parameter_count() {
        let n = Model::<f32>::build(&ModelConfig::paper())
            .unwrap()
            .num_parameters();
        let reference = 12.4e6;
        assert!(
            (n as f64 - reference).abs() <= 0.2 * reference,
            "{n} parameters"
        );
    }
}

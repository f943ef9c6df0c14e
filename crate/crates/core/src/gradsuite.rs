//! Finite-difference checks of every differentiable op and composite block,
//! run in f64 on small random shapes.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{comprehensive_attention, WindowAttention};
use crate::error::{Error, Result};
use crate::ksco::Ksco;
use crate::nn::{Graph, ParamStore, StatsMode};
use crate::stet::{Stet, StetOptions, TextureFfn};
use crate::stft::{Stft, StftOptions};
use crate::tensor::{
    gradient_check, ConvSpec, GradCheckOptions, GradCheckReport, PoolKind, ReduceKind,
    ResizeTarget, Tape, Tensor, Var,
};
use crate::train::dice_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Ksco,
    Attention,
    Stft,
    Stet,
    Loss,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "tensor" | "ops" => Suite::Tensor,
            "ksco" => Suite::Ksco,
            "attention" => Suite::Attention,
            "stft" => Suite::Stft,
            "stet" => Suite::Stet,
            "loss" => Suite::Loss,
            _ => return Err(Error::config(format!("unknown gradient-check module {s}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: String,
    pub report: GradCheckReport,
}

type CheckFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct Check {
    module: &'static str,
    name: String,
    inputs: Vec<Tensor<f64>>,
    f: CheckFn,
}

struct Builder {
    rng: ChaCha8Rng,
    checks: Vec<Check>,
}

impl Builder {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.random_range(lo..hi))
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Values with |x| in [0.2, 1], away from kinks at zero.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| {
            let v = self.rng.random_range(0.2..1.0);
            if self.rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Register `mean(P ⊙ f(inputs))` with a random projection P.
    fn add<F>(
        &mut self,
        module: &'static str,
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        out_shape: &[usize],
        f: F,
    ) where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    {
        let proj = self.normal(out_shape);
        self.checks.push(Check {
            module,
            name: name.into(),
            inputs,
            f: Box::new(move |tape, v| {
                let y = f(tape, v)?;
                Ok(y.mul(tape.constant(proj.clone()))?.mean_all())
            }),
        });
    }

    /// Like [`Builder::add`] for blocks containing KSCO: statistics are
    /// recorded once at the base point and replayed for every probe.
    fn add_frozen<F>(
        &mut self,
        module: &'static str,
        name: impl Into<String>,
        store: ParamStore<f64>,
        inputs: Vec<Tensor<f64>>,
        out_shape: &[usize],
        f: F,
    ) -> Result<()>
    where
        F: for<'t> Fn(&Graph<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    {
        let log = {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store, false).with_stats(StatsMode::Record(Vec::new()));
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            f(&g, &vars)?;
            match g.take_stats() {
                StatsMode::Record(log) => log,
                _ => unreachable!("mode set above"),
            }
        };
        let store = Arc::new(store);
        self.add(module, name, inputs, out_shape, move |tape, v| {
            let g = Graph::new(tape, &store, false).with_stats(StatsMode::Replay(log.clone(), 0));
            f(&g, v)
        });
        Ok(())
    }
}

fn tensor_checks(b: &mut Builder) {
    let m = "tensor";
    let s = [3, 4];
    let x = b.normal(&s);
    b.add(m, "neg", vec![x.clone()], &s, |_, v| Ok(v[0].neg()));
    b.add(m, "exp", vec![x.clone()], &s, |_, v| Ok(v[0].exp()));
    b.add(m, "sigmoid", vec![x.clone()], &s, |_, v| Ok(v[0].sigmoid()));
    b.add(m, "square", vec![x.clone()], &s, |_, v| Ok(v[0].square()));
    b.add(m, "scale", vec![x.clone()], &s, |_, v| Ok(v[0].scale(-1.7)));
    b.add(
        m,
        "add_scalar",
        vec![x],
        &s,
        |_, v| Ok(v[0].add_scalar(0.3)),
    );
    let xz = b.off_zero(&s);
    b.add(m, "abs", vec![xz.clone()], &s, |_, v| Ok(v[0].abs()));
    b.add(m, "relu", vec![xz], &s, |_, v| Ok(v[0].relu()));

    let s3 = [2, 3, 4];
    let (a, bb, c) = (b.normal(&s3), b.normal(&[3, 4]), b.normal(&[4]));
    b.add(
        m,
        "add (broadcast)",
        vec![a.clone(), bb.clone()],
        &s3,
        |_, v| v[0].add(v[1]),
    );
    b.add(
        m,
        "sub (broadcast)",
        vec![a.clone(), c.clone()],
        &s3,
        |_, v| v[0].sub(v[1]),
    );
    b.add(m, "mul (broadcast)", vec![a.clone(), bb], &s3, |_, v| {
        v[0].mul(v[1])
    });
    let denom = b.uniform(&[3, 4], 0.5, 1.5);
    b.add(m, "div (broadcast)", vec![a, denom], &s3, |_, v| {
        v[0].div(v[1])
    });

    let (p, q) = (b.normal(&[3, 4]), b.normal(&[4, 2]));
    b.add(m, "matmul", vec![p, q], &[3, 2], |_, v| v[0].matmul(v[1]));
    let (p, q) = (b.normal(&[2, 3, 4]), b.normal(&[2, 4, 2]));
    b.add(m, "bmm", vec![p, q], &[2, 3, 2], |_, v| v[0].bmm(v[1]));
    let x = b.normal(&[3, 5]);
    b.add(m, "softmax", vec![x.clone()], &[3, 5], |_, v| {
        v[0].softmax(1)
    });
    b.add(m, "softmax axis 0", vec![x], &[3, 5], |_, v| {
        v[0].softmax(0)
    });

    let (x, w, bias) = (
        b.normal(&[2, 5, 5]),
        b.normal(&[3, 2, 3, 3]),
        b.normal(&[3]),
    );
    b.add(
        m,
        "conv2d 3x3 pad 1",
        vec![x, w, bias],
        &[3, 5, 5],
        |_, v| v[0].conv2d(v[1], Some(v[2]), ConvSpec::same(3, 1)),
    );
    let (x, w) = (b.normal(&[2, 7, 7]), b.normal(&[2, 2, 3, 3]));
    let spec = ConvSpec {
        stride: 2,
        padding: 2,
        dilation: 2,
    };
    b.add(
        m,
        "conv2d stride 2 dilation 2",
        vec![x, w],
        &[2, 4, 4],
        move |_, v| v[0].conv2d(v[1], None, spec),
    );
    let (x, w, bias) = (
        b.normal(&[4, 3, 3]),
        b.normal(&[2, 4, 1, 1]),
        b.normal(&[2]),
    );
    b.add(m, "conv2d 1x1", vec![x, w, bias], &[2, 3, 3], |_, v| {
        v[0].conv2d(v[1], Some(v[2]), ConvSpec::default())
    });

    let x = b.normal(&[2, 4, 4]);
    b.add(m, "avg pool", vec![x.clone()], &[2, 2, 2], |_, v| {
        v[0].pool2d(PoolKind::Avg, 2, 2)
    });
    b.add(m, "max pool", vec![x.clone()], &[2, 2, 2], |_, v| {
        v[0].pool2d(PoolKind::Max, 2, 2)
    });
    b.add(m, "global avg pool", vec![x.clone()], &[2, 1, 1], |_, v| {
        v[0].pool2d(PoolKind::GlobalAvg, 0, 0)
    });
    b.add(m, "resize half", vec![x], &[2, 2, 2], |_, v| {
        v[0].resize(ResizeTarget::Half)
    });
    let x = b.normal(&[2, 3, 3]);
    b.add(m, "resize double", vec![x], &[2, 6, 6], |_, v| {
        v[0].resize(ResizeTarget::Double)
    });
    let x = b.normal(&[2, 3, 4]);
    b.add(m, "resize 5x3", vec![x.clone()], &[2, 5, 3], |_, v| {
        v[0].resize(ResizeTarget::Size(5, 3))
    });
    b.add(m, "permute", vec![x.clone()], &[4, 2, 3], |_, v| {
        v[0].permute(&[2, 0, 1])
    });
    b.add(m, "reshape", vec![x.clone()], &[6, 4], |_, v| {
        v[0].reshape(&[6, 4])
    });
    b.add(m, "transpose_last", vec![x.clone()], &[2, 4, 3], |_, v| {
        v[0].transpose_last()
    });
    let y = b.normal(&[1, 3, 4]);
    b.add(m, "concat", vec![x.clone(), y], &[3, 3, 4], |_, v| {
        Var::concat(&[v[0], v[1]], 0)
    });
    for (kind, name) in [
        (ReduceKind::Sum, "reduce sum"),
        (ReduceKind::Mean, "reduce mean"),
        (ReduceKind::Min, "reduce min"),
        (ReduceKind::Max, "reduce max"),
    ] {
        b.add(m, name, vec![x.clone()], &[2, 4], move |_, v| {
            v[0].reduce(kind, 1)
        });
    }
    b.add(
        m,
        "sum_all",
        vec![x.clone()],
        &[],
        |_, v| Ok(v[0].sum_all()),
    );
}

fn ksco_checks(b: &mut Builder) -> Result<()> {
    for excess in [false, true] {
        let mut store = ParamStore::new();
        let ksco = Ksco::new(&mut store, &mut b.rng, "ksco", 4, 6, excess)?;
        let x = b.normal(&[4, 5, 5]);
        let name = if excess {
            "pipeline (excess kurtosis)"
        } else {
            "pipeline"
        };
        b.add_frozen("ksco", name, store, vec![x], &[6, 25], move |g, v| {
            Ok(ksco.forward(g, v[0])?.s)
        })?;
    }
    Ok(())
}

fn attention_checks(b: &mut Builder) -> Result<()> {
    let x = b.normal(&[4, 3, 5]);
    b.add(
        "attention",
        "comprehensive attention",
        vec![x],
        &[4, 3, 5],
        |_, v| comprehensive_attention(v[0]),
    );

    let mut store = ParamStore::new();
    let attn = WindowAttention::new(&mut store, &mut b.rng, "attn", 4, 2, 2)?;
    let store = Arc::new(store);
    let x = b.normal(&[4, 4, 4]);
    let (s, a) = (Arc::clone(&store), attn.clone());
    b.add(
        "attention",
        "window self-attention",
        vec![x],
        &[4, 4, 4],
        move |tape, v| a.self_attention(&Graph::new(tape, &s, false), v[0]),
    );
    let qkv = vec![
        b.normal(&[4, 4, 4]),
        b.normal(&[4, 4, 4]),
        b.normal(&[4, 4, 4]),
    ];
    b.add(
        "attention",
        "window cross-attention",
        qkv,
        &[4, 4, 4],
        move |tape, v| attn.forward(&Graph::new(tape, &store, false), v[0], v[1], v[2]),
    );
    Ok(())
}

fn stft_checks(b: &mut Builder) -> Result<()> {
    for (use_ca, use_gate) in [(true, true), (false, false)] {
        let mut store = ParamStore::new();
        let opts = StftOptions {
            channels: 4,
            n_levels: 4,
            heads: 2,
            window: 2,
            use_ca,
            use_gate,
            excess_kurtosis: false,
        };
        let block = Stft::new(&mut store, &mut b.rng, "stft", opts)?;
        let x = b.normal(&[4, 4, 4]);
        let name = if use_ca {
            "fusion block"
        } else {
            "fusion block (no CA, no gate)"
        };
        b.add_frozen("stft", name, store, vec![x], &[4, 4, 4], move |g, v| {
            Ok(block.forward(g, v[0])?.fused)
        })?;
    }
    Ok(())
}

fn stet_checks(b: &mut Builder) -> Result<()> {
    let mut store = ParamStore::new();
    let ffn = TextureFfn::new(&mut store, &mut b.rng, "ffn", 4)?;
    let store = Arc::new(store);
    let x = b.normal(&[4, 5, 5]);
    b.add(
        "stet",
        "texture FFN",
        vec![x],
        &[4, 5, 5],
        move |tape, v| ffn.forward(&Graph::new(tape, &store, false), v[0]),
    );

    let opts = StetOptions {
        query_levels: 4,
        n_levels: 4,
        feature_channels: [2, 3, 4],
        heads: 2,
        window: 2,
        use_ca: true,
        use_ffn: true,
        excess_kurtosis: false,
    };
    let mut store = ParamStore::new();
    let bottleneck = Ksco::new(
        &mut store,
        &mut b.rng,
        "bottleneck",
        4,
        opts.query_levels,
        false,
    )?;
    let block = Stet::new(&mut store, &mut b.rng, "stet", opts)?;
    let inputs = vec![
        b.normal(&[4, 2, 2]),
        b.normal(&[2, 16, 16]),
        b.normal(&[3, 8, 8]),
        b.normal(&[4, 4, 4]),
    ];
    let (k2, s2) = (bottleneck.clone(), block.clone());
    b.add_frozen(
        "stet",
        "embeddings (Q + K)",
        store.clone(),
        inputs.clone(),
        &[],
        move |g, v| {
            let e = s2.embeddings(g, &k2.forward(g, v[0])?, &v[1..])?;
            e.query.mean_all().add(e.key.mean_all())
        },
    )?;
    b.add_frozen(
        "stet",
        "enhancement block",
        store,
        inputs,
        &[4, 4, 4],
        move |g, v| block.forward(g, &bottleneck.forward(g, v[0])?, &v[1..]),
    )?;
    Ok(())
}

fn loss_checks(b: &mut Builder) {
    let pred = b.uniform(&[1, 4, 4], 0.05, 0.95);
    let target = Tensor::from_fn([1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    b.add("loss", "dice loss", vec![pred], &[], move |tape, v| {
        dice_loss(v[0], tape.constant(target.clone()))
    });
    let logits = b.normal(&[1, 4, 4]);
    let target = Tensor::from_fn([1, 4, 4], |i| if i < 6 { 1.0 } else { 0.0 });
    b.add(
        "loss",
        "dice loss on sigmoid logits",
        vec![logits],
        &[],
        move |tape, v| dice_loss(v[0].sigmoid(), tape.constant(target.clone())),
    );
}

/// Run the checks belonging to `suite`.
pub fn run(suite: Suite, seed: u64, opts: GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        checks: Vec::new(),
    };
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Tensor) {
        tensor_checks(&mut b);
    }
    if wants(Suite::Ksco) {
        ksco_checks(&mut b)?;
    }
    if wants(Suite::Attention) {
        attention_checks(&mut b)?;
    }
    if wants(Suite::Stft) {
        stft_checks(&mut b)?;
    }
    if wants(Suite::Stet) {
        stet_checks(&mut b)?;
    }
    if wants(Suite::Loss) {
        loss_checks(&mut b);
    }
    b.checks
        .into_iter()
        .map(|c| {
            Ok(SuiteEntry {
                module: c.module,
                name: c.name,
                report: gradient_check(c.f, &c.inputs, opts)?,
            })
        })
        .collect()
}

/// A cube op with a deliberately wrong derivative; must fail the check.
pub fn negative_control(opts: GradCheckOptions) -> Result<GradCheckReport> {
    let x = Tensor::from_f64([4], &[0.5, -1.0, 1.5, 0.8])?;
    gradient_check(
        |_, v| {
            Ok(v[0]
                .map_with_grad("cube (wrong rule)", |x| x * x * x, |x, _| 2.0 * x)
                .sum_all())
        },
        &[x],
        opts,
    )
}

/// Fixed-width table of the results.
pub fn format_table(entries: &[SuiteEntry]) -> String {
    let mut out = format!(
        "{:<10} {:<34} {:>12} {:>12}  result\n",
        "module", "check", "max rel err", "max abs err"
    );
    for e in entries {
        out.push_str(&format!(
            "{:<10} {:<34} {:>12.3e} {:>12.3e}  {}\n",
            e.module,
            e.name,
            e.report.max_rel_error,
            e.report.max_abs_error,
            if e.report.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_fails() {
        assert!(
            !negative_control(GradCheckOptions::default())
                .unwrap()
                .passed
        );
    }

    #[test]
    fn suite_parses() {
        assert_eq!("stet".parse::<Suite>().unwrap(), Suite::Stet);
        assert!("nope".parse::<Suite>().is_err());
    }
}

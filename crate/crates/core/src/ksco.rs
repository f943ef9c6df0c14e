//! Kurtosis-guided statistical counting.
//!
//! A feature map is squeezed to one channel in (0, 1), the range of that map
//! is split into `N` evenly spaced levels, and every pixel responds at the
//! level it falls within half a level-spacing of. The response is
//! `|K| · exp(|x − W_n| − 1)`, where `K` is the map's kurtosis.
//!
//! Levels, extrema and kurtosis are constants of the pass: gradients reach
//! the aggregation map only through the exponential inside active bins.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, Init, ParamStore};
use crate::tensor::{ConvSpec, Real, Tensor, Var};

/// Standard deviations below this make the kurtosis degenerate (K := 0).
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationLevels {
    /// W_1..W_N, ascending.
    pub levels: Vec<f64>,
    pub n_levels: usize,
    pub lo: f64,
    pub hi: f64,
    /// (hi − lo) / 2N; a pixel activates level n iff |x − W_n| < half_width.
    pub half_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KurtosisStats {
    /// Raw fourth standardised moment (3 for Gaussian data); 0 when degenerate.
    pub kurtosis: f64,
    pub mean: f64,
    /// Sample standard deviation (divisor T − 1).
    pub std: f64,
    pub count: usize,
    pub degenerate: bool,
}

impl KurtosisStats {
    /// Weight applied to active responses: |K| (or |K − 3| in excess mode),
    /// and 0 for a degenerate map.
    pub fn weight(&self, excess: bool) -> f64 {
        if self.degenerate {
            0.0
        } else if excess {
            (self.kurtosis - 3.0).abs()
        } else {
            self.kurtosis.abs()
        }
    }
}

/// Levels and kurtosis of one KSCO invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct KscoSnapshot {
    pub levels: QuantizationLevels,
    pub stats: KurtosisStats,
}

pub fn quantization_levels(values: &[f64], n_levels: usize) -> Result<QuantizationLevels> {
    if n_levels == 0 {
        return Err(Error::config("quantization needs at least one level"));
    }
    if values.is_empty() {
        return Err(Error::shape("quantization of an empty map"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = n_levels as f64;
    let mut levels: Vec<f64> = (1..=n_levels)
        .map(|i| lo + i as f64 * (hi - lo) / n)
        .collect();
    // n = N reduces to hi exactly; pin it against rounding in the sum above
    levels[n_levels - 1] = hi;
    Ok(QuantizationLevels {
        levels,
        n_levels,
        lo,
        hi,
        half_width: (hi - lo) / (2.0 * n),
    })
}

pub fn kurtosis(values: &[f64]) -> Result<KurtosisStats> {
    let t = values.len();
    if t < 2 {
        return Err(Error::Domain(format!(
            "kurtosis needs at least 2 samples, got {t}"
        )));
    }
    let tf = t as f64;
    let mean = values.iter().sum::<f64>() / tf;
    let ss: f64 = values.iter().map(|r| (r - mean) * (r - mean)).sum();
    let std = (ss / (tf - 1.0)).sqrt();
    if std < DEGENERATE_STD {
        return Ok(KurtosisStats {
            kurtosis: 0.0,
            mean,
            std,
            count: t,
            degenerate: true,
        });
    }
    let k = values
        .iter()
        .map(|r| {
            let z = (r - mean) / std;
            (z * z) * (z * z)
        })
        .sum::<f64>()
        / tf;
    Ok(KurtosisStats {
        kurtosis: k,
        mean,
        std,
        count: t,
        degenerate: false,
    })
}

pub fn snapshot<T: Real>(fa: &Tensor<T>, n_levels: usize) -> Result<KscoSnapshot> {
    let values = fa.to_f64_vec();
    Ok(KscoSnapshot {
        levels: quantization_levels(&values, n_levels)?,
        stats: kurtosis(&values)?,
    })
}

/// Quantized intensity embedding: `s` is N×(H·W).
#[derive(Clone, Debug)]
pub struct QuantizedIntensityEmbedding<'t, T: Real> {
    pub s: Var<'t, T>,
    pub levels: QuantizationLevels,
    pub stats: KurtosisStats,
    pub spatial: (usize, usize),
}

impl<'t, T: Real> QuantizedIntensityEmbedding<'t, T> {
    pub fn n_levels(&self) -> usize {
        self.levels.n_levels
    }

    /// The embedding as an N×H×W map.
    pub fn as_map(&self) -> Result<Var<'t, T>> {
        let (h, w) = self.spatial;
        self.s.reshape(&[self.levels.n_levels, h, w])
    }

    /// Per-level totals over all pixels (N×1).
    pub fn level_totals(&self) -> Result<Var<'t, T>> {
        self.s
            .reduce(crate::tensor::ReduceKind::Sum, 1)?
            .reshape(&[self.levels.n_levels, 1])
    }
}

/// Apply the counting response to an aggregation map `fa` (1×H×W) with the
/// given constants.
pub fn quantized_intensity<'t, T: Real>(
    fa: Var<'t, T>,
    snap: &KscoSnapshot,
    excess_kurtosis: bool,
) -> Result<QuantizedIntensityEmbedding<'t, T>> {
    let (h, w) = match fa.shape()[..] {
        [1, h, w] => (h, w),
        ref s => {
            return Err(Error::shape(format!(
                "aggregation map must be 1×H×W, got {s:?}"
            )))
        }
    };
    let hw = h * w;
    let n = snap.levels.n_levels;
    let weight = snap.stats.weight(excess_kurtosis);
    let x = fa.value();
    let half = snap.levels.half_width;
    // active level per pixel (at most one under the strict threshold)
    let mut active: Vec<Option<usize>> = vec![None; hw];
    let mut s = vec![T::zero(); n * hw];
    if weight > 0.0 {
        for (i, &xi) in x.data().iter().enumerate() {
            let xv = xi.as_f64();
            for (lvl, &wn) in snap.levels.levels.iter().enumerate() {
                let d = (xv - wn).abs();
                if d < half {
                    debug_assert!(active[i].is_none(), "two active levels for pixel {i}");
                    active[i] = Some(lvl);
                    let wn_t = T::from_f64_lossy(wn);
                    let dt = (xi - wn_t).abs();
                    s[lvl * hw + i] = T::from_f64_lossy(weight) * (dt - T::one()).exp();
                    break;
                }
            }
        }
    }
    let levels_t: Vec<T> = snap
        .levels
        .levels
        .iter()
        .map(|&v| T::from_f64_lossy(v))
        .collect();
    let out = Tensor::new([n, hw], s)?;
    let out_vals = out.data().to_vec();
    let var = fa
        .tape()
        .record("quantized_intensity", out, &[fa], move |g, _| {
            let dx = (0..hw)
                .map(|i| match active[i] {
                    Some(lvl) => {
                        let diff = x.data()[i] - levels_t[lvl];
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        g[lvl * hw + i] * out_vals[lvl * hw + i] * sign
                    }
                    None => T::zero(),
                })
                .collect();
            vec![Some(dx)]
        });
    Ok(QuantizedIntensityEmbedding {
        s: var,
        levels: snap.levels.clone(),
        stats: snap.stats.clone(),
        spatial: (h, w),
    })
}

/// Channel squeeze: 1×1 conv C→max(C/2, 1), 1×1 conv →1, sigmoid.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub reduce: Conv2d,
    pub project: Conv2d,
}

impl Aggregator {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let mid = (channels / 2).max(1);
        Ok(Aggregator {
            reduce: Conv2d::new(
                store,
                rng,
                &format!("{name}.reduce"),
                channels,
                mid,
                1,
                ConvSpec::default(),
                Init::Linear,
            )?,
            project: Conv2d::new(
                store,
                rng,
                &format!("{name}.project"),
                mid,
                1,
                1,
                ConvSpec::default(),
                Init::Linear,
            )?,
        })
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = f.shape().first().copied().unwrap_or(0);
        if c != self.reduce.c_in {
            return Err(Error::shape(format!(
                "aggregate expects {} channels, got {c}",
                self.reduce.c_in
            )));
        }
        let mid = self.reduce.forward(g, f)?;
        Ok(self.project.forward(g, mid)?.sigmoid())
    }
}

/// Full operator: aggregate → levels → kurtosis → counting response.
#[derive(Clone, Debug)]
pub struct Ksco {
    pub aggregate: Aggregator,
    pub n_levels: usize,
    pub excess_kurtosis: bool,
}

impl Ksco {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        n_levels: usize,
        excess_kurtosis: bool,
    ) -> Result<Self> {
        if n_levels == 0 {
            return Err(Error::config("KSCO needs at least one level"));
        }
        Ok(Ksco {
            aggregate: Aggregator::new(store, rng, &format!("{name}.aggregate"), channels)?,
            n_levels,
            excess_kurtosis,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        f: Var<'t, T>,
    ) -> Result<QuantizedIntensityEmbedding<'t, T>> {
        let fa = self.aggregate.forward(g, f)?;
        let value = fa.value();
        let snap = g.resolve_stats(|| snapshot(&value, self.n_levels))?;
        quantized_intensity(fa, &snap, self.excess_kurtosis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use approx::assert_relative_eq;

    #[test]
    fn levels_unit_range() {
        let q = quantization_levels(&[0.0, 0.3, 1.0], 4).unwrap();
        assert_eq!(q.levels, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(q.half_width, 0.125);
    }

    #[test]
    fn levels_constant_map() {
        let q = quantization_levels(&[0.4; 5], 3).unwrap();
        assert!(q.levels.iter().all(|&l| l == 0.4));
        assert_eq!(q.half_width, 0.0);
    }

    #[test]
    fn levels_two_bins() {
        let q = quantization_levels(&[0.1, 0.5, 0.9], 2).unwrap();
        assert_relative_eq!(q.levels[0], 0.5, epsilon = 1e-15);
        assert_eq!(q.levels[1], 0.9);
        assert_relative_eq!(q.half_width, 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zero_levels_rejected() {
        assert!(matches!(
            quantization_levels(&[0.0, 1.0], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kurtosis_alternating() {
        let k = kurtosis(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_relative_eq!(k.kurtosis, 0.5625, epsilon = 1e-15);
        assert!(!k.degenerate);
    }

    #[test]
    fn kurtosis_degenerate_and_short() {
        let k = kurtosis(&[0.5; 9]).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.kurtosis, 0.0);
        assert_eq!(k.weight(true), 0.0);
        assert!(kurtosis(&[1.0]).is_err());
    }

    #[test]
    fn three_point_example() {
        let tape = Tape::<f64>::new();
        let fa = tape.constant(Tensor::from_f64([1, 1, 3], &[0.1, 0.5, 0.9]).unwrap());
        let snap = snapshot(&fa.value(), 2).unwrap();
        let k = snap.stats.kurtosis.abs();
        let emb = quantized_intensity(fa, &snap, false).unwrap();
        let s = emb.s.value();
        // column order: 0.1, 0.5, 0.9; rows: W_1 = 0.5, W_2 = 0.9
        assert_eq!(s.at(&[0, 0]), 0.0);
        assert_eq!(s.at(&[1, 0]), 0.0);
        assert_relative_eq!(s.at(&[0, 1]), k * (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(s.at(&[1, 1]), 0.0);
        assert_eq!(s.at(&[0, 2]), 0.0);
        assert_relative_eq!(s.at(&[1, 2]), k * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn excess_mode_subtracts_three() {
        let stats = kurtosis(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_relative_eq!(stats.weight(true), 3.0 - 0.5625);
        assert_relative_eq!(stats.weight(false), 0.5625);
    }

    #[test]
    fn zero_parameter_pipeline_is_degenerate() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::rng();
        let ksco = Ksco::new(&mut store, &mut rng, "k", 3, 4, false).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false);
        let f = tape.constant(Tensor::from_fn([3, 4, 4], |i| i as f64 * 0.1));
        let emb = ksco.forward(&g, f).unwrap();
        assert_eq!(emb.s.shape(), vec![4, 16]);
        assert!(emb.stats.degenerate);
        assert!(emb.s.value().data().iter().all(|&v| v == 0.0));
        let fa = ksco.aggregate.forward(&g, f).unwrap();
        assert!(fa.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::rng();
        let ksco = Ksco::new(&mut store, &mut rng, "k", 3, 4, false).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false);
        let f = tape.constant(Tensor::zeros([2, 4, 4]));
        assert!(matches!(ksco.forward(&g, f), Err(Error::Shape(_))));
    }
}

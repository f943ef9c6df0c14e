//! Overlap rates from pixel confusion counts, and the 95th-percentile
//! boundary Hausdorff distance.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// A rate in [0, 1]. `vacuous` marks 0/0, which is reported as 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub vacuous: bool,
}

fn ratio(num: u64, den: u64) -> Rate {
    if den == 0 {
        debug_assert_eq!(num, 0);
        Rate {
            value: 1.0,
            vacuous: true,
        }
    } else {
        Rate {
            value: num as f64 / den as f64,
            vacuous: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeMode {
    /// Mean of sensitivity and specificity.
    #[default]
    Arithmetic,
    /// Square root of their product.
    Geometric,
}

fn check_binary<T: Real>(values: &[T], what: &str) -> Result<()> {
    match values.iter().position(|&v| v != T::zero() && v != T::one()) {
        Some(i) => Err(Error::Data(format!(
            "{what} mask is not binary: value {} at {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

pub fn confusion<T: Real>(pred: &[T], gt: &[T]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(gt, "ground-truth")?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn dice(&self) -> Rate {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn jaccard(&self) -> Rate {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// Mean of the foreground and background IoU.
    pub fn miou(&self) -> Rate {
        let fg = ratio(self.tp, self.tp + self.fp + self.fn_);
        let bg = ratio(self.tn, self.tn + self.fp + self.fn_);
        Rate {
            value: 0.5 * (fg.value + bg.value),
            vacuous: fg.vacuous || bg.vacuous,
        }
    }

    pub fn accuracy(&self) -> Rate {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Rate {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Rate {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn ge(&self, mode: GeMode) -> Rate {
        let (se, sp) = (self.sensitivity(), self.specificity());
        let value = match mode {
            GeMode::Arithmetic => 0.5 * (se.value + sp.value),
            GeMode::Geometric => (se.value * sp.value).sqrt(),
        };
        Rate {
            value,
            vacuous: se.vacuous || sp.vacuous,
        }
    }
}

/// Threshold probabilities into a {0, 1} mask (`p >= threshold` is foreground).
pub fn binarize<T: Real>(probs: &[T], threshold: f64) -> Vec<T> {
    probs
        .iter()
        .map(|&p| {
            if p.as_f64() >= threshold {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Foreground pixels 4-adjacent to background or to the image border.
pub fn boundary(mask: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            out[i] = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !mask[i - width]
                || !mask[i + width]
                || !mask[i - 1]
                || !mask[i + 1];
        }
    }
    out
}

const FAR: f64 = 1e20;

/// 1-D lower envelope of parabolas (squared distance transform).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if !f.iter().any(|&x| x < FAR) {
        out.fill(FAR);
        return;
    }
    let mut k = 0usize;
    // start from the first finite site so the envelope never holds an infinite parabola
    let first = f.iter().position(|&x| x < FAR).unwrap();
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// site. Pixels are at integer coordinates, so results are exact integers.
pub fn squared_distance_transform(sites: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = height.max(width);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    grid
}

/// Nearest-rank percentile (`q` in (0, 1]) of an unsorted list.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

fn directed_squared(from: &[bool], to_dt: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d)
        .collect()
}

fn boundary_distances<T: Real>(
    pred: &[T],
    gt: &[T],
    height: usize,
    width: usize,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::shape(format!(
            "masks of {} and {} pixels for a {height}×{width} grid",
            pred.len(),
            gt.len()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(gt, "ground-truth")?;
    let a: Vec<bool> = pred.iter().map(|&v| v == T::one()).collect();
    let b: Vec<bool> = gt.iter().map(|&v| v == T::one()).collect();
    if !a.contains(&true) || !b.contains(&true) {
        return Ok(None);
    }
    let (ba, bb) = (boundary(&a, height, width), boundary(&b, height, width));
    let (da, db) = (
        squared_distance_transform(&ba, height, width),
        squared_distance_transform(&bb, height, width),
    );
    Ok(Some((
        directed_squared(&ba, &db),
        directed_squared(&bb, &da),
    )))
}

/// 95th-percentile symmetric boundary distance in pixels. `None` when
/// either mask is empty.
pub fn hd95<T: Real>(pred: &[T], gt: &[T], height: usize, width: usize) -> Result<Option<f64>> {
    Ok(
        boundary_distances(pred, gt, height, width)?.map(|(mut ab, mut ba)| {
            nearest_rank(&mut ab, 0.95)
                .max(nearest_rank(&mut ba, 0.95))
                .sqrt()
        }),
    )
}

/// Classic (maximum) boundary Hausdorff distance.
pub fn hausdorff<T: Real>(
    pred: &[T],
    gt: &[T],
    height: usize,
    width: usize,
) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt, height, width)?
        .map(|(ab, ba)| ab.iter().chain(&ba).copied().fold(0.0, f64::max).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub miou: f64,
    pub ja: f64,
    pub ac: f64,
    pub ge: f64,
    pub hd95: Option<f64>,
    pub vacuous: bool,
}

pub fn evaluate_sample<T: Real>(
    id: &str,
    pred: &[T],
    gt: &[T],
    height: usize,
    width: usize,
    ge_mode: GeMode,
) -> Result<SampleMetrics> {
    let c = confusion(pred, gt)?;
    let rates = [c.dice(), c.miou(), c.jaccard(), c.accuracy(), c.ge(ge_mode)];
    Ok(SampleMetrics {
        id: id.to_string(),
        dice: rates[0].value,
        miou: rates[1].value,
        ja: rates[2].value,
        ac: rates[3].value,
        ge: rates[4].value,
        hd95: hd95(pred, gt, height, width)?,
        vacuous: rates.iter().any(|r| r.vacuous),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&SampleMetrics) -> f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_dice(&self) -> f64 {
        self.mean(|s| s.dice)
    }

    pub fn mean_miou(&self) -> f64 {
        self.mean(|s| s.miou)
    }

    pub fn mean_ja(&self) -> f64 {
        self.mean(|s| s.ja)
    }

    pub fn mean_ac(&self) -> f64 {
        self.mean(|s| s.ac)
    }

    pub fn mean_ge(&self) -> f64 {
        self.mean(|s| s.ge)
    }

    /// Mean over samples where HD95 is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        let defined: Vec<f64> = self.samples.iter().filter_map(|s| s.hd95).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn undefined_hd95(&self) -> usize {
        self.samples.iter().filter(|s| s.hd95.is_none()).count()
    }

    pub fn vacuous(&self) -> usize {
        self.samples.iter().filter(|s| s.vacuous).count()
    }

    /// One row per sample followed by a `mean` row. Undefined HD95 is `nan`.
    pub fn to_csv(&self) -> String {
        let fmt_hd = |h: Option<f64>| h.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("id,dice,miou,ja,ac,ge,hd95\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                s.id,
                s.dice,
                s.miou,
                s.ja,
                s.ac,
                s.ge,
                fmt_hd(s.hd95)
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.mean_dice(),
            self.mean_miou(),
            self.mean_ja(),
            self.mean_ac(),
            self.mean_ge(),
            fmt_hd(self.mean_hd95())
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mask(bits: &[u8]) -> Vec<f32> {
        bits.iter().map(|&b| b as f32).collect()
    }

    #[test]
    fn identical_masks() {
        let m = mask(&[1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 5,
                fp: 0,
                tn: 11,
                fn_: 0
            }
        );
        for r in [
            c.dice(),
            c.jaccard(),
            c.miou(),
            c.accuracy(),
            c.ge(GeMode::Arithmetic),
        ] {
            assert_eq!(r.value, 1.0);
        }
        assert_eq!(hd95(&m, &m, 4, 4).unwrap(), Some(0.0));
    }

    #[test]
    fn all_false_positives() {
        let c = confusion(&mask(&[1, 1, 1, 1]), &mask(&[0, 0, 0, 0])).unwrap();
        assert_eq!(c.fp, 4);
    }

    #[test]
    fn worked_rates() {
        let c = Confusion {
            tp: 2,
            fp: 1,
            tn: 12,
            fn_: 1,
        };
        assert_relative_eq!(c.dice().value, 4.0 / 6.0);
        assert_relative_eq!(c.jaccard().value, 0.5);
        assert_relative_eq!(c.miou().value, 0.5 * (2.0 / 4.0 + 12.0 / 14.0));
        assert!((c.miou().value - 0.6786).abs() < 1e-4);
    }

    #[test]
    fn empty_masks_are_vacuous() {
        let z = mask(&[0, 0, 0, 0]);
        let c = confusion(&z, &z).unwrap();
        let d = c.dice();
        assert!(d.vacuous);
        assert_eq!(d.value, 1.0);
        assert_eq!(hd95(&z, &z, 2, 2).unwrap(), None);
    }

    #[test]
    fn non_binary_rejected() {
        assert!(matches!(confusion(&[0.5f32], &[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn single_pixels_three_four_five() {
        let mut a = vec![0f32; 25];
        let mut b = vec![0f32; 25];
        a[0] = 1.0;
        b[3 * 5 + 4] = 1.0;
        assert_eq!(hd95(&a, &b, 5, 5).unwrap(), Some(5.0));
    }

    #[test]
    fn geometric_ge() {
        let c = Confusion {
            tp: 1,
            fp: 0,
            tn: 3,
            fn_: 1,
        };
        assert_relative_eq!(c.ge(GeMode::Geometric).value, 0.5f64.sqrt());
        assert_relative_eq!(c.ge(GeMode::Arithmetic).value, 0.75);
    }

    #[test]
    fn nearest_rank_rule() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 0.95), 19.0);
        assert_eq!(nearest_rank(&mut [7.0], 0.95), 7.0);
    }

    #[test]
    fn csv_has_summary_row() {
        let r = EvalReport {
            samples: vec![SampleMetrics {
                id: "a".into(),
                dice: 1.0,
                miou: 1.0,
                ja: 1.0,
                ac: 1.0,
                ge: 1.0,
                hd95: None,
                vacuous: false,
            }],
        };
        let csv = r.to_csv();
        assert!(csv.lines().last().unwrap().starts_with("mean,1.000000"));
        assert!(csv.lines().last().unwrap().ends_with(",nan"));
    }
}

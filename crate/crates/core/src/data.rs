//! Image/mask datasets: directory loading, a synthetic generator and
//! deterministic splitting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// One image (3×H×W in [0, 1]) with its binary mask (1×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::Data(format!(
                "image {is:?} and mask {ms:?} do not pair up"
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("mask is not binary".into()));
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn stems(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext, Some(ref e) if extensions.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Data(format!(
                    "stem {stem} appears twice ({} and {})",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

pub fn mask_to_tensor(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, h, w], |i| if img.as_raw()[i] > 127 { 1.0 } else { 0.0 })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_image(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| to_byte(t.data()[c * h * w + p])))
    })
}

/// Single-channel map in [0, 1] as 8-bit grayscale.
pub fn tensor_to_gray(t: &Tensor<f32>) -> GrayImage {
    let (h, w) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_byte(t.data()[y as usize * w + x as usize])])
    })
}

/// Read one image, resized to (height, width) if `size` is given; also
/// returns the original (height, width).
pub fn read_image(
    path: &Path,
    size: Option<(usize, usize)>,
) -> Result<(Tensor<f32>, (usize, usize))> {
    let img = open(path)?;
    let original = (img.height() as usize, img.width() as usize);
    let rgb = match size {
        Some((h, w)) => {
            image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Triangle)
        }
        None => img.to_rgb8(),
    };
    Ok((image_to_tensor(&rgb), original))
}

/// Bilinear resize of a single-channel map (1×H×W or H×W) to 1×`height`×`width`.
pub fn resize_map(t: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
    let buf = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_raw(
        w as u32,
        h as u32,
        t.data()[..h * w].to_vec(),
    )
    .expect("buffer matches extents");
    let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    Tensor::new([1, height, width], out.into_raw()).expect("resize keeps extents")
}

pub fn write_gray(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_gray(t).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Load `images/` and `masks/` pairs with equal stems, resized to
/// `height`×`width`. Samples are ordered by id.
pub fn load_dir(images: &Path, masks: &Path, height: usize, width: usize) -> Result<Vec<Sample>> {
    let image_files = stems(images, &IMAGE_EXTENSIONS)?;
    let mask_files = stems(masks, &["png"])?;
    if let Some(stem) = image_files.keys().find(|s| !mask_files.contains_key(*s)) {
        return Err(Error::Data(format!(
            "image {stem} has no mask in {}",
            masks.display()
        )));
    }
    if let Some(stem) = mask_files.keys().find(|s| !image_files.contains_key(*s)) {
        return Err(Error::Data(format!(
            "mask {stem} has no image in {}",
            images.display()
        )));
    }
    if image_files.is_empty() {
        return Err(Error::Data(format!(
            "no images found in {}",
            images.display()
        )));
    }
    let (w, h) = (width as u32, height as u32);
    let mut out = Vec::with_capacity(image_files.len());
    for (stem, image_path) in &image_files {
        let img = open(image_path)?;
        if !matches!(img.color(), image::ColorType::Rgb8) {
            log::warn!(
                "{}: {:?} converted to 8-bit RGB",
                image_path.display(),
                img.color()
            );
        }
        let rgb = image::imageops::resize(&img.to_rgb8(), w, h, FilterType::Triangle);
        let gray = image::imageops::resize(
            &open(&mask_files[stem])?.to_luma8(),
            w,
            h,
            FilterType::Nearest,
        );
        out.push(Sample::new(
            stem.clone(),
            image_to_tensor(&rgb),
            mask_to_tensor(&gray),
        )?);
    }
    Ok(out)
}

/// Write samples as `images/<id>.png` and `masks/<id>.png` under `root`.
pub fn write_dir(samples: &[Sample], root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let ip = images.join(format!("{}.png", s.id));
        tensor_to_image(&s.image)
            .save(&ip)
            .map_err(|source| Error::Image {
                path: ip.clone(),
                source,
            })?;
        let mp = masks.join(format!("{}.png", s.id));
        tensor_to_gray(&s.mask)
            .save(&mp)
            .map_err(|source| Error::Image {
                path: mp.clone(),
                source,
            })?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub count: usize,
    pub size: usize,
    /// Inclusive range of blobs per lesion.
    pub blobs: (usize, usize),
    /// Relative amplitude of the boundary perturbation.
    pub roughness: f64,
    /// Mean intensity gap between lesion and skin.
    pub contrast: f64,
    /// Fraction of lesion pixels whose speckle is drawn from a heavy-tailed law.
    pub tail_weight: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count: 8,
            size: 64,
            blobs: (1, 2),
            roughness: 0.15,
            contrast: 0.35,
            tail_weight: 0.8,
            seed: 7,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.size < 8 {
            return Err(Error::config("synthesis needs count ≥ 1 and size ≥ 8"));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(Error::config(format!(
                "invalid blob range {:?}",
                self.blobs
            )));
        }
        if !(0.0..=1.0).contains(&self.tail_weight) || !(0.0..1.0).contains(&self.roughness) {
            return Err(Error::config(
                "tail_weight must be in [0, 1] and roughness in [0, 1)",
            ));
        }
        Ok(())
    }

    /// Reject sizes the model `config` cannot consume (pyramid and window
    /// divisibility).
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        ModelConfig {
            height: self.size,
            width: self.size,
            ..config.clone()
        }
        .validate()
        .map_err(|e| match e {
            Error::Config(m) => Error::config(format!("synthetic size {}: {m}", self.size)),
            other => other,
        })
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    /// (harmonic, amplitude, phase) of the radial perturbation.
    harmonics: Vec<(f64, f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64, roughness: f64) -> Self {
        let harmonics = (2..6)
            .map(|k| {
                let amp = roughness * rng.random_range(0.3..1.0) / (k as f64 - 1.0);
                (k as f64, amp, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Blob {
            cx: size * rng.random_range(0.3..0.7),
            cy: size * rng.random_range(0.3..0.7),
            rx: size * rng.random_range(0.12..0.3),
            ry: size * rng.random_range(0.12..0.3),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let theta = v.atan2(u);
        let wobble: f64 = self
            .harmonics
            .iter()
            .map(|&(k, a, p)| a * (k * theta + p).sin())
            .sum();
        r <= 1.0 + wobble
    }
}

/// Laplace(0, b) sample via inverse CDF.
fn laplace(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

fn synth_one(rng: &mut ChaCha8Rng, p: &SynthParams, index: usize) -> Result<Sample> {
    let n = p.size;
    let size = n as f64;
    let grain = Normal::new(0.0, 0.04).expect("valid sigma");
    loop {
        let count = rng.random_range(p.blobs.0..=p.blobs.1);
        let blobs: Vec<Blob> = (0..count)
            .map(|_| Blob::random(rng, size, p.roughness))
            .collect();
        let mask: Vec<bool> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
                blobs.iter().any(|b| b.contains(x, y))
            })
            .collect();
        let fg = mask.iter().filter(|&&m| m).count();
        if fg == 0 || fg == n * n {
            continue;
        }
        let skin = [0.85, 0.68, 0.58].map(|v: f64| v + rng.random_range(-0.05..0.05));
        let lesion = skin.map(|v| v - p.contrast);
        let mut image = vec![0f32; 3 * n * n];
        for (i, &inside) in mask.iter().enumerate() {
            let (base, noise) = if inside {
                let noise = if rng.random_bool(p.tail_weight) {
                    laplace(rng, 0.04)
                } else {
                    grain.sample(rng)
                };
                (lesion, noise)
            } else {
                (skin, grain.sample(rng))
            };
            for c in 0..3 {
                image[c * n * n + i] = (base[c] + noise).clamp(0.0, 1.0) as f32;
            }
        }
        let mask = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        return Sample::new(
            format!("synth_{index:04}"),
            Tensor::new([3, n, n], image)?,
            Tensor::new([1, n, n], mask)?,
        );
    }
}

/// Random lesion-like samples: perturbed-ellipse masks, heavy-tailed
/// speckle inside, Gaussian grain outside.
pub fn synth(p: &SynthParams) -> Result<Vec<Sample>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    (0..p.count).map(|i| synth_one(&mut rng, p, i)).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffle with `seed` and cut into train/val/test by `fractions`.
pub fn split(samples: &[Sample], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = samples.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let counts = [n_train, n_val, n - n_train - n_val];
    if let Some(i) = (0..3).find(|&i| fractions[i] > 0.0 && counts[i] == 0) {
        return Err(Error::Data(format!(
            "{n} samples leave split part {i} empty for fractions {fractions:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take =
        |range: std::ops::Range<usize>| order[range].iter().map(|&i| samples[i].clone()).collect();
    Ok(Split {
        train: take(0..counts[0]),
        val: take(counts[0]..counts[0] + counts[1]),
        test: take(counts[0] + counts[1]..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ksco::kurtosis;

    #[test]
    fn synth_is_deterministic_and_two_class() {
        let p = SynthParams {
            count: 4,
            size: 32,
            ..Default::default()
        };
        let a = synth(&p).unwrap();
        assert_eq!(a, synth(&p).unwrap());
        for s in &a {
            let fg = s.mask.sum();
            assert!(fg > 0.0 && fg < 32.0 * 32.0);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn heavy_tail_raises_lesion_kurtosis() {
        let p = SynthParams {
            count: 4,
            size: 64,
            tail_weight: 0.8,
            ..Default::default()
        };
        for s in synth(&p).unwrap() {
            let hw = 64 * 64;
            let lum = |i: usize| {
                (0..3)
                    .map(|c| s.image.data()[c * hw + i] as f64)
                    .sum::<f64>()
                    / 3.0
            };
            let (mut fg, mut bg) = (Vec::new(), Vec::new());
            for i in 0..hw {
                if s.mask.data()[i] == 1.0 {
                    fg.push(lum(i))
                } else {
                    bg.push(lum(i))
                }
            }
            let (kf, kb) = (
                kurtosis(&fg).unwrap().kurtosis,
                kurtosis(&bg).unwrap().kurtosis,
            );
            assert!(kf > kb, "{}: lesion {kf} vs skin {kb}", s.id);
        }
    }

    fn ids(v: &[Sample]) -> Vec<String> {
        v.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn split_counts_and_partition() {
        let samples = synth(&SynthParams {
            count: 10,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        let s = split(&samples, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all = [ids(&s.train), ids(&s.val), ids(&s.test)].concat();
        all.sort();
        assert_eq!(all, ids(&samples));
        assert_eq!(split(&samples, [0.8, 0.1, 0.1], 3).unwrap(), s);
    }

    #[test]
    fn split_rejects_empty_part() {
        let samples = synth(&SynthParams {
            count: 3,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            split(&samples, [0.8, 0.1, 0.1], 0),
            Err(Error::Data(_))
        ));
        assert!(split(&samples, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn sample_rejects_gray_mask() {
        let img = Tensor::zeros([3, 2, 2]);
        assert!(Sample::new("x", img, Tensor::full([1, 2, 2], 0.5)).is_err());
    }

    #[test]
    fn synth_size_must_suit_model() {
        let toy = ModelConfig::toy();
        assert!(SynthParams {
            size: 64,
            ..Default::default()
        }
        .check_model(&toy)
        .is_ok());
        assert!(matches!(
            SynthParams {
                size: 63,
                ..Default::default()
            }
            .check_model(&toy),
            Err(Error::Config(_))
        ));
    }
}

//! Dice-loss training with Adam, step decay and flip augmentation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{self, EvalReport, GeMode};
use crate::model::Model;
use crate::nn::{Graph, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub augment: bool,
    pub seed: u64,
    /// Share of the data held out for checkpoint selection (CLI only).
    pub val_fraction: f64,
    /// Probability threshold for the binary masks used by the metrics.
    pub threshold: f64,
    /// Stop once the selection-set Dice reaches this value.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Optimizer and schedule used at full scale.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 300,
            learning_rate: 2e-4,
            weight_decay: 1e-8,
            decay_factor: 0.5,
            decay_every_epochs: 256,
            augment: true,
            seed: 0,
            val_fraction: 0.1,
            threshold: 0.5,
            stop_at_dice: None,
        }
    }

    /// Short schedule for desk-scale runs.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            epochs: 200,
            learning_rate: 5e-4,
            decay_every_epochs: 170,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every_epochs == 0 {
            return Err(Error::config(
                "batch_size, epochs and decay_every_epochs must be positive",
            ));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::config(
                "learning_rate must be positive and weight_decay non-negative",
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "decay_factor {} not in (0, 1]",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(
                "val_fraction must be in [0, 1) and threshold in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// `base · factor^⌊epoch / every⌋`
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate
        * cfg
            .decay_factor
            .powi((epoch / cfg.decay_every_epochs) as i32)
}

/// `1 − (2Σxy + s) / (Σx² + Σy² + s)` with s = 1e-6.
pub fn dice_loss<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let overlap = pred
        .mul(target)?
        .sum_all()
        .scale(T::from_f64_lossy(2.0))
        .add_scalar(s);
    let norm = pred
        .square()
        .sum_all()
        .add(target.square().sum_all())?
        .add_scalar(s);
    Ok(overlap.div(norm)?.neg().add_scalar(T::one()))
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(grad) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let value = params.get_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad.data()[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                value[i] = T::from_f64_lossy(value[i].as_f64() * decay - step);
            }
        }
    }
}

/// Mirror a C×H×W tensor left-right.
pub fn flip_horizontal<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let w = t.shape()[t.ndim() - 1];
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (row, x) = (i / w, i % w);
        t.data()[row * w + (w - 1 - x)]
    })
}

/// Mirror a C×H×W tensor top-bottom.
pub fn flip_vertical<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (t.shape()[t.ndim() - 2], t.shape()[t.ndim() - 1]);
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        t.data()[plane * h * w + (h - 1 - y) * w + x]
    })
}

/// Each flip applied independently with probability ½, identically to
/// image and mask.
pub fn augment<T: Real, R: Rng>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    rng: &mut R,
) -> (Tensor<T>, Tensor<T>) {
    let (mut image, mut mask) = (image.clone(), mask.clone());
    if rng.random_bool(0.5) {
        image = flip_horizontal(&image);
        mask = flip_horizontal(&mask);
    }
    if rng.random_bool(0.5) {
        image = flip_vertical(&image);
        mask = flip_vertical(&mask);
    }
    (image, mask)
}

impl<T: Real> Model<T> {
    /// Per-pixel lesion probabilities (1×H×W).
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &self.params, false);
        Ok(self
            .net
            .forward(&g, tape.constant(image.clone()))?
            .sigmoid()
            .to_tensor())
    }

    /// Dice loss and parameter gradients for one sample.
    pub fn loss_and_grads(
        &self,
        image: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &self.params, true);
        let probs = self
            .net
            .forward(&g, tape.constant(image.clone()))?
            .sigmoid();
        let loss = dice_loss(probs, tape.constant(mask.clone()))?;
        loss.backward()?;
        Ok((loss.value().item().as_f64(), g.param_grads()))
    }
}

/// Threshold predictions and score every sample.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    samples: &[Sample],
    threshold: f64,
    ge_mode: GeMode,
) -> Result<EvalReport> {
    let rows = exec::map_range(samples.len(), |i| -> Result<_> {
        let s = &samples[i];
        let probs = model.predict(&s.image.cast::<T>())?;
        let pred = metrics::binarize(probs.data(), threshold);
        let gt: Vec<T> = s.mask.cast::<T>().into_data();
        metrics::evaluate_sample(&s.id, &pred, &gt, s.height(), s.width(), ge_mode)
    });
    Ok(EvalReport {
        samples: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean thresholded Dice on the selection set.
    pub val_dice: f64,
}

pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr,val_dice\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{:.9},{:e},{:.6}",
            r.epoch, r.loss, r.lr, r.val_dice
        );
    }
    out
}

pub struct TrainOutcome<T: Real> {
    pub trace: Vec<EpochRecord>,
    pub best: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
}

/// Train `model` in place. The selection set is `val`, or the training set
/// itself when `val` is empty; the best-scoring parameters are returned in
/// the outcome while `model` holds the final ones.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (h, w) = (model.config().height, model.config().width);
    if let Some(s) = train_set
        .iter()
        .chain(val)
        .find(|s| s.height() != h || s.width() != w)
    {
        return Err(Error::Data(format!(
            "sample {} is {}×{}, the model expects {h}×{w}",
            s.id,
            s.height(),
            s.width()
        )));
    }
    let selection = if val.is_empty() { train_set } else { val };
    let images: Vec<(Tensor<T>, Tensor<T>)> = train_set
        .iter()
        .map(|s| (s.image.cast(), s.mask.cast()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = (model.params.clone(), 0usize, f64::NEG_INFINITY);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<(Tensor<T>, Tensor<T>)> = batch
                .iter()
                .map(|&i| {
                    let (img, mask) = &images[i];
                    if cfg.augment {
                        augment(img, mask, &mut rng)
                    } else {
                        (img.clone(), mask.clone())
                    }
                })
                .collect();
            let model_ref = &*model;
            let results = exec::map_range(inputs.len(), |i| {
                model_ref.loss_and_grads(&inputs[i].0, &inputs[i].1)
            });

            let mut sum: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
            for result in results {
                let (loss, grads) = result?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {loss} at epoch {epoch}"
                    )));
                }
                loss_sum += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match acc {
                        Some(a) => a.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                        None => *acc = Some(g.into_data()),
                    }
                }
            }
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            let grads: Vec<Option<Tensor<T>>> = sum
                .into_iter()
                .zip(model.params.iter())
                .map(|(g, (_, p))| {
                    g.map(|mut g| {
                        g.iter_mut().for_each(|v| *v *= scale);
                        Tensor::new(p.shape().to_vec(), g).expect("gradient matches parameter")
                    })
                })
                .collect();
            if grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}"
                )));
            }
            adam.update(&mut model.params, &grads, lr, cfg.weight_decay);
        }

        let val_dice = evaluate(model, selection, cfg.threshold, GeMode::Arithmetic)?.mean_dice();
        let record = EpochRecord {
            epoch,
            loss: loss_sum / images.len() as f64,
            lr,
            val_dice,
        };
        if val_dice > best.2 {
            best = (model.params.clone(), epoch, val_dice);
        }
        on_epoch(&record);
        trace.push(record);
        if cfg.stop_at_dice.is_some_and(|target| val_dice >= target) {
            break;
        }
    }
    Ok(TrainOutcome {
        trace,
        best: best.0,
        best_epoch: best.1,
        best_val_dice: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOptions};
    use approx::assert_relative_eq;

    fn loss_of(pred: &[f64], target: &[f64]) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_f64([pred.len()], pred).unwrap());
        let t = tape.constant(Tensor::from_f64([target.len()], target).unwrap());
        dice_loss(p, t).unwrap().value().item()
    }

    #[test]
    fn dice_examples() {
        assert!(loss_of(&[1.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 1.0]) <= 1e-6);
        assert!((loss_of(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0]) - 1.0).abs() < 1e-6);
        assert_relative_eq!(loss_of(&[0.5, 0.5], &[1.0, 0.0]), 1.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn dice_gradient() {
        let pred = Tensor::from_f64([6], &[0.2, 0.9, 0.4, 0.7, 0.1, 0.55]).unwrap();
        let target = Tensor::from_f64([6], &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = gradient_check(
            |tape, v| dice_loss(v[0], tape.constant(target.clone())),
            &[pred],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(255, &cfg), 2e-4);
        assert_eq!(lr_schedule(256, &cfg), 1e-4);
    }

    fn single_param(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store
            .add("p", Tensor::from_f64([1], &[value]).unwrap())
            .unwrap();
        store
    }

    #[test]
    fn adam_first_step_is_unit() {
        let mut store = single_param(0.0);
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Some(Tensor::ones([1]))], 0.1, 0.0);
        assert_relative_eq!(store.by_name("p").unwrap().item(), -0.1, epsilon = 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut store = single_param(0.7);
        let mut adam = Adam::new(&store);
        for _ in 0..5 {
            adam.update(&mut store, &[Some(Tensor::zeros([1]))], 0.1, 0.0);
        }
        assert_eq!(store.by_name("p").unwrap().item(), 0.7);
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut store = ParamStore::new();
        store
            .add("xy", Tensor::from_f64([2], &[3.0, -2.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&store);
        let loss = |p: &[f64]| p[0] * p[0] + 4.0 * p[1] * p[1];
        let mut steps = 0;
        while loss(store.by_name("xy").unwrap().data()) >= 1e-6 {
            let p = store.by_name("xy").unwrap().data().to_vec();
            let g = Tensor::from_f64([2], &[2.0 * p[0], 8.0 * p[1]]).unwrap();
            let lr = if steps < 200 { 0.1 } else { 0.01 };
            adam.update(&mut store, &[Some(g)], lr, 0.0);
            steps += 1;
            assert!(steps <= 500, "not converged");
        }
    }

    #[test]
    fn flips_are_involutions_and_paired() {
        let img = Tensor::<f32>::from_fn([3, 4, 5], |i| i as f32);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_eq!(flip_horizontal(&img).at(&[1, 2, 0]), img.at(&[1, 2, 4]));
        assert_eq!(flip_vertical(&img).at(&[2, 0, 3]), img.at(&[2, 3, 3]));

        let mask = Tensor::<f32>::from_fn([1, 4, 5], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..8 {
            let (a, m) = augment(&img, &mask, &mut rng);
            // channel 0 of the image was built with the same values as the mask
            assert_eq!(&a.data()[..20], m.data());
        }
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4)
                .map(|_| augment(&img, &mask, &mut rng).0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }
}

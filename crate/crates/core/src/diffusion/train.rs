//! ε-prediction training: minimise `E‖ε − ε̂(z_t, t | cond)‖²` over
//! uniform timesteps and Gaussian noise.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::Tensor;
use super::scalar::Scalar;
use super::schedule::{q_sample, DiffusionSchedule};
use super::unet::{ModelParams, UnetConfig};
use super::{check_planes, condition, crop, pad, stack, Normalizer};
use crate::grid::{check_same_geometry, Sinogram};
use crate::masking::AngularMask;
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Record the mini-batch loss every `log_every` steps.
    pub log_every: usize,
    pub model: UnetConfig,
    /// Normalisation scale; derived from the data when `None`.
    pub norm_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 2e-4,
            seed: 0,
            log_every: 1,
            model: UnetConfig::default(),
            norm_scale: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        self.model.validate()
    }
}

/// One training triplet: ground-truth sinogram, its limited-angle version
/// and the mask that produced it.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub gt: Sinogram,
    pub la: Sinogram,
    pub mask: AngularMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub normalizer: Normalizer,
    pub losses: Vec<LossRecord>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Training sample in network space: clean target plus padded condition.
struct Prepared {
    x0: Vec<f32>,
    cond: Tensor<f32>,
}

/// Mean squared noise error on the `h×w` region and, if asked, its
/// gradient with respect to every parameter.
fn loss_grad_padded<T: Scalar>(
    params: &ModelParams<T>,
    z: &Tensor<T>,
    t: usize,
    cond: &Tensor<T>,
    eps: &[T],
    (h, w): (usize, usize),
    want_grad: bool,
) -> (f64, Option<Vec<T>>) {
    let (out, tape) = params.forward(z, t as f64, Some(cond));
    let n = (h * w) as f64;
    let mut dout = Tensor::zeros(1, out.h, out.w);
    let mut sse = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * out.w + x;
            let r = out.data[i] - eps[y * w + x];
            let rf = r.to_f64().unwrap();
            sse += rf * rf;
            dout.data[i] = T::from_f64_lossy(2.0 * rf / n);
        }
    }
    let grad = want_grad.then(|| {
        let mut g = vec![T::zero(); params.len()];
        params.backward(&tape, &dout, &mut g);
        g
    });
    (sse / n, grad)
}

fn noisy_padded<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
    m: usize,
) -> Result<Tensor<T>> {
    let z = q_sample(&x0.data, t, &eps.data, sched)?;
    Ok(pad(&Tensor::from_vec(1, x0.h, x0.w, z.z_t), m))
}

/// Loss of one sample at a fixed `(t, ε)`, all planes unpadded.
pub fn noise_loss<T: Scalar>(
    params: &ModelParams<T>,
    x0: &Tensor<T>,
    cond_la: &Tensor<T>,
    cond_mask: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    check_planes(x0, cond_la, cond_mask)?;
    check_planes(x0, eps, eps)?;
    let m = params.config().pad_multiple();
    let z = noisy_padded(x0, t, eps, sched, m)?;
    let cond = pad(&stack(cond_la, cond_mask), m);
    Ok(loss_grad_padded(params, &z, t, &cond, &eps.data, (x0.h, x0.w), false).0)
}

/// Loss of one sample and its exact gradient with respect to the flat
/// parameter vector.
pub fn loss_and_gradient<T: Scalar>(
    params: &ModelParams<T>,
    x0: &Tensor<T>,
    cond_la: &Tensor<T>,
    cond_mask: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<(f64, Vec<T>)> {
    check_planes(x0, cond_la, cond_mask)?;
    check_planes(x0, eps, eps)?;
    let m = params.config().pad_multiple();
    let z = noisy_padded(x0, t, eps, sched, m)?;
    let cond = pad(&stack(cond_la, cond_mask), m);
    let (loss, g) = loss_grad_padded(params, &z, t, &cond, &eps.data, (x0.h, x0.w), true);
    Ok((loss, g.expect("gradient")))
}

pub fn train(dataset: &[TrainExample], cfg: &TrainConfig, sched: &DiffusionSchedule) -> Result<TrainOutcome> {
    train_with_progress(dataset, cfg, sched, |_, _| {})
}

/// As [`train`], calling `progress(epoch, record)` for every logged loss.
pub fn train_with_progress(
    dataset: &[TrainExample],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    mut progress: impl FnMut(usize, &LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset.first().ok_or_else(|| Error::invalid("training set is empty"))?;
    let g = *first.gt.geometry();
    for ex in dataset {
        check_same_geometry(&g, ex.gt.geometry())?;
        check_same_geometry(&g, ex.la.geometry())?;
    }
    let normalizer = match cfg.norm_scale {
        Some(s) => Normalizer::new(s)?,
        None => Normalizer::from_percentile(dataset.iter().map(|e| &e.gt))?,
    };
    let m = cfg.model.pad_multiple();
    let (h, w) = (g.n_angles(), g.n_bins());
    let prepared = dataset
        .iter()
        .map(|ex| {
            let (la, mask) = condition(&normalizer, &ex.la, &ex.mask)?;
            Ok(Prepared { x0: normalizer.normalize(&ex.gt), cond: pad(&stack(&la, &mask), m) })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::<f32>::init(&cfg.model, rng.random())?;
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // Draw all randomness up front, in batch order.
            let draws: Vec<(usize, usize, Vec<f32>)> = batch
                .iter()
                .map(|&i| {
                    let t = rng.random_range(1..=sched.timesteps());
                    let eps = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                    (i, t, eps)
                })
                .collect();
            let results = par::map_slice(&draws, |(i, t, eps)| {
                let p = &prepared[*i];
                let x0 = Tensor::from_vec(1, h, w, p.x0.clone());
                let e = Tensor::from_vec(1, h, w, eps.clone());
                let z = noisy_padded(&x0, *t, &e, sched, m).expect("validated shapes");
                loss_grad_padded(&params, &z, *t, &p.cond, eps, (h, w), true)
            });
            let scale = 1.0 / batch.len() as f32;
            let mut grad = vec![0.0f32; params.len()];
            let mut loss = 0.0;
            for (l, gi) in results {
                loss += l;
                grad.iter_mut().zip(gi.expect("gradient")).for_each(|(a, b)| *a += b * scale);
            }
            loss /= batch.len() as f64;
            adam.step(params.values_mut(), &grad);
            if step % cfg.log_every == 0 {
                let rec = LossRecord { step, loss };
                progress(epoch, &rec);
                losses.push(rec);
            }
            step += 1;
        }
    }
    Ok(TrainOutcome { params, normalizer, losses })
}

/// Network output on a padded input, cropped to `h×w`.
pub(crate) fn eps_hat(
    params: &ModelParams<f32>,
    z: &Tensor<f32>,
    t: usize,
    cond_padded: &Tensor<f32>,
    h: usize,
    w: usize,
) -> Tensor<f32> {
    let m = params.config().pad_multiple();
    let (out, _) = params.forward(&pad(z, m), t as f64, Some(cond_padded));
    crop(&out, h, w)
}

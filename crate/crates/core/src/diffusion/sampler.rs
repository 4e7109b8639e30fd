//! Deterministic (η = 0) strided sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::Tensor;
use super::schedule::DiffusionSchedule;
use super::train::eps_hat;
use super::unet::ModelParams;
use super::{check_planes, pad, stack};
use crate::{Error, Result};

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

/// `n_steps` timesteps spaced uniformly from `T` down to 1.
pub fn sample_timesteps(timesteps: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    if n_steps > timesteps {
        return Err(Error::invalid(format!("{n_steps} steps exceed the {timesteps} training timesteps")));
    }
    if n_steps == 1 {
        return Ok(vec![timesteps]);
    }
    let span = (timesteps - 1) as f64;
    Ok((0..n_steps).map(|k| (timesteps as f64 - span * k as f64 / (n_steps - 1) as f64).round() as usize).collect())
}

/// Runs the reverse process from seeded Gaussian noise and returns the
/// final clean estimate in normalised units.
///
/// Each step forms `x̂0 = (z − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, clips it to the data
/// range `[−1, 1]`, re-derives `ε̂` from the clipped estimate and moves to
/// `z' = √ᾱ_{t'}·x̂0 + √(1−ᾱ_{t'})·ε̂`; the last step lands on `t' = 0`.
///
/// Without the clip, errors in `ε̂` near `t = T` are amplified by
/// `1/√ᾱ_T ≈ 160` and the trajectory drifts far off the data range.
pub fn sample(
    params: &ModelParams<f32>,
    cond_la: &Tensor<f32>,
    cond_mask: &Tensor<f32>,
    sched: &DiffusionSchedule,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor<f32>> {
    let steps = sample_timesteps(sched.timesteps(), n_steps)?;
    let (h, w) = (cond_la.h, cond_la.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::from_vec(1, h, w, (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect());
    check_planes(&z, cond_la, cond_mask)?;
    let cond = pad(&stack(cond_la, cond_mask), params.config().pad_multiple());
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = eps_hat(params, &z, t, &cond, h, w);
        let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (zv, &e) in z.data.iter_mut().zip(&eps.data) {
            let x0 = ((*zv as f64 - sb * e as f64) / sa).clamp(-1.0, 1.0);
            let e = (*zv as f64 - sa * x0) / sb;
            *zv = (pa * x0 + pb * e) as f32;
        }
    }
    Ok(z)
}

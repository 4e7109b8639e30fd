//! Variance schedule and the closed-form forward noising process.

use super::scalar::Scalar;
use crate::{Error, Result};

/// Per-step variances `β_1..β_T` with `α_t = 1 − β_t` and
/// `ᾱ_t = Π_{s≤t} α_s`, `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// `β` interpolated linearly from `beta_start` (t = 1) to `beta_end`
    /// (t = T), both inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta_start, beta_end, beta, alpha_bar })
    }

    /// T = 1000, β from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid defaults")
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps() {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.timesteps())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample<T> {
    pub z_t: Vec<T>,
    pub t: usize,
    pub eps: Vec<T>,
}

/// `z_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·noise`.
pub fn q_sample<T: Scalar>(x0: &[T], t: usize, noise: &[T], sched: &DiffusionSchedule) -> Result<NoisySample<T>> {
    sched.check_t(t)?;
    if x0.len() != noise.len() {
        return Err(Error::shape(format!("{} noise values", x0.len()), noise.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
    let z_t = x0.iter().zip(noise).map(|(&x, &e)| a * x + b * e).collect();
    Ok(NoisySample { z_t, t, eps: noise.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = DiffusionSchedule::linear(1, 0.01, 0.02).unwrap();
        assert_eq!(s.beta(1), 0.01);
        assert_eq!(s.alpha_bar(1), 0.99);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn endpoints_are_inclusive() {
        let s = DiffusionSchedule::linear(5, 0.1, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.1);
        assert!((s.beta(5) - 0.5).abs() < 1e-15);
        assert!((s.beta(3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges() {
        assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = DiffusionSchedule::default_linear();
        let x0 = [0.5f64, -1.0, 0.25];
        let z = q_sample(&x0, 0, &[1.0, 2.0, 3.0], &s).unwrap();
        assert_eq!(z.z_t, x0.to_vec());
        let z = q_sample(&x0, 300, &[0.0; 3], &s).unwrap();
        let a = s.alpha_bar(300).sqrt();
        assert_eq!(z.z_t, x0.iter().map(|v| v * a).collect::<Vec<_>>());
        assert!(q_sample(&x0, 300, &[0.0; 2], &s).is_err());
        assert!(q_sample(&x0, 1001, &[0.0; 3], &s).is_err());
    }
}

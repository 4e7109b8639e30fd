//! Conditional denoising diffusion over sinograms.
//!
//! The model works in sinogram pixel space on normalised values
//! (`[0, scale] → [−1, 1]`). The condition is the normalised limited-angle
//! sinogram with missing rows zeroed plus the binary bin mask.

mod layers;
mod sampler;
mod scalar;
mod schedule;
mod train;
mod unet;

pub use layers::Tensor;
pub use sampler::{sample, sample_timesteps, DEFAULT_SAMPLING_STEPS};
pub use scalar::Scalar;
pub use schedule::{q_sample, DiffusionSchedule, NoisySample};
pub use train::{
    loss_and_gradient, noise_loss, train, train_with_progress, Adam, LossRecord, TrainConfig, TrainExample,
    TrainOutcome,
};
pub use unet::{ModelParams, ParamEntry, UnetConfig, COND_CHANNELS};

use crate::grid::{check_same_geometry, ProjectionGeometry, Sinogram};
use crate::masking::AngularMask;
use crate::{Error, Result};

/// Affine map `x ↦ 2·x/scale − 1` and its inverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    scale: f64,
}

impl Normalizer {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("normalisation scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    /// Scale at the 99.5th percentile of all values in `sinograms`.
    pub fn from_percentile<'a>(sinograms: impl IntoIterator<Item = &'a Sinogram>) -> Result<Self> {
        let mut values: Vec<f32> = sinograms.into_iter().flat_map(|s| s.data().iter().copied()).collect();
        if values.is_empty() {
            return Err(Error::invalid("cannot derive a scale from no data"));
        }
        Self::new(percentile(&mut values, 99.5))
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn normalize(&self, s: &Sinogram) -> Vec<f32> {
        s.data().iter().map(|&v| (2.0 * v as f64 / self.scale - 1.0) as f32).collect()
    }

    /// Exact inverse of [`Self::normalize`] up to rounding.
    pub fn denormalize(&self, values: &[f32], g: &ProjectionGeometry) -> Result<Sinogram> {
        let data = values.iter().map(|&v| ((v as f64 + 1.0) * 0.5 * self.scale) as f32).collect();
        Sinogram::from_vec(*g, data)
    }
}

/// Linear-interpolated percentile `q ∈ [0, 100]`; reorders `values`.
pub fn percentile(values: &mut [f32], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f32::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    values[lo] as f64 * (1.0 - f) + values[hi] as f64 * f
}

/// Two-channel network condition: normalised LA sinogram zeroed on
/// missing rows, and the bin mask.
pub fn condition(norm: &Normalizer, la: &Sinogram, mask: &AngularMask) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let g = la.geometry();
    let bins = mask.to_bin_mask(g)?;
    let la_n: Vec<f32> = norm.normalize(la).iter().zip(bins.data()).map(|(&v, &m)| v * m).collect();
    let (h, w) = (g.n_angles(), g.n_bins());
    Ok((Tensor::from_vec(1, h, w, la_n), Tensor::from_vec(1, h, w, bins.into_data())))
}

/// Network noise prediction `ε̂(z_t, t | la, mask)` on unpadded planes.
/// Inputs are zero-padded up to the network's size multiple and the output
/// is cropped back.
pub fn predict_noise<T: Scalar>(
    params: &ModelParams<T>,
    z_t: &Tensor<T>,
    t: usize,
    cond_la: &Tensor<T>,
    cond_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_planes(z_t, cond_la, cond_mask)?;
    let m = params.config().pad_multiple();
    let z = pad(z_t, m);
    let cond = pad(&stack(cond_la, cond_mask), m);
    let (out, _) = params.forward(&z, t as f64, Some(&cond));
    Ok(crop(&out, z_t.h, z_t.w))
}

/// The backbone alone, with the conditioning branch skipped.
pub fn predict_noise_unconditional<T: Scalar>(params: &ModelParams<T>, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    if z_t.c != 1 {
        return Err(Error::shape("1 channel", z_t.c));
    }
    let z = pad(z_t, params.config().pad_multiple());
    let (out, _) = params.forward(&z, t as f64, None);
    Ok(crop(&out, z_t.h, z_t.w))
}

pub(crate) fn check_planes<T: Scalar>(z: &Tensor<T>, la: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    for (name, x) in [("z_t", z), ("cond_la", la), ("cond_mask", mask)] {
        if x.c != 1 || x.h != z.h || x.w != z.w {
            return Err(Error::shape(format!("1x{}x{} {name}", z.h, z.w), format!("{}x{}x{}", x.c, x.h, x.w)));
        }
    }
    if z.h == 0 || z.w == 0 {
        return Err(Error::invalid("empty plane"));
    }
    Ok(())
}

pub(crate) fn stack<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Zero-pads bottom and right edges up to multiples of `m`.
pub(crate) fn pad<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let (h, w) = (round_up(x.h, m), round_up(x.w, m));
    if (h, w) == (x.h, x.w) {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..x.h {
            let src = &x.data[(c * x.h + y) * x.w..][..x.w];
            out.data[(c * h + y) * w..][..x.w].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            out.data[(c * h + y) * w..][..w].copy_from_slice(&x.data[(c * x.h + y) * x.w..][..w]);
        }
    }
    out
}

/// Keeps observed rows of `observed` and fills missing rows from `pred`.
pub fn merge_prediction(pred: &Sinogram, observed: &Sinogram, mask: &AngularMask) -> Result<Sinogram> {
    check_same_geometry(observed.geometry(), pred.geometry())?;
    if mask.n_angles() != observed.geometry().n_angles() {
        return Err(Error::shape(format!("mask over {} angles", observed.geometry().n_angles()), mask.n_angles()));
    }
    let mut out = observed.clone();
    for k in (0..mask.n_angles()).filter(|&k| !mask.is_observed(k)) {
        out.row_mut(k).copy_from_slice(pred.row(k));
    }
    Ok(out)
}

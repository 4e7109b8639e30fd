//! MLEM reconstruction for the Poisson model `y ~ Poisson(Ax)`.
//!
//! With a mask, missing rows are dropped from the data model entirely
//! (rows of `A` removed), rather than being treated as measured zeros.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::grid::{Image, Sinogram};
use crate::masking::AngularMask;
use crate::projector::Projector;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlemConfig {
    pub n_iterations: usize,
    pub epsilon: f64,
    pub mask: Option<AngularMask>,
}

impl Default for MlemConfig {
    fn default() -> Self {
        Self { n_iterations: 50, epsilon: 1e-9, mask: None }
    }
}

impl MlemConfig {
    pub fn new(n_iterations: usize, epsilon: f64, mask: Option<AngularMask>) -> Result<Self> {
        let cfg = Self { n_iterations, epsilon, mask };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mask(mut self, mask: Option<AngularMask>) -> Self {
        self.mask = mask;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::invalid("MLEM needs at least one iteration"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Iteration state, exposed so callers can inspect every iterate.
pub struct MlemSolver<'a> {
    projector: &'a Projector,
    y: Vec<f64>,
    mask: Option<AngularMask>,
    epsilon: f64,
    sensitivity: Vec<f64>,
    x: Vec<f64>,
    iteration: usize,
}

impl<'a> MlemSolver<'a> {
    pub fn new(projector: &'a Projector, y: &Sinogram, mask: Option<AngularMask>, epsilon: f64) -> Result<Self> {
        y.check_geometry(projector.geometry())?;
        if let Some(m) = &mask {
            projector.check_mask(m)?;
        }
        let nb = projector.geometry().n_bins();
        let observed = |i: usize| mask.is_none_or(|m| m.is_observed(i / nb));
        if let Some(i) = (0..y.data().len()).find(|&i| observed(i) && y.data()[i] < 0.0) {
            return Err(Error::invalid(format!(
                "negative measurement {} at angle {}, bin {}",
                y.data()[i],
                i / nb,
                i % nb
            )));
        }
        let ones = vec![1.0; projector.geometry().sinogram_len()];
        let sensitivity = projector.backproject_f64(&ones, mask.as_ref());
        let x = sensitivity.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(Self { projector, y: y.to_f64(), mask, epsilon, sensitivity, x, iteration: 0 })
    }

    pub fn step(&mut self) {
        let nb = self.projector.geometry().n_bins();
        let mut ratio = self.projector.forward_f64(&self.x, self.mask.as_ref());
        for (i, (r, &y)) in ratio.iter_mut().zip(&self.y).enumerate() {
            *r = if self.mask.is_none_or(|m| m.is_observed(i / nb)) { y / (*r + self.epsilon) } else { 0.0 };
        }
        let back = self.projector.backproject_f64(&ratio, self.mask.as_ref());
        for ((x, &b), &s) in self.x.iter_mut().zip(&back).zip(&self.sensitivity) {
            *x = if s > 0.0 { *x * b / s } else { 0.0 };
        }
        self.iteration += 1;
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn estimate(&self) -> &[f64] {
        &self.x
    }

    pub fn image(&self) -> Image {
        Image::from_f64(self.projector.geometry().image_size(), &self.x)
    }

    /// Poisson log-likelihood of the current iterate.
    pub fn loglikelihood(&self) -> f64 {
        poisson_loglik(self.projector, &self.y, &self.x, self.mask.as_ref(), self.epsilon)
    }
}

pub fn reconstruct(p: &Projector, y: &Sinogram, cfg: &MlemConfig) -> Result<Image> {
    cfg.validate()?;
    let mut solver = MlemSolver::new(p, y, cfg.mask, cfg.epsilon)?;
    for _ in 0..cfg.n_iterations {
        solver.step();
    }
    Ok(solver.image())
}

/// `Σ_observed [ y·ln(ŷ + ε) − ŷ ]` with `ŷ = Ax`, ε = 1e-9.
pub fn loglikelihood(p: &Projector, y: &Sinogram, x: &Image, mask: Option<&AngularMask>) -> Result<f64> {
    y.check_geometry(p.geometry())?;
    p.check_image(x)?;
    if let Some(m) = mask {
        p.check_mask(m)?;
    }
    Ok(poisson_loglik(p, &y.to_f64(), &x.to_f64(), mask, MlemConfig::default().epsilon))
}

fn poisson_loglik(p: &Projector, y: &[f64], x: &[f64], mask: Option<&AngularMask>, eps: f64) -> f64 {
    let nb = p.geometry().n_bins();
    let yhat = p.forward_f64(x, mask);
    yhat.iter()
        .zip(y)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m.is_observed(i / nb)))
        .map(|(_, (&f, &y))| y * (f + eps).ln() - f)
        .sum()
}

/// Poisson realisation of `mean`, scaled so that the bin means become
/// `counts_per_unit · mean`.
pub fn poisson_sample(mean: &Sinogram, counts_per_unit: f64, seed: u64) -> Result<Sinogram> {
    if counts_per_unit.is_nan() || counts_per_unit <= 0.0 {
        return Err(Error::invalid("counts_per_unit must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = mean
        .data()
        .iter()
        .map(|&m| {
            let lambda = m as f64 * counts_per_unit;
            if lambda <= 0.0 {
                0.0
            } else {
                Poisson::new(lambda).map(|d| d.sample(&mut rng) as f32).unwrap_or(0.0)
            }
        })
        .collect();
    Sinogram::from_vec(*mean.geometry(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ProjectionGeometry;
    use crate::metrics::psnr;
    use crate::phantom::{random_phantom, rasterize, EllipseSpec};

    fn setup() -> Projector {
        Projector::new(ProjectionGeometry::desk_default())
    }

    #[test]
    fn zero_data_gives_zero_image() {
        let p = setup();
        let y = Sinogram::zeros(*p.geometry());
        let cfg = MlemConfig { n_iterations: 1, ..Default::default() };
        let img = reconstruct(&p, &y, &cfg).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_loglik_at_zero() {
        let p = setup();
        let y = Sinogram::zeros(*p.geometry());
        let x = Image::zeros(64).unwrap();
        assert_eq!(loglikelihood(&p, &y, &x, None).unwrap(), 0.0);
    }

    #[test]
    fn masked_loglik_with_empty_mask_matches_full() {
        let p = setup();
        let x = random_phantom(5, 64).unwrap();
        let y = p.forward(&random_phantom(6, 64).unwrap()).unwrap();
        let empty = AngularMask::empty(90).unwrap();
        assert_eq!(loglikelihood(&p, &y, &x, None).unwrap(), loglikelihood(&p, &y, &x, Some(&empty)).unwrap());
    }

    #[test]
    fn psnr_improves_every_iteration_on_disk() {
        let p = setup();
        let truth = rasterize(&EllipseSpec::circle(0.1, -0.05, 0.6, 1.0).unwrap(), 64);
        let y = p.forward(&truth).unwrap();
        let mut solver = MlemSolver::new(&p, &y, None, 1e-9).unwrap();
        let mut last = f64::NEG_INFINITY;
        for it in 0..50 {
            solver.step();
            let now = psnr(solver.image().data(), truth.data()).unwrap();
            assert!(now > last, "iteration {it}: {now} <= {last}");
            last = now;
        }
    }

    #[test]
    fn counts_are_preserved() {
        let p = setup();
        let y = p.forward(&random_phantom(11, 64).unwrap()).unwrap();
        let total = y.total();
        let mut solver = MlemSolver::new(&p, &y, None, 1e-9).unwrap();
        for _ in 0..20 {
            solver.step();
            let projected: f64 = p.forward_f64(solver.estimate(), None).iter().sum();
            assert!((projected - total).abs() / total < 1e-3);
            assert!(solver.estimate().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rejects_negative_observed_bins_only() {
        let p = setup();
        let mut y = Sinogram::zeros(*p.geometry());
        y.row_mut(3).fill(-1.0);
        assert!(reconstruct(&p, &y, &MlemConfig::default()).is_err());
        let mask = AngularMask::new(90, 0, 10).unwrap();
        let cfg = MlemConfig::default().with_mask(Some(mask));
        assert!(reconstruct(&p, &y, &cfg).is_ok());
    }

    #[test]
    fn limited_angle_is_worse_than_full() {
        let p = setup();
        for seed in 0..4 {
            let truth = random_phantom(100 + seed, 64).unwrap();
            let y = p.forward(&truth).unwrap();
            let mask = AngularMask::random(seed, 90, 1.0 / 3.0).unwrap();
            let la = mask.apply(&y).unwrap();
            let full = reconstruct(&p, &y, &MlemConfig::default()).unwrap();
            let limited = reconstruct(&p, &la, &MlemConfig::default().with_mask(Some(mask))).unwrap();
            let pf = psnr(full.data(), truth.data()).unwrap();
            let pl = psnr(limited.data(), truth.data()).unwrap();
            assert!(pl < pf, "seed {seed}: LA {pl} dB vs full {pf} dB");
        }
    }

    #[test]
    fn config_validation() {
        assert!(MlemConfig::new(0, 1e-9, None).is_err());
        assert!(MlemConfig::new(5, 0.0, None).is_err());
        assert!(MlemConfig::new(5, 1e-9, None).is_ok());
    }
}

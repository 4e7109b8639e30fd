//! Discrete parallel-beam Radon transform and its exact adjoint.
//!
//! The projector is pixel-driven: every pixel centre `(x, y)` is mapped to
//! the detector coordinate `s = x·cosθ + y·sinθ` and its value is split
//! between the two nearest radial bins with linear weights. Backprojection
//! gathers with the same weights, so the pair is an exact transpose.
//! Because the two weights of each pixel sum to one, every angular row of a
//! projection carries exactly the image mass as long as the detector covers
//! the image diagonal.

use crate::grid::{check_same_geometry, Image, ProjectionGeometry, Sinogram};
use crate::masking::AngularMask;
use crate::{par, Error, Result};

#[derive(Clone, Debug)]
pub struct Projector {
    geometry: ProjectionGeometry,
    cos_sin: Vec<(f64, f64)>,
}

impl Projector {
    pub fn new(geometry: ProjectionGeometry) -> Self {
        let cos_sin = (0..geometry.n_angles())
            .map(|k| {
                let theta = geometry.angle(k);
                (theta.cos(), theta.sin())
            })
            .collect();
        Self { geometry, cos_sin }
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        self.check_image(img)?;
        let out = self.forward_f64(&img.to_f64(), None);
        Ok(Sinogram::from_f64(self.geometry, &out))
    }

    pub fn backproject(&self, sino: &Sinogram) -> Result<Image> {
        check_same_geometry(&self.geometry, sino.geometry())?;
        let out = self.backproject_f64(&sino.to_f64(), None);
        Ok(Image::from_f64(self.geometry.image_size(), &out))
    }

    /// `Aᵀ1`, or the backprojection of the observed-row indicator when a
    /// mask is given.
    pub fn sensitivity(&self, mask: Option<&AngularMask>) -> Result<Image> {
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        let ones = vec![1.0; self.geometry.sinogram_len()];
        let out = self.backproject_f64(&ones, mask);
        Ok(Image::from_f64(self.geometry.image_size(), &out))
    }

    pub(crate) fn check_image(&self, img: &Image) -> Result<()> {
        if img.size() != self.geometry.image_size() {
            return Err(Error::shape(
                format!("{0}x{0} image", self.geometry.image_size()),
                format!("{0}x{0}", img.size()),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_mask(&self, mask: &AngularMask) -> Result<()> {
        if mask.n_angles() != self.geometry.n_angles() {
            return Err(Error::shape(
                format!("mask over {} angles", self.geometry.n_angles()),
                format!("{}", mask.n_angles()),
            ));
        }
        Ok(())
    }

    /// Forward projection in f64. Rows excluded by `mask` are left at zero.
    pub(crate) fn forward_f64(&self, img: &[f64], mask: Option<&AngularMask>) -> Vec<f64> {
        let g = &self.geometry;
        let n = g.image_size();
        let nb = g.n_bins();
        debug_assert_eq!(img.len(), n * n);
        let mut out = vec![0.0; g.sinogram_len()];
        par::for_each_chunk_mut(&mut out, nb, |k, row| {
            if mask.is_some_and(|m| !m.is_observed(k)) {
                return;
            }
            let (c, s) = self.cos_sin[k];
            let half = (n as f64 - 1.0) / 2.0;
            let centre = (nb as f64 - 1.0) / 2.0;
            for i in 0..n {
                let y = i as f64 - half;
                let base = y * s + centre;
                let src = &img[i * n..(i + 1) * n];
                for (j, &v) in src.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let u = (j as f64 - half) * c + base;
                    let b0 = u.floor();
                    let f = u - b0;
                    let b0 = b0 as isize;
                    if b0 >= 0 && (b0 as usize) < nb {
                        row[b0 as usize] += (1.0 - f) * v;
                    }
                    if b0 + 1 >= 0 && ((b0 + 1) as usize) < nb {
                        row[(b0 + 1) as usize] += f * v;
                    }
                }
            }
        });
        out
    }

    /// Exact transpose of [`Self::forward_f64`]. Rows excluded by `mask`
    /// contribute nothing.
    pub(crate) fn backproject_f64(&self, sino: &[f64], mask: Option<&AngularMask>) -> Vec<f64> {
        let g = &self.geometry;
        let n = g.image_size();
        let nb = g.n_bins();
        debug_assert_eq!(sino.len(), g.sinogram_len());
        let angles: Vec<usize> = (0..g.n_angles()).filter(|&k| mask.is_none_or(|m| m.is_observed(k))).collect();
        let mut out = vec![0.0; n * n];
        par::for_each_chunk_mut(&mut out, n, |i, dst| {
            let half = (n as f64 - 1.0) / 2.0;
            let centre = (nb as f64 - 1.0) / 2.0;
            let y = i as f64 - half;
            for &k in &angles {
                let (c, s) = self.cos_sin[k];
                let row = &sino[k * nb..(k + 1) * nb];
                let base = y * s + centre;
                for (j, acc) in dst.iter_mut().enumerate() {
                    let u = (j as f64 - half) * c + base;
                    let b0 = u.floor();
                    let f = u - b0;
                    let b0 = b0 as isize;
                    let mut v = 0.0;
                    if b0 >= 0 && (b0 as usize) < nb {
                        v += (1.0 - f) * row[b0 as usize];
                    }
                    if b0 + 1 >= 0 && ((b0 + 1) as usize) < nb {
                        v += f * row[(b0 + 1) as usize];
                    }
                    *acc += v;
                }
            }
        });
        out
    }
}

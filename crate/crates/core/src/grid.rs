//! Image and sinogram value types plus the parallel-beam sampling geometry.

use std::f64::consts::PI;

use crate::{Error, Result};

/// Square 2D activity map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: f32) -> Result<Self> {
        check_square(width, height)?;
        Ok(Self { size: width, data: vec![fill; width * height] })
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Self::new(size, size, 0.0)
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_square(width, height)?;
        if data.len() != width * height {
            return Err(Error::shape(
                format!("{} pixels ({width}x{height})", width * height),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { size: width, data })
    }

    pub(crate) fn from_f64(size: usize, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), size * size);
        Self { size, data: data.iter().map(|&v| v as f32).collect() }
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    /// Pixels per side.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

fn check_square(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("zero image dimension {width}x{height}")));
    }
    if width != height {
        return Err(Error::invalid(format!("image must be square, got {width}x{height}")));
    }
    Ok(())
}

/// Parallel-beam sampling: `n_angles` uniform angles over `[0, π)` and
/// `n_bins` unit-spaced radial bins centred on the image centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProjectionGeometry {
    n_angles: usize,
    n_bins: usize,
    image_size: usize,
}

impl ProjectionGeometry {
    /// Radial bin spacing in pixels.
    pub const BIN_SPACING: f64 = 1.0;

    pub fn new(n_angles: usize, n_bins: usize, image_size: usize) -> Result<Self> {
        if n_angles == 0 || n_bins == 0 || image_size == 0 {
            return Err(Error::invalid(format!(
                "geometry dimensions must be positive (angles={n_angles}, bins={n_bins}, size={image_size})"
            )));
        }
        if n_bins < image_size {
            return Err(Error::invalid(format!("n_bins ({n_bins}) must be at least the image size ({image_size})")));
        }
        Ok(Self { n_angles, n_bins, image_size })
    }

    /// 64x64 images, 90 angles, 95 bins.
    pub fn desk_default() -> Self {
        Self { n_angles: 90, n_bins: 95, image_size: 64 }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Angle of row `k` in radians, `k·π/n_angles`.
    pub fn angle(&self, k: usize) -> f64 {
        k as f64 * PI / self.n_angles as f64
    }

    /// Signed radial offset (pixels) of bin `b` from the rotation centre.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.n_bins as f64 - 1.0) / 2.0) * Self::BIN_SPACING
    }

    pub fn sinogram_len(&self) -> usize {
        self.n_angles * self.n_bins
    }
}

/// Angle-major array of line integrals.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    geometry: ProjectionGeometry,
    data: Vec<f32>,
}

impl Sinogram {
    pub fn zeros(geometry: ProjectionGeometry) -> Self {
        Self::filled(geometry, 0.0)
    }

    pub fn filled(geometry: ProjectionGeometry, value: f32) -> Self {
        Self { geometry, data: vec![value; geometry.sinogram_len()] }
    }

    pub fn from_vec(geometry: ProjectionGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.sinogram_len() {
            return Err(Error::shape(
                format!("{}x{} sinogram", geometry.n_angles(), geometry.n_bins()),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sinogram value at index {i}")));
        }
        Ok(Self { geometry, data })
    }

    pub(crate) fn from_f64(geometry: ProjectionGeometry, data: &[f64]) -> Self {
        debug_assert_eq!(data.len(), geometry.sinogram_len());
        Self { geometry, data: data.iter().map(|&v| v as f32).collect() }
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, angle: usize) -> &[f32] {
        let nb = self.geometry.n_bins();
        &self.data[angle * nb..(angle + 1) * nb]
    }

    pub fn row_mut(&mut self, angle: usize) -> &mut [f32] {
        let nb = self.geometry.n_bins();
        &mut self.data[angle * nb..(angle + 1) * nb]
    }

    /// Sum of all bins, accumulated in f64.
    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub(crate) fn check_geometry(&self, expected: &ProjectionGeometry) -> Result<()> {
        check_same_geometry(expected, &self.geometry)
    }
}

pub(crate) fn check_same_geometry(expected: &ProjectionGeometry, got: &ProjectionGeometry) -> Result<()> {
    if expected.n_angles() != got.n_angles() || expected.n_bins() != got.n_bins() {
        return Err(Error::shape(
            format!("{}x{} sinogram", expected.n_angles(), expected.n_bins()),
            format!("{}x{}", got.n_angles(), got.n_bins()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_image_fills() {
        let img = Image::new(4, 4, 0.0).unwrap();
        assert_eq!(img.data(), &[0.0; 16]);
        let ones = Image::new(64, 64, 1.0).unwrap();
        assert_eq!(ones.sum(), 4096.0);
    }

    #[test]
    fn rejects_non_square_and_empty() {
        assert!(Image::new(4, 3, 0.0).is_err());
        assert!(Image::new(0, 0, 0.0).is_err());
        assert!(Image::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn geometry_angles_are_half_open() {
        let g = ProjectionGeometry::new(4, 5, 5).unwrap();
        assert_eq!(g.angle(0), 0.0);
        assert_eq!(g.angle(2), PI / 2.0);
        assert!(g.angle(3) < PI);
        assert_eq!(g.bin_offset(0), -2.0);
        assert_eq!(g.bin_offset(2), 0.0);
        assert!(ProjectionGeometry::new(4, 3, 5).is_err());
    }

    #[test]
    fn sinogram_total() {
        let g = ProjectionGeometry::new(90, 64, 64).unwrap();
        assert_eq!(Sinogram::zeros(g).total(), 0.0);
        let mut s = Sinogram::zeros(g);
        s.data_mut()[17] = 2.5;
        assert_eq!(s.total(), 2.5);
        assert_eq!(Sinogram::filled(g, 1.0).total(), 5760.0);
    }

    #[test]
    fn sinogram_rejects_bad_data() {
        let g = ProjectionGeometry::new(2, 3, 3).unwrap();
        assert!(Sinogram::from_vec(g, vec![0.0; 5]).is_err());
        assert!(Sinogram::from_vec(g, vec![0.0, 1.0, f32::NAN, 0.0, 0.0, 0.0]).is_err());
    }
}

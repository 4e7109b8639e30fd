//! Random ellipse phantoms used as stand-ins for PET activity slices.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::Image;
use crate::{Error, Result};

/// Support radius of generated phantoms, in normalised coordinates.
pub const SUPPORT_RADIUS: f64 = 0.95;

/// Ellipse in normalised coordinates: `[-1, 1]` spans the grid width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseSpec {
    pub center_x: f64,
    pub center_y: f64,
    pub a: f64,
    pub b: f64,
    pub rotation: f64,
    pub intensity: f64,
}

impl EllipseSpec {
    pub fn new(center_x: f64, center_y: f64, a: f64, b: f64, rotation: f64, intensity: f64) -> Result<Self> {
        if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
            return Err(Error::invalid(format!("semi-axes must lie in (0, 1], got a={a}, b={b}")));
        }
        Ok(Self { center_x, center_y, a, b, rotation, intensity })
    }

    pub fn circle(center_x: f64, center_y: f64, radius: f64, intensity: f64) -> Result<Self> {
        Self::new(center_x, center_y, radius, radius, 0.0, intensity)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - self.center_x, v - self.center_y);
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let p = (dx * c + dy * s) / self.a;
        let q = (-dx * s + dy * c) / self.b;
        p * p + q * q <= 1.0
    }
}

/// Normalised coordinate of pixel centre `index` on a `size` grid.
fn pixel_coord(index: usize, size: usize) -> f64 {
    (2.0 * index as f64 + 1.0 - size as f64) / size as f64
}

fn add_ellipse(e: &EllipseSpec, size: usize, data: &mut [f64]) {
    for i in 0..size {
        let v = pixel_coord(i, size);
        for j in 0..size {
            if e.contains(pixel_coord(j, size), v) {
                data[i * size + j] += e.intensity;
            }
        }
    }
}

/// Pixels whose centre lies inside `e` take `e.intensity`; the rest are 0.
pub fn rasterize(e: &EllipseSpec, size: usize) -> Image {
    let mut data = vec![0.0; size * size];
    add_ellipse(e, size, &mut data);
    Image::from_f64(size, &data)
}

fn random_ellipse(rng: &mut ChaCha8Rng, axes: (f64, f64), max_centre: f64, intensity: (f64, f64)) -> EllipseSpec {
    let a = rng.random_range(axes.0..=axes.1);
    let b = rng.random_range(axes.0..=axes.1);
    // Keep the whole ellipse inside the support disk.
    let reach = (SUPPORT_RADIUS - a.max(b)).clamp(0.0, max_centre);
    let r = reach * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    EllipseSpec {
        center_x: r * phi.cos(),
        center_y: r * phi.sin(),
        a,
        b,
        rotation: rng.random_range(0.0..PI),
        intensity: rng.random_range(intensity.0..=intensity.1),
    }
}

/// Deterministic phantom for `seed`: a large body ellipse plus 2–7 inner
/// hot or cold ellipses, clipped to be non-negative, zero outside the
/// support disk and scaled to a maximum of 1.
pub fn random_phantom(seed: u64, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(Error::invalid("phantom size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(3..=8);
    let body = random_ellipse(&mut rng, (0.55, 0.85), 0.1, (0.4, 1.0));
    let mut data = vec![0.0; size * size];
    add_ellipse(&body, size, &mut data);
    for _ in 1..count {
        let e = random_ellipse(&mut rng, (0.05, 0.35), 0.9, (-0.4, 1.0));
        add_ellipse(&e, size, &mut data);
    }
    for i in 0..size {
        let v = pixel_coord(i, size);
        for j in 0..size {
            let u = pixel_coord(j, size);
            let px = &mut data[i * size + j];
            if u * u + v * v > SUPPORT_RADIUS * SUPPORT_RADIUS || *px < 0.0 {
                *px = 0.0;
            }
        }
    }
    let mut max = data.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        // Inner ellipses cancelled the body everywhere; fall back to the body.
        data.fill(0.0);
        add_ellipse(&EllipseSpec { intensity: 1.0, ..body }, size, &mut data);
        max = 1.0;
    }
    data.iter_mut().for_each(|v| *v /= max);
    Ok(Image::from_f64(size, &data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_circle_area() {
        let img = rasterize(&EllipseSpec::circle(0.0, 0.0, 1.0, 1.0).unwrap(), 64);
        let count = img.data().iter().filter(|&&v| v == 1.0).count() as f64;
        let area = PI * 32.0 * 32.0;
        assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
    }

    #[test]
    fn zero_intensity_and_rotation_symmetry() {
        let zero = rasterize(&EllipseSpec::new(0.1, -0.2, 0.5, 0.3, 0.4, 0.0).unwrap(), 32);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let e = EllipseSpec::new(0.1, -0.2, 0.5, 0.3, 0.0, 1.0).unwrap();
        let turned = EllipseSpec { rotation: PI, ..e };
        assert_eq!(rasterize(&e, 48), rasterize(&turned, 48));
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(EllipseSpec::new(0.0, 0.0, 0.0, 0.5, 0.0, 1.0).is_err());
        assert!(EllipseSpec::new(0.0, 0.0, 0.5, 1.2, 0.0, 1.0).is_err());
        assert!(random_phantom(0, 0).is_err());
    }

    #[test]
    fn phantoms_are_deterministic_and_supported() {
        for seed in 0..40 {
            let img = random_phantom(seed, 64).unwrap();
            assert_eq!(img, random_phantom(seed, 64).unwrap());
            let max = img.data().iter().cloned().fold(f32::MIN, f32::max);
            let min = img.data().iter().cloned().fold(f32::MAX, f32::min);
            assert!(min >= 0.0);
            assert_eq!(max, 1.0);
            for i in 0..64 {
                for j in 0..64 {
                    let (u, v) = (pixel_coord(j, 64), pixel_coord(i, 64));
                    if u * u + v * v > 1.0 {
                        assert_eq!(img.get(i, j), 0.0);
                    }
                }
            }
        }
        assert_ne!(random_phantom(1, 64).unwrap(), random_phantom(2, 64).unwrap());
    }
}

//! Limited-angle acquisition: a contiguous (cyclic) wedge of missing angles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{check_same_geometry, ProjectionGeometry, Sinogram};
use crate::{Error, Result};

/// Missing angles are `missing_start, …, missing_start + missing_len − 1`
/// taken modulo `n_angles`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AngularMask {
    n_angles: usize,
    missing_start: usize,
    missing_len: usize,
}

impl AngularMask {
    pub fn new(n_angles: usize, missing_start: usize, missing_len: usize) -> Result<Self> {
        if n_angles == 0 {
            return Err(Error::invalid("mask needs at least one angle"));
        }
        if missing_start >= n_angles {
            return Err(Error::invalid(format!("missing_start {missing_start} out of range 0..{n_angles}")));
        }
        if missing_len > n_angles {
            return Err(Error::invalid(format!("missing_len {missing_len} exceeds {n_angles} angles")));
        }
        Ok(Self { n_angles, missing_start, missing_len })
    }

    /// Nothing missing.
    pub fn empty(n_angles: usize) -> Result<Self> {
        Self::new(n_angles, 0, 0)
    }

    /// Wedge of `round(missing_fraction · n_angles)` angles starting at a
    /// seeded uniform position.
    pub fn random(seed: u64, n_angles: usize, missing_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&missing_fraction) {
            return Err(Error::invalid(format!("missing fraction {missing_fraction} outside [0, 1]")));
        }
        if n_angles == 0 {
            return Err(Error::invalid("mask needs at least one angle"));
        }
        let missing_len = (missing_fraction * n_angles as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let missing_start = rng.random_range(0..n_angles);
        Self::new(n_angles, missing_start, missing_len)
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn missing_start(&self) -> usize {
        self.missing_start
    }

    pub fn missing_len(&self) -> usize {
        self.missing_len
    }

    pub fn n_observed(&self) -> usize {
        self.n_angles - self.missing_len
    }

    pub fn is_observed(&self, k: usize) -> bool {
        debug_assert!(k < self.n_angles);
        let offset = (k + self.n_angles - self.missing_start) % self.n_angles;
        offset >= self.missing_len
    }

    /// Copy of `s` with missing rows zeroed; observed rows are copied as is.
    pub fn apply(&self, s: &Sinogram) -> Result<Sinogram> {
        self.check(s.geometry())?;
        let mut out = s.clone();
        for k in 0..self.n_angles {
            if !self.is_observed(k) {
                out.row_mut(k).fill(0.0);
            }
        }
        Ok(out)
    }

    /// Sinogram-shaped indicator, 1 on observed bins and 0 on missing ones.
    pub fn to_bin_mask(&self, g: &ProjectionGeometry) -> Result<Sinogram> {
        self.check(g)?;
        let mut out = Sinogram::filled(*g, 1.0);
        for k in 0..self.n_angles {
            if !self.is_observed(k) {
                out.row_mut(k).fill(0.0);
            }
        }
        Ok(out)
    }

    fn check(&self, g: &ProjectionGeometry) -> Result<()> {
        if g.n_angles() != self.n_angles {
            let expected = ProjectionGeometry::new(self.n_angles, g.n_bins(), g.image_size())?;
            return check_same_geometry(&expected, g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(g: ProjectionGeometry) -> Sinogram {
        let data = (0..g.sinogram_len()).map(|i| i as f32 * 0.25 + 1.0).collect();
        Sinogram::from_vec(g, data).unwrap()
    }

    #[test]
    fn third_of_ninety_is_thirty() {
        for seed in 0..50 {
            let m = AngularMask::random(seed, 90, 1.0 / 3.0).unwrap();
            assert_eq!(m.missing_len(), 30);
            assert_eq!(AngularMask::random(seed, 90, 0.3333).unwrap().missing_len(), 30);
        }
        let m = AngularMask::random(1, 90, 0.0).unwrap();
        assert_eq!(m.missing_len(), 0);
        assert!((0..90).all(|k| m.is_observed(k)));
    }

    #[test]
    fn every_start_is_reachable() {
        let mut seen = [false; 90];
        for seed in 0..1000 {
            seen[AngularMask::random(seed, 90, 1.0 / 3.0).unwrap().missing_start()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(AngularMask::random(0, 90, -0.1).is_err());
        assert!(AngularMask::random(0, 90, 1.5).is_err());
        assert!(AngularMask::new(90, 90, 0).is_err());
        assert!(AngularMask::new(90, 0, 91).is_err());
    }

    #[test]
    fn apply_wraps_around() {
        let g = ProjectionGeometry::new(90, 8, 8).unwrap();
        let s = ramp(g);
        let out = AngularMask::new(90, 80, 30).unwrap().apply(&s).unwrap();
        for k in 0..90 {
            let missing = !(20..80).contains(&k);
            if missing {
                assert!(out.row(k).iter().all(|&v| v == 0.0), "row {k}");
            } else {
                assert_eq!(out.row(k), s.row(k));
            }
        }
    }

    #[test]
    fn empty_and_full_masks() {
        let g = ProjectionGeometry::new(12, 8, 8).unwrap();
        let s = ramp(g);
        assert_eq!(AngularMask::empty(12).unwrap().apply(&s).unwrap(), s);
        let full = AngularMask::new(12, 5, 12).unwrap();
        assert_eq!(full.apply(&s).unwrap().total(), 0.0);
        assert!(AngularMask::empty(12).unwrap().to_bin_mask(&g).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(full.to_bin_mask(&g).unwrap().data().iter().all(|&v| v == 0.0));
        let other = ProjectionGeometry::new(13, 8, 8).unwrap();
        assert!(full.apply(&Sinogram::zeros(other)).is_err());
        assert!(full.to_bin_mask(&other).is_err());
    }

    proptest! {
        #[test]
        fn apply_is_idempotent_and_preserves_observed(start in 0usize..40, len in 0usize..=40) {
            let g = ProjectionGeometry::new(40, 6, 6).unwrap();
            let m = AngularMask::new(40, start, len).unwrap();
            let s = ramp(g);
            let once = m.apply(&s).unwrap();
            let twice = m.apply(&once).unwrap();
            prop_assert_eq!(&once, &twice);
            for k in (0..40).filter(|&k| m.is_observed(k)) {
                prop_assert_eq!(once.row(k), s.row(k));
            }
            let indicator = m.to_bin_mask(&g).unwrap();
            prop_assert_eq!(indicator.total(), (m.n_observed() * 6) as f64);
            prop_assert_eq!((0..40).filter(|&k| !m.is_observed(k)).count(), len);
        }
    }
}

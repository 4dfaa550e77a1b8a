//! Binary notch masks that zero a `P x P` grid of DFT bins.
//!
//! Construction order: grid zeros, disk dilation on the torus, Hermitian
//! symmetrization, then restoration of the DC neighbourhood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Plane;
use crate::spectral::{mirror, ChannelSpectrum, Complex64};

/// Radius (in bins) used for both dilation and DC guard at the 1024-pixel reference size.
pub const REFERENCE_RADIUS: f64 = 3.0;
pub const REFERENCE_SIDE: f64 = 1024.0;

/// `REFERENCE_RADIUS` scaled to the image size, never below one bin.
pub fn default_radius(height: usize, width: usize) -> f64 {
    (REFERENCE_RADIUS * height.min(width) as f64 / REFERENCE_SIDE).max(1.0)
}

/// Bins `round_half_up(n * extent / period) mod extent` for `n = 0..period`,
/// sorted and de-duplicated.
pub fn grid_bins(extent: usize, period: usize) -> Vec<usize> {
    if extent == 0 || period == 0 {
        return Vec::new();
    }
    let mut bins: Vec<usize> = (0..period)
        .map(|n| ((2 * n * extent + period) / (2 * period)) % extent)
        .collect();
    bins.sort_unstable();
    bins.dedup();
    bins
}

/// Bin on an axis of length `extent` for grid index `n` (same rounding as [`grid_bins`]).
pub fn grid_bin(extent: usize, period: usize, n: usize) -> usize {
    ((2 * n * extent + period) / (2 * period)) % extent
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub period: usize,
    pub dilation_radius: f64,
    pub dc_guard_radius: f64,
}

impl GridSpec {
    pub fn new(period: usize, dilation_radius: f64, dc_guard_radius: f64) -> Self {
        Self {
            period,
            dilation_radius,
            dc_guard_radius,
        }
    }

    /// Both radii at [`default_radius`] for the given image size.
    pub fn with_defaults(period: usize, height: usize, width: usize) -> Self {
        let r = default_radius(height, width);
        Self::new(period, r, r)
    }

    /// Checks the parameter ranges that do not depend on the image size.
    pub fn validate_params(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::InvalidParameter("period must be ≥ 2".into()));
        }
        for (name, v) in [
            ("dilation radius", self.dilation_radius),
            ("dc guard radius", self.dc_guard_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.validate_params()?;
        let side = height.min(width);
        if self.period * 2 > side {
            return Err(Error::ImageTooSmall {
                height,
                width,
                min: 2 * self.period,
            });
        }
        let max_radius = side as f64 / (2 * self.period) as f64;
        if self.dilation_radius > max_radius {
            return Err(Error::InvalidParameter(format!(
                "dilation radius {} exceeds {max_radius} for period {} on a {height}x{width} spectrum",
                self.dilation_radius, self.period
            )));
        }
        Ok(())
    }
}

/// A period with optional radius overrides; unset radii scale with image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub period: usize,
    pub dilation_radius: Option<f64>,
    pub dc_guard_radius: Option<f64>,
}

impl GridConfig {
    pub fn new(period: usize) -> Self {
        Self {
            period,
            dilation_radius: None,
            dc_guard_radius: None,
        }
    }

    pub fn resolve(&self, height: usize, width: usize) -> GridSpec {
        let r = default_radius(height, width);
        GridSpec::new(
            self.period,
            self.dilation_radius.unwrap_or(r),
            self.dc_guard_radius.unwrap_or(r),
        )
    }
}

/// `true` keeps a coefficient, `false` zeroes it.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakMask {
    bits: Plane<bool>,
}

impl PeakMask {
    pub fn from_bits(bits: Plane<bool>) -> Self {
        Self { bits }
    }

    pub fn all_ones(height: usize, width: usize) -> Self {
        Self::from_bits(Plane::filled(height, width, true))
    }

    pub fn bits(&self) -> &Plane<bool> {
        &self.bits
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bits.dims()
    }

    pub fn keeps(&self, k1: usize, k2: usize) -> bool {
        self.bits[(k1, k2)]
    }

    pub fn zero_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Unshifted `(k1, k2)` of every zeroed bin, row-major.
    pub fn zeroed_bins(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.dims();
        (0..h)
            .flat_map(|k1| (0..w).map(move |k2| (k1, k2)))
            .filter(|&(k1, k2)| !self.bits[(k1, k2)])
            .collect()
    }

    pub fn is_hermitian(&self) -> bool {
        let (h, w) = self.dims();
        (0..h).all(|k1| {
            (0..w).all(|k2| self.bits[(k1, k2)] == self.bits[(mirror(k1, h), mirror(k2, w))])
        })
    }
}

fn torus_distance_sq(k1: usize, k2: usize, h: usize, w: usize) -> f64 {
    let d1 = k1.min(h - k1) as f64;
    let d2 = k2.min(w - k2) as f64;
    d1 * d1 + d2 * d2
}

fn disk_offsets(radius: f64) -> Vec<(isize, isize)> {
    let reach = radius.floor() as isize;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            if (dy * dy + dx * dx) as f64 <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Zero set after grid placement and dilation, before symmetrization and the
/// DC guard. `true` marks a zeroed bin.
fn dilated_zero_set(height: usize, width: usize, spec: &GridSpec) -> Plane<bool> {
    let mut zeros = Plane::filled(height, width, false);
    let rows = grid_bins(height, spec.period);
    let cols = grid_bins(width, spec.period);
    let offsets = disk_offsets(spec.dilation_radius);
    let (h, w) = (height as isize, width as isize);
    for &r in &rows {
        for &c in &cols {
            for &(dy, dx) in &offsets {
                let y = (r as isize + dy).rem_euclid(h) as usize;
                let x = (c as isize + dx).rem_euclid(w) as usize;
                zeros[(y, x)] = true;
            }
        }
    }
    zeros
}

pub fn build_grid_mask(height: usize, width: usize, spec: &GridSpec) -> Result<PeakMask> {
    spec.validate(height, width)?;
    let zeros = dilated_zero_set(height, width, spec);
    let guard2 = spec.dc_guard_radius * spec.dc_guard_radius;
    let bits = Plane::from_fn(height, width, |k1, k2| {
        if torus_distance_sq(k1, k2, height, width) <= guard2 {
            return true;
        }
        !(zeros[(k1, k2)] || zeros[(mirror(k1, height), mirror(k2, width))])
    });
    Ok(PeakMask { bits })
}

fn check_dims(spectrum: &ChannelSpectrum, mask: &PeakMask) -> Result<()> {
    if spectrum.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: mask.dims(),
            found: spectrum.dims(),
            index: None,
        });
    }
    Ok(())
}

/// Coefficient-wise product of the spectrum with the mask. Zeroed bins lose
/// magnitude and phase together.
pub fn apply_mask(spectrum: &ChannelSpectrum, mask: &PeakMask) -> Result<ChannelSpectrum> {
    check_dims(spectrum, mask)?;
    let zero = Complex64::new(0.0, 0.0);
    let (h, w) = spectrum.dims();
    let data: Vec<Complex64> = spectrum
        .coeffs()
        .iter()
        .zip(mask.bits.iter())
        .map(|(&c, &keep)| if keep { c } else { zero })
        .collect();
    Ok(ChannelSpectrum::new(Plane::from_vec(h, w, data)?))
}

/// Energy `sum |X|^2` over the bins the mask zeroes.
pub fn masked_energy(spectrum: &ChannelSpectrum, mask: &PeakMask) -> Result<f64> {
    check_dims(spectrum, mask)?;
    Ok(spectrum
        .coeffs()
        .iter()
        .zip(mask.bits.iter())
        .filter(|(_, &keep)| !keep)
        .map(|(c, _)| c.norm_sqr())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dft_forward, dft_inverse};
    use proptest::prelude::*;

    #[test]
    fn grid_bins_examples() {
        assert_eq!(grid_bins(16, 8), vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(grid_bins(8, 8), (0..8).collect::<Vec<_>>());
        // n * 12 / 8 = 0, 1.5, 3, 4.5, 6, 7.5, 9, 10.5 rounded half up
        assert_eq!(grid_bins(12, 8), vec![0, 2, 3, 5, 6, 8, 9, 11]);
        assert_eq!(grid_bin(12, 8, 3), 5);
    }

    #[test]
    fn plain_grid_has_63_zeros() {
        let m = build_grid_mask(16, 16, &GridSpec::new(8, 0.0, 0.0)).unwrap();
        assert_eq!(m.zero_count(), 63);
        assert!(m.keeps(0, 0));
        for k1 in 0..16 {
            for k2 in 0..16 {
                let on_grid = k1 % 2 == 0 && k2 % 2 == 0 && (k1, k2) != (0, 0);
                assert_eq!(m.keeps(k1, k2), !on_grid);
            }
        }
    }

    #[test]
    fn unit_dilation_grows_plus_shapes() {
        let m = build_grid_mask(16, 16, &GridSpec::new(8, 1.0, 0.0)).unwrap();
        let offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
        let mut expected = Plane::filled(16, 16, true);
        for r in (0..16).step_by(2) {
            for c in (0..16).step_by(2) {
                for (dy, dx) in offsets {
                    expected[(((r + 16 + dy) % 16) as usize, ((c + 16 + dx) % 16) as usize)] =
                        false;
                }
            }
        }
        expected[(0, 0)] = true;
        assert_eq!(m.bits(), &expected);
        // only (odd, odd) bins and DC survive
        assert_eq!(m.zero_count(), 256 - 64 - 1);
    }

    #[test]
    fn dc_guard_restores_near_bins() {
        let m = build_grid_mask(16, 16, &GridSpec::new(8, 0.0, 2.0)).unwrap();
        assert_eq!(m.zero_count(), 59);
        for bin in [(0, 2), (2, 0), (0, 14), (14, 0), (0, 0)] {
            assert!(m.keeps(bin.0, bin.1), "{bin:?}");
        }
        assert!(!m.keeps(2, 2));
    }

    #[test]
    fn rejects_bad_specs() {
        let err = build_grid_mask(16, 16, &GridSpec::new(1, 0.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("period must be ≥ 2"));
        assert!(build_grid_mask(16, 16, &GridSpec::new(16, 0.0, 0.0)).is_err());
        assert!(build_grid_mask(16, 16, &GridSpec::new(8, 1.5, 0.0)).is_err());
        assert!(build_grid_mask(16, 16, &GridSpec::new(8, -1.0, 0.0)).is_err());
        assert!(build_grid_mask(16, 16, &GridSpec::new(8, 0.0, f64::NAN)).is_err());
    }

    #[test]
    fn default_radius_scales_and_floors() {
        assert_eq!(default_radius(1024, 2048), 3.0);
        assert_eq!(default_radius(512, 512), 1.5);
        assert_eq!(default_radius(64, 64), 1.0);
    }

    #[test]
    fn identity_and_dimension_checks() {
        let x = Plane::from_fn(16, 16, |r, c| (r * 3 + c * c) as f64);
        let s = dft_forward(&x);
        assert_eq!(apply_mask(&s, &PeakMask::all_ones(16, 16)).unwrap(), s);
        assert!(apply_mask(&s, &PeakMask::all_ones(16, 8)).is_err());

        let constant = dft_forward(&Plane::filled(16, 16, 9.0));
        let mut dc_only = Plane::filled(16, 16, false);
        dc_only[(0, 0)] = true;
        let out = apply_mask(&constant, &PeakMask::from_bits(dc_only)).unwrap();
        for (a, b) in out.coeffs().iter().zip(constant.coeffs().iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    fn noise_plane(h: usize, w: usize, seed: u64) -> Plane<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random_range(0.0..255.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mask_invariants(
            h in 16usize..48, w in 16usize..48, period in 2usize..9,
            r in 0.0f64..4.0, guard in 0.0f64..4.0, seed in any::<u64>(),
        ) {
            let spec = GridSpec::new(period, r, guard);
            prop_assume!(spec.validate(h, w).is_ok());
            let m = build_grid_mask(h, w, &spec).unwrap();
            prop_assert!(m.keeps(0, 0));
            prop_assert!(m.is_hermitian());

            let x = noise_plane(h, w, seed);
            let s = dft_forward(&x);
            let once = apply_mask(&s, &m).unwrap();
            prop_assert_eq!(&apply_mask(&once, &m).unwrap(), &once);

            let removed = masked_energy(&s, &m).unwrap();
            let expect = s.energy() - removed;
            prop_assert!((once.energy() - expect).abs() <= 1e-9 * s.energy());

            let (_, imag) = dft_inverse(&once);
            prop_assert!(imag < 1e-9 * s.max_magnitude());
        }

        #[test]
        fn plain_grid_zero_count(h in 16usize..40, w in 16usize..40, period in 2usize..9) {
            let spec = GridSpec::new(period, 0.0, 0.0);
            prop_assume!(spec.validate(h, w).is_ok());
            let m = build_grid_mask(h, w, &spec).unwrap();
            let grid = grid_bins(h, period).len() * grid_bins(w, period).len();
            prop_assert!(m.zero_count() + 1 >= grid);
        }

        #[test]
        fn dilation_is_monotone(h in 16usize..40, w in 16usize..40, period in 2usize..5,
                                r in 0.0f64..3.0, dr in 0.0f64..2.0) {
            let small = dilated_zero_set(h, w, &GridSpec::new(period, r, 0.0));
            let large = dilated_zero_set(h, w, &GridSpec::new(period, r + dr, 0.0));
            for (a, b) in small.iter().zip(large.iter()) {
                prop_assert!(!*a || *b);
            }
        }
    }
}

//! 2D DFT, log-magnitude rendering and dataset-level spectrum averaging.
//!
//! Forward transforms are unnormalized (bin `(0, 0)` holds the sum of all
//! samples); the inverse carries the `1 / (H * W)` factor.

use std::cell::RefCell;

use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64;

use crate::detector::{residual_plane, LogKernel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::raster::{Plane, RasterImage};

pub const DEFAULT_LOG_FLOOR: f64 = 1e-12;

/// Images whose per-image spectra are held in memory at once while averaging.
const AVERAGE_CHUNK: usize = 8;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Conjugate-mirror index of bin `k` on an axis of length `n`.
#[inline]
pub fn mirror(k: usize, n: usize) -> usize {
    (n - k) % n
}

/// Complex DFT coefficients of one channel in unshifted layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpectrum {
    coeffs: Plane<Complex64>,
}

impl ChannelSpectrum {
    pub fn new(coeffs: Plane<Complex64>) -> Self {
        Self { coeffs }
    }

    pub fn height(&self) -> usize {
        self.coeffs.height()
    }

    pub fn width(&self) -> usize {
        self.coeffs.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.coeffs.dims()
    }

    pub fn coeffs(&self) -> &Plane<Complex64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Plane<Complex64> {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Plane<Complex64> {
        self.coeffs
    }

    pub fn get(&self, k1: usize, k2: usize) -> Complex64 {
        self.coeffs[(k1, k2)]
    }

    /// Sum of squared coefficient magnitudes.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

/// Real-valued, log-scaled spectrum with DC moved to `(H / 2, W / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumImage {
    values: Plane<f64>,
}

impl SpectrumImage {
    pub fn values(&self) -> &Plane<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    /// Position in the shifted image of unshifted bin `(k1, k2)`.
    pub fn shifted_position(&self, k1: usize, k2: usize) -> (usize, usize) {
        let (h, w) = self.values.dims();
        ((k1 + h / 2) % h, (k2 + w / 2) % w)
    }

    /// Min-max stretch to 8-bit grayscale; a flat image maps to 0.
    pub fn to_gray8(&self) -> Plane<u8> {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        self.values.map(|&v| {
            if span > 0.0 {
                crate::raster::quantize((v - lo) / span * 255.0)
            } else {
                0
            }
        })
    }
}

fn transpose(src: &[Complex64], h: usize, w: usize, dst: &mut [Complex64]) {
    for r in 0..h {
        for c in 0..w {
            dst[c * h + r] = src[r * w + c];
        }
    }
}

fn fft2_in_place(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (rows, cols) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        rows.process(data);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        transpose(data, h, w, &mut t);
        cols.process(&mut t);
        transpose(&t, w, h, data);
    });
}

/// Unnormalized forward 2D DFT of a real channel.
pub fn dft_forward(channel: &Plane<f64>) -> ChannelSpectrum {
    let (h, w) = channel.dims();
    let mut data: Vec<Complex64> = channel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if h > 0 && w > 0 {
        fft2_in_place(&mut data, h, w, false);
    }
    ChannelSpectrum::new(Plane::from_vec(h, w, data).expect("same dims"))
}

/// Inverse 2D DFT. Returns the real part and the largest absolute imaginary residue.
pub fn dft_inverse(spectrum: &ChannelSpectrum) -> (Plane<f64>, f64) {
    let (h, w) = spectrum.dims();
    let mut data = spectrum.coeffs().as_slice().to_vec();
    if h > 0 && w > 0 {
        fft2_in_place(&mut data, h, w, true);
    }
    let scale = 1.0 / (h * w) as f64;
    let mut max_imag = 0.0f64;
    let real = data
        .iter()
        .map(|c| {
            max_imag = max_imag.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    (Plane::from_vec(h, w, real).expect("same dims"), max_imag)
}

/// Moves bin `(0, 0)` to `(H / 2, W / 2)`.
pub fn shift_to_center<T: Clone>(plane: &Plane<T>) -> Plane<T> {
    let (h, w) = plane.dims();
    Plane::from_fn(h, w, |r, c| {
        plane[((r + h - h / 2) % h, (c + w - w / 2) % w)].clone()
    })
}

fn check_floor(floor: f64) -> Result<()> {
    if floor > 0.0 && floor.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "log floor must be positive and finite, got {floor}"
        )))
    }
}

fn log_render(linear: &Plane<f64>, floor: f64) -> SpectrumImage {
    SpectrumImage {
        values: shift_to_center(&linear.map(|&v| v.max(floor).log10())),
    }
}

/// `log10(max(|coeff|, floor))`, DC-centered.
pub fn log_magnitude(spectrum: &ChannelSpectrum, floor: f64) -> Result<SpectrumImage> {
    check_floor(floor)?;
    Ok(log_render(&spectrum.coeffs().map(|c| c.norm()), floor))
}

/// What is averaged across images before the log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectrumStatistic {
    /// `|X|^2`
    #[default]
    Power,
    /// `|X|`
    Magnitude,
}

#[derive(Clone, Debug)]
pub struct AverageOptions {
    /// Transform the LoG residual instead of the pixels.
    pub residual: Option<LogKernel>,
    pub statistic: SpectrumStatistic,
    pub floor: f64,
}

impl Default for AverageOptions {
    fn default() -> Self {
        Self {
            residual: None,
            statistic: SpectrumStatistic::Power,
            floor: DEFAULT_LOG_FLOOR,
        }
    }
}

/// Average power spectrum of a set of same-sized images, log-scaled and
/// DC-centered. Channels are averaged before transforming.
pub fn average_power_spectrum(
    images: &[RasterImage],
    use_residual: bool,
    kernel: &LogKernel,
) -> Result<SpectrumImage> {
    let opts = AverageOptions {
        residual: use_residual.then(|| kernel.clone()),
        ..AverageOptions::default()
    };
    average_spectrum(images, &opts, Execution::default())
}

pub fn average_spectrum(
    images: &[RasterImage],
    opts: &AverageOptions,
    exec: Execution,
) -> Result<SpectrumImage> {
    check_floor(opts.floor)?;
    let first = images.first().ok_or(Error::EmptyInput("image list"))?;
    let dims = first.dims();
    if let Some(i) = images.iter().position(|im| im.dims() != dims) {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: images[i].dims(),
            index: Some(i),
        });
    }

    let per_image = |img: &RasterImage| -> Plane<f64> {
        let mut plane = img.mean_plane();
        if let Some(kernel) = &opts.residual {
            plane = residual_plane(&plane, kernel);
        }
        let spec = dft_forward(&plane);
        match opts.statistic {
            SpectrumStatistic::Power => spec.coeffs().map(|c| c.norm_sqr()),
            SpectrumStatistic::Magnitude => spec.coeffs().map(|c| c.norm()),
        }
    };

    // Fixed chunking plus in-order summation keeps the result bit-identical
    // regardless of the execution mode.
    let mut acc = Plane::filled(dims.0, dims.1, 0.0f64);
    for chunk in images.chunks(AVERAGE_CHUNK) {
        for stat in exec.map(chunk, per_image) {
            for (a, s) in acc.as_mut_slice().iter_mut().zip(stat.iter()) {
                *a += s;
            }
        }
    }
    let n = images.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a /= n);
    Ok(log_render(&acc, opts.floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct evaluation of the DFT sum.
    fn naive_dft(x: &Plane<f64>) -> Plane<Complex64> {
        let (h, w) = x.dims();
        Plane::from_fn(h, w, |k1, k2| {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let ang = -2.0 * PI * ((k1 * r) as f64 / h as f64 + (k2 * c) as f64 / w as f64);
                    acc += Complex64::from_polar(x[(r, c)], ang);
                }
            }
            acc
        })
    }

    #[test]
    fn zeros_transform_to_zeros() {
        let s = dft_forward(&Plane::filled(8, 8, 0.0));
        assert!(s.coeffs().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn constant_is_dc_only() {
        let c = 3.25;
        let s = dft_forward(&Plane::filled(4, 4, c));
        assert!((s.get(0, 0).re - 16.0 * c).abs() < 1e-12);
        for k1 in 0..4 {
            for k2 in 0..4 {
                if (k1, k2) != (0, 0) {
                    assert!(s.get(k1, k2).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_cosine_matches_direct_sum() {
        let x = Plane::from_fn(16, 16, |r, _| (2.0 * PI * 2.0 * r as f64 / 16.0).cos());
        let fast = dft_forward(&x);
        let slow = naive_dft(&x);
        for k1 in 0..16 {
            for k2 in 0..16 {
                let (f, s) = (fast.get(k1, k2), slow[(k1, k2)]);
                assert!((f - s).norm() < 1e-9);
                let on_peak = k2 == 0 && (k1 == 2 || k1 == 14);
                assert_eq!(s.norm() > 1e-6, on_peak, "bin ({k1},{k2})");
            }
        }
        // 16*16/2 per conjugate pair
        assert!((slow[(2, 0)].re - 128.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_sum_on_non_square_input() {
        let x = Plane::from_fn(6, 10, |r, c| ((r * 7 + c * 3) % 11) as f64 - 4.0);
        let fast = dft_forward(&x);
        let slow = naive_dft(&x);
        for (a, b) in fast.coeffs().iter().zip(slow.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn dc_only_inverse_is_constant() {
        let mut coeffs = Plane::filled(4, 4, Complex64::new(0.0, 0.0));
        coeffs[(0, 0)] = Complex64::new(16.0 * 7.0, 0.0);
        let (x, imag) = dft_inverse(&ChannelSpectrum::new(coeffs));
        assert!(x.iter().all(|&v| (v - 7.0).abs() < 1e-12));
        assert!(imag < 1e-12);
    }

    #[test]
    fn symmetrized_random_spectrum_inverts_to_real() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (12, 9);
        let raw = Plane::from_fn(h, w, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let sym = Plane::from_fn(h, w, |k1, k2| {
            (raw[(k1, k2)] + raw[(mirror(k1, h), mirror(k2, w))].conj()) * 0.5
        });
        let spec = ChannelSpectrum::new(sym);
        let (_, imag) = dft_inverse(&spec);
        assert!(imag < 1e-9 * spec.max_magnitude());
    }

    #[test]
    fn log_magnitude_floor_and_center() {
        let zero = ChannelSpectrum::new(Plane::filled(4, 4, Complex64::new(0.0, 0.0)));
        let img = log_magnitude(&zero, 1e-12).unwrap();
        assert!(img.values().iter().all(|&v| (v + 12.0).abs() < 1e-12));

        let mut coeffs = Plane::filled(4, 4, Complex64::new(0.0, 0.0));
        coeffs[(0, 0)] = Complex64::new(10.0, 0.0);
        let img = log_magnitude(&ChannelSpectrum::new(coeffs), 1e-12).unwrap();
        assert_eq!(img.values()[(2, 2)], 1.0);
        assert_eq!(img.values()[(0, 0)], -12.0);
        assert_eq!(img.shifted_position(0, 0), (2, 2));

        assert!(log_magnitude(&zero, 0.0).is_err());
    }

    #[test]
    fn shift_centers_odd_sizes() {
        let p = Plane::from_fn(5, 3, |r, c| r * 10 + c);
        let s = shift_to_center(&p);
        assert_eq!(s[(2, 1)], 0);
        assert_eq!(s[(0, 0)], p[(3, 2)]);
    }

    #[test]
    fn average_of_constant_image_is_dc_only() {
        let img = RasterImage::constant(16, 16, 3, 100).unwrap();
        let avg = average_power_spectrum(&[img], false, &LogKernel::default()).unwrap();
        let dc = (100.0f64 * 256.0).powi(2).log10();
        assert!((avg.values()[(8, 8)] - dc).abs() < 1e-9);
        let floors = avg.values().iter().filter(|&&v| v == -12.0).count();
        assert_eq!(floors, 255);
    }

    #[test]
    fn averaging_duplicates_is_idempotent() {
        let img =
            RasterImage::new(16, 16, 1, (0..256).map(|i| (i * 37 % 256) as u8).collect()).unwrap();
        let k = LogKernel::default();
        let once = average_power_spectrum(std::slice::from_ref(&img), true, &k).unwrap();
        let twice = average_power_spectrum(&[img.clone(), img], true, &k).unwrap();
        for (a, b) in once.values().iter().zip(twice.values().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn average_reports_mismatched_image() {
        let a = RasterImage::constant(16, 16, 1, 1).unwrap();
        let b = RasterImage::constant(16, 32, 1, 1).unwrap();
        let err =
            average_power_spectrum(&[a.clone(), a, b], false, &LogKernel::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch { index: Some(2), .. }
        ));
        assert!(average_power_spectrum(&[], false, &LogKernel::default()).is_err());
    }

    #[test]
    fn gray8_stretch() {
        let mut coeffs = Plane::filled(4, 4, Complex64::new(0.0, 0.0));
        coeffs[(0, 0)] = Complex64::new(10.0, 0.0);
        let img = log_magnitude(&ChannelSpectrum::new(coeffs), 1e-2).unwrap();
        let g = img.to_gray8();
        assert_eq!(g[(2, 2)], 255);
        assert_eq!(g[(0, 0)], 0);
    }
}

//! Linear peak detector: a Laplacian-of-Gaussian residual, the mean DFT
//! magnitude over a `P x P` grid of bins, and a threshold calibrated on real
//! images at a target false-alarm rate.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::grid_bins;
use crate::raster::{Plane, RasterImage};
use crate::spectral::dft_forward;

pub const DEFAULT_SIGMA: f64 = 0.7;
pub const DEFAULT_HALF_SIZE: usize = 5;
pub const DEFAULT_TARGET_FPR: f64 = 0.05;
pub const MIN_CALIBRATION_SAMPLES: usize = 20;
pub const SUPPORTED_PERIODS: [usize; 2] = [8, 16];

/// Laplacian-of-Gaussian weights on `[-h, h]^2`:
/// `-(1 / (pi sigma^4)) (1 - r^2 / (2 sigma^2)) exp(-r^2 / (2 sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogKernel {
    sigma: f64,
    half_size: usize,
    weights: Plane<f64>,
}

impl Default for LogKernel {
    fn default() -> Self {
        make_log_kernel(DEFAULT_SIGMA, DEFAULT_HALF_SIZE).expect("default parameters are valid")
    }
}

impl LogKernel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn half_size(&self) -> usize {
        self.half_size
    }

    /// Side length `2h + 1`.
    pub fn size(&self) -> usize {
        2 * self.half_size + 1
    }

    pub fn weights(&self) -> &Plane<f64> {
        &self.weights
    }

    /// Weight at signed offset `(n1, n2)`, each in `[-h, h]`.
    pub fn weight(&self, n1: isize, n2: isize) -> f64 {
        let h = self.half_size as isize;
        assert!(
            n1.abs() <= h && n2.abs() <= h,
            "offset outside kernel support"
        );
        self.weights[((n1 + h) as usize, (n2 + h) as usize)]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn make_log_kernel(sigma: f64, half_size: usize) -> Result<LogKernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive and finite, got {sigma}"
        )));
    }
    if half_size < 1 {
        return Err(Error::InvalidParameter("half size must be ≥ 1".into()));
    }
    let h = half_size as isize;
    let s2 = sigma * sigma;
    let norm = -1.0 / (std::f64::consts::PI * s2 * s2);
    let weights = Plane::from_fn(2 * half_size + 1, 2 * half_size + 1, |i, j| {
        let (n1, n2) = ((i as isize - h) as f64, (j as isize - h) as f64);
        let q = (n1 * n1 + n2 * n2) / (2.0 * s2);
        norm * (1.0 - q) * (-q).exp()
    });
    Ok(LogKernel {
        sigma,
        half_size,
        weights,
    })
}

/// Mirror index without repeating the edge sample (`... c b | a b c ...`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

/// Same-size 2D correlation of a real plane with the kernel, reflect padding.
pub fn residual_plane(plane: &Plane<f64>, kernel: &LogKernel) -> Plane<f64> {
    let (h, w) = plane.dims();
    let hs = kernel.half_size;
    let k = kernel.size();
    let (ph, pw) = (h + 2 * hs, w + 2 * hs);
    let padded = Plane::from_fn(ph, pw, |r, c| {
        plane[(
            reflect(r as isize - hs as isize, h),
            reflect(c as isize - hs as isize, w),
        )]
    });
    let mut out = Plane::filled(h, w, 0.0);
    for r in 0..h {
        let dst = &mut out.as_mut_slice()[r * w..(r + 1) * w];
        for a in 0..k {
            let src = &padded.row(r + a);
            let krow = kernel.weights.row(a);
            for (b, &kw) in krow.iter().enumerate() {
                for (o, &s) in dst.iter_mut().zip(&src[b..b + w]) {
                    *o += kw * s;
                }
            }
        }
    }
    out
}

/// LoG residual of the channel-averaged image.
pub fn residual(image: &RasterImage, kernel: &LogKernel) -> Plane<f64> {
    residual_plane(&image.mean_plane(), kernel)
}

/// Grid bins `(k1, k2)` scored for period `P` on an `H x W` spectrum, DC excluded.
pub fn score_bins(height: usize, width: usize, period: usize) -> Vec<(usize, usize)> {
    let rows = grid_bins(height, period);
    let cols = grid_bins(width, period);
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .filter(|&b| b != (0, 0))
        .collect()
}

/// Computes the grid score of images.
#[derive(Clone, Debug)]
pub struct GridScorer {
    period: usize,
    kernel: LogKernel,
    /// Divide by the median off-grid magnitude. Off unless asked for.
    normalize: bool,
}

impl GridScorer {
    pub fn new(period: usize, kernel: LogKernel) -> Result<Self> {
        if period < 2 {
            return Err(Error::InvalidParameter("period must be ≥ 2".into()));
        }
        Ok(Self {
            period,
            kernel,
            normalize: false,
        })
    }

    pub fn from_model(model: &DetectorModel) -> Result<Self> {
        Self::new(model.period, make_log_kernel(model.sigma, model.half_size)?)
    }

    pub fn normalized(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn kernel(&self) -> &LogKernel {
        &self.kernel
    }

    pub fn score(&self, image: &RasterImage) -> Result<f64> {
        self.score_plane(&image.mean_plane())
    }

    /// Score of an already channel-reduced plane.
    pub fn score_plane(&self, plane: &Plane<f64>) -> Result<f64> {
        let (h, w) = plane.dims();
        if h.min(w) < 2 * self.period {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min: 2 * self.period,
            });
        }
        let spec = dft_forward(&residual_plane(plane, &self.kernel));
        let bins = score_bins(h, w, self.period);
        let s = bins
            .iter()
            .map(|&(a, b)| spec.get(a, b).norm())
            .sum::<f64>()
            / bins.len() as f64;
        if !self.normalize {
            return Ok(s);
        }
        let rows = grid_bins(h, self.period);
        let cols = grid_bins(w, self.period);
        let mut off: Vec<f64> = Vec::with_capacity(h * w);
        for k1 in 0..h {
            let row_on = rows.binary_search(&k1).is_ok();
            for k2 in 0..w {
                if !(row_on && cols.binary_search(&k2).is_ok()) {
                    off.push(spec.get(k1, k2).norm());
                }
            }
        }
        let median = median(&mut off);
        Ok(if median > 0.0 { s / median } else { s })
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smallest sample value `t` with `#{s > t} / n <= target_fpr`.
pub fn calibrate(real_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target false-alarm rate must lie in (0, 1), got {target_fpr}"
        )));
    }
    if real_scores.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientSamples {
            required: MIN_CALIBRATION_SAMPLES,
            got: real_scores.len(),
        });
    }
    if real_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("scores must be finite".into()));
    }
    let mut sorted = real_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let t = sorted[i];
        // first index past all copies of t
        let upper = i + sorted[i..].partition_point(|&s| s <= t);
        if (n - upper) as f64 / n as f64 <= target_fpr {
            return Ok(t);
        }
        i = upper;
    }
    unreachable!("the largest score always satisfies the bound")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Synthetic,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Synthetic => "synthetic",
        })
    }
}

/// Synthetic iff `score > threshold`; the boundary counts as real.
pub fn classify(score: f64, model: &DetectorModel) -> Label {
    if score > model.threshold {
        Label::Synthetic
    } else {
        Label::Real
    }
}

/// A calibrated Linear-P detector. Serialized field names are part of the model file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub period: usize,
    pub sigma: f64,
    pub half_size: usize,
    pub threshold: f64,
    pub target_fpr: f64,
    pub n_calibration: usize,
    pub created_at: DateTime<Utc>,
}

impl DetectorModel {
    /// Calibrates a model from real-image scores.
    pub fn from_scores(
        scorer: &GridScorer,
        real_scores: &[f64],
        target_fpr: f64,
        created_at: DateTime<Utc>,
    ) -> Result<Self> {
        let model = Self {
            period: scorer.period,
            sigma: scorer.kernel.sigma,
            half_size: scorer.kernel.half_size,
            threshold: calibrate(real_scores, target_fpr)?,
            target_fpr,
            n_calibration: real_scores.len(),
            created_at,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_PERIODS.contains(&self.period) {
            return Err(Error::InvalidParameter(format!(
                "detector period must be one of {SUPPORTED_PERIODS:?}, got {}",
                self.period
            )));
        }
        make_log_kernel(self.sigma, self.half_size)?;
        if !self.threshold.is_finite() {
            return Err(Error::InvalidParameter("threshold must be finite".into()));
        }
        if !(self.target_fpr > 0.0 && self.target_fpr < 1.0) {
            return Err(Error::InvalidParameter(
                "target_fpr must lie in (0, 1)".into(),
            ));
        }
        if self.n_calibration < MIN_CALIBRATION_SAMPLES {
            return Err(Error::InsufficientSamples {
                required: MIN_CALIBRATION_SAMPLES,
                got: self.n_calibration,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model json: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn classify(&self, score: f64) -> Label {
        classify(score, self)
    }
}

/// Grid score of an image under a model's period and kernel.
pub fn grid_score(image: &RasterImage, model: &DetectorModel) -> Result<f64> {
    GridScorer::from_model(model)?.score(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(threshold: f64) -> DetectorModel {
        DetectorModel {
            period: 8,
            sigma: 0.7,
            half_size: 5,
            threshold,
            target_fpr: 0.05,
            n_calibration: 100,
            created_at: DateTime::from_timestamp(0, 0).unwrap(),
        }
    }

    #[test]
    fn center_and_corner_weights() {
        let k = LogKernel::default();
        // -1 / (pi * 0.7^4), with 0.7^4 = 0.2401
        let center = -1.0 / (std::f64::consts::PI * 0.2401);
        assert!((k.weight(0, 0) - center).abs() < 1e-12);
        assert!((k.weight(0, 0) + 1.325_738_801_265_267).abs() < 1e-12);
        assert!(k.weight(5, 5).abs() < 1e-18);
        assert_eq!(k.weight(1, 0), k.weight(0, 1));
        assert_eq!(k.weight(1, 0), k.weight(-1, 0));
    }

    #[test]
    fn kernel_parameter_validation() {
        assert!(make_log_kernel(0.0, 5).is_err());
        assert!(make_log_kernel(-1.0, 5).is_err());
        assert!(make_log_kernel(f64::INFINITY, 5).is_err());
        assert!(make_log_kernel(0.7, 0).is_err());
        assert_eq!(make_log_kernel(0.7, 2).unwrap().size(), 5);
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-9, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn residual_of_zero_and_constant() {
        let k = LogKernel::default();
        let zero = RasterImage::constant(16, 16, 1, 0).unwrap();
        assert!(residual(&zero, &k).iter().all(|&v| v == 0.0));

        // sampled at sigma = 0.7 the weights sum to -0.009951442 (numpy), not zero
        assert!((k.sum() + 0.009_951_442_071_948).abs() < 1e-12);
        let c = 200.0;
        let flat = RasterImage::constant(16, 16, 3, 200).unwrap();
        let expected = c * k.sum();
        for &v in residual(&flat, &k).iter() {
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_reproduces_flipped_kernel() {
        let k = LogKernel::default();
        let mut samples = vec![0u8; 32 * 32];
        samples[16 * 32 + 16] = 255;
        let img = RasterImage::new(32, 32, 1, samples).unwrap();
        let res = residual(&img, &k);
        for a in -5isize..=5 {
            for b in -5isize..=5 {
                let v = res[((16 + a) as usize, (16 + b) as usize)];
                assert!((v - 255.0 * k.weight(-a, -b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_image_scores_zero() {
        let img = RasterImage::constant(32, 32, 1, 0).unwrap();
        let s = GridScorer::new(8, LogKernel::default())
            .unwrap()
            .score(&img)
            .unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn score_requires_two_periods() {
        let img = RasterImage::constant(16, 24, 1, 3).unwrap();
        let scorer = GridScorer::new(16, LogKernel::default()).unwrap();
        assert!(matches!(
            scorer.score(&img),
            Err(Error::ImageTooSmall { min: 32, .. })
        ));
        assert_eq!(score_bins(16, 16, 8).len(), 63);
    }

    #[test]
    fn calibration_examples() {
        let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate(&ramp, 0.05).unwrap(), 95.0);
        assert_eq!(calibrate(&ramp, 0.5).unwrap(), 50.0);
        assert_eq!(calibrate(&[7.0; 30], 0.05).unwrap(), 7.0);
        assert_eq!(calibrate(&[7.0; 30], 0.9).unwrap(), 7.0);
        assert!(matches!(
            calibrate(&ramp[..19], 0.05),
            Err(Error::InsufficientSamples { got: 19, .. })
        ));
        assert!(calibrate(&ramp, 0.0).is_err());
        assert!(calibrate(&ramp, 1.0).is_err());
    }

    #[test]
    fn calibration_with_ties() {
        // 90 zeros then ten 1.0s: 10% exceed 0, nothing exceeds 1
        let mut s = vec![0.0; 90];
        s.extend([1.0; 10]);
        assert_eq!(calibrate(&s, 0.05).unwrap(), 1.0);
        assert_eq!(calibrate(&s, 0.10).unwrap(), 0.0);
    }

    #[test]
    fn classify_boundary_is_real() {
        let m = model(2.5);
        assert_eq!(classify(2.5, &m), Label::Real);
        assert_eq!(classify(2.5 + 1e-9, &m), Label::Synthetic);
        assert_eq!(classify(-1.0, &model(0.0)), Label::Real);
    }

    #[test]
    fn model_json_has_exact_fields() {
        let m = model(1.25);
        let v: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "created_at",
                "half_size",
                "n_calibration",
                "period",
                "sigma",
                "target_fpr",
                "threshold"
            ]
        );
        assert_eq!(DetectorModel::from_json(&m.to_json()).unwrap(), m);

        let mut bad = m.clone();
        bad.period = 4;
        assert!(DetectorModel::from_json(&bad.to_json()).is_err());
        assert!(DetectorModel::from_json(r#"{"period":8}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kernel_symmetry(sigma in 0.3f64..3.0, h in 1usize..8) {
            let k = make_log_kernel(sigma, h).unwrap();
            let hh = h as isize;
            for a in -hh..=hh {
                for b in -hh..=hh {
                    let w = k.weight(a, b);
                    prop_assert_eq!(w, k.weight(b, a));
                    prop_assert_eq!(w, k.weight(-a, b));
                    prop_assert_eq!(w, k.weight(a, -b));
                    let r = ((a * a + b * b) as f64).sqrt();
                    if r > std::f64::consts::SQRT_2 * sigma {
                        prop_assert!(w > 0.0 || w.abs() < 1e-300);
                    }
                }
            }
            prop_assert!(k.weight(0, 0) < 0.0);
        }

        #[test]
        fn residual_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Plane::from_fn(17, 20, |_, _| rng.random_range(0.0..255.0));
            let y = Plane::from_fn(17, 20, |_, _| rng.random_range(0.0..255.0));
            let k = LogKernel::default();
            let combo = Plane::from_fn(17, 20, |r, c| a * x[(r, c)] + b * y[(r, c)]);
            let lhs = residual_plane(&combo, &k);
            let rx = residual_plane(&x, &k);
            let ry = residual_plane(&y, &k);
            for r in 0..17 {
                for c in 0..20 {
                    let rhs = a * rx[(r, c)] + b * ry[(r, c)];
                    prop_assert!((lhs[(r, c)] - rhs).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn calibrated_fpr_bound(scores in prop::collection::vec(-50.0f64..50.0, 20..300),
                                fpr in 0.01f64..0.99) {
            let t = calibrate(&scores, fpr).unwrap();
            prop_assert!(scores.contains(&t));
            let above = scores.iter().filter(|&&s| s > t).count();
            prop_assert!(above as f64 / scores.len() as f64 <= fpr);
            // smallest such value: every smaller sample value violates the bound
            for &s in scores.iter().filter(|&&s| s < t) {
                let above = scores.iter().filter(|&&v| v > s).count();
                prop_assert!(above as f64 / scores.len() as f64 > fpr);
            }
        }
    }
}

//! Controlled periodic-peak injection and the rate metrics used to compare
//! detection before and after peak removal.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::grid_bin;
use crate::raster::{quantize, Plane, RasterImage};
use crate::spectral::mirror;

/// Upper bound on the number of cosines in a comb.
pub const MAX_COMB_PAIRS: usize = 64;

/// Mean and standard deviation of the clean Gaussian noise images.
pub const NOISE_MEAN: f64 = 128.0;
pub const NOISE_STD: f64 = 30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Sum of cosines at grid frequencies; exact spectral support.
    #[default]
    CosineComb,
    /// Box downsampling by `P`, uneven-overlap transposed-convolution
    /// upsampling, 50/50 blend with the input.
    ResampleGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub period: usize,
    /// Peak amplitude of the added comb, in intensity levels. Unused by `ResampleGrid`.
    pub amplitude: f64,
    pub phase_seed: u64,
    pub mode: InjectionMode,
    /// Only use grid frequencies that are not also on the `P / 2` grid.
    #[serde(default)]
    pub odd_harmonics_only: bool,
}

impl InjectionSpec {
    pub fn comb(period: usize, amplitude: f64, phase_seed: u64) -> Self {
        Self {
            period,
            amplitude,
            phase_seed,
            mode: InjectionMode::CosineComb,
            odd_harmonics_only: false,
        }
    }

    pub fn resample(period: usize, phase_seed: u64) -> Self {
        Self {
            mode: InjectionMode::ResampleGrid,
            ..Self::comb(period, 1.0, phase_seed)
        }
    }

    pub fn odd_only(mut self) -> Self {
        self.odd_harmonics_only = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::InvalidParameter("period must be ≥ 2".into()));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be positive and finite, got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// Grid index pairs `(n1, n2)` of the comb, one per conjugate class, sorted.
fn comb_pairs(spec: &InjectionSpec) -> Vec<(usize, usize)> {
    let p = spec.period;
    let nyquist = p.is_multiple_of(2).then_some(p / 2);
    let usable = |n: usize| Some(n) != nyquist;
    let mut pairs = Vec::new();
    for n1 in (1..p).filter(|&n| usable(n)) {
        for n2 in (1..p).filter(|&n| usable(n)) {
            if spec.odd_harmonics_only && n1 % 2 == 0 && n2 % 2 == 0 {
                continue;
            }
            let conj = (p - n1, p - n2);
            if (n1, n2) <= conj {
                pairs.push((n1, n2));
            }
        }
    }
    if pairs.len() > MAX_COMB_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.phase_seed ^ 0x5eed_c0b5);
        let mut picked: Vec<_> = sample(&mut rng, pairs.len(), MAX_COMB_PAIRS)
            .into_iter()
            .map(|i| pairs[i])
            .collect();
        picked.sort_unstable();
        pairs = picked;
    }
    pairs
}

/// DFT bins `(k1, k2)` carrying the comb's cosines (one per cosine, mirrors not included).
pub fn comb_frequencies(height: usize, width: usize, spec: &InjectionSpec) -> Vec<(usize, usize)> {
    comb_pairs(spec)
        .into_iter()
        .map(|(n1, n2)| {
            (
                grid_bin(height, spec.period, n1),
                grid_bin(width, spec.period, n2),
            )
        })
        .collect()
}

/// Comb bins together with their conjugate mirrors, de-duplicated.
pub fn comb_bins_with_mirrors(
    height: usize,
    width: usize,
    spec: &InjectionSpec,
) -> Vec<(usize, usize)> {
    let mut bins: Vec<_> = comb_frequencies(height, width, spec)
        .into_iter()
        .flat_map(|(a, b)| [(a, b), (mirror(a, height), mirror(b, width))])
        .collect();
    bins.sort_unstable();
    bins.dedup();
    bins
}

/// The comb signal itself, scaled so its peak absolute value is `amplitude`.
pub fn comb_signal(height: usize, width: usize, spec: &InjectionSpec) -> Plane<f64> {
    let freqs = comb_frequencies(height, width, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.phase_seed);
    let phases: Vec<f64> = freqs
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();

    // cos(a + b + phi) = Re(e^{i(a + phi)} e^{ib}), separable in rows and columns
    let row_terms: Vec<Vec<(f64, f64)>> = freqs
        .iter()
        .zip(&phases)
        .map(|(&(k1, _), &phi)| {
            (0..height)
                .map(|r| {
                    let a = 2.0 * PI * (k1 * r) as f64 / height as f64 + phi;
                    (a.cos(), a.sin())
                })
                .collect()
        })
        .collect();
    let col_terms: Vec<Vec<(f64, f64)>> = freqs
        .iter()
        .map(|&(_, k2)| {
            (0..width)
                .map(|c| {
                    let b = 2.0 * PI * (k2 * c) as f64 / width as f64;
                    (b.cos(), b.sin())
                })
                .collect()
        })
        .collect();

    let mut signal = Plane::filled(height, width, 0.0);
    for (rows, cols) in row_terms.iter().zip(&col_terms) {
        for (r, &(rc, rs)) in rows.iter().enumerate() {
            let out = &mut signal.as_mut_slice()[r * width..(r + 1) * width];
            for (o, &(cc, cs)) in out.iter_mut().zip(cols) {
                *o += rc * cc - rs * cs;
            }
        }
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = spec.amplitude / peak;
        signal.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    }
    signal
}

/// Stride-`period` transposed convolution of block values with a ones kernel
/// of length `period + 1`, wrapping at the end, normalized by `period / (period + 1)`.
fn uneven_upsample(blocks: &[f64], period: usize, len: usize) -> Vec<f64> {
    let nb = blocks.len();
    let gain = period as f64 / (period + 1) as f64;
    (0..len)
        .map(|i| {
            let j = i / period;
            let mut v = blocks[j];
            if i % period == 0 {
                v += blocks[(j + nb - 1) % nb];
            }
            v * gain
        })
        .collect()
}

fn resample_grid_channel(x: &Plane<f64>, period: usize) -> Plane<f64> {
    let (h, w) = x.dims();
    let (bh, bw) = (h.div_ceil(period), w.div_ceil(period));
    let mut sums = Plane::filled(bh, bw, 0.0);
    let mut counts = Plane::filled(bh, bw, 0.0);
    for r in 0..h {
        for c in 0..w {
            sums[(r / period, c / period)] += x[(r, c)];
            counts[(r / period, c / period)] += 1.0;
        }
    }
    let means = Plane::from_fn(bh, bw, |i, j| sums[(i, j)] / counts[(i, j)]);

    // rows of blocks upsampled along columns, then along rows
    let mut wide = Plane::filled(bh, w, 0.0);
    for i in 0..bh {
        let up = uneven_upsample(means.row(i), period, w);
        wide.as_mut_slice()[i * w..(i + 1) * w].copy_from_slice(&up);
    }
    let mut up = Plane::filled(h, w, 0.0);
    for c in 0..w {
        let col: Vec<f64> = (0..bh).map(|i| wide[(i, c)]).collect();
        for (r, v) in uneven_upsample(&col, period, h).into_iter().enumerate() {
            up[(r, c)] = v;
        }
    }
    Plane::from_fn(h, w, |r, c| 0.5 * (x[(r, c)] + up[(r, c)]))
}

pub fn inject_periodic_peaks(image: &RasterImage, spec: &InjectionSpec) -> Result<RasterImage> {
    spec.validate()?;
    let (h, w) = image.dims();
    if h.min(w) < 2 * spec.period {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: 2 * spec.period,
        });
    }
    let planes = match spec.mode {
        InjectionMode::CosineComb => {
            let signal = comb_signal(h, w, spec);
            (0..image.channels())
                .map(|c| {
                    let s = signal.as_slice();
                    let data = image
                        .channel(c)
                        .iter()
                        .zip(s)
                        .map(|(&x, &d)| quantize(f64::from(x) + d))
                        .collect();
                    Plane::from_vec(h, w, data)
                })
                .collect::<Result<Vec<_>>>()?
        }
        InjectionMode::ResampleGrid => (0..image.channels())
            .map(|c| {
                resample_grid_channel(&image.channel_plane(c), spec.period).map(|&v| quantize(v))
            })
            .collect(),
    };
    RasterImage::from_planes(planes)
}

/// I.i.d. Gaussian noise around mid-gray, the stand-in for clean real images.
pub fn clean_noise_image(
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<RasterImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal");
    let samples = (0..height * width * channels)
        .map(|_| quantize(normal.sample(&mut rng)))
        .collect();
    RasterImage::new(height, width, channels, samples)
}

/// Fraction of scores strictly above `threshold`.
pub fn tpr_at_threshold(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("score list"));
    }
    let above = scores.iter().filter(|&&s| s > threshold).count();
    Ok(above as f64 / scores.len() as f64)
}

/// `(after - before) / before`; undefined at a zero baseline.
pub fn relative_difference(tpr_after: f64, tpr_before: f64) -> Result<f64> {
    if tpr_before <= 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok((tpr_after - tpr_before) / tpr_before)
}

//! Row-major 2D grids and 8-bit raster images.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Smallest accepted side length for a [`RasterImage`].
pub const MIN_IMAGE_SIDE: usize = 16;

/// A dense row-major `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Plane<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Plane<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidParameter(format!(
                "plane of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Plane<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.height && c < self.width);
        &self.data[r * self.width + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Plane<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.height && c < self.width);
        &mut self.data[r * self.width + c]
    }
}

/// Rounds half up and clips to the 8-bit range.
pub fn quantize(value: f64) -> u8 {
    (value + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// An 8-bit image of 1 or 3 channels, stored as one row-major plane per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl RasterImage {
    /// `samples` holds channel 0 first, then channel 1, ...; each channel row-major.
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall {
                height,
                width,
                min: MIN_IMAGE_SIDE,
            });
        }
        if samples.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                samples.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn from_planes(planes: Vec<Plane<u8>>) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::EmptyInput("image planes"));
        };
        let (height, width) = first.dims();
        let channels = planes.len();
        let mut samples = Vec::with_capacity(height * width * channels);
        for (i, p) in planes.into_iter().enumerate() {
            if p.dims() != (height, width) {
                return Err(Error::DimensionMismatch {
                    expected: (height, width),
                    found: p.dims(),
                    index: Some(i),
                });
            }
            samples.extend(p.into_vec());
        }
        Self::new(height, width, channels, samples)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn channel_plane(&self, c: usize) -> Plane<f64> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.channel(c).iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Per-pixel mean of all channels.
    pub fn mean_plane(&self) -> Plane<f64> {
        if self.channels == 1 {
            return self.channel_plane(0);
        }
        let n = self.height * self.width;
        let scale = 1.0 / self.channels as f64;
        let data = (0..n)
            .map(|i| {
                (0..self.channels)
                    .map(|c| f64::from(self.samples[c * n + i]))
                    .sum::<f64>()
                    * scale
            })
            .collect();
        Plane {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Interleaved samples (RGBRGB... or gray), the layout image encoders expect.
    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.samples.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push(self.samples[c * n + i]);
            }
        }
        out
    }

    pub fn from_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        interleaved: &[u8],
    ) -> Result<Self> {
        if interleaved.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                interleaved.len()
            )));
        }
        let n = height * width;
        let mut samples = vec![0u8; interleaved.len()];
        for (i, px) in interleaved.chunks_exact(channels.max(1)).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                samples[c * n + i] = v;
            }
        }
        Self::new(height, width, channels, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_bad_channel_counts() {
        assert!(matches!(
            RasterImage::constant(15, 32, 1, 0),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(matches!(
            RasterImage::constant(16, 16, 2, 0),
            Err(Error::InvalidImage(_))
        ));
        assert!(RasterImage::new(16, 16, 1, vec![0; 10]).is_err());
    }

    #[test]
    fn interleave_round_trip() {
        let inter: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 251) as u8).collect();
        let img = RasterImage::from_interleaved(16, 16, 3, &inter).unwrap();
        assert_eq!(img.channel(1)[0], inter[1]);
        assert_eq!(img.to_interleaved(), inter);
    }

    #[test]
    fn mean_plane_averages_channels() {
        let mut samples = vec![0u8; 16 * 16 * 3];
        samples[0] = 30;
        samples[256] = 60;
        samples[512] = 90;
        let img = RasterImage::new(16, 16, 3, samples).unwrap();
        assert_eq!(img.mean_plane()[(0, 0)], 60.0);
        assert_eq!(img.mean_plane()[(0, 1)], 0.0);
    }

    #[test]
    fn quantize_rounds_half_up_and_clips() {
        assert_eq!(quantize(1.5), 2);
        assert_eq!(quantize(2.4999), 2);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(300.0), 255);
        assert_eq!(quantize(254.5), 255);
    }
}

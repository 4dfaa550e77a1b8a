//! Spectral peak removal: per channel, transform, mask, invert, match the
//! input's min/max dynamics and quantize back to 8 bits.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{image_kind, list_images, read_image, write_atomic, write_png, ImageKind};
use crate::mask::{apply_mask, build_grid_mask, masked_energy, GridConfig, GridSpec, PeakMask};
use crate::raster::{quantize, Plane, RasterImage};
use crate::spectral::{dft_forward, dft_inverse, ChannelSpectrum};

/// Channels whose reconstructed range is at most this many intensity levels
/// are treated as flat.
pub const DEGENERATE_RANGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalResult {
    pub image: RasterImage,
    /// Largest `|imag|` of the inverse transform relative to the largest
    /// masked coefficient magnitude, over all channels.
    pub max_imag_residue: f64,
    /// Removed energy over non-DC energy, per channel.
    pub masked_energy_fraction: Vec<f64>,
}

impl RemovalResult {
    pub fn mean_masked_energy_fraction(&self) -> f64 {
        let f = &self.masked_energy_fraction;
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Intermediate products of one channel, exposed for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct ChannelRemoval {
    pub masked: ChannelSpectrum,
    /// After dynamics matching, before quantization.
    pub restored: Plane<f64>,
    pub max_imag_residue: f64,
    pub masked_energy_fraction: f64,
    pub degenerate: bool,
}

/// A mask built once for a given image size and reused across channels and images.
#[derive(Clone, Debug)]
pub struct PeakRemover {
    spec: GridSpec,
    mask: PeakMask,
}

impl PeakRemover {
    pub fn new(height: usize, width: usize, spec: GridSpec) -> Result<Self> {
        let mask = build_grid_mask(height, width, &spec)?;
        Ok(Self { spec, mask })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mask(&self) -> &PeakMask {
        &self.mask
    }

    pub fn remove_channel(&self, channel: &Plane<f64>) -> Result<ChannelRemoval> {
        let spectrum = dft_forward(channel);
        let masked = apply_mask(&spectrum, &self.mask)?;
        let removed = masked_energy(&spectrum, &self.mask)?;
        let ac_energy = spectrum.energy() - spectrum.get(0, 0).norm_sqr();
        let masked_energy_fraction = if ac_energy > 0.0 {
            (removed / ac_energy).clamp(0.0, 1.0)
        } else {
            0.0
        };

        let (y, max_imag) = dft_inverse(&masked);
        let scale = masked.max_magnitude();
        let max_imag_residue = if scale > 0.0 { max_imag / scale } else { 0.0 };

        let (x_lo, x_hi) = min_max(channel.iter().copied());
        let (y_lo, y_hi) = min_max(y.iter().copied());
        let degenerate = y_hi - y_lo <= DEGENERATE_RANGE;
        let restored = if degenerate {
            let mean = channel.iter().sum::<f64>() / channel.as_slice().len() as f64;
            let fill = f64::from(quantize(mean));
            channel.map(|_| fill)
        } else {
            let gain = (x_hi - x_lo) / (y_hi - y_lo);
            y.map(|&v| x_lo + (v - y_lo) * gain)
        };
        Ok(ChannelRemoval {
            masked,
            restored,
            max_imag_residue,
            masked_energy_fraction,
            degenerate,
        })
    }

    pub fn remove_detailed(
        &self,
        image: &RasterImage,
    ) -> Result<(RemovalResult, Vec<ChannelRemoval>)> {
        if image.dims() != self.mask.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.mask.dims(),
                found: image.dims(),
                index: None,
            });
        }
        let mut parts = Vec::with_capacity(image.channels());
        let mut planes = Vec::with_capacity(image.channels());
        for c in 0..image.channels() {
            let part = self.remove_channel(&image.channel_plane(c))?;
            planes.push(part.restored.map(|&v| quantize(v)));
            parts.push(part);
        }
        let result = RemovalResult {
            image: RasterImage::from_planes(planes)?,
            max_imag_residue: parts.iter().map(|p| p.max_imag_residue).fold(0.0, f64::max),
            masked_energy_fraction: parts.iter().map(|p| p.masked_energy_fraction).collect(),
        };
        Ok((result, parts))
    }

    pub fn remove(&self, image: &RasterImage) -> Result<RemovalResult> {
        Ok(self.remove_detailed(image)?.0)
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

pub fn remove_peaks(image: &RasterImage, spec: &GridSpec) -> Result<RemovalResult> {
    PeakRemover::new(image.height(), image.width(), *spec)?.remove(image)
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub grid: GridConfig,
    pub allow_lossy: bool,
    pub exec: Execution,
}

/// One row of the batch summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchRecord {
    /// Relative to the input directory, `/`-separated.
    pub path: String,
    pub channels: Option<usize>,
    pub masked_energy_fraction_mean: Option<f64>,
    pub max_imag_residue: Option<f64>,
    pub skipped_reason: Option<String>,
    #[serde(skip)]
    pub lossy_input: bool,
    /// Set when the row records a read or write failure rather than a skip.
    #[serde(skip)]
    pub io_failure: bool,
}

impl BatchRecord {
    fn skipped(path: String, reason: String, io_failure: bool) -> Self {
        Self {
            path,
            channels: None,
            masked_energy_fraction_mean: None,
            max_imag_residue: None,
            skipped_reason: Some(reason),
            lossy_input: false,
            io_failure,
        }
    }

    pub fn is_processed(&self) -> bool {
        self.skipped_reason.is_none()
    }
}

#[derive(Clone, Debug, Default)]
pub struct BatchSummary {
    pub records: Vec<BatchRecord>,
    pub lossy_allowed: bool,
}

impl BatchSummary {
    pub fn processed(&self) -> usize {
        self.records.iter().filter(|r| r.is_processed()).count()
    }

    pub fn skipped(&self) -> usize {
        self.records.len() - self.processed()
    }

    pub fn io_failures(&self) -> usize {
        self.records.iter().filter(|r| r.io_failure).count()
    }

    /// CSV with columns `path, channels, masked_energy_fraction_mean,
    /// max_imag_residue, skipped_reason`, plus `lossy_input` when lossy input was allowed.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidParameter(format!("summary csv: {e}"));
        let mut header = vec![
            "path",
            "channels",
            "masked_energy_fraction_mean",
            "max_imag_residue",
            "skipped_reason",
        ];
        if self.lossy_allowed {
            header.push("lossy_input");
        }
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.path.clone(),
                opt(r.channels.map(|c| c.to_string())),
                opt(r.masked_energy_fraction_mean.map(|v| v.to_string())),
                opt(r.max_imag_residue.map(|v| format!("{v:e}"))),
                opt(r.skipped_reason.clone()),
            ];
            if self.lossy_allowed {
                row.push(r.lossy_input.to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::InvalidParameter(format!("summary csv: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }
}

fn relative_name(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn process_one(input: &Path, output_dir: &Path, file: &Path, opts: &BatchOptions) -> BatchRecord {
    let name = relative_name(input, file);
    let lossy = image_kind(file) == Some(ImageKind::Lossy);
    if lossy && !opts.allow_lossy {
        return BatchRecord::skipped(
            name,
            "lossy input (pass --allow-lossy to process)".into(),
            false,
        );
    }
    let image = match read_image(file) {
        Ok(img) => img,
        Err(e @ Error::Io { .. }) => return BatchRecord::skipped(name, e.to_string(), true),
        Err(e) => return BatchRecord::skipped(name, e.to_string(), false),
    };
    let spec = opts.grid.resolve(image.height(), image.width());
    let result = match remove_peaks(&image, &spec) {
        Ok(r) => r,
        Err(e) => return BatchRecord::skipped(name, e.to_string(), false),
    };
    let rel: PathBuf = file
        .strip_prefix(input)
        .unwrap_or(file)
        .with_extension("png");
    if let Err(e) = write_png(&output_dir.join(rel), &result.image) {
        return BatchRecord::skipped(name, e.to_string(), true);
    }
    BatchRecord {
        path: name,
        channels: Some(image.channels()),
        masked_energy_fraction_mean: Some(result.mean_masked_energy_fraction()),
        max_imag_residue: Some(result.max_imag_residue),
        skipped_reason: None,
        lossy_input: lossy,
        io_failure: false,
    }
}

/// Removes peaks from every image under `input_dir`, mirroring the tree into
/// `output_dir` and writing `summary.csv` there. Per-file failures become
/// summary rows; only directory-level I/O problems abort.
pub fn remove_peaks_batch(
    input_dir: &Path,
    output_dir: &Path,
    opts: &BatchOptions,
) -> Result<BatchSummary> {
    opts.grid.resolve(1024, 1024).validate_params()?;
    let files = list_images(input_dir)?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let records = opts
        .exec
        .map(&files, |f| process_one(input_dir, output_dir, f, opts));
    let summary = BatchSummary {
        records,
        lossy_allowed: opts.allow_lossy,
    };
    summary.write_csv(&output_dir.join("summary.csv"))?;
    Ok(summary)
}

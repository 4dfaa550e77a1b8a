//! Fourier-domain removal of periodic spectral peaks from images, a linear
//! peak-based detector with false-alarm calibration, and a synthetic bench
//! that measures how peak removal changes detection rates.
//!
//! Module map:
//!
//! - [`spectral`]: 2D DFT, log-magnitude rendering, spectrum averaging
//! - [`mask`]: `P x P` grid notch masks
//! - [`removal`]: the removal pipeline and its batch runner
//! - [`detector`]: LoG residual, grid score, calibration, classification
//! - [`synth`]: peak injection and rate metrics
//! - [`experiment`]: config-driven before/after evaluation

pub mod detector;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod io;
pub mod mask;
pub mod raster;
pub mod removal;
pub mod spectral;
pub mod synth;

pub use detector::{
    calibrate, classify, grid_score, make_log_kernel, residual, DetectorModel, GridScorer, Label,
    LogKernel,
};
pub use error::{Error, Result};
pub use exec::Execution;
pub use experiment::{run_experiment, EvalReport, ExperimentConfig};
pub use mask::{apply_mask, build_grid_mask, grid_bins, GridConfig, GridSpec, PeakMask};
pub use raster::{Plane, RasterImage};
pub use removal::{remove_peaks, remove_peaks_batch, BatchOptions, RemovalResult};
pub use spectral::{
    average_power_spectrum, dft_forward, dft_inverse, log_magnitude, ChannelSpectrum, SpectrumImage,
};
pub use synth::{inject_periodic_peaks, relative_difference, tpr_at_threshold, InjectionSpec};

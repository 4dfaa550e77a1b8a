//! Before/after peak-removal evaluation of the linear detector.
//!
//! Pipeline: calibrate on the real corpus, score every positive image, remove
//! peaks at each configured period, rescore, and report rates and relative
//! differences. Per-image work runs through [`Execution`]; all reductions are
//! sequential and in input order, so reports are reproducible byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{calibrate, make_log_kernel, GridScorer, Label, SUPPORTED_PERIODS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{image_kind, list_images, read_image, write_atomic, ImageKind};
use crate::mask::GridConfig;
use crate::raster::RasterImage;
use crate::removal::remove_peaks;
use crate::synth::{
    clean_noise_image, inject_periodic_peaks, relative_difference, tpr_at_threshold, InjectionMode,
    InjectionSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpora: CorporaConfig,
    pub removal: RemovalConfig,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub injection: Option<InjectionConfig>,
}

/// Directory corpora, or generated ones when the directories are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorporaConfig {
    #[serde(default)]
    pub calibration_dir: Option<PathBuf>,
    #[serde(default)]
    pub positive_dirs: Vec<PathBuf>,
    #[serde(default = "default_count")]
    pub generated_count: usize,
    #[serde(default = "default_size")]
    pub generated_size: usize,
    #[serde(default = "default_channels")]
    pub generated_channels: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalConfig {
    pub periods: Vec<usize>,
    #[serde(default)]
    pub dilate_radius: Option<f64>,
    #[serde(default)]
    pub dc_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_half_size")]
    pub half_size: usize,
    #[serde(default = "default_fpr")]
    pub fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    #[serde(default)]
    pub mode: InjectionMode,
    #[serde(default = "default_period")]
    pub period: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub odd_harmonics_only: bool,
}

fn default_count() -> usize {
    50
}
fn default_size() -> usize {
    256
}
fn default_channels() -> usize {
    1
}
fn default_period() -> usize {
    8
}
fn default_sigma() -> f64 {
    crate::detector::DEFAULT_SIGMA
}
fn default_half_size() -> usize {
    crate::detector::DEFAULT_HALF_SIZE
}
fn default_fpr() -> f64 {
    crate::detector::DEFAULT_TARGET_FPR
}
fn default_amplitude() -> f64 {
    30.0
}

impl InjectionConfig {
    pub fn spec(&self) -> InjectionSpec {
        InjectionSpec {
            period: self.period,
            amplitude: self.amplitude,
            phase_seed: self.seed,
            mode: self.mode,
            odd_harmonics_only: self.odd_harmonics_only,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative corpus paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.corpora.calibration_dir.as_mut() {
            resolve(p);
        }
        cfg.corpora.positive_dirs.iter_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_PERIODS.contains(&self.detector.period) {
            return Err(Error::Config(format!(
                "detector period must be one of {SUPPORTED_PERIODS:?}"
            )));
        }
        make_log_kernel(self.detector.sigma, self.detector.half_size)?;
        if !(self.detector.fpr > 0.0 && self.detector.fpr < 1.0) {
            return Err(Error::Config("detector fpr must lie in (0, 1)".into()));
        }
        if self.removal.periods.is_empty() {
            return Err(Error::Config("removal needs at least one period".into()));
        }
        for &p in &self.removal.periods {
            self.grid(p).resolve(1024, 1024).validate_params()?;
        }
        let generated =
            self.corpora.calibration_dir.is_none() || self.corpora.positive_dirs.is_empty();
        if generated {
            if self.corpora.generated_count == 0 {
                return Err(Error::Config("generated_count must be positive".into()));
            }
            if ![1, 3].contains(&self.corpora.generated_channels) {
                return Err(Error::Config("generated_channels must be 1 or 3".into()));
            }
        }
        if self.corpora.positive_dirs.is_empty() {
            let inj = self.injection.as_ref().ok_or_else(|| {
                Error::Config("[injection] is required for generated positives".into())
            })?;
            inj.spec().validate()?;
        }
        Ok(())
    }

    fn grid(&self, period: usize) -> GridConfig {
        GridConfig {
            period,
            dilation_radius: self.removal.dilate_radius,
            dc_guard_radius: self.removal.dc_radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub detector: DetectorSummary,
    pub corpora: Vec<CorpusReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectorSummary {
    pub period: usize,
    pub sigma: f64,
    pub half_size: usize,
    pub target_fpr: f64,
    pub threshold: f64,
    pub n_calibration: usize,
    /// False-alarm rate of the threshold on the calibration sample itself.
    pub calibration_fpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusReport {
    pub name: String,
    pub count: usize,
    pub tpr_before: f64,
    pub removals: Vec<RemovalOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemovalOutcome {
    pub period: usize,
    pub tpr_after: f64,
    /// `None` when the baseline rate is zero.
    pub relative_difference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub corpus: String,
    pub image: String,
    pub stage: String,
    pub score: f64,
    pub label: Label,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: EvalReport,
    pub scores: Vec<ScoreRow>,
}

impl ExperimentOutput {
    pub fn report_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.report).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn scores_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.scores {
            w.serialize(row)
                .map_err(|e| Error::Config(format!("scores csv: {e}")))?;
        }
        w.into_inner()
            .map_err(|e| Error::Config(format!("scores csv: {e}")))
    }

    /// Writes `report.json` and `scores.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("report.json"), self.report_json().as_bytes())?;
        write_atomic(&dir.join("scores.csv"), &self.scores_csv()?)
    }
}

/// splitmix64 of `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CALIBRATION_STREAM: u64 = 0;
const POSITIVE_STREAM: u64 = 1;

enum Source {
    Dir(Vec<PathBuf>),
    Generated {
        stream: u64,
        injection: Option<InjectionSpec>,
    },
}

struct Corpus {
    name: String,
    source: Source,
    len: usize,
}

impl Corpus {
    fn from_dir(dir: &Path) -> Result<Self> {
        let files = list_images(dir)?;
        if let Some(f) = files
            .iter()
            .find(|f| image_kind(f) == Some(ImageKind::Lossy))
        {
            return Err(
                Error::InvalidImage("lossy input is not accepted in experiments".into())
                    .at_step("load", f),
            );
        }
        if files.is_empty() {
            return Err(Error::EmptyInput("corpus directory").at_step("load", dir));
        }
        Ok(Self {
            name: dir.display().to_string(),
            len: files.len(),
            source: Source::Dir(files),
        })
    }

    fn item_name(&self, i: usize) -> String {
        match &self.source {
            Source::Dir(files) => files[i].display().to_string(),
            Source::Generated { .. } => format!("{}/{i:04}", self.name),
        }
    }

    fn load(&self, i: usize, cfg: &CorporaConfig) -> Result<RasterImage> {
        match &self.source {
            Source::Dir(files) => read_image(&files[i]),
            Source::Generated { stream, injection } => {
                let n = cfg.generated_size;
                let img = clean_noise_image(
                    n,
                    n,
                    cfg.generated_channels,
                    derive_seed(cfg.seed, *stream, i as u64),
                )?;
                match injection {
                    Some(spec) => inject_periodic_peaks(&img, spec),
                    None => Ok(img),
                }
            }
        }
    }
}

pub fn run_experiment(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentOutput> {
    config.validate()?;
    let det = &config.detector;
    let scorer = GridScorer::new(det.period, make_log_kernel(det.sigma, det.half_size)?)?;

    let calibration = match &config.corpora.calibration_dir {
        Some(dir) => Corpus::from_dir(dir)?,
        None => Corpus {
            name: "generated-real".into(),
            source: Source::Generated {
                stream: CALIBRATION_STREAM,
                injection: None,
            },
            len: config.corpora.generated_count,
        },
    };
    let positives = if config.corpora.positive_dirs.is_empty() {
        vec![Corpus {
            name: "generated-injected".into(),
            source: Source::Generated {
                stream: POSITIVE_STREAM,
                injection: config.injection.as_ref().map(InjectionConfig::spec),
            },
            len: config.corpora.generated_count,
        }]
    } else {
        config
            .corpora
            .positive_dirs
            .iter()
            .map(|d| Corpus::from_dir(d))
            .collect::<Result<Vec<_>>>()?
    };

    let real_scores: Vec<f64> = exec
        .map_indices(calibration.len, |i| {
            let img = calibration.load(i, &config.corpora)?;
            scorer.score(&img)
        })
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.at_step("calibration scoring", calibration.item_name(i))))
        .collect::<Result<_>>()?;
    let threshold =
        calibrate(&real_scores, det.fpr).map_err(|e| e.at_step("calibrate", &calibration.name))?;
    let label = |s: f64| {
        if s > threshold {
            Label::Synthetic
        } else {
            Label::Real
        }
    };

    let mut scores: Vec<ScoreRow> = real_scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoreRow {
            corpus: calibration.name.clone(),
            image: calibration.item_name(i),
            stage: "calibration".into(),
            score: s,
            label: label(s),
        })
        .collect();

    let periods = &config.removal.periods;
    let mut corpora = Vec::with_capacity(positives.len());
    for corpus in &positives {
        // per image: score before, then one score per removal period
        let per_image: Vec<Vec<f64>> = exec
            .map_indices(corpus.len, |i| -> Result<Vec<f64>> {
                let img = corpus
                    .load(i, &config.corpora)
                    .map_err(|e| e.at_step("load", corpus.item_name(i)))?;
                let mut out = vec![scorer
                    .score(&img)
                    .map_err(|e| e.at_step("score", corpus.item_name(i)))?];
                for &p in periods {
                    let spec = config.grid(p).resolve(img.height(), img.width());
                    let removed = remove_peaks(&img, &spec)
                        .map_err(|e| e.at_step("remove peaks", corpus.item_name(i)))?;
                    out.push(
                        scorer
                            .score(&removed.image)
                            .map_err(|e| e.at_step("rescore", corpus.item_name(i)))?,
                    );
                }
                Ok(out)
            })
            .into_iter()
            .collect::<Result<_>>()?;

        let column = |j: usize| per_image.iter().map(|v| v[j]).collect::<Vec<f64>>();
        let before = column(0);
        let tpr_before = tpr_at_threshold(&before, threshold)?;
        let mut removals = Vec::with_capacity(periods.len());
        for (j, &p) in periods.iter().enumerate() {
            let tpr_after = tpr_at_threshold(&column(j + 1), threshold)?;
            removals.push(RemovalOutcome {
                period: p,
                tpr_after,
                relative_difference: relative_difference(tpr_after, tpr_before).ok(),
            });
        }
        for (i, v) in per_image.iter().enumerate() {
            let stages = std::iter::once("before".to_string())
                .chain(periods.iter().map(|p| format!("after_rm{p}")));
            for (stage, &s) in stages.zip(v) {
                scores.push(ScoreRow {
                    corpus: corpus.name.clone(),
                    image: corpus.item_name(i),
                    stage,
                    score: s,
                    label: label(s),
                });
            }
        }
        corpora.push(CorpusReport {
            name: corpus.name.clone(),
            count: corpus.len,
            tpr_before,
            removals,
        });
    }

    let report = EvalReport {
        config: config.clone(),
        detector: DetectorSummary {
            period: det.period,
            sigma: det.sigma,
            half_size: det.half_size,
            target_fpr: det.fpr,
            threshold,
            n_calibration: real_scores.len(),
            calibration_fpr: tpr_at_threshold(&real_scores, threshold)?,
        },
        corpora,
    };
    Ok(ExperimentOutput { report, scores })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[corpora]
generated_count = 24
generated_size = 64
seed = 3

[removal]
periods = [8]

[detector]
period = 8

[injection]
mode = "cosine_comb"
period = 8
amplitude = 30.0
seed = 5
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.detector.sigma, 0.7);
        assert_eq!(cfg.detector.half_size, 5);
        assert_eq!(cfg.detector.fpr, 0.05);
        assert_eq!(cfg.corpora.generated_channels, 1);
        assert_eq!(cfg.injection.unwrap().mode, InjectionMode::CosineComb);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("[corpora]\n").is_err());
        let no_inj = SMALL.split("[injection]").next().unwrap();
        assert!(ExperimentConfig::from_toml_str(no_inj).is_err());
        let bad_period = SMALL.replace("[detector]\nperiod = 8", "[detector]\nperiod = 4");
        assert!(ExperimentConfig::from_toml_str(&bad_period).is_err());
        let typo = SMALL.replace("seed = 3", "sed = 3");
        assert!(ExperimentConfig::from_toml_str(&typo).is_err());
    }

    #[test]
    fn small_run_collapses_after_removal() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let out = run_experiment(&cfg, Execution::Sequential).unwrap();
        let c = &out.report.corpora[0];
        assert_eq!(c.count, 24);
        assert_eq!(c.tpr_before, 1.0);
        assert_eq!(c.removals[0].relative_difference, Some(-1.0));
        assert!(out.report.detector.calibration_fpr <= 0.05);
        assert_eq!(out.scores.len(), 24 + 24 * 2);
    }

    #[test]
    fn execution_mode_does_not_change_output() {
        let cfg = ExperimentConfig::from_toml_str(SMALL).unwrap();
        let a = run_experiment(&cfg, Execution::Sequential).unwrap();
        let b = run_experiment(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a.report_json(), b.report_json());
        assert_eq!(a.scores_csv().unwrap(), b.scores_csv().unwrap());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_eq!(derive_seed(9, 2, 3), derive_seed(9, 2, 3));
    }
}

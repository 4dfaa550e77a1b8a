use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specpeak::detector::{DEFAULT_HALF_SIZE, DEFAULT_SIGMA, DEFAULT_TARGET_FPR};
use specpeak::experiment::{derive_seed, run_experiment};
use specpeak::io::{
    image_kind, list_images, read_image, write_atomic, write_bilevel_png, write_gray_png,
    write_png, ImageKind,
};
use specpeak::removal::{remove_peaks_batch, BatchOptions};
use specpeak::spectral::{average_spectrum, AverageOptions, SpectrumStatistic, DEFAULT_LOG_FLOOR};
use specpeak::synth::{clean_noise_image, inject_periodic_peaks, InjectionMode, InjectionSpec};
use specpeak::{
    build_grid_mask, make_log_kernel, DetectorModel, Error, Execution, ExperimentConfig,
    GridConfig, GridScorer, LogKernel, RasterImage,
};

/// Spectral peak removal and peak-based detection of synthetic images.
#[derive(Debug, Parser)]
#[command(name = "specpeak", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Remove grid peaks from every image under a directory.
    RemovePeaks(RemovePeaksArgs),
    /// Calibrate a detector threshold on real images.
    Calibrate(CalibrateArgs),
    /// Write the grid score and label of each image as CSV.
    Score(ScoreArgs),
    /// Print the label of each image.
    Classify(ScoreArgs),
    /// Add periodic peaks to every image under a directory.
    Inject(InjectArgs),
    /// Write a corpus of clean Gaussian noise images.
    Generate(GenerateArgs),
    /// Render a (possibly averaged) log spectrum as an 8-bit PNG.
    Spectrum(SpectrumArgs),
    /// Dump a peak mask as a 1-bit PNG, DC at the top-left corner.
    Mask(MaskArgs),
    /// Run a before/after evaluation from an experiment config.
    Evaluate(EvaluateArgs),
}

fn parse_period(s: &str) -> Result<usize, String> {
    let p: usize = s.parse().map_err(|_| format!("not a whole number: {s}"))?;
    if p < 2 {
        return Err("period must be ≥ 2".into());
    }
    Ok(p)
}

fn parse_radius(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err("radius must be finite and ≥ 0".into());
    }
    Ok(r)
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Grid period P; peaks sit at multiples of N/P.
    #[arg(long, default_value_t = 8, value_parser = parse_period)]
    period: usize,
    /// Dilation radius in bins [default: 3 per 1024 pixels of the shorter side, at least 1]
    #[arg(long, value_parser = parse_radius)]
    dilate_radius: Option<f64>,
    /// DC guard radius in bins [default: same as the dilation default]
    #[arg(long, value_parser = parse_radius)]
    dc_radius: Option<f64>,
}

impl GridArgs {
    fn config(&self) -> GridConfig {
        GridConfig {
            period: self.period,
            dilation_radius: self.dilate_radius,
            dc_guard_radius: self.dc_radius,
        }
    }
}

#[derive(Debug, Args)]
struct KernelArgs {
    /// LoG standard deviation.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// LoG half size h; the kernel is (2h+1) x (2h+1).
    #[arg(long, default_value_t = DEFAULT_HALF_SIZE)]
    half_size: usize,
}

impl KernelArgs {
    fn kernel(&self) -> specpeak::Result<LogKernel> {
        make_log_kernel(self.sigma, self.half_size)
    }
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl ExecArgs {
    fn exec(&self) -> Execution {
        Execution::from_workers(self.workers)
    }
}

#[derive(Debug, Args)]
struct RemovePeaksArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Also process JPEG input; the summary gains a lossy_input column.
    #[arg(long)]
    allow_lossy: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Directory of real images.
    in_dir: PathBuf,
    /// Model file to write.
    #[arg(short, long, default_value = "model.json")]
    output: PathBuf,
    /// Detector period (8 or 16).
    #[arg(long, default_value_t = 8, value_parser = parse_period)]
    period: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Target false-alarm rate.
    #[arg(long, default_value_t = DEFAULT_TARGET_FPR)]
    fpr: f64,
    /// Timestamp stored in the model (RFC 3339) [default: $SOURCE_DATE_EPOCH, else now]
    #[arg(long)]
    created_at: Option<String>,
    #[arg(long)]
    allow_lossy: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Image files or directories.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Calibrated model file.
    #[arg(short, long)]
    model: PathBuf,
    /// Write to this file instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    allow_lossy: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    CosineComb,
    ResampleGrid,
}

#[derive(Debug, Args)]
struct InjectArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::CosineComb)]
    mode: ModeArg,
    #[arg(long, default_value_t = 8, value_parser = parse_period)]
    period: usize,
    /// Peak amplitude of the comb in intensity levels.
    #[arg(long, default_value_t = 30.0)]
    amplitude: f64,
    /// Phase seed, shared by all images.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only use frequencies absent from the P/2 grid.
    #[arg(long)]
    odd_harmonics_only: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// 1 (gray) or 3 (RGB).
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    /// An image, or a directory when --average is given.
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Average over every image in the input directory.
    #[arg(long)]
    average: bool,
    /// Transform the LoG residual instead of the pixels.
    #[arg(long)]
    residual: bool,
    /// Average magnitudes instead of power.
    #[arg(long)]
    magnitude: bool,
    /// Floor added before the logarithm.
    #[arg(long, default_value_t = DEFAULT_LOG_FLOOR)]
    floor: f64,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long)]
    allow_lossy: bool,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Directory for report.json and scores.csv.
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
}

/// An error caused by how the command was invoked rather than by the data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidParameter(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::RemovePeaks(a) => remove_peaks_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Score(a) => score_cmd(a, false),
        Command::Classify(a) => score_cmd(a, true),
        Command::Inject(a) => inject_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Spectrum(a) => spectrum_cmd(a),
        Command::Mask(a) => mask_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<BatchIoFailure>() {
        Ok(f) => {
            eprintln!("error: {f}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e),
    })
}

#[derive(Debug)]
struct BatchIoFailure(usize);

impl std::fmt::Display for BatchIoFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} file(s) failed with I/O errors; see summary.csv",
            self.0
        )
    }
}

impl std::error::Error for BatchIoFailure {}

fn remove_peaks_cmd(a: RemovePeaksArgs) -> anyhow::Result<()> {
    if !a.in_dir.is_dir() {
        return Err(usage(format!(
            "input directory not found: {}",
            a.in_dir.display()
        )));
    }
    let opts = BatchOptions {
        grid: a.grid.config(),
        allow_lossy: a.allow_lossy,
        exec: a.exec.exec(),
    };
    let summary = remove_peaks_batch(&a.in_dir, &a.out_dir, &opts)?;
    eprintln!(
        "processed {}, skipped {}, summary at {}",
        summary.processed(),
        summary.skipped(),
        a.out_dir.join("summary.csv").display()
    );
    match summary.io_failures() {
        0 => Ok(()),
        n => Err(BatchIoFailure(n).into()),
    }
}

/// Expands directories into their images and rejects lossy files unless allowed.
fn collect_inputs(inputs: &[PathBuf], allow_lossy: bool) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(usage(format!("no such file or directory: {}", p.display())));
        }
    }
    if !allow_lossy {
        if let Some(f) = files
            .iter()
            .find(|f| image_kind(f) == Some(ImageKind::Lossy))
        {
            return Err(usage(format!(
                "lossy input {} (pass --allow-lossy to accept it)",
                f.display()
            )));
        }
    }
    if files.is_empty() {
        return Err(usage("no images found"));
    }
    Ok(files)
}

fn score_files(
    files: &[PathBuf],
    scorer: &GridScorer,
    exec: Execution,
) -> anyhow::Result<Vec<f64>> {
    exec.map(files, |f| read_image(f).and_then(|img| scorer.score(&img)))
        .into_iter()
        .zip(files)
        .map(|(r, f)| r.with_context(|| format!("scoring {}", f.display())))
        .collect()
}

fn created_at(arg: Option<&str>) -> anyhow::Result<DateTime<Utc>> {
    if let Some(s) = arg {
        return DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| usage(format!("--created-at: {e}")));
    }
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("SOURCE_DATE_EPOCH is not an integer: {v}")))?;
            DateTime::from_timestamp(secs, 0).ok_or_else(|| usage("SOURCE_DATE_EPOCH out of range"))
        }
        Err(_) => Ok(Utc::now()),
    }
}

fn calibrate_cmd(a: CalibrateArgs) -> anyhow::Result<()> {
    let stamp = created_at(a.created_at.as_deref())?;
    let scorer = GridScorer::new(a.period, a.kernel.kernel()?)?;
    let files = collect_inputs(std::slice::from_ref(&a.in_dir), a.allow_lossy)?;
    let scores = score_files(&files, &scorer, a.exec.exec())?;
    let model = DetectorModel::from_scores(&scorer, &scores, a.fpr, stamp)?;
    let mut json = model.to_json();
    json.push('\n');
    write_atomic(&a.output, json.as_bytes())?;
    eprintln!(
        "threshold {} from {} images, written to {}",
        model.threshold,
        scores.len(),
        a.output.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<DetectorModel> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        anyhow!(Error::Io {
            path: path.to_path_buf(),
            source: e
        })
    })?;
    DetectorModel::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn score_cmd(a: ScoreArgs, labels_only: bool) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let scorer = GridScorer::from_model(&model)?;
    let files = collect_inputs(&a.inputs, a.allow_lossy)?;
    let scores = score_files(&files, &scorer, a.exec.exec())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    if labels_only {
        w.write_record(["path", "label"])?;
    } else {
        w.write_record(["path", "score", "label"])?;
    }
    for (f, &s) in files.iter().zip(&scores) {
        let path = f.display().to_string();
        let label = model.classify(s).to_string();
        if labels_only {
            w.write_record([path, label])?;
        } else {
            w.write_record([path, s.to_string(), label])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow!("csv: {e}"))?;
    match &a.output {
        Some(p) => write_atomic(p, &bytes)?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

fn inject_cmd(a: InjectArgs) -> anyhow::Result<()> {
    let spec = InjectionSpec {
        period: a.period,
        amplitude: a.amplitude,
        phase_seed: a.seed,
        mode: match a.mode {
            ModeArg::CosineComb => InjectionMode::CosineComb,
            ModeArg::ResampleGrid => InjectionMode::ResampleGrid,
        },
        odd_harmonics_only: a.odd_harmonics_only,
    };
    spec.validate()?;
    let files = collect_inputs(std::slice::from_ref(&a.in_dir), false)?;
    let results = a.exec.exec().map(&files, |f| -> specpeak::Result<()> {
        let img = inject_periodic_peaks(&read_image(f)?, &spec)?;
        let rel = f.strip_prefix(&a.in_dir).unwrap_or(f).with_extension("png");
        write_png(&a.out_dir.join(rel), &img)
    });
    for (r, f) in results.into_iter().zip(&files) {
        r.with_context(|| format!("injecting {}", f.display()))?;
    }
    eprintln!(
        "injected {} images into {}",
        files.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> anyhow::Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let results = a
        .exec
        .exec()
        .map_indices(a.count, |i| -> specpeak::Result<()> {
            let img =
                clean_noise_image(a.size, a.size, a.channels, derive_seed(a.seed, 0, i as u64))?;
            write_png(&a.out_dir.join(format!("{i:04}.png")), &img)
        });
    results.into_iter().collect::<specpeak::Result<()>>()?;
    eprintln!("wrote {} images to {}", a.count, a.out_dir.display());
    Ok(())
}

fn spectrum_cmd(a: SpectrumArgs) -> anyhow::Result<()> {
    if !a.average && a.input.is_dir() {
        return Err(usage(
            "input must be a single image unless --average is given",
        ));
    }
    let files = collect_inputs(std::slice::from_ref(&a.input), a.allow_lossy)?;
    let exec = a.exec.exec();
    let images: Vec<RasterImage> = exec
        .map(&files, |f| read_image(f))
        .into_iter()
        .zip(&files)
        .map(|(r, f)| r.with_context(|| format!("reading {}", f.display())))
        .collect::<anyhow::Result<_>>()?;
    let opts = AverageOptions {
        residual: if a.residual {
            Some(a.kernel.kernel()?)
        } else {
            None
        },
        statistic: if a.magnitude {
            SpectrumStatistic::Magnitude
        } else {
            SpectrumStatistic::Power
        },
        floor: a.floor,
    };
    let spectrum = average_spectrum(&images, &opts, exec)?;
    write_gray_png(&a.output, &spectrum.to_gray8())?;
    Ok(())
}

fn mask_cmd(a: MaskArgs) -> anyhow::Result<()> {
    let spec = a.grid.config().resolve(a.height, a.width);
    let mask = build_grid_mask(a.height, a.width, &spec)?;
    write_bilevel_png(&a.output, mask.bits())?;
    eprintln!(
        "{} of {} bins zeroed",
        mask.zero_count(),
        a.height * a.width
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(&a.config)?;
    let output = run_experiment(&config, a.exec.exec())?;
    output.write(&a.output)?;
    for c in &output.report.corpora {
        for r in &c.removals {
            eprintln!(
                "{}: tpr before {:.3}, after rm{} {:.3}",
                c.name, c.tpr_before, r.period, r.tpr_after
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn period_parser() {
        assert_eq!(parse_period("8"), Ok(8));
        assert_eq!(parse_period("1").unwrap_err(), "period must be ≥ 2");
        assert!(parse_period("x").is_err());
    }

    #[test]
    fn usage_errors_map_to_two() {
        assert_eq!(exit_code(&usage("bad")), 2);
        assert_eq!(exit_code(&Error::InvalidParameter("x".into()).into()), 2);
        assert_eq!(exit_code(&Error::EmptyInput("x").into()), 1);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }

    #[test]
    fn created_at_parses_rfc3339() {
        let t = created_at(Some("2020-01-02T03:04:05Z")).unwrap();
        assert_eq!(t.timestamp(), 1_577_934_245);
        assert!(created_at(Some("yesterday")).is_err());
    }
}

//! The `faceimu` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage (clap), 3 missing or
//! unreadable file, 4 schema or format violation, 5 socket/port error,
//! 6 pipeline runtime error. Failures print one line to stderr in the
//! form `error[<kind>] <message>`.
//!
//! `FACEIMU_PORT` and `FACEIMU_SEED` override the built-in defaults for
//! any subcommand that takes `--port` or `--seed`; explicit flags win
//! over the environment, and both win over `--config` values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faceimu_core::calib::{self, AccHeadComp, CalibratedSequence, RawSequence};
use faceimu_core::diffusion::{
    self, build_schedule, condition_matrix, ConditionWindow, DenoiserConfig, DenoiserParams,
    TrainOptions, TrainingWindow,
};
use faceimu_core::facesim::{
    self, synthetic, AccelDenominator, OrientationFrame, SimulationConfig, WeightSequence,
    WeightStyle,
};
use faceimu_core::metrics;
use faceimu_core::stream::DEFAULT_PORT;

use crate::formats::{self, FormatError, PipelineConfig};
use crate::net::{self, ClockInjection, IngestOptions, NetError, ReplayOptions};

// ------------------------------------------------------------------ errors

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Internal,
    Usage,
    File,
    Schema,
    Socket,
    Pipeline,
}

impl ErrorKind {
    pub fn exit_code(self) -> u8 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::File => 3,
            ErrorKind::Schema => 4,
            ErrorKind::Socket => 5,
            ErrorKind::Pipeline => 6,
        }
    }

    fn label(self) -> &'static str {
        match self {
            ErrorKind::Internal => "internal",
            ErrorKind::Usage => "usage",
            ErrorKind::File => "file",
            ErrorKind::Schema => "schema",
            ErrorKind::Socket => "socket",
            ErrorKind::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    pub fn pipeline(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Pipeline, message)
    }

    pub fn exit_code(&self) -> u8 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}] {}", self.kind.label(), self.message)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let kind = match &e {
            FormatError::Io { .. } => ErrorKind::File,
            FormatError::Schema { .. } => ErrorKind::Schema,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        let kind = match &e {
            NetError::Socket { .. } => ErrorKind::Socket,
            _ => ErrorKind::Pipeline,
        };
        Self::new(kind, e.to_string())
    }
}

macro_rules! pipeline_error {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::pipeline(e.to_string())
            }
        })*
    };
}

pipeline_error!(
    calib::CalibError,
    facesim::SimError,
    diffusion::DiffusionError,
    metrics::MetricsError,
    faceimu_core::stream::StreamError
);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::File, e.to_string())
    }
}

// Status output goes to stdout, which may be a pipe whose reader exits
// early (`faceimu ... | head`). A closed pipe means the consumer is done,
// not a failure; every other write error still propagates.
fn print_stdout(text: fmt::Arguments<'_>) -> Result<(), CliError> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

// -------------------------------------------------------------------- args

#[derive(Debug, Parser)]
#[command(
    name = "faceimu",
    version,
    about = "IMU facial-capture pipeline: simulate, stream, calibrate, train, infer, evaluate"
)]
pub struct Cli {
    /// Literal-equation fidelity mode: switches the simulated
    /// acceleration to the plain n*tau denominator and anchor frames to
    /// the raw (non-orthonormalized) edge matrix together.
    #[arg(long, global = true)]
    pub literal: bool,

    /// TOML or JSON file supplying defaults for shared knobs
    /// (fps, port, seed, schedule, training parameters).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic capture: raw sensor frames, ground-truth
    /// weights, and the matching neutral calibration profile.
    Simulate(SimulateArgs),
    /// Fit per-sensor magnetometer offset/scale from a sweep recording.
    MagCalibrate(MagCalibrateArgs),
    /// Stream a recorded sequence over UDP with optional clock skew and
    /// packet faults.
    Replay(ReplayArgs),
    /// Receive a UDP stream, fit sensor clocks, and assemble frames.
    Ingest(IngestArgs),
    /// Apply a calibration profile to raw frames.
    Calibrate(CalibrateArgs),
    /// Train the conditional denoiser on a dataset directory.
    Train(TrainArgs),
    /// Predict blendshape weights from calibrated frames, windowed.
    Infer(InferArgs),
    /// Compare predicted weights against ground truth through a rig.
    Eval(EvalArgs),
    /// Rank sensors by acceleration-magnitude variance over a clip.
    PlacementReport(PlacementArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    SpeechLike,
    Burst,
    Silent,
}

impl From<StyleArg> for WeightStyle {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::SpeechLike => WeightStyle::SpeechLike,
            StyleArg::Burst => WeightStyle::ExpressionBurst,
            StyleArg::Silent => WeightStyle::Silent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccelModeArg {
    Squared,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadCompArg {
    Literal,
    Inverse,
}

impl From<HeadCompArg> for AccHeadComp {
    fn from(m: HeadCompArg) -> Self {
        match m {
            HeadCompArg::Literal => AccHeadComp::Literal,
            HeadCompArg::Inverse => AccHeadComp::Inverse,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Rig JSON; the built-in half-ellipsoid rig when omitted.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long, env = "FACEIMU_SEED")]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = StyleArg::SpeechLike)]
    pub style: StyleArg,
    /// Peak smooth head-rotation amplitude; 0 disables head motion.
    #[arg(long, default_value_t = 10.0)]
    pub head_motion_deg: f64,
    /// Gaussian acceleration noise, m/s^2.
    #[arg(long, default_value_t = 0.0)]
    pub accel_noise: f64,
    /// Small-angle orientation noise, radians.
    #[arg(long, default_value_t = 0.0)]
    pub orient_noise: f64,
    /// Central-difference half-width for simulated accelerations.
    #[arg(long)]
    pub smoothing: Option<usize>,
    /// Acceleration denominator; `--literal` forces linear.
    #[arg(long, value_enum, default_value_t = AccelModeArg::Squared)]
    pub accel_mode: AccelModeArg,
    #[arg(long, value_name = "PATH")]
    pub out_raw: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out_weights: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out_profile: Option<PathBuf>,
    /// Dump the rig actually used (handy with the built-in rig).
    #[arg(long, value_name = "PATH")]
    pub out_rig: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MagCalibrateArgs {
    /// Sweep CSV with header sensor,x,y,z.
    #[arg(long, value_name = "PATH")]
    pub sweep: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Frames JSONL to stream.
    #[arg(long, value_name = "PATH")]
    pub frames: PathBuf,
    #[arg(long, env = "FACEIMU_PORT")]
    pub port: Option<u16>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Sleep between frames, microseconds.
    #[arg(long, default_value_t = 300)]
    pub pace_us: u64,
    #[arg(long, default_value_t = 20)]
    pub sync_rounds: usize,
    /// Injected device-clock offset, `sensor=microseconds` (repeatable).
    #[arg(long, value_name = "SENSOR=US", value_parser = parse_assign)]
    pub offset_us: Vec<(u8, f64)>,
    /// Injected device-clock drift, `sensor=ppm` (repeatable).
    #[arg(long, value_name = "SENSOR=PPM", value_parser = parse_assign)]
    pub drift_ppm: Vec<(u8, f64)>,
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub corrupt_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub duplicate_rate: f64,
    #[arg(long, env = "FACEIMU_SEED")]
    pub seed: Option<u64>,
    /// Emit a tap-marker packet at this frame.
    #[arg(long)]
    pub tap_frame: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub tap_sensor: u8,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, env = "FACEIMU_PORT")]
    pub port: Option<u16>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// JSON report: clock fits, tap location, packet accounting.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Auxiliary (house-clock) sensor id.
    #[arg(long)]
    pub aux: Option<u8>,
    #[arg(long, default_value_t = 500)]
    pub idle_ms: u64,
    #[arg(long, default_value_t = 60_000)]
    pub max_wait_ms: u64,
    /// Sensor checked for the alignment tap spike.
    #[arg(long)]
    pub tap_sensor: Option<u8>,
    /// Disable tap detection.
    #[arg(long)]
    pub no_tap: bool,
    #[arg(long, default_value_t = faceimu_core::stream::TAP_DEFAULT_K)]
    pub tap_k: f64,
    /// Drop all frames before the detected tap.
    #[arg(long)]
    pub crop_at_tap: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_name = "PATH")]
    pub raw: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub profile: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Head compensation route for accelerations.
    #[arg(long, value_enum, default_value_t = HeadCompArg::Literal)]
    pub accel_head: HeadCompArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of `<name>.calibrated.jsonl` + `<name>.weights.csv`
    /// pairs; pairs sort by name, the last `--holdout` are held out.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long)]
    pub aux: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Window stride over each sequence; defaults to the window length.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, env = "FACEIMU_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_noise: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Sequences (not windows) held out for the eval-loss trace.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub ff_width: usize,
    /// Disable the learned positional table.
    #[arg(long)]
    pub no_positional: bool,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_name = "PATH")]
    pub calibrated: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    #[arg(long)]
    pub aux: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, env = "FACEIMU_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub t_noise: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub pred: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub gt: PathBuf,
    /// Rig JSON; the built-in rig when omitted.
    #[arg(long)]
    pub rig: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out_json: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlacementArgs {
    #[arg(long, value_name = "PATH")]
    pub calibrated: PathBuf,
    #[arg(long)]
    pub aux: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn parse_assign(s: &str) -> Result<(u8, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected SENSOR=VALUE, got {s:?}"))?;
    let sensor = k.trim().parse::<u8>().map_err(|e| format!("sensor {k:?}: {e}"))?;
    let value = v.trim().parse::<f64>().map_err(|e| format!("value {v:?}: {e}"))?;
    Ok((sensor, value))
}

// --------------------------------------------------------------- dispatch

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => formats::load_config(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Simulate(ref args) => run_simulate(args, cli.literal, &config),
        Command::MagCalibrate(ref args) => run_mag_calibrate(args),
        Command::Replay(ref args) => run_replay(args, &config),
        Command::Ingest(ref args) => run_ingest(args, &config),
        Command::Calibrate(ref args) => run_calibrate(args),
        Command::Train(ref args) => run_train(args, &config),
        Command::Infer(ref args) => run_infer(args, &config),
        Command::Eval(ref args) => run_eval(args),
        Command::PlacementReport(ref args) => run_placement(args, &config),
    }
}

fn load_rig_or_builtin(path: Option<&Path>) -> Result<facesim::BlendshapeRig, CliError> {
    match path {
        Some(p) => Ok(formats::load_rig(p)?),
        None => Ok(synthetic::default_rig()),
    }
}

fn run_simulate(args: &SimulateArgs, literal: bool, config: &PipelineConfig) -> Result<(), CliError> {
    let rig = load_rig_or_builtin(args.rig.as_deref())?;
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let fps = args.fps.or(config.fps).unwrap_or(facesim::DEFAULT_FPS);
    let smoothing = args.smoothing.or(config.smoothing).unwrap_or(facesim::DEFAULT_SMOOTHING);
    if args.frames == 0 {
        return Err(CliError::usage("--frames must be nonzero"));
    }

    let weights = facesim::generate_synthetic_weights(rig.m(), args.frames, seed, args.style.into());
    let head = if args.head_motion_deg > 0.0 {
        Some(synthetic::smooth_head_motion(
            args.frames,
            seed.wrapping_add(1),
            args.head_motion_deg.to_radians(),
        ))
    } else {
        None
    };

    let denominator = if literal || args.accel_mode == AccelModeArg::Linear {
        AccelDenominator::Linear
    } else {
        AccelDenominator::Squared
    };
    let orientation = if literal { OrientationFrame::Literal } else { OrientationFrame::Orthonormal };
    let sim_config = SimulationConfig {
        n: smoothing,
        fps,
        denominator,
        orientation,
        accel_noise_std: args.accel_noise,
        orient_noise_std: args.orient_noise,
        seed: seed.wrapping_add(2),
        ..SimulationConfig::default()
    };
    let output = facesim::simulate_sequence(&rig, &weights, head.as_deref(), &sim_config)?;

    formats::save_frames(&args.out_raw, &output.raw, None)?;
    if let Some(path) = &args.out_weights {
        formats::save_weights(path, &weights)?;
    }
    if let Some(path) = &args.out_profile {
        formats::save_profile(path, &output.profile)?;
    }
    if let Some(path) = &args.out_rig {
        formats::save_rig(path, &rig)?;
    }
    print_stdout(format_args!(
        "simulated {} frames, {} sensors (1 aux + {} anchors), {} boundary frames",
        args.frames,
        output.raw.num_sensors(),
        output.raw.num_sensors() - 1,
        output.boundary_frames.len()
    ))?;
    Ok(())
}

fn run_mag_calibrate(args: &MagCalibrateArgs) -> Result<(), CliError> {
    let sweep = formats::load_mag_sweep(&args.sweep)?;
    let mut entries = Vec::new();
    for (sensor, samples) in &sweep {
        let cal = calib::mag_calibrate(samples)?;
        entries.push(formats::MagReportEntry {
            sensor: *sensor,
            offset: [cal.offset.x, cal.offset.y, cal.offset.z],
            scale: [cal.scale.x, cal.scale.y, cal.scale.z],
        });
    }
    formats::save_mag_report(&args.out, &entries)?;
    print_stdout(format_args!(
        "calibrated {} sensors from {}",
        entries.len(),
        args.sweep.display()
    ))?;
    Ok(())
}

fn run_replay(args: &ReplayArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let frames = formats::load_frames(&args.frames)?;
    let opts = ReplayOptions {
        port: args.port.or(config.port).unwrap_or(DEFAULT_PORT),
        fps: args.fps.or(config.fps).unwrap_or(60.0),
        sync_rounds: args.sync_rounds,
        clocks: ClockInjection {
            offset_us: args.offset_us.iter().copied().collect::<BTreeMap<_, _>>(),
            drift_ppm: args.drift_ppm.iter().copied().collect::<BTreeMap<_, _>>(),
        },
        drop_rate: args.drop_rate,
        corrupt_rate: args.corrupt_rate,
        duplicate_rate: args.duplicate_rate,
        seed: args.seed.or(config.seed).unwrap_or(0),
        pace_us: args.pace_us,
        tap_frame: args.tap_frame,
        tap_sensor: args.tap_sensor,
    };
    let stats = net::replay(&frames.sequence, &opts)?;
    print_stdout(format_args!(
        "replayed {} packets ({} pulses, {} dropped, {} corrupted, {} duplicated) to port {}",
        stats.sent, stats.pulses, stats.dropped, stats.corrupted, stats.duplicated, opts.port
    ))?;
    Ok(())
}

fn run_ingest(args: &IngestArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let port = args.port.or(config.port).unwrap_or(DEFAULT_PORT);
    let tap_sensor = if args.no_tap {
        None
    } else {
        Some(args.tap_sensor.or(config.tap_sensor).unwrap_or(8))
    };
    let opts = IngestOptions {
        port,
        fps: args.fps.or(config.fps).unwrap_or(60.0),
        aux_index: args.aux.or(config.aux_index.map(|a| a as u8)).unwrap_or(0),
        idle_timeout: Duration::from_millis(args.idle_ms),
        max_wait: Duration::from_millis(args.max_wait_ms),
        tap_sensor,
        tap_k: args.tap_k,
    };
    let socket = net::bind_ingest_socket(port)?;
    let outcome = net::ingest(&socket, &opts)?;

    let mut seq = outcome.frames.to_raw_sequence();
    let mut times: Vec<f64> =
        (0..outcome.frames.num_frames()).map(|f| outcome.frames.frame_time_us(f)).collect();
    let mut first_frame = 0usize;
    if args.crop_at_tap {
        let tap = outcome
            .tap
            .as_ref()
            .ok_or_else(|| CliError::pipeline("--crop-at-tap set but no tap was detected"))?;
        first_frame = tap.frame;
        for stream in &mut seq.samples {
            stream.drain(..first_frame);
        }
        times.drain(..first_frame);
    }
    formats::save_frames(&args.out, &seq, Some(&times))?;

    let (measured, interpolated, held) = outcome.provenance_counts();
    if let Some(path) = &args.report {
        let report = formats::IngestReportJson {
            clock: outcome
                .clock
                .entries
                .iter()
                .map(|(s, e)| formats::ClockEntryJson {
                    sensor: *s,
                    offset_us: e.offset_us,
                    drift_ppm: e.drift_ppm,
                })
                .collect(),
            tap_frame: outcome.tap.as_ref().map(|t| t.frame),
            tap_marker_frame: outcome.tap_marker_frame,
            frames: outcome.frames.num_frames(),
            packets_received: outcome.packets_received,
            packets_rejected: outcome.packets_rejected,
            duplicates_dropped: outcome.duplicates_dropped,
            frames_measured: measured,
            frames_interpolated: interpolated,
            frames_held: held,
        };
        formats::save_ingest_report(path, &report)?;
    }
    let tap_note = match (&outcome.tap, args.crop_at_tap) {
        (Some(t), true) => format!(", tap at frame {} (cropped)", t.frame),
        (Some(t), false) => format!(", tap at frame {}", t.frame),
        (None, _) => String::new(),
    };
    print_stdout(format_args!(
        "assembled {} frames ({} measured, {} interpolated, {} held slots){} from {} packets",
        seq.num_frames() + if args.crop_at_tap { first_frame } else { 0 } - first_frame,
        measured,
        interpolated,
        held,
        tap_note,
        outcome.packets_received
    ))?;
    Ok(())
}

fn run_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let frames = formats::load_frames(&args.raw)?;
    let profile = formats::load_profile(&args.profile)?;
    let calibrated = calib::calibrate_sequence(&profile, &frames.sequence, args.accel_head.into())?;
    let as_raw = RawSequence { samples: calibrated.samples };
    formats::save_frames(&args.out, &as_raw, frames.times_us.as_deref())?;
    print_stdout(format_args!(
        "calibrated {} frames, {} sensors (aux {})",
        as_raw.num_frames(),
        as_raw.num_sensors(),
        profile.aux_index
    ))?;
    Ok(())
}

struct DatasetPair {
    name: String,
    calibrated: CalibratedSequence,
    weights: WeightSequence,
}

const CALIBRATED_SUFFIX: &str = ".calibrated.jsonl";
const WEIGHTS_SUFFIX: &str = ".weights.csv";

fn load_dataset(dir: &Path) -> Result<Vec<DatasetPair>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::new(ErrorKind::File, format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::new(ErrorKind::File, e.to_string()))?;
        let file_name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = file_name.strip_suffix(CALIBRATED_SUFFIX) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::new(
            ErrorKind::File,
            format!("{}: no *{CALIBRATED_SUFFIX} files", dir.display()),
        ));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let calibrated_path = dir.join(format!("{name}{CALIBRATED_SUFFIX}"));
        let weights_path = dir.join(format!("{name}{WEIGHTS_SUFFIX}"));
        let frames = formats::load_frames(&calibrated_path)?;
        let weights = formats::load_weights(&weights_path)?;
        if weights.num_frames() != frames.sequence.num_frames() {
            return Err(CliError::new(
                ErrorKind::Schema,
                format!(
                    "{name}: {} weight rows for {} frames",
                    weights.num_frames(),
                    frames.sequence.num_frames()
                ),
            ));
        }
        pairs.push(DatasetPair {
            name,
            calibrated: CalibratedSequence { samples: frames.sequence.samples },
            weights,
        });
    }
    Ok(pairs)
}

fn windows_from_pair(
    pair: &DatasetPair,
    aux: usize,
    cfg: &DenoiserConfig,
    stride: usize,
) -> Result<Vec<TrainingWindow>, CliError> {
    let cond = condition_matrix(&pair.calibrated, aux)?;
    if cond.cols() != cfg.condition_width {
        return Err(CliError::new(
            ErrorKind::Schema,
            format!(
                "{}: condition width {} does not match dataset width {}",
                pair.name,
                cond.cols(),
                cfg.condition_width
            ),
        ));
    }
    let n = cond.rows();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + cfg.window <= n {
        let cw = ConditionWindow::from_calibrated(&pair.calibrated, aux, start, cfg.window)?;
        let mut target = faceimu_core::autodiff::Tensor::zeros(cfg.window, cfg.blendshapes);
        for r in 0..cfg.window {
            for c in 0..cfg.blendshapes {
                target.set(r, c, pair.weights.frames[start + r][c]);
            }
        }
        windows.push(TrainingWindow::new(cw, target, cfg)?);
        start += stride;
    }
    Ok(windows)
}

fn run_train(args: &TrainArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let aux = args.aux.or(config.aux_index).unwrap_or(0);
    let pairs = load_dataset(&args.dataset)?;
    if args.holdout >= pairs.len() {
        return Err(CliError::usage(format!(
            "--holdout {} leaves no training sequences (dataset has {})",
            args.holdout,
            pairs.len()
        )));
    }

    let m = pairs[0].weights.m;
    let sensors = pairs[0].calibrated.num_sensors();
    for p in &pairs {
        if p.weights.m != m || p.calibrated.num_sensors() != sensors {
            return Err(CliError::new(
                ErrorKind::Schema,
                format!("{}: inconsistent channel or sensor count", p.name),
            ));
        }
    }
    let window = args.window.or(config.window).unwrap_or(24);
    let cfg = DenoiserConfig {
        layers: args.layers,
        d_model: args.d_model,
        heads: args.heads,
        ff_width: args.ff_width,
        window,
        blendshapes: m,
        condition_width: (sensors - 1) * diffusion::CONDITION_BLOCK,
    };
    cfg.validate()?;
    let stride = args.stride.unwrap_or(window).max(1);

    let split = pairs.len() - args.holdout;
    let mut train_windows = Vec::new();
    let mut eval_windows = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let mut w = windows_from_pair(pair, aux, &cfg, stride)?;
        if i < split {
            train_windows.append(&mut w);
        } else {
            eval_windows.append(&mut w);
        }
    }
    if train_windows.is_empty() {
        return Err(CliError::pipeline("dataset yields no training windows"));
    }

    let schedule = build_schedule(
        args.t_noise.or(config.t_noise).unwrap_or(diffusion::TOY_T_NOISE),
        args.beta_start.or(config.beta_start).unwrap_or(diffusion::DEFAULT_BETA_START),
        args.beta_end.or(config.beta_end).unwrap_or(diffusion::DEFAULT_BETA_END),
    )?;
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let opts = TrainOptions {
        epochs: args.epochs.or(config.epochs).unwrap_or(30),
        batch_size: args.batch.or(config.batch_size).unwrap_or(16),
        lr: args.lr.or(config.lr).unwrap_or(1e-3),
        seed,
    };
    let mut params = DenoiserParams::init(cfg, !args.no_positional, seed)?;
    let trace = diffusion::train(&mut params, &schedule, &train_windows, &eval_windows, &opts)?;

    formats::save_model(&args.out, &params)?;
    if let Some(path) = &args.loss_csv {
        formats::save_loss_csv(path, &trace)?;
    }
    let first = trace.first();
    let last = trace.last();
    print_stdout(format_args!(
        "trained {} epochs on {} windows ({} eval): train loss {} -> {}",
        trace.len(),
        train_windows.len(),
        eval_windows.len(),
        first.map(|e| e.train_loss.to_string()).unwrap_or_else(|| "-".into()),
        last.map(|e| e.train_loss.to_string()).unwrap_or_else(|| "-".into()),
    ))?;
    Ok(())
}

fn run_infer(args: &InferArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let params = formats::load_model(&args.model)?;
    let frames = formats::load_frames(&args.calibrated)?;
    let calibrated = CalibratedSequence { samples: frames.sequence.samples };
    let aux = args.aux.or(config.aux_index).unwrap_or(0);
    let cond = condition_matrix(&calibrated, aux)?;
    let schedule = build_schedule(
        args.t_noise.or(config.t_noise).unwrap_or(diffusion::TOY_T_NOISE),
        args.beta_start.or(config.beta_start).unwrap_or(diffusion::DEFAULT_BETA_START),
        args.beta_end.or(config.beta_end).unwrap_or(diffusion::DEFAULT_BETA_END),
    )?;
    let overlap = args.overlap.or(config.overlap).unwrap_or(params.config.window / 3);
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let out = diffusion::windowed_inference(&params, &schedule, &cond, overlap, seed)?;

    let weights = WeightSequence {
        m: out.cols(),
        frames: (0..out.rows())
            .map(|r| (0..out.cols()).map(|c| out.get(r, c)).collect())
            .collect(),
    };
    formats::save_weights(&args.out, &weights)?;
    print_stdout(format_args!(
        "inferred {} frames x {} channels (window {}, overlap {})",
        weights.num_frames(),
        weights.m,
        params.config.window,
        overlap
    ))?;
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let pred = formats::load_weights(&args.pred)?;
    let gt = formats::load_weights(&args.gt)?;
    let rig = load_rig_or_builtin(args.rig.as_deref())?;
    let report = metrics::evaluate_weight_sequences(&rig, &pred, &gt)?;
    formats::save_eval_report(args.out_json.as_deref(), args.out_csv.as_deref(), &report)?;
    print_stdout(format_args!(
        "pve {:.6} +/- {:.6} mm, landmarks {:.6} +/- {:.6} mm, weight mse {:.6} over {} frames",
        report.pve_mean,
        report.pve_std,
        report.pve_lmk_mean,
        report.pve_lmk_std,
        report.mse,
        report.pve_trace.len()
    ))?;
    Ok(())
}

fn run_placement(args: &PlacementArgs, config: &PipelineConfig) -> Result<(), CliError> {
    let frames = formats::load_frames(&args.calibrated)?;
    let aux = args.aux.or(config.aux_index).unwrap_or(0);
    let mut entries = Vec::new();
    for (sensor, stream) in frames.sequence.samples.iter().enumerate() {
        if sensor == aux {
            continue;
        }
        let series: Vec<_> = stream.iter().map(|s| s.a).collect();
        let sensitivity = metrics::placement_sensitivity(&series)?;
        entries.push(formats::SensitivityEntry { sensor, sensitivity });
    }
    entries.sort_by(|a, b| b.sensitivity.partial_cmp(&a.sensitivity).expect("finite variance"));
    if let Some(path) = &args.out {
        formats::save_sensitivity_report(path, &entries)?;
    }
    let rows: Vec<(String, String)> = entries
        .iter()
        .map(|e| (format!("sensor {}", e.sensor), format!("{:.6}", e.sensitivity)))
        .collect();
    match formats::write_table(std::io::stdout().lock(), &rows) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        other => other?,
    }
    Ok(())
}

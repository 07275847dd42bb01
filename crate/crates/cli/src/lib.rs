//! Argument parsing, config resolution and the subcommands behind `equarx`.
//!
//! Settings resolve in three layers: the named preset, then the JSON config
//! file, then command-line flags.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use equarx::analysis::{self, Flavor, StudyParams};
use equarx::simnet::{self, ComputeParams, LinkParams, Preset, SimPlan};
use equarx::{CodecKind, CollectiveConfig, PartitionSpec, Variant};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "equarx", version, about = "Quantized ring AllReduce: error studies and cost-model simulation")]
pub struct Cli {
    /// Base seed; device d draws its input from seed + d
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Hardware calibration preset
    #[arg(long, global = true)]
    pub preset: Option<String>,

    /// JSON config file (flags override its fields)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Write results here instead of stdout
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,

    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stages {
    None,
    Rs,
    Ag,
    Both,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one flavor: MSE against the BF16 baseline plus simulated time
    Simulate(Overrides),
    /// Baseline, naive FP8 and all six quantized flavors on one input
    Tradeoff(Overrides),
    /// Predicted time relative to the baseline across tensor sizes
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Tensor sizes in bytes; accepts KiB/MiB/GiB suffixes
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<String>>,
    },
    /// Scheduled events of one simulated AllReduce
    Timeline(Overrides),
    /// Bandwidth lower bounds of both reduce-scatter variants
    Bounds {
        #[command(flatten)]
        overrides: Overrides,
        /// Input size in bytes; accepts KiB/MiB/GiB suffixes
        #[arg(long)]
        bytes: Option<String>,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_enum)]
    pub stages: Option<Stages>,
    #[arg(long)]
    pub codec: Option<CodecKind>,
    #[arg(long)]
    pub num_devices: Option<usize>,
    /// Scale-factor blocks per shard; overrides --block-size
    #[arg(long)]
    pub minishards: Option<usize>,
    /// Chunks sharing one scale factor
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub microshards: Option<usize>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Bytes per second per link direction
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Seconds
    #[arg(long)]
    pub hop_latency: Option<f64>,
}

/// Config file schema. Every field is optional; unknown keys are rejected.
#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub variant: Option<Variant>,
    pub quantize_rs: Option<bool>,
    pub quantize_ag: Option<bool>,
    pub codec: Option<CodecKind>,
    pub num_devices: Option<usize>,
    pub minishards: Option<usize>,
    pub block_size: Option<usize>,
    pub microshards: Option<usize>,
    pub rows: Option<usize>,
    pub cols: Option<usize>,
    pub seed: Option<u64>,
    pub link: Option<LinkParams>,
    pub compute: Option<ComputeParams>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))
    }
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub variant: Variant,
    pub quantize_rs: bool,
    pub quantize_ag: bool,
    pub kind: CodecKind,
    pub num_devices: usize,
    pub minishards: Option<usize>,
    pub block_size: usize,
    pub microshards: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub link: LinkParams,
    pub compute: ComputeParams,
    pub output: Option<PathBuf>,
    pub format: Format,
}

impl Settings {
    pub fn resolve(cli: &Cli, overrides: &Overrides) -> Result<Self, CliError> {
        let file = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                RunConfig::parse(&text, &path.display().to_string())?
            }
            None => RunConfig::default(),
        };
        let preset_name = cli.preset.clone().or(file.preset.clone()).unwrap_or_else(|| "v5e-like".to_string());
        let preset = Preset::named(&preset_name)?;
        let mut link = file.link.unwrap_or(preset.link);
        if let Some(b) = overrides.bandwidth {
            link.bandwidth = b;
        }
        if let Some(l) = overrides.hop_latency {
            link.hop_latency = l;
        }
        let (mut rs, mut ag) = (file.quantize_rs.unwrap_or(true), file.quantize_ag.unwrap_or(true));
        if let Some(st) = overrides.stages {
            (rs, ag) = match st {
                Stages::None => (false, false),
                Stages::Rs => (true, false),
                Stages::Ag => (false, true),
                Stages::Both => (true, true),
            };
        }
        let s = Settings {
            variant: overrides.variant.or(file.variant).unwrap_or(Variant::FullLoop),
            quantize_rs: rs,
            quantize_ag: ag,
            kind: overrides.codec.or(file.codec).unwrap_or(CodecKind::Int8),
            num_devices: overrides.num_devices.or(file.num_devices).unwrap_or(preset.num_devices),
            minishards: overrides.minishards.or(file.minishards),
            block_size: overrides.block_size.or(file.block_size).unwrap_or(preset.block_size),
            microshards: overrides.microshards.or(file.microshards).unwrap_or(preset.microshards),
            rows: overrides.rows.or(file.rows).unwrap_or(4096),
            cols: overrides.cols.or(file.cols).unwrap_or(4096),
            seed: cli.seed.or(file.seed).unwrap_or(0),
            link,
            compute: file.compute.unwrap_or(preset.compute),
            output: cli.output.clone().or(file.output),
            format: cli.format.or(file.format).unwrap_or(Format::Csv),
        };
        s.link.validate()?;
        s.compute.validate()?;
        Ok(s)
    }

    pub fn spec(&self) -> Result<PartitionSpec, CliError> {
        let elements = self.rows * self.cols;
        let spec = match self.minishards {
            Some(m) => PartitionSpec::new(self.num_devices, m, self.microshards)?,
            None => PartitionSpec::for_block_size(elements, self.num_devices, self.block_size, self.microshards)?,
        };
        spec.check(elements)?;
        Ok(spec)
    }

    pub fn collective(&self) -> Result<CollectiveConfig, CliError> {
        let cfg = CollectiveConfig { variant: self.variant, quantize_rs: self.quantize_rs, quantize_ag: self.quantize_ag, kind: self.kind, spec: self.spec()? };
        cfg.validate()?;
        Ok(cfg)
    }

    fn flavor(&self) -> Flavor {
        Flavor::Equarx { variant: self.variant, rs: self.quantize_rs, ag: self.quantize_ag }
    }
}

/// Failure with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const CONFIG: i32 = 2;
    pub const CONSTRAINT: i32 = 3;
    pub const IO: i32 = 1;

    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: Self::CONFIG, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        CliError { code: Self::IO, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<equarx::Error> for CliError {
    fn from(e: equarx::Error) -> Self {
        let code = if e.is_constraint() { Self::CONSTRAINT } else { Self::CONFIG };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateRecord {
    pub flavor: String,
    pub variant: String,
    pub stages: String,
    pub codec: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub m: usize,
    pub u: usize,
    pub seed: u64,
    pub mse: f64,
    pub total_time_s: f64,
    pub baseline_time_s: f64,
    pub predicted_speedup: f64,
    pub idle_cw_s: f64,
    pub idle_ccw_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRecord {
    pub variant: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub bytes: usize,
    pub bandwidth: f64,
    pub lower_bound_s: f64,
}

/// Parse `123`, `4KiB`, `16MiB`, `1GiB`.
pub fn parse_size(text: &str) -> Result<usize, CliError> {
    let t = text.trim();
    let (num, mult) = [("GiB", 1usize << 30), ("MiB", 1 << 20), ("KiB", 1 << 10), ("B", 1)]
        .iter()
        .find_map(|(suf, m)| t.strip_suffix(suf).map(|n| (n.trim(), *m)))
        .unwrap_or((t, 1));
    num.parse::<usize>().ok().and_then(|n| n.checked_mul(mult)).ok_or_else(|| CliError::config(format!("invalid size `{text}`")))
}

fn render<T: Serialize>(rows: &[T], format: Format) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    match format {
        Format::Csv => analysis::write_csv(&mut buf, rows)?,
        Format::Json => analysis::write_json(&mut buf, rows)?,
    }
    Ok(buf)
}

/// Execute the command and return its output bytes plus where they go.
pub fn execute(cli: &Cli) -> Result<(Vec<u8>, Option<PathBuf>), CliError> {
    match &cli.command {
        Command::Simulate(o) => {
            let s = Settings::resolve(cli, o)?;
            let cfg = s.collective()?;
            let bytes = s.rows * s.cols * 2;
            let inputs = analysis::device_inputs(cfg.spec.num_devices, s.rows, s.cols, s.seed);
            let baseline = Flavor::Baseline.run(&inputs, s.kind, &cfg.spec)?;
            let flavor = s.flavor();
            let err = analysis::mse(&baseline, &flavor.run(&inputs, s.kind, &cfg.spec)?)?;
            drop(inputs);
            let timeline = simnet::simulate(&cfg, bytes, &s.link, &s.compute)?;
            let base_t = simnet::simulate_plan(&SimPlan::baseline(cfg.spec), bytes, &s.link, &s.compute)?.total_time;
            let idle = simnet::idle_time(&timeline);
            let rec = SimulateRecord {
                flavor: flavor.name().into(),
                variant: s.variant.name().into(),
                stages: flavor.stages().into(),
                codec: s.kind.name().into(),
                n: cfg.spec.num_devices,
                rows: s.rows,
                cols: s.cols,
                m: cfg.spec.minishards,
                u: cfg.spec.microshards,
                seed: s.seed,
                mse: err,
                total_time_s: timeline.total_time,
                baseline_time_s: base_t,
                predicted_speedup: base_t / timeline.total_time,
                idle_cw_s: idle.cw,
                idle_ccw_s: idle.ccw,
            };
            Ok((render(&[rec], s.format)?, s.output))
        }
        Command::Tradeoff(o) => {
            let s = Settings::resolve(cli, o)?;
            let params = StudyParams { rows: s.rows, cols: s.cols, spec: s.spec()?, kind: s.kind, seed: s.seed, link: s.link, compute: s.compute };
            let rows = analysis::tradeoff_study(&params)?;
            Ok((render(&rows, s.format)?, s.output))
        }
        Command::Sweep { overrides, sizes } => {
            let s = Settings::resolve(cli, overrides)?;
            let sizes: Vec<usize> = match sizes {
                Some(list) => list.iter().map(|t| parse_size(t)).collect::<Result<_, _>>()?,
                None => (0..9).map(|i| (1usize << 20) << i).collect(),
            };
            let spec = PartitionSpec::new(s.num_devices, 1, s.microshards)?;
            let cfg = CollectiveConfig { variant: s.variant, quantize_rs: s.quantize_rs, quantize_ag: s.quantize_ag, kind: s.kind, spec };
            if s.minishards.is_some() {
                return Err(CliError::config("sweep derives minishards per size from --block-size; --minishards is not accepted"));
            }
            let points = analysis::size_sweep(&sizes, &cfg, &s.link, &s.compute, s.block_size)?;
            Ok((render(&points, s.format)?, s.output))
        }
        Command::Timeline(o) => {
            let s = Settings::resolve(cli, o)?;
            let cfg = s.collective()?;
            let timeline = simnet::simulate(&cfg, s.rows * s.cols * 2, &s.link, &s.compute)?;
            let buf = match s.format {
                Format::Json => {
                    let mut buf = Vec::new();
                    timeline.write_jsonl(&mut buf).map_err(|e| CliError::io(e.to_string()))?;
                    buf
                }
                Format::Csv => render(&timeline.records().collect::<Vec<_>>(), Format::Csv)?,
            };
            Ok((buf, s.output))
        }
        Command::Bounds { overrides, bytes } => {
            let s = Settings::resolve(cli, overrides)?;
            let bytes = match bytes {
                Some(b) => parse_size(b)?,
                None => s.rows * s.cols * 2,
            };
            let rows: Vec<BoundRecord> = [Variant::FullLoop, Variant::SemiLoop]
                .into_iter()
                .map(|v| BoundRecord {
                    variant: v.name().into(),
                    n: s.num_devices,
                    bytes,
                    bandwidth: s.link.bandwidth,
                    lower_bound_s: simnet::lower_bound(v, s.num_devices, bytes as f64, s.link.bandwidth),
                })
                .collect();
            if s.num_devices < 2 {
                return Err(CliError::config(format!("need at least 2 devices, got {}", s.num_devices)));
            }
            Ok((render(&rows, s.format)?, s.output))
        }
    }
}

/// Execute and write the output.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let (bytes, output) = execute(cli)?;
    match output {
        Some(path) => fs::write(&path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display()))),
        None => std::io::stdout().lock().write_all(&bytes).map_err(|e| CliError::io(e.to_string())),
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rnvc::codec::GopStructure;
use rnvc::model::{Distortion, ModelConfig, Variant};
use rnvc::train::{DataConfig, DataKind, Stage, TrainConfig};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "rnvc", version, about = "Recurrent learned video codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model through the ME, MC, P1 and FULL stages.
    Train(TrainArgs),
    /// Encode a raw video into a bitstream and a stats JSON.
    Encode(EncodeArgs),
    /// Decode a bitstream into a raw video.
    Decode(DecodeArgs),
    /// Code a raw or synthetic video and report rate and quality.
    Eval(EvalArgs),
    /// Train BL, BL+RAE and the full model on one seed and compare them.
    Ablate(AblateArgs),
    /// Mean bpp and PSNR per P-frame index over every GOP.
    Errprop(ErrpropArgs),
    /// Print the header and record table of a bitstream.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GopMode {
    Uni,
    Bi,
}

#[derive(Clone, Debug, Args)]
pub struct GopArgs {
    #[arg(long, value_enum, default_value = "uni")]
    pub gop_mode: GopMode,
    /// Frames per GOP in uni mode.
    #[arg(long, default_value_t = 13)]
    pub gop_size: usize,
    /// Forward P-frames per GOP in bi mode.
    #[arg(long, default_value_t = 6)]
    pub gop_n: usize,
    /// Backward P-frames per GOP in bi mode.
    #[arg(long, default_value_t = 6)]
    pub gop_m: usize,
}

impl GopArgs {
    pub fn structure(&self) -> Result<GopStructure, CliError> {
        let g = match self.gop_mode {
            GopMode::Uni => GopStructure::Uni { gop_size: self.gop_size },
            GopMode::Bi => GopStructure::Bi {
                n: self.gop_n,
                m: self.gop_m,
            },
        };
        g.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Bl,
    BlRae,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Bl => Variant::Bl,
            VariantArg::BlRae => Variant::BlRae,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistortionArg {
    Mse,
    MsSsim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataArg {
    Mixed,
    Ar1,
}

#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Filters per layer (also the latent channel count).
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub variant: VariantArg,
    /// Index into the lambda grid (256..2048 for MSE, 8..64 for MS-SSIM).
    #[arg(long, default_value_t = 2)]
    pub lambda_id: u8,
    #[arg(long, value_enum, default_value = "mse")]
    pub distortion: DistortionArg,
    #[arg(long, default_value_t = 3)]
    pub flow_levels: usize,
    /// 1 for grayscale, 3 for RGB.
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
}

impl ModelArgs {
    pub fn config(&self) -> Result<ModelConfig, CliError> {
        if self.lambda_id > 3 {
            return Err(CliError::Usage(format!("--lambda-id must be 0..=3, got {}", self.lambda_id)));
        }
        let c = ModelConfig {
            channels: self.channels,
            flow_levels: self.flow_levels,
            lambda_id: self.lambda_id,
            distortion: match self.distortion {
                DistortionArg::Mse => Distortion::Mse,
                DistortionArg::MsSsim => Distortion::MsSsim,
            },
            ..ModelConfig::with_width(self.width)
        }
        .with_variant(self.variant.into());
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    pub data: DataArg,
    /// Side of the square synthetic frames.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 7)]
    pub seq_len: usize,
    /// Largest per-frame displacement in pixels.
    #[arg(long, default_value_t = 2.0)]
    pub motion: f64,
}

impl DataArgs {
    pub fn config(&self, channels: usize) -> Result<DataConfig, CliError> {
        let c = DataConfig {
            kind: match self.data {
                DataArg::Mixed => DataKind::Mixed,
                DataArg::Ar1 => DataKind::Ar1,
            },
            size: self.size,
            channels,
            seq_len: self.seq_len,
            motion: self.motion,
            ..DataConfig::default()
        };
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr_min: f64,
    /// Per-stage step cap.
    #[arg(long, default_value_t = 2000)]
    pub max_steps: usize,
    /// Steps before the plateau test starts.
    #[arg(long, default_value_t = 100)]
    pub min_steps: usize,
    /// Plateau window in steps.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    /// Relative improvement between windows that counts as a plateau.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
}

impl ScheduleArgs {
    pub fn config(&self, data: DataConfig) -> TrainConfig {
        TrainConfig {
            data,
            batch: self.batch,
            seed: self.seed,
            lr: self.lr,
            lr_min: self.lr_min,
            window: self.window,
            tolerance: self.tolerance,
            min_steps: self.min_steps,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write (weights; metadata goes to the .json sidecar).
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint; its model settings win over the
    /// model flags.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Comma-separated stages, in order.
    #[arg(long, value_delimiter = ',', default_value = "ME,MC,P1,FULL")]
    pub stages: Vec<String>,
    /// Allow a stage to start without its predecessor.
    #[arg(long)]
    pub from_scratch: bool,
    /// Training log CSV (step, stage, loss, rate_bpp, distortion).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

impl TrainArgs {
    pub fn stages(&self) -> Result<Vec<Stage>, CliError> {
        self.stages
            .iter()
            .map(|s| Stage::parse(s.trim()).map_err(|e| CliError::Usage(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Raw planar 8-bit video with a `<input>.json` sidecar.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Stats JSON (defaults to `<output>.stats.json`).
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Also write the encoder-side reconstructions as raw video.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    #[command(flatten)]
    pub gop: GopArgs,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Raw video to write (plus its JSON sidecar).
    #[arg(long)]
    pub output: PathBuf,
}

/// Either a raw video or freshly generated synthetic sequences.
#[derive(Clone, Debug, Args)]
pub struct SourceArgs {
    /// Raw video; without it, synthetic sequences are generated.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of synthetic sequences.
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    /// Generator seed of the synthetic sequences.
    #[arg(long, default_value_t = 1000)]
    pub data_seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub gop: GopArgs,
    /// Per-frame statistics CSV.
    #[arg(long)]
    pub frames_csv: Option<PathBuf>,
    /// One-row RD CSV (label, lambda_id, bpp, psnr, msssim).
    #[arg(long)]
    pub rd_csv: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory for checkpoints, logs, `rd.csv` and `report.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Steps of the probability-model stage.
    #[arg(long, default_value_t = 1000)]
    pub rpm_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub rpm_batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub rpm_lr: f64,
    /// Held-out sequences for evaluation.
    #[arg(long, default_value_t = 16)]
    pub eval_sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub eval_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_seed: u64,
    /// P-frame of the state-reset probe (reset happens one frame earlier).
    #[arg(long, default_value_t = 6)]
    pub probe_frame: usize,
}

#[derive(Debug, Args)]
pub struct ErrpropArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Uni-directional GOP size, at least 13.
    #[arg(long, default_value_t = 13)]
    pub gop_size: usize,
    /// Output CSV (p_index, count, bpp, psnr); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub input: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Command, clap::Error> {
        Cli::try_parse_from(std::iter::once("rnvc").chain(args.iter().copied())).map(|c| c.command)
    }

    #[test]
    fn bi_six_six_is_a_thirteen_frame_gop() {
        let Command::Encode(a) = parse(&["encode", "--model", "m", "--input", "i", "--output", "o", "--gop-mode", "bi"]).unwrap()
        else {
            panic!("not encode")
        };
        let g = a.gop.structure().unwrap();
        assert_eq!(g, GopStructure::Bi { n: 6, m: 6 });
        assert_eq!(g.gop_size(), 13);
    }

    #[test]
    fn oversized_gop_is_a_usage_error() {
        let Command::Encode(a) = parse(&["encode", "--model", "m", "--input", "i", "--output", "o", "--gop-size", "999"]).unwrap()
        else {
            panic!("not encode")
        };
        assert_eq!(a.gop.structure().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stage_list_parses_in_order() {
        let Command::Train(a) = parse(&["train", "--out", "x", "--stages", "p1,FULL"]).unwrap() else {
            panic!("not train")
        };
        assert_eq!(a.stages().unwrap(), vec![Stage::P1, Stage::Full]);
    }

    #[test]
    fn variant_flag_sets_model_switches() {
        let Command::Train(a) = parse(&["train", "--out", "x", "--variant", "bl"]).unwrap() else {
            panic!("not train")
        };
        let c = a.model.config().unwrap();
        assert!(!c.recurrent_ae && !c.use_rpm);
    }
}

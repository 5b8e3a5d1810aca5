use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "capsnet",
    version,
    about = "Capsule network with dynamic routing for 32x32 traffic-sign classification"
)]
pub struct Cli {
    /// Worker threads; 1 guarantees bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML file whose keys mirror flags (top level or a [<subcommand>] table);
    /// flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a <root>/<label>/<image> directory tree into a CAPS dataset file.
    Convert(ConvertArgs),
    /// Replicate a training set with random photometric and affine jitter.
    Augment(AugmentArgs),
    /// Train the capsule network and decoder on the final loss.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Classify one image or every image in a directory.
    Predict(PredictArgs),
    /// Run the finite-difference gradient oracle.
    Gradcheck(GradcheckArgs),
    /// Generate a procedural sign dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResizeArg {
    /// Reject images that are not 32x32.
    None,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReconSignArg {
    /// margin + lambda * recon
    Add,
    /// margin - lambda * recon
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    /// ReLU 512 -> ReLU 1024 -> sigmoid
    Standard,
    /// ReLU 512 -> sigmoid
    Shallow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Root directory with one integer-named subdirectory per class.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// 3 for RGB, 1 for grayscale.
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, value_enum, default_value_t = ResizeArg::None)]
    pub resize: ResizeArg,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE", required_unless_present = "count_only")]
    pub out: Option<PathBuf>,
    /// Output copies per source image (the first is photometric jitter only).
    #[arg(long, default_value_t = 5)]
    pub factor: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable random horizontal flips.
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long, default_value_t = 20.0)]
    pub rotation: f64,
    #[arg(long, default_value_t = 0.2)]
    pub shear: f64,
    #[arg(long, default_value_t = 0.2)]
    pub width_shift: f64,
    #[arg(long, default_value_t = 0.0)]
    pub height_shift: f64,
    #[arg(long, default_value_t = 0.6)]
    pub brightness_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub brightness_max: f64,
    #[arg(long, default_value_t = 0.6)]
    pub contrast_min: f64,
    #[arg(long, default_value_t = 1.5)]
    pub contrast_max: f64,
    /// Only read the input header and print the output count.
    #[arg(long)]
    pub count_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 3)]
    pub routing_iters: usize,
    /// Drawn from entropy and printed when omitted (taken from the checkpoint on resume).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "checkpoints")]
    pub checkpoint_dir: PathBuf,
    /// Also checkpoint every N steps; 0 writes only the final checkpoint.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Metrics CSV [default: <checkpoint-dir>/metrics.csv].
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    pub m_plus: f64,
    #[arg(long, default_value_t = 0.1)]
    pub m_minus: f64,
    /// Down-weighting of absent-class margin terms.
    #[arg(long, default_value_t = 0.5)]
    pub lambda_margin: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub lambda_recon: f64,
    #[arg(long, value_enum, default_value_t = ReconSignArg::Add)]
    pub recon_sign: ReconSignArg,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Augment the training set in memory by this factor before training.
    #[arg(long)]
    pub augment_factor: Option<usize>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
    #[command(flatten)]
    pub arch: ArchArgs,
}

/// Architecture of a fresh model; ignored when resuming.
#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 43)]
    pub num_classes: usize,
    #[arg(long, default_value_t = 9)]
    pub conv1_kernel: usize,
    #[arg(long, default_value_t = 256)]
    pub conv1_filters: usize,
    #[arg(long, default_value_t = 9)]
    pub conv2_kernel: usize,
    #[arg(long, default_value_t = 256)]
    pub conv2_filters: usize,
    #[arg(long, default_value_t = 2)]
    pub conv2_stride: usize,
    #[arg(long, default_value_t = 8)]
    pub primary_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub class_dim: usize,
    /// Drop probability after the first convolution.
    #[arg(long, default_value_t = 0.7)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = DecoderArg::Standard)]
    pub decoder: DecoderArg,
    /// Explicit hidden-layer widths, overriding --decoder.
    #[arg(long, value_delimiter = ',', value_name = "WIDTHS")]
    pub decoder_hidden: Option<Vec<usize>>,
    /// Std of the capsule transform initialisation.
    #[arg(long, default_value_t = 0.05)]
    pub transform_std: f64,
}

impl ArchArgs {
    pub fn hidden_widths(&self) -> Vec<usize> {
        match (&self.decoder_hidden, self.decoder) {
            (Some(widths), _) => widths.clone(),
            (None, DecoderArg::Standard) => vec![512, 1024],
            (None, DecoderArg::Shallow) => vec![512],
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Text report.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Confusion matrix CSV.
    #[arg(long, value_name = "FILE")]
    pub confusion: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["image", "dir"])))]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Classify every .ppm/.png file in this directory.
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,
    /// Write decoder reconstructions as PNGs into this directory.
    #[arg(long, value_name = "DIR")]
    pub reconstruct: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ResizeArg::None)]
    pub resize: ResizeArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Also check the whole desk-scale network + decoder + final loss.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

use std::path::PathBuf;

use backmap_core::adversarial::AttackMode;
use backmap_core::backmap::Mode;
use backmap_core::network::{Architecture, Init, LayerId};
use backmap_core::render::ImageFormat;
use backmap_core::tensor::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "backmap",
    version,
    about = "Reconstruct, verify and render effective hypersurfaces of bias-free ReLU CNNs",
    after_help = "Any subcommand accepts --config FILE: a key = value file whose keys are long flag \
                  names. Flags given on the command line override the file."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Repeated flags keep the last value, which lets explicit flags override the
/// config entries spliced in before them.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write CIFAR-10-format binary files filled with synthetic class patterns
    #[command(args_override_self = true)]
    SynthCifar(SynthArgs),
    /// Write a freshly initialized model file
    #[command(args_override_self = true)]
    Init(InitArgs),
    /// Train a model with plain gradient descent
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Check that reconstructed surfaces reproduce the forward activations
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Reconstruct hypersurfaces, archive them and optionally render them
    #[command(args_override_self = true)]
    Backmap(BackmapArgs),
    /// Run the adversarial experiments and compare hyperplanes
    #[command(args_override_self = true)]
    Adversarial(AdversarialArgs),
    /// List surface counts and shapes for every layer and mode
    #[command(args_override_self = true)]
    Shapes(ShapesArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    He,
    Fixup,
}

impl From<InitArg> for Init {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::He => Init::He,
            InitArg::Fixup => Init::Fixup,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Seed for every random choice of the run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 uses every core)
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Directory that receives the outputs
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file; without it a freshly initialized --arch network is used
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Architecture of a fresh network (vgg7, fixup_resnet20, tiny)
    #[arg(long, default_value = "vgg7")]
    pub arch: Architecture,
    /// Initialization of a fresh network
    #[arg(long, value_enum, default_value = "he")]
    pub init: InitArg,
    /// Scalar type used for all computation (f32 or f64)
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CIFAR-10 binary directory; inputs come from its test file
    #[arg(long, env = "CIFAR10_DIR")]
    pub data: Option<PathBuf>,
    /// First test record used as input (adversarial starts its search for a
    /// correctly classified record here)
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Records written to each of the six files
    #[arg(long, default_value_t = 1000)]
    pub per_file: usize,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Architecture to build (vgg7, fixup_resnet20, tiny)
    #[arg(long, default_value = "vgg7")]
    pub arch: Architecture,
    /// Weight initialization
    #[arg(long, value_enum, default_value = "he")]
    pub init: InitArg,
    /// Scalar type stored in the model file (f32 or f64)
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// CIFAR-10 binary directory
    #[arg(long, env = "CIFAR10_DIR")]
    pub data: Option<PathBuf>,
    /// Training examples kept after the seeded split (all when absent)
    #[arg(long)]
    pub subset: Option<usize>,
    /// Validation examples kept after the seeded split (all when absent)
    #[arg(long)]
    pub val_subset: Option<usize>,
    /// Number of epochs
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Examples per gradient step
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Rate changes as EPOCH:RATE pairs, e.g. 200:1e-4,250:5e-5
    #[arg(long, value_delimiter = ',', value_parser = parse_drop)]
    pub lr_drops: Vec<(usize, f64)>,
    /// L1 penalty factor on convolution and FC kernels
    #[arg(long, default_value_t = 1e-4)]
    pub l1: f64,
    /// Disable data augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Validate every this many epochs
    #[arg(long, default_value_t = 2)]
    pub validate_every: usize,
}

fn parse_drop(s: &str) -> Result<(usize, f64), String> {
    let (e, r) = s
        .split_once(':')
        .ok_or_else(|| format!("expected EPOCH:RATE, found {s:?}"))?;
    let epoch = e.trim().parse().map_err(|_| format!("bad epoch in {s:?}"))?;
    let rate = r.trim().parse().map_err(|_| format!("bad rate in {s:?}"))?;
    Ok((epoch, rate))
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: DataArgs,
    /// Number of inputs (random normal inputs when no dataset is given)
    #[arg(long, default_value_t = 100)]
    pub inputs: usize,
    /// Evaluation point scale k in z(x) = k·x
    #[arg(long, default_value_t = 0.125)]
    pub z_scale: f64,
    /// Required fraction of relative errors at or below 1e-2 per layer
    #[arg(long, default_value_t = 0.9999)]
    pub floor: f64,
    /// Conv units per layer per input with a materialized surface (0 = all)
    #[arg(long, default_value_t = 64)]
    pub sample: usize,
    /// Skip the all-units check through the frozen forward map
    #[arg(long)]
    pub no_linearized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderKind {
    /// Archive only
    None,
    /// One image per surface
    Surfaces,
    /// Tiled sheets per mode
    Sheet,
}

#[derive(Debug, Args)]
pub struct BackmapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: DataArgs,
    /// Reconstruction mode 0-4
    #[arg(long, value_parser = parse_mode)]
    pub rm: Mode,
    /// Layer: a conv index (e.g. 3 or conv3) or fc
    #[arg(long, value_parser = parse_layer, default_value = "fc")]
    pub layer: LayerId,
    /// Stride offsets to keep (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub s: Option<Vec<usize>>,
    /// Input channels to keep (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub j: Option<Vec<usize>>,
    /// Output channels to keep (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub i: Option<Vec<usize>>,
    /// Classes to keep (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Evaluation point scale k in z(x) = k·x
    #[arg(long, default_value_t = 0.125)]
    pub z_scale: f64,
    /// What to render besides the archive
    #[arg(long, value_enum, default_value = "none")]
    pub render: RenderKind,
    /// Image format for renders (png or ppm)
    #[arg(long, default_value = "png")]
    pub format: ImageFormat,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    let s = s.trim().to_ascii_lowercase();
    let s = if s.starts_with("rm") { s } else { format!("rm{s}") };
    s.parse().map_err(|e: backmap_core::Error| e.to_string())
}

fn parse_layer(s: &str) -> Result<LayerId, String> {
    match s.parse::<usize>() {
        Ok(n) => Ok(LayerId::Conv(n)),
        Err(_) => s.parse().map_err(|e: backmap_core::Error| e.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Single attack plus hyperplane comparison and difference render
    A,
    /// One targeted perturbation per class
    B1,
    /// Scaled targeted perturbations plus matched Gaussian noise (runs B1 first)
    B2,
    /// All of the above
    All,
}

#[derive(Debug, Args)]
pub struct AdversarialArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: DataArgs,
    /// Experiment to run
    #[arg(long, value_enum, default_value = "a")]
    pub experiment: Experiment,
    /// Attack used by experiment A (untargeted or targeted)
    #[arg(long, default_value = "untargeted")]
    pub mode: AttackMode,
    /// Target class of the targeted attack (least likely class when absent)
    #[arg(long)]
    pub target: Option<usize>,
    /// Per-step perturbation magnitude in normalized units
    #[arg(long, default_value_t = 0.04)]
    pub epsilon: f64,
    /// Maximum attack steps
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Maximum steps of each targeted attack in experiments B1/B2
    #[arg(long, default_value_t = 100)]
    pub targeted_steps: usize,
    /// Logit margin required of a scaled perturbation
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Scaled perturbations kept after shuffling
    #[arg(long, default_value_t = 50)]
    pub keep: usize,
    /// Gaussian noise samples
    #[arg(long, default_value_t = 50)]
    pub gaussians: usize,
    /// Evaluation point scale k in z(x) = k·x
    #[arg(long, default_value_t = 0.125)]
    pub z_scale: f64,
    /// Input channel of the RM3 difference render
    #[arg(long, default_value_t = 0)]
    pub j: usize,
    /// Output channel of the RM3 difference render
    #[arg(long, default_value_t = 0)]
    pub i: usize,
    /// Conv layer of the RM3 difference render
    #[arg(long, default_value_t = 1)]
    pub diff_layer: usize,
    /// Image format for renders (png or ppm)
    #[arg(long, default_value = "png")]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Architecture to describe (vgg7, fixup_resnet20, tiny)
    #[arg(long, default_value = "vgg7")]
    pub arch: Architecture,
}

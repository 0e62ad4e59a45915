use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "dermanet", version, about = "Skin-lesion classification pipeline: prepare, balance, train, eval, explain")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct GlobalArgs {
    /// TOML run config, overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `runs/<preset>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `desk` or `paper`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Force the deterministic setting on (it already defaults to on).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Validate inputs and print what would happen without writing files.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load the metadata CSV, split 70/15/15 and write `split.csv`.
    Prepare,
    /// Write the synthetic blob dataset.
    Synth {
        /// Per-class counts in class order, comma separated.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compute the balancing plan and write `balanced.csv`.
    Balance {
        /// Plan over the whole manifest instead of the train split (report only).
        #[arg(long)]
        full_counts: bool,
    },
    /// Run the staged training schedule, then evaluate on the test split.
    Train,
    /// Metrics, confusion matrix and ROC curves for a checkpoint.
    Eval {
        /// Checkpoint directory (default `<out>/checkpoints/best`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Grad-CAM and saliency maps for selected images.
    Explain {
        /// Checkpoint directory (default `<out>/checkpoints/best`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image ids; repeat or comma-separate.
        #[arg(long = "image", value_delimiter = ',')]
        images: Vec<String>,
        /// Explain every image of this split instead.
        #[arg(long)]
        split: Option<String>,
        /// Target class code; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, value_enum, default_value_t = Kind::Both)]
        kind: Kind,
        /// Grad-CAM layer: `attention` (default) or `block1`..`blockN`.
        #[arg(long)]
        layer: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Gradcam,
    Saliency,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = commands::Context::new(&cli.global).and_then(|ctx| match cli.command {
        Command::Prepare => commands::prepare(&ctx).map(|_| ()),
        Command::Synth { counts, size } => commands::synth(&ctx, counts, size),
        Command::Balance { full_counts } => commands::balance(&ctx, full_counts),
        Command::Train => commands::train(&ctx),
        Command::Eval { checkpoint, split } => commands::eval(&ctx, checkpoint, &split),
        Command::Explain {
            checkpoint,
            images,
            split,
            class,
            kind,
            layer,
        } => commands::explain(
            &ctx,
            &commands::ExplainArgs {
                checkpoint,
                images,
                split,
                class,
                kind,
                layer,
            },
        ),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! `cxr`: command-line front end for the chest X-ray pipeline.
//!
//! Exit codes: 0 success, 1 invalid flags or configuration, 2 runtime
//! failure. Every command writes under `--out`, records its flags in
//! `run.txt`, and removes what it wrote if it fails.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cxr", version, about = "Chest X-ray segmentation, classification and saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flat key=value file; explicit flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Classifier scheme selection shared by train-cls, crossval and evaluate.
#[derive(Args, Debug, Clone)]
pub struct SchemeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// plain | segmented
    #[arg(long)]
    pub scheme: Option<String>,
    /// original | clahe | complement | three-channel
    #[arg(long)]
    pub prep: Option<String>,
    /// fire | residual | inception | dense
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// U-Net checkpoint whose predicted masks replace the manifest masks.
    #[arg(long)]
    pub masks_from: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic lung phantoms, masks and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Images per class.
        #[arg(long, conflicts_with = "counts")]
        n: Option<usize>,
        /// Per-class counts as COVID19,MERS,SARS.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Apply a preprocessing variant to every manifest image.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "clahe")]
        prep: String,
        /// Zero the background with each record's mask after enhancement.
        #[arg(long)]
        segmented: bool,
    },
    /// Train the U-Net lung segmenter.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one classifier on a stratified 80/20 train/validation split.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
    },
    /// Stratified k-fold cross-validation with pooled evaluation.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scheme: SchemeArgs,
        /// Folds trained concurrently; results match a serial run.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-evaluate fold checkpoints written by crossval.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding fold<i>.ckpt files.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        masks_from: Option<PathBuf>,
    },
    /// Grad-CAM or Score-CAM maps for classifier inputs.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single image; otherwise the first --limit manifest records.
        #[arg(long, conflicts_with = "manifest")]
        image: Option<PathBuf>,
        /// Lung mask for --image (segmented scheme).
        #[arg(long, requires = "image")]
        mask: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// score-cam | grad-cam
        #[arg(long, default_value = "score-cam")]
        method: String,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
        /// Activation tap; defaults to the last feature stack.
        #[arg(long)]
        tap: Option<String>,
    },
    /// Finite-difference check of engine gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Op name or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Bundle metrics, confusion, ROC and saliency outputs into one directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// crossval output directory.
        #[arg(long)]
        crossval: PathBuf,
        /// saliency output directory.
        #[arg(long)]
        saliency: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Preprocess { common, .. }
            | Command::TrainSeg { common, .. }
            | Command::TrainCls { common, .. }
            | Command::Crossval { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Saliency { common, .. }
            | Command::GradCheck { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Bad flags or configuration; exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<cxr_core::Error>() {
        Some(cxr_core::Error::InvalidArgument(_) | cxr_core::Error::Unknown { .. }) => 1,
        _ => 2,
    }
}

/// Top-level entries of `dir` before the command ran, `None` if it did not
/// exist.
fn snapshot(dir: &Path) -> Option<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).ok()?;
    Some(rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
}

fn clean_up(dir: &Path, before: Option<Vec<PathBuf>>) {
    match before {
        None => {
            let _ = std::fs::remove_dir_all(dir);
        }
        Some(keep) => {
            for entry in snapshot(dir).unwrap_or_default() {
                if !keep.contains(&entry) {
                    let _ = if entry.is_dir() {
                        std::fs::remove_dir_all(&entry)
                    } else {
                        std::fs::remove_file(&entry)
                    };
                }
            }
        }
    }
}

fn run(cmd: &Command) -> anyhow::Result<()> {
    let out = &cmd.common().out;
    std::fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("{}: {e}", out.display()))?;
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::fs::write(out.join("run.txt"), format!("cxr {}\n", args.join(" ")))?;
    match cmd {
        Command::GenData { common, n, counts, size } => commands::gen_data(common, *n, counts.as_deref(), *size),
        Command::Preprocess {
            common,
            manifest,
            prep,
            segmented,
        } => commands::preprocess(common, manifest, prep, *segmented),
        Command::TrainSeg { common, manifest, epochs } => commands::train_seg(common, manifest, *epochs),
        Command::TrainCls { common, scheme } => commands::train_cls(common, scheme),
        Command::Crossval { common, scheme, jobs } => commands::crossval(common, scheme, *jobs),
        Command::Evaluate {
            common,
            manifest,
            checkpoints,
            masks_from,
        } => commands::evaluate(common, manifest, checkpoints, masks_from.as_deref()),
        Command::Saliency {
            common,
            checkpoint,
            image,
            mask,
            manifest,
            limit,
            method,
            class,
            tap,
        } => commands::saliency(
            common,
            checkpoint,
            commands::SaliencyInputs {
                image: image.as_deref(),
                mask: mask.as_deref(),
                manifest: manifest.as_deref(),
                limit: *limit,
            },
            method,
            class.as_deref(),
            tap.as_deref(),
        ),
        Command::GradCheck { common, op, trials, eps } => commands::grad_check(common, op, *trials, *eps),
        Command::Report {
            common,
            crossval,
            saliency,
        } => commands::report(common, crossval, saliency.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out = cli.command.common().out.clone();
    let before = snapshot(&out);
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            clean_up(&out, before);
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pathosynth::detection::Classifier;
use pathosynth::experiment::{
    self, parse_direction, read_detections, read_ground_truth, spacing_lookup, Arm, Dataset, ExperimentConfig,
    ExperimentError, S,
};
use pathosynth::synthesis::{Direction, SynthModel};

#[derive(Parser)]
#[command(name = "pathosynth", version, about = "Lesion synthesis, microbleed detection and FROC evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    MakePhantoms {
        #[command(flatten)]
        common: Common,
    },
    /// Train the synthesis networks.
    TrainSynth {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides data.dataset_dir).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue training from this synthesis checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build a synthetic dataset with a trained synthesis model.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Synthesis checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// h2p inserts lesions into healthy subjects, p2h removes annotated lesions.
        #[arg(long, default_value = "h2p", value_parser = parse_direction)]
        direction: Direction,
    },
    /// Train the candidate classifier for one data arm.
    TrainDetect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Synthetic dataset directory (overrides data.synthetic_dir).
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long)]
        arm: Arm,
        /// Enable classical data augmentation.
        #[arg(long)]
        cda: bool,
    },
    /// Detect lesions in the held-out subjects.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FROC curves, bootstrap bands and the comparison report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Detections CSV, optionally labeled as LABEL=PATH. Repeatable.
        #[arg(long, required = true)]
        detections: Vec<String>,
        /// Ground-truth CSV (subject_id, x, y, z).
        #[arg(long)]
        ground_truth: PathBuf,
        /// Dataset whose manifest supplies voxel spacing.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// All stages and all six arms end to end.
    RunExperiment {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_dataset(cfg: &mut ExperimentConfig, flag: Option<PathBuf>) -> Result<Dataset, ExperimentError> {
    if let Some(dir) = flag {
        cfg.data.dataset_dir = Some(dir);
    }
    let dir = cfg.data.dataset_dir.clone().ok_or_else(|| {
        ExperimentError::Config("no dataset: pass --dataset or set data.dataset_dir (see make-phantoms)".into())
    })?;
    Dataset::open(&dir)
}

fn labeled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = Path::new(spec);
            let label = path
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            (label, path.to_owned())
        }
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::MakePhantoms { common } => {
            let cfg = load_config(&common)?;
            let ds = experiment::make_phantoms(&cfg, &common.out)?;
            eprintln!("wrote {} subjects to {}", ds.entries.len(), common.out.display());
        }
        Command::TrainSynth { common, dataset, checkpoint } => {
            let mut cfg = load_config(&common)?;
            let ds = open_dataset(&mut cfg, dataset)?;
            let (model, history) = experiment::train_synth(&cfg, &ds, checkpoint.as_deref(), &common.out)?;
            let last = history.values("generator_total").last().copied().unwrap_or(f64::NAN);
            eprintln!("trained to step {} (generator loss {last:.4})", model.steps_done);
        }
        Command::Synthesize { common, dataset, checkpoint, direction } => {
            let mut cfg = load_config(&common)?;
            let ds = open_dataset(&mut cfg, dataset)?;
            let model = SynthModel::<S>::load(&checkpoint)?;
            let out = experiment::synthesize_dataset(&cfg, &ds, &model, direction, &common.out)?;
            eprintln!("wrote {} synthetic subjects to {}", out.entries.len(), common.out.display());
        }
        Command::TrainDetect { common, dataset, synthetic, arm, cda } => {
            let mut cfg = load_config(&common)?;
            let ds = open_dataset(&mut cfg, dataset)?;
            if let Some(dir) = synthetic {
                cfg.data.synthetic_dir = Some(dir);
            }
            let synth = cfg.data.synthetic_dir.as_deref().map(Dataset::open).transpose()?;
            let cda = cda || cfg.classifier.cda_enabled;
            let (_, _, pool) = experiment::train_detect(&cfg, &ds, synth.as_ref(), arm, cda, &common.out)?;
            eprintln!(
                "trained {} on {} real + {} synthetic positives, {} negatives",
                arm.label(cda),
                pool.real_positives,
                pool.synthetic_positives,
                pool.negatives
            );
        }
        Command::Detect { common, dataset, checkpoint } => {
            let mut cfg = load_config(&common)?;
            let ds = open_dataset(&mut cfg, dataset)?;
            let model = Classifier::<S>::load(&checkpoint)?;
            let (dets, gts) = experiment::detect_dataset(&cfg, &ds, &model, &common.out)?;
            eprintln!("{} detections, {} reference lesions", dets.len(), gts.len());
        }
        Command::Evaluate { common, detections, ground_truth, dataset } => {
            let mut cfg = load_config(&common)?;
            if let Some(dir) = dataset {
                cfg.data.dataset_dir = Some(dir);
            }
            let ds = cfg.data.dataset_dir.as_deref().map(Dataset::open).transpose()?;
            let runs = detections
                .iter()
                .map(|spec| {
                    let (label, path) = labeled(spec);
                    Ok((label, read_detections(&path)?))
                })
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let gts = read_ground_truth(&ground_truth)?;
            let (_, rows) = experiment::evaluate_runs(&cfg, &runs, &gts, &spacing_lookup(&cfg, ds.as_ref()), &common.out)?;
            print_rows(&rows);
        }
        Command::RunExperiment { common } => {
            let cfg = load_config(&common)?;
            let rows = experiment::run_experiment(&cfg, &common.out)?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn print_rows(rows: &[pathosynth::evaluation::ReportRow]) {
    for r in rows {
        let fp = r.fp_at_sens.map_or("unreached".to_string(), |v| format!("{v:.2}"));
        println!("{:<16} sens@op {:.3}  FP@op {fp}", r.label, r.sens_at_fp);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

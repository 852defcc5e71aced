//! Command-line driver for the segmentation pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or
//! malformed inputs), 3 runtime failure. Diagnostics go to stderr;
//! machine-readable results go to the requested output files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand, ValueEnum};

use subseg::inference::{classify_roi, compute_roi, largest_component_filter};
use subseg::metrics::{evaluate_with, HdMode};
use subseg::model::{build_model, ModelCheckpoint};
use subseg::nifti;
use subseg::phantom::sized_dataset;
use subseg::sampling::{
    normalize_intensity, select_samples, Sample, SamplingConfig, SamplingMode,
};
use subseg::trainer::{train, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "subseg", version, about = "Sub-cortical structure segmentation")]
struct Cli {
    /// Worker threads (changes wall time only, never outputs).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Progress reporting on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SamplingArg {
    /// Negatives from the structure boundary band.
    Boundary,
    /// Negatives from anywhere in the brain.
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort (images, labels, shared atlas).
    Phantom {
        /// Output directory; creates subjNN_t1.nii, subjNN_labels.nii and
        /// atlas.nii.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: usize,
        /// Cubic volume side length in voxels.
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
    /// Train a model on a directory of subjects.
    Train {
        /// Directory with *_t1.nii images.
        #[arg(long)]
        images: PathBuf,
        /// Directory with matching *_labels.nii files.
        #[arg(long)]
        labels: PathBuf,
        /// Probabilistic atlas registered to the shared grid.
        #[arg(long)]
        atlas: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        patience: usize,
        /// Drop the atlas prior branch (ablation).
        #[arg(long)]
        no_atlas: bool,
        /// Negative sampling rule (ablation: `random`).
        #[arg(long, value_enum, default_value_t = SamplingArg::Boundary)]
        sampling: SamplingArg,
        /// Chebyshev width of the boundary band, in voxels.
        #[arg(long, default_value_t = 5)]
        boundary_distance: usize,
        /// Per-epoch history as JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Segment one volume with a trained model.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output label volume (.nii, unsigned 8-bit).
        #[arg(long)]
        out: PathBuf,
        /// Minimum structure probability for the ROI bounding box.
        #[arg(long, default_value_t = 0.0)]
        roi_threshold: f32,
        /// ROI expansion in voxels per side.
        #[arg(long, default_value_t = 8)]
        roi_margin: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
    },
    /// Compare a segmentation against ground truth and write a JSON report.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Compute the Hausdorff distance over surface voxels only.
        #[arg(long)]
        hd_surface: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn data_err(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_DATA,
        message: message.to_string(),
    }
}

fn runtime_err(message: impl ToString) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: message.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .is_err()
    {
        eprintln!("error: could not initialize the thread pool");
        return ExitCode::from(EXIT_RUNTIME);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Phantom { out, subjects, size } => {
            run_phantom(&out, subjects, size, cli.seed, cli.verbose)
        }
        Command::Train {
            images,
            labels,
            atlas,
            out,
            epochs,
            batch,
            patience,
            no_atlas,
            sampling,
            boundary_distance,
            history,
        } => run_train(TrainArgs {
            images,
            labels,
            atlas,
            out,
            epochs,
            batch,
            patience,
            no_atlas,
            sampling,
            boundary_distance,
            history,
            seed: cli.seed,
            verbose: cli.verbose,
        }),
        Command::Segment {
            image,
            atlas,
            model,
            out,
            roi_threshold,
            roi_margin,
            batch,
        } => run_segment(
            &image,
            &atlas,
            &model,
            &out,
            roi_threshold,
            roi_margin,
            batch,
            cli.verbose,
        ),
        Command::Evaluate {
            pred,
            gt,
            report,
            hd_surface,
        } => run_evaluate(&pred, &gt, &report, hd_surface, cli.verbose),
    }
}

fn run_phantom(
    out: &Path,
    subjects: usize,
    size: usize,
    seed: u64,
    verbose: bool,
) -> Result<(), Failure> {
    let dataset = sized_dataset(size, subjects, seed).map_err(data_err)?;
    std::fs::create_dir_all(out).map_err(runtime_err)?;
    for (i, (image, labels)) in dataset.subjects.iter().enumerate() {
        let image_path = out.join(format!("subj{i:02}_t1.nii"));
        let labels_path = out.join(format!("subj{i:02}_labels.nii"));
        nifti::write_volume(image, &image_path).map_err(runtime_err)?;
        nifti::write_labels(labels, &labels_path).map_err(runtime_err)?;
        if verbose {
            eprintln!("wrote {}", image_path.display());
        }
    }
    nifti::write_atlas(&dataset.atlas, &out.join("atlas.nii")).map_err(runtime_err)?;
    if verbose {
        eprintln!("wrote {} subjects + atlas to {}", subjects, out.display());
    }
    Ok(())
}

struct TrainArgs {
    images: PathBuf,
    labels: PathBuf,
    atlas: PathBuf,
    out: PathBuf,
    epochs: usize,
    batch: usize,
    patience: usize,
    no_atlas: bool,
    sampling: SamplingArg,
    boundary_distance: usize,
    history: Option<PathBuf>,
    seed: u64,
    verbose: bool,
}

/// Image/label pairs: `<stem>_t1.nii` next to `<stem>_labels.nii`, sorted
/// by file name.
fn subject_pairs(images: &Path, labels: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let mut image_files: Vec<PathBuf> = std::fs::read_dir(images)
        .map_err(|e| data_err(format!("{}: {e}", images.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("_t1.nii"))
        })
        .collect();
    image_files.sort();
    if image_files.is_empty() {
        return Err(data_err(format!(
            "no *_t1.nii images found in {}",
            images.display()
        )));
    }
    let mut pairs = Vec::with_capacity(image_files.len());
    for image in image_files {
        let name = image.file_name().unwrap().to_str().unwrap();
        let label_name = name.replace("_t1.nii", "_labels.nii");
        let label = labels.join(&label_name);
        if !label.exists() {
            return Err(data_err(format!("missing label file {}", label.display())));
        }
        pairs.push((image, label));
    }
    Ok(pairs)
}

/// Output paths are validated before any heavy work starts.
fn check_writable(path: &Path) -> Result<(), Failure> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        if !parent.is_dir() {
            return Err(data_err(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Failure> {
    check_writable(&args.out)?;
    if let Some(history) = &args.history {
        check_writable(history)?;
    }
    let pairs = subject_pairs(&args.images, &args.labels)?;
    let atlas = nifti::read_atlas(&args.atlas)
        .map_err(|e| data_err(format!("{}: {e}", args.atlas.display())))?;

    let mode = match args.sampling {
        SamplingArg::Boundary => SamplingMode::BoundaryRestricted,
        SamplingArg::Random => SamplingMode::RandomBackground,
    };
    let mut samples: Vec<Sample> = Vec::new();
    for (i, (image_path, labels_path)) in pairs.iter().enumerate() {
        let image = nifti::read_volume(image_path)
            .map_err(|e| data_err(format!("{}: {e}", image_path.display())))?;
        let labels = nifti::read_labels(labels_path)
            .map_err(|e| data_err(format!("{}: {e}", labels_path.display())))?;
        let normalized = normalize_intensity(&image).map_err(data_err)?;
        let config = SamplingConfig {
            mode,
            boundary_distance: args.boundary_distance,
            // Per-subject stream: global seed plus subject index.
            seed: args.seed.wrapping_add(i as u64),
        };
        let selection = select_samples(&normalized, &labels, &atlas, &config).map_err(data_err)?;
        if selection.negatives_with_replacement {
            eprintln!(
                "warning: negative pool smaller than positive count for {}; drew with replacement",
                image_path.display()
            );
        }
        if args.verbose {
            eprintln!(
                "subject {i}: {} samples from {}",
                selection.samples.len(),
                image_path.display()
            );
        }
        samples.extend(selection.samples);
    }

    let model = build_model::<f32>(args.seed, !args.no_atlas);
    let config = TrainConfig {
        epochs_max: args.epochs,
        batch_size: args.batch,
        patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    if args.verbose {
        eprintln!(
            "training on {} samples (atlas branch: {})",
            samples.len(),
            !args.no_atlas
        );
    }
    let (trained, history) = train(model, samples, &config).map_err(|e| match e {
        subseg::trainer::TrainError::NonFiniteLoss { .. } => runtime_err(e),
        other => data_err(other),
    })?;
    if args.verbose {
        for record in &history.records {
            eprintln!(
                "epoch {:3}: loss {:.4} val_acc {:.4}",
                record.epoch, record.loss, record.val_acc
            );
        }
        eprintln!(
            "best epoch {} (val_acc {:.4}), stopped_early={}",
            history.best_epoch, history.best_val_accuracy, history.stopped_early
        );
    }

    let checkpoint = ModelCheckpoint {
        params: trained,
        epochs_run: history.records.len() as u32,
        best_val_accuracy: history.best_val_accuracy as f32,
    };
    checkpoint.save(&args.out).map_err(runtime_err)?;
    if let Some(history_path) = &args.history {
        history.write_jsonl(history_path).map_err(runtime_err)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_segment(
    image_path: &Path,
    atlas_path: &Path,
    model_path: &Path,
    out: &Path,
    roi_threshold: f32,
    roi_margin: usize,
    batch: usize,
    verbose: bool,
) -> Result<(), Failure> {
    check_writable(out)?;
    let checkpoint = ModelCheckpoint::load(model_path)
        .map_err(|e| data_err(format!("{}: {e}", model_path.display())))?;
    let image = nifti::read_volume(image_path)
        .map_err(|e| data_err(format!("{}: {e}", image_path.display())))?;
    let atlas = nifti::read_atlas(atlas_path)
        .map_err(|e| data_err(format!("{}: {e}", atlas_path.display())))?;
    let normalized = normalize_intensity(&image).map_err(data_err)?;
    let roi = compute_roi(&atlas, roi_threshold, roi_margin).map_err(data_err)?;
    if verbose {
        eprintln!("ROI {:?} ({} voxels)", roi, roi.voxel_count());
    }
    let raw = classify_roi(&checkpoint.params, &normalized, &atlas, &roi, batch)
        .map_err(data_err)?;
    let filtered = largest_component_filter(&raw);
    nifti::write_labels(&filtered, out).map_err(runtime_err)?;
    if verbose {
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn run_evaluate(
    pred_path: &Path,
    gt_path: &Path,
    report_path: &Path,
    hd_surface: bool,
    verbose: bool,
) -> Result<(), Failure> {
    check_writable(report_path)?;
    let pred = nifti::read_labels(pred_path)
        .map_err(|e| data_err(format!("{}: {e}", pred_path.display())))?;
    let gt = nifti::read_labels(gt_path)
        .map_err(|e| data_err(format!("{}: {e}", gt_path.display())))?;
    let mode = if hd_surface {
        HdMode::Surface
    } else {
        HdMode::FullSets
    };
    let report = evaluate_with(&pred, &gt, mode).map_err(data_err)?;
    std::fs::write(report_path, report.to_json()).map_err(runtime_err)?;
    if verbose {
        eprintln!(
            "mean DSC {:.4}, mean HD {:?}",
            report.avg_dsc, report.avg_hd
        );
    }
    Ok(())
}

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use matl::boxlabels::{normalized_points, wcss_curve, BoxAnnotation, BoxLabeler, DEFAULT_RESTARTS};
use matl::data::{generate_synthetic_with, load_dataset_with, write_dataset, ImageNormalization, SyntheticProfile, Tile};
use matl::nn::{load_checkpoint, save_checkpoint};
use matl::traineval::{
    embed_tiles, pca_export, run_experiment, write_fold_csv, write_pca_csv, write_summary_csv, ExperimentResults,
};
use serde::{Deserialize, Serialize};

use config::{parse_run_config, DataSource, RunConfigFile};

#[derive(Debug)]
pub enum CliError {
    /// Bad input, configuration or files: exit code 2.
    Usage(String),
    /// Failure while computing: exit code 3.
    Runtime(String),
}

impl From<matl::Error> for CliError {
    fn from(e: matl::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "matl", version, about = "Box-label triplet-loss experiments on aerial tiles")]
struct Cli {
    /// Worker threads for fold-level parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest, images, masks).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        tile_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Normalization::PerImage)]
        normalization: Normalization,
    },
    /// Fit box labels on a dataset, or write the WCSS elbow curve.
    BoxLabels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_RESTARTS)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write the (k, wcss) curve for k = 1..=kmax instead of labels.
        #[arg(long)]
        elbow: bool,
        #[arg(long, default_value_t = 8)]
        kmax: usize,
    },
    /// Run the cross-validated experiment grid.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Project dataset embeddings onto their top two principal axes.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Box-label artifact; without it labels are fit on the data.
        #[arg(long)]
        box_labels: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Normalization {
    PerImage,
    PerDataset,
}

impl From<Normalization> for ImageNormalization {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::PerImage => ImageNormalization::PerImage,
            Normalization::PerDataset => ImageNormalization::PerDataset,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match cli.command {
        Command::GenData {
            out,
            per_class,
            tile_size,
            seed,
            normalization,
        } => gen_data(&out, per_class, tile_size, seed, normalization.into(), cli.threads),
        Command::BoxLabels {
            data,
            k,
            seed,
            restarts,
            out,
            elbow,
            kmax,
        } => box_labels(&data, k, seed, restarts, &out, elbow.then_some(kmax), cli.threads),
        Command::Experiment { config } => experiment(&config, cli.threads),
        Command::Pca {
            checkpoint,
            data,
            out,
            box_labels,
            k,
            seed,
        } => pca(&checkpoint, &data, &out, box_labels.as_deref(), k, seed, cli.threads),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// `<file>.effective_config.json` next to a file output.
fn echo_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".effective_config.json");
    out.with_file_name(name)
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    command: &'a str,
    threads: usize,
    #[serde(flatten)]
    settings: T,
}

fn gen_data(out: &Path, per_class: usize, tile_size: usize, seed: u64, normalization: ImageNormalization, threads: usize) -> CliResult {
    let profile = SyntheticProfile::default();
    let tiles = generate_synthetic_with(&profile, per_class, tile_size, seed, normalization)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_dataset(out, &tiles)?;
    write_json(
        &out.join("effective_config.json"),
        &Echo {
            command: "gen-data",
            threads,
            settings: serde_json::json!({
                "out": out,
                "per_class": per_class,
                "tile_size": tile_size,
                "seed": seed,
                "normalization": normalization,
                "profile": profile,
            }),
        },
    )?;
    println!("wrote {} tiles to {}", tiles.len(), out.display());
    Ok(())
}

/// Box-label artifact: the frozen labeler plus one label per sample.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLabelFile {
    labeler: BoxLabeler,
    labels: Vec<usize>,
}

fn box_labels(data: &Path, k: usize, seed: u64, restarts: usize, out: &Path, elbow: Option<usize>, threads: usize) -> CliResult {
    let tiles = load_dataset_with(data, ImageNormalization::PerImage)?;
    let boxes: Vec<BoxAnnotation> = tiles.iter().map(|t| t.bbox).collect();
    let settings = serde_json::json!({
        "data": data,
        "k": k,
        "seed": seed,
        "restarts": restarts,
        "out": out,
        "elbow": elbow.is_some(),
        "kmax": elbow,
    });
    if let Some(kmax) = elbow {
        let (_, points) = normalized_points(&boxes)?;
        let curve = wcss_curve(&points, kmax, seed, restarts)?;
        let mut w = csv::Writer::from_path(out).map_err(|e| CliError::Usage(format!("{}: {e}", out.display())))?;
        w.write_record(["k", "wcss"]).map_err(|e| CliError::Usage(e.to_string()))?;
        for (k, v) in &curve {
            w.write_record([k.to_string(), v.to_string()]).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        w.flush().map_err(|e| io_error(out, e))?;
        println!("wrote WCSS for k = 1..={kmax} to {}", out.display());
    } else {
        let labeler = BoxLabeler::fit(&boxes, k, seed, restarts)?;
        let labels = labeler.label_all(&boxes)?;
        write_json(out, &BoxLabelFile { labeler, labels })?;
        println!("labeled {} boxes into {k} clusters; wrote {}", boxes.len(), out.display());
    }
    write_json(
        &echo_path(out),
        &Echo {
            command: "box-labels",
            threads,
            settings,
        },
    )
}

fn load_source(cfg: &RunConfigFile) -> CliResult<Vec<Tile>> {
    Ok(match &cfg.data {
        DataSource::Synthetic(s) => {
            generate_synthetic_with(&SyntheticProfile::default(), s.per_class, s.tile_size, s.seed, cfg.normalization)?
        }
        DataSource::Directory(d) => load_dataset_with(&d.path, cfg.normalization)?,
    })
}

fn experiment(config_path: &Path, threads: usize) -> CliResult {
    let text = fs::read_to_string(config_path).map_err(|e| io_error(config_path, e))?;
    let cfg = parse_run_config(&text, config_path)?;
    cfg.protocol.validate()?;
    for c in &cfg.cells {
        c.validate()?;
    }
    let tiles = load_source(&cfg)?;
    if let Some(t) = tiles.iter().find(|t| t.size != cfg.protocol.model.input_size) {
        return Err(CliError::Usage(format!(
            "tiles are {} px but protocol.model.input_size is {}",
            t.size, cfg.protocol.model.input_size
        )));
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    write_json(
        &out.join("effective_config.json"),
        &Echo {
            command: "experiment",
            threads,
            settings: &cfg,
        },
    )?;

    eprintln!(
        "running {} cells × {} folds on {} tiles",
        cfg.cells.len(),
        cfg.protocol.folds,
        tiles.len()
    );
    let res = run_experiment(&cfg.protocol, &cfg.cells, &tiles, cfg.checkpoints)?;
    write_results(out, &res, &tiles)?;
    println!("{:<14} {:<5} {:>6}  {:>16}  {:>16}", "model_mode", "loss", "lambda", "accuracy", "iou");
    for s in &res.summary {
        let lambda = s.cell.lambda.map(|l| l.to_string()).unwrap_or_default();
        println!(
            "{:<14} {:<5} {:>6}  {:.4} ± {:.4}  {:.4} ± {:.4}",
            s.cell.architecture.name(),
            s.cell.loss_mode.name(),
            lambda,
            s.accuracy_mean,
            s.accuracy_std,
            s.iou_mean,
            s.iou_std
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    model_mode: &'a str,
    loss_mode: &'a str,
    lambda: Option<f64>,
    fold: usize,
    model: &'a str,
    epoch: usize,
    loss: f64,
}

fn write_results(out: &Path, res: &ExperimentResults, tiles: &[Tile]) -> CliResult {
    write_fold_csv(&out.join("folds.csv"), &res.folds)?;
    write_summary_csv(&out.join("summary.csv"), &res.summary)?;

    let history = out.join("history.csv");
    let mut w = csv::Writer::from_path(&history).map_err(|e| CliError::Usage(e.to_string()))?;
    for r in &res.folds {
        for (mode, h) in &r.histories {
            for (epoch, &loss) in h.epoch_loss.iter().enumerate() {
                w.serialize(HistoryRow {
                    model_mode: r.cell.architecture.name(),
                    loss_mode: r.cell.loss_mode.name(),
                    lambda: r.cell.lambda,
                    fold: r.fold,
                    model: mode.name(),
                    epoch,
                    loss,
                })
                .map_err(|e| CliError::Usage(e.to_string()))?;
            }
        }
    }
    w.flush().map_err(|e| io_error(&history, e))?;

    let boxes: Vec<BoxAnnotation> = tiles.iter().map(|t| t.bbox).collect();
    write_json(
        &out.join("box_labels.json"),
        &BoxLabelFile {
            labeler: res.labeler.clone(),
            labels: res.labeler.label_all(&boxes)?,
        },
    )?;
    write_json(
        &out.join("split.json"),
        &serde_json::json!({ "working": res.working, "test": res.test }),
    )?;

    if !res.models.is_empty() {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        for m in &res.models {
            let name = format!("{}-{}-fold{}.json", m.cell.label(), m.params.mode.name(), m.fold);
            save_checkpoint(&m.params, &dir.join(name))?;
        }
    }
    Ok(())
}

fn pca(checkpoint: &Path, data: &Path, out: &Path, labels_file: Option<&Path>, k: usize, seed: u64, threads: usize) -> CliResult {
    let params = load_checkpoint(checkpoint)?;
    let tiles = load_dataset_with(data, ImageNormalization::PerImage)?;
    if let Some(t) = tiles.iter().find(|t| t.size != params.config.input_size) {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} px tiles but {} holds {} px tiles",
            params.config.input_size,
            data.display(),
            t.size
        )));
    }
    let boxes: Vec<BoxAnnotation> = tiles.iter().map(|t| t.bbox).collect();
    let labeler = match labels_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let file: BoxLabelFile =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            file.labeler
        }
        None => BoxLabeler::fit(&boxes, k, seed, DEFAULT_RESTARTS)?,
    };
    let box_labels: Vec<Option<usize>> = labeler.label_all(&boxes)?.into_iter().map(Some).collect();
    let class_labels: Vec<usize> = tiles.iter().map(|t| t.class_label).collect();
    let embeddings = embed_tiles(&params, &tiles, 32)?;
    let export = pca_export(&embeddings, &class_labels, &box_labels)?;
    for w in &export.warnings {
        eprintln!("warning: {w}");
    }
    write_pca_csv(out, &export.rows)?;
    write_json(
        &echo_path(out),
        &Echo {
            command: "pca",
            threads,
            settings: serde_json::json!({
                "checkpoint": checkpoint,
                "data": data,
                "out": out,
                "box_labels": labels_file,
                "k": k,
                "seed": seed,
                "normalization": ImageNormalization::PerImage,
                "explained_variance": export.explained_variance,
            }),
        },
    )?;
    println!("wrote {} rows to {}", export.rows.len(), out.display());
    Ok(())
}

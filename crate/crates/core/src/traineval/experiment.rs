use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{check_lambda, ExperimentConfig, LossMode, Protocol};
use super::folds::{stratified_kfold, stratified_split};
use super::train::{evaluate, train, Metrics, TrainHistory};
use crate::boxlabels::{BoxAnnotation, BoxLabeler};
use crate::data::Tile;
use crate::error::{Error, Result};
use crate::nn::{ModelMode, ModelParams};

/// Single-task cells train a classifier and a mask model side by side;
/// multi-task cells train one model with both heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    SingleTask,
    MultiTask,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SingleTask => "single_task",
            Architecture::MultiTask => "multi_task",
        }
    }

    pub fn model_modes(self) -> &'static [ModelMode] {
        match self {
            Architecture::SingleTask => &[ModelMode::SingleTaskClassify, ModelMode::SingleTaskMask],
            Architecture::MultiTask => &[ModelMode::MultiTask],
        }
    }
}

/// One row of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub architecture: Architecture,
    pub loss_mode: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl Cell {
    pub fn new(architecture: Architecture, loss_mode: LossMode, lambda: Option<f64>) -> Self {
        Self {
            architecture,
            loss_mode,
            lambda,
        }
    }

    /// {single, multi-task} × {WTL, CLTL, MATL at 0.25, 0.5, 0.75}.
    pub fn default_grid() -> Vec<Cell> {
        let mut cells = Vec::new();
        for arch in [Architecture::SingleTask, Architecture::MultiTask] {
            cells.push(Cell::new(arch, LossMode::Wtl, None));
            cells.push(Cell::new(arch, LossMode::Cltl, None));
            for l in [0.25, 0.5, 0.75] {
                cells.push(Cell::new(arch, LossMode::Matl, Some(l)));
            }
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.loss_mode, self.lambda)
    }

    /// Short identifier such as `multi_task-MATL-0.25`.
    pub fn label(&self) -> String {
        match self.lambda {
            Some(l) => format!("{}-{}-{l}", self.architecture.name(), self.loss_mode),
            None => format!("{}-{}", self.architecture.name(), self.loss_mode),
        }
    }

    pub fn configs(&self, protocol: &Protocol) -> Vec<ExperimentConfig> {
        self.architecture
            .model_modes()
            .iter()
            .map(|&m| ExperimentConfig::new(m, self.loss_mode, self.lambda, protocol.clone()))
            .collect()
    }
}

/// Which trained models to keep in memory for checkpointing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepModels {
    None,
    #[default]
    FirstFold,
    All,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cell: Cell,
    pub fold: usize,
    pub params: ModelParams<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub cell: Cell,
    pub fold: usize,
    pub accuracy: f64,
    pub iou: f64,
    /// One history per trained model of the cell.
    pub histories: Vec<(ModelMode, TrainHistory)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub folds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

pub struct ExperimentResults {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<CellSummary>,
    pub labeler: BoxLabeler,
    /// Indices of the cross-validation set and of the test set.
    pub working: Vec<usize>,
    pub test: Vec<usize>,
    pub models: Vec<TrainedModel>,
}

/// Mean and sample standard deviation; identical values give exactly `(v, 0)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Fits box labels on `fit` and assigns them to every tile.
pub fn assign_box_labels(tiles: &mut [Tile], fit: &[usize], k: usize, seed: u64, restarts: usize) -> Result<BoxLabeler> {
    let boxes: Vec<BoxAnnotation> = fit.iter().map(|&i| tiles[i].bbox).collect();
    let labeler = BoxLabeler::fit(&boxes, k, seed, restarts)?;
    for t in tiles.iter_mut() {
        t.box_label = Some(labeler.label(&t.bbox)?);
    }
    Ok(labeler)
}

fn pick(tiles: &[Tile], idx: &[usize]) -> Vec<Tile> {
    idx.iter().map(|&i| tiles[i].clone()).collect()
}

/// The full protocol: stratified working/test split, box labels fit on the
/// working set, K stratified folds over it, one model set per fold and cell
/// trained on the other K − 1 folds and scored on the test set.
///
/// Folds run in parallel on the current rayon pool; results do not depend
/// on the thread count.
pub fn run_experiment(protocol: &Protocol, cells: &[Cell], tiles: &[Tile], keep: KeepModels) -> Result<ExperimentResults> {
    protocol.validate()?;
    if cells.is_empty() {
        return Err(Error::Config("no cells to run".into()));
    }
    for c in cells {
        c.validate()?;
    }
    let labels: Vec<usize> = tiles.iter().map(|t| t.class_label).collect();
    let (working, test) = stratified_split(&labels, protocol.train_fraction, protocol.seed)?;
    let mut tiles = tiles.to_vec();
    let labeler = assign_box_labels(&mut tiles, &working, protocol.box_k, protocol.seed, protocol.box_restarts)?;

    let working_labels: Vec<usize> = working.iter().map(|&i| labels[i]).collect();
    let folds = stratified_kfold(&working_labels, protocol.folds, protocol.seed)?;
    let test_tiles = pick(&tiles, &test);

    let per_fold = (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().map(|&i| working[i]))
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let train_tiles = pick(&tiles, &train_idx);
            let mut results = Vec::new();
            let mut models = Vec::new();
            for cell in cells {
                let mut metrics = Metrics {
                    accuracy: None,
                    mean_iou: None,
                };
                let mut histories = Vec::new();
                for cfg in cell.configs(protocol) {
                    let outcome = train(&cfg, &train_tiles, f as u64)?;
                    let m = evaluate(&outcome.params, &test_tiles, protocol.batch_size.max(32))?;
                    metrics.accuracy = metrics.accuracy.or(m.accuracy);
                    metrics.mean_iou = metrics.mean_iou.or(m.mean_iou);
                    histories.push((cfg.model_mode, outcome.history));
                    if keep == KeepModels::All || (keep == KeepModels::FirstFold && f == 0) {
                        models.push(TrainedModel {
                            cell: *cell,
                            fold: f,
                            params: outcome.params,
                        });
                    }
                }
                results.push(FoldResult {
                    cell: *cell,
                    fold: f,
                    accuracy: metrics.accuracy.unwrap_or(0.0),
                    iou: metrics.mean_iou.unwrap_or(0.0),
                    histories,
                });
            }
            Ok((results, models))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut fold_results = Vec::new();
    let mut models = Vec::new();
    for (r, m) in per_fold {
        fold_results.extend(r);
        models.extend(m);
    }
    // Cell-major order.
    fold_results.sort_by_key(|r| (cells.iter().position(|c| *c == r.cell).unwrap_or(0), r.fold));
    let summary = summarize(cells, &fold_results);
    Ok(ExperimentResults {
        folds: fold_results,
        summary,
        labeler,
        working,
        test,
        models,
    })
}

pub fn summarize(cells: &[Cell], folds: &[FoldResult]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|cell| {
            let rows: Vec<&FoldResult> = folds.iter().filter(|r| r.cell == *cell).collect();
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let iou: Vec<f64> = rows.iter().map(|r| r.iou).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (iou_mean, iou_std) = mean_std(&iou);
            CellSummary {
                cell: *cell,
                folds: rows.len(),
                accuracy_mean,
                accuracy_std,
                iou_mean,
                iou_std,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct FoldRow<'a> {
    model_mode: &'a str,
    loss_mode: &'a str,
    lambda: Option<f64>,
    fold: usize,
    accuracy: f64,
    iou: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model_mode: &'a str,
    loss_mode: &'a str,
    lambda: Option<f64>,
    folds: usize,
    accuracy_mean: f64,
    accuracy_std: f64,
    iou_mean: f64,
    iou_std: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Io {
            path: path.into(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

pub(crate) fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Columns: model_mode, loss_mode, lambda, fold, accuracy, iou.
pub fn write_fold_csv(path: &Path, folds: &[FoldResult]) -> Result<()> {
    write_csv(
        path,
        folds.iter().map(|r| FoldRow {
            model_mode: r.cell.architecture.name(),
            loss_mode: r.cell.loss_mode.name(),
            lambda: r.cell.lambda,
            fold: r.fold,
            accuracy: r.accuracy,
            iou: r.iou,
        }),
    )
}

/// Columns: model_mode, loss_mode, lambda, folds, accuracy_mean, accuracy_std, iou_mean, iou_std.
pub fn write_summary_csv(path: &Path, summary: &[CellSummary]) -> Result<()> {
    write_csv(
        path,
        summary.iter().map(|s| SummaryRow {
            model_mode: s.cell.architecture.name(),
            loss_mode: s.cell.loss_mode.name(),
            lambda: s.cell.lambda,
            folds: s.folds,
            accuracy_mean: s.accuracy_mean,
            accuracy_std: s.accuracy_std,
            iou_mean: s.iou_mean,
            iou_std: s.iou_std,
        }),
    )
}

/// Columns: id, pc1, pc2, class_label, box_label.
pub fn write_pca_csv(path: &Path, rows: &[super::pca::PcaRow]) -> Result<()> {
    write_csv(path, rows)
}

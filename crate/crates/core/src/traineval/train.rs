use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, LossMode};
use super::geometry::{iou, mask_to_box};
use crate::autodiff::{Tape, Tensor, Var};
use crate::boxlabels::BoxAnnotation;
use crate::data::Tile;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, BnMode, ModelParams};
use crate::triplet::{class_triplet_loss, matl_loss};

/// Threshold applied to mask probabilities before box fitting.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Losses recorded during training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean batch loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub batch_loss: Vec<f64>,
    /// Tile indices of every batch, in training order.
    pub batches: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: TrainHistory,
}

/// Batches for every epoch. Depends only on `(seed, stream)` and the sizes;
/// a trailing batch with fewer than two tiles is dropped.
pub fn batch_schedule(n: usize, batch_size: usize, epochs: usize, seed: u64, stream: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut order: Vec<usize> = (0..n).collect();
    (0..epochs)
        .map(|_| {
            order.shuffle(&mut rng);
            order
                .chunks(batch_size.max(1))
                .filter(|c| c.len() >= 2)
                .map(<[usize]>::to_vec)
                .collect()
        })
        .collect()
}

fn stack_images(tiles: &[&Tile], size: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(tiles.len() * 3 * size * size);
    for t in tiles {
        if t.size != size || t.image.len() != 3 * size * size {
            return Err(Error::Config(format!(
                "tile of size {} does not match model input_size {size}",
                t.size
            )));
        }
        data.extend_from_slice(&t.image);
    }
    Tensor::new(vec![tiles.len(), 3, size, size], data)
}

fn stack_masks(tiles: &[&Tile], size: usize) -> Result<Tensor<f32>> {
    let data = tiles.iter().flat_map(|t| t.mask.iter().map(|&m| m as f32)).collect();
    Tensor::new(vec![tiles.len(), size, size], data)
}

fn box_labels(tiles: &[&Tile]) -> Result<Vec<usize>> {
    tiles
        .iter()
        .map(|t| {
            t.box_label
                .ok_or_else(|| Error::Usage("MATL training needs box labels on every tile".into()))
        })
        .collect()
}

/// Total loss, the forward pass, and the batch-norm statistics of one batch.
type BatchLoss = (Var, crate::nn::Forward<f32>, Vec<(String, Var)>);

/// Builds the total loss of one batch: task losses of the active heads plus
/// the weighted embedding term.
fn batch_loss(
    cfg: &ExperimentConfig,
    params: &ModelParams<f32>,
    tape: &mut Tape<f32>,
    tiles: &[&Tile],
) -> Result<BatchLoss> {
    let size = cfg.protocol.model.input_size;
    let bound = params.bind(tape, true);
    let images = tape.constant(stack_images(tiles, size)?);
    let out = params.forward(tape, &bound, cfg.model_mode, images, BnMode::Train)?;
    let classes: Vec<usize> = tiles.iter().map(|t| t.class_label).collect();

    let mut terms = Vec::new();
    if let Some(logits) = out.class_logits {
        terms.push(tape.softmax_cross_entropy(logits, &classes)?);
    }
    if let Some(logits) = out.mask_logits {
        terms.push(tape.bce_with_logits(logits, &stack_masks(tiles, size)?)?);
    }
    let loss_cfg = cfg.loss_config();
    let embed = match cfg.loss_mode {
        LossMode::Wtl => None,
        LossMode::Cltl => Some(class_triplet_loss(tape, out.embedding, &classes, &loss_cfg)?),
        LossMode::Matl => Some(matl_loss(tape, out.embedding, &classes, &box_labels(tiles)?, &loss_cfg)?),
    };
    if let Some(e) = embed {
        terms.push(tape.scale(e, cfg.protocol.triplet_weight as f32));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let bound_vars = bound.iter().map(|(k, &v)| (k.clone(), v)).collect();
    Ok((total, out, bound_vars))
}

/// Trains one model of `cfg.model_mode` with Adam.
///
/// Initialization depends only on `cfg.protocol.model.seed`; the batch order
/// depends only on `(cfg.protocol.seed, stream)`, so loss modes never perturb
/// each other's sampling.
pub fn train(cfg: &ExperimentConfig, tiles: &[Tile], stream: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if tiles.is_empty() {
        return Err(Error::Usage("no training tiles".into()));
    }
    let p = &cfg.protocol;
    let mut params = ModelParams::<f32>::init(&p.model, cfg.model_mode)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: p.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = TrainHistory::default();
    for (epoch, batches) in batch_schedule(tiles.len(), p.batch_size, p.epochs, p.seed, stream)
        .into_iter()
        .enumerate()
    {
        let mut sum = 0.0;
        let count = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let batch: Vec<&Tile> = idx.iter().map(|&i| &tiles[i]).collect();
            let diverged = |msg: String| Error::Training { epoch, batch: b, msg };
            let mut tape = Tape::new();
            let (loss, out, vars) = batch_loss(cfg, &params, &mut tape, &batch)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            let grads = tape.backward(loss)?;
            let grads = vars.into_iter().map(|(k, v)| (k, grads.get(v))).collect();
            adam.step(&mut params, &grads).map_err(|e| diverged(e.to_string()))?;
            params.update_running_stats(&out.batch_stats);
            sum += value;
            history.batch_loss.push(value);
            history.batches.push(idx);
        }
        history.epoch_loss.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(TrainOutcome { params, history })
}

/// Inference-mode outputs for one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: Option<usize>,
    /// `Some(None)` when the mask head found no object.
    pub bbox: Option<Option<BoxAnnotation>>,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Runs the model with batch-norm running statistics.
pub fn predict(params: &ModelParams<f32>, tiles: &[Tile], batch_size: usize) -> Result<Vec<Prediction>> {
    let size = params.config.input_size;
    let mut preds = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let refs: Vec<&Tile> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let images = tape.constant(stack_images(&refs, size)?);
        let out = params.forward(&mut tape, &bound, params.mode, images, BnMode::Eval)?;
        for i in 0..chunk.len() {
            let class = out.class_logits.map(|l| argmax(tape.value(l).row(i)));
            let bbox = out.mask_probs.map(|m| {
                let plane = &tape.value(m).data()[i * size * size..(i + 1) * size * size];
                mask_to_box(plane, size, MASK_THRESHOLD)
            });
            preds.push(Prediction { class, bbox });
        }
    }
    Ok(preds)
}

/// Test metrics; each is present when the model has the matching head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
}

/// Accuracy and mean IoU of predictions against the tiles' annotations.
pub fn score(preds: &[Prediction], tiles: &[Tile]) -> Metrics {
    let n = tiles.len().max(1) as f64;
    let has_class = preds.first().is_some_and(|p| p.class.is_some());
    let has_box = preds.first().is_some_and(|p| p.bbox.is_some());
    let accuracy = has_class.then(|| {
        preds.iter().zip(tiles).filter(|(p, t)| p.class == Some(t.class_label)).count() as f64 / n
    });
    let mean_iou = has_box.then(|| {
        preds
            .iter()
            .zip(tiles)
            .map(|(p, t)| iou(p.bbox.flatten().as_ref(), Some(&t.bbox)))
            .sum::<f64>()
            / n
    });
    Metrics { accuracy, mean_iou }
}

pub fn evaluate(params: &ModelParams<f32>, tiles: &[Tile], batch_size: usize) -> Result<Metrics> {
    Ok(score(&predict(params, tiles, batch_size)?, tiles))
}

/// Encoder embeddings in inference mode.
pub fn embed_tiles(params: &ModelParams<f32>, tiles: &[Tile], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let size = params.config.input_size;
    let mut rows = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch_size.max(1)) {
        let refs: Vec<&Tile> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let images = tape.constant(stack_images(&refs, size)?);
        let e = params.embed(&mut tape, &bound, images, BnMode::Eval)?;
        for i in 0..chunk.len() {
            rows.push(tape.value(e).row(i).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(rows)
}

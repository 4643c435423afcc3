//! The epoch loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{set_loss, LossBreakdown};
use super::mosaic::{ground_truth, sample_mosaic};
use super::{cosine_lr, TrainConfig, TrainError};
use crate::autograd::{adamw_step, AdamWConfig, AdamWState, Graph, ParamSet};
use crate::boxgeom::{iou, union_box, BBox, MosaicLayout};
use crate::dataset::{Dataset, Sample, ScoredBox};
use crate::decoder::{selected_mean, DecoderModel, BASE_UNION};
use crate::encoder::{SceneSpec, SyntheticEncoder};
use crate::querying::{build_queries, filter_training_selection, match_queries, Condition, QueryMode};
use crate::util::rng_from;

/// Everything the loop reads but never changes.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub encoder: &'a SyntheticEncoder,
    pub lexicon: &'a BTreeSet<String>,
    pub train: &'a Dataset,
    /// Held-out split for the per-epoch IoU-Max probe.
    pub probe: Option<&'a Dataset>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub l1_box: f64,
    pub giou_box: f64,
    pub score: f64,
    pub total: f64,
    pub probe_iou_max: Option<f64>,
    pub fallback_filter_count: usize,
}

/// Model, optimizer moments and the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DecoderModel,
    pub optimizer: AdamWState,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model: DecoderModel) -> Self {
        TrainState {
            model,
            optimizer: AdamWState::default(),
            epoch: 0,
        }
    }
}

struct Example {
    id: String,
    scene: SceneSpec,
    text: String,
    gt: Vec<ScoredBox>,
    layout: MosaicLayout,
}

fn single_example<R: Rng>(sample: &Sample, rng: &mut R, flip_prob: f64) -> Example {
    let text_index = rng.random_range(0..sample.texts.len());
    let flip = flip_prob > 0.0 && rng.random_bool(flip_prob);
    let mut gt = ground_truth(sample, text_index);
    let scene = if flip {
        gt.iter_mut().for_each(|g| g.bbox = g.bbox.flip_horizontal());
        sample.scene.flip_horizontal()
    } else {
        sample.scene.clone()
    };
    Example {
        id: sample.id.clone(),
        scene,
        text: sample.texts[text_index].text.clone(),
        gt,
        layout: MosaicLayout::single(),
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Boxes a probe prediction is compared with: annotator boxes when present,
/// else the ideal crop, else the best-scored proposal.
fn reference_boxes(sample: &Sample, text_index: usize) -> Vec<BBox> {
    let t = &sample.texts[text_index];
    if let Some(b) = &t.annotator_boxes {
        return b.clone();
    }
    if let Some(b) = t.ideal {
        return vec![b];
    }
    let mut best: Option<&ScoredBox> = None;
    for p in t.proposals.iter().flatten() {
        if best.is_none_or(|b| p.score > b.score) {
            best = Some(p);
        }
    }
    best.map(|b| vec![b.bbox]).unwrap_or_default()
}

/// Mean over evaluation units of the top-1 prediction's best IoU against the
/// reference boxes.
pub fn probe_iou_max(
    model: &DecoderModel,
    encoder: &SyntheticEncoder,
    lexicon: &BTreeSet<String>,
    dataset: &Dataset,
    mode: QueryMode,
) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut units = 0usize;
    for s in &dataset.samples {
        let enc = encoder.encode_scene(&s.scene)?;
        for (i, t) in s.texts.iter().enumerate() {
            let refs = reference_boxes(s, i);
            if refs.is_empty() {
                continue;
            }
            let queries = build_queries(mode, Condition::Text(&t.text), lexicon, encoder)?;
            let top = model.predict(encoder, &enc, &queries, 1)?;
            sum += refs.iter().map(|r| iou(&top[0].bbox, r)).fold(0.0, f64::max);
            units += 1;
        }
    }
    Ok(if units == 0 { 0.0 } else { sum / units as f64 })
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`, calling `on_epoch` after each
/// with its log line and the updated state.
pub fn train<F>(data: TrainingData<'_>, cfg: &TrainConfig, mut state: TrainState, mut on_epoch: F) -> Result<TrainState, TrainError>
where
    F: FnMut(&EpochLog, &TrainState) -> Result<(), TrainError>,
{
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(TrainError::Config(errs));
    }
    if cfg.epochs == 0 || state.epoch >= cfg.epochs {
        return Ok(state);
    }
    let n = data.train.len();
    if n == 0 {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    for epoch in state.epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[b"epoch", &epoch.to_le_bytes()]));
        let mut sums = LossBreakdown::default();
        let mut count = 0usize;
        let mut fallbacks = 0usize;
        let mut lr = cfg.lr_max;

        for step in 0..steps_per_epoch {
            let global = (epoch - 1) * steps_per_epoch + step;
            lr = cosine_lr(global, total_steps, cfg.lr_max, cfg.lr_min)?;
            let slots = order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(n)].to_vec();
            let scale = 1.0 / slots.len() as f64;
            for (_, t) in state.model.params_mut().iter_mut() {
                t.zero_grad();
            }
            for (slot, &sample_index) in slots.iter().enumerate() {
                let mut rng = rng_from(
                    cfg.seed,
                    &[b"slot", &epoch.to_le_bytes(), &step.to_le_bytes(), &slot.to_le_bytes()],
                );
                let ex = if cfg.mosaic_enabled {
                    let m = sample_mosaic(data.train, &mut rng, cfg.flip_prob)?;
                    Example {
                        id: data.train.samples[m.target_sample].id.clone(),
                        scene: m.scene,
                        text: m.text,
                        gt: m.gt,
                        layout: m.layout,
                    }
                } else {
                    single_example(&data.train.samples[sample_index], &mut rng, cfg.flip_prob)
                };

                let enc = data.encoder.encode_scene(&ex.scene)?;
                let queries = build_queries(cfg.query_mode, Condition::Text(&ex.text), data.lexicon, data.encoder)?;
                let (shift, union) = if queries.is_empty() {
                    (None, BASE_UNION)
                } else {
                    let mut sel = match_queries(&queries, &enc)?;
                    if cfg.mosaic_enabled {
                        let best_gt = ex
                            .gt
                            .iter()
                            .fold(None::<&ScoredBox>, |b, g| match b {
                                Some(b) if b.score >= g.score => Some(b),
                                _ => Some(g),
                            })
                            .ok_or(TrainError::NoHighQuality)?;
                        sel = filter_training_selection(&sel, &enc, &best_gt.bbox, &ex.layout.target_region());
                        fallbacks += usize::from(sel.fallback);
                    }
                    (selected_mean(&sel), union_box(&sel.boxes)?)
                };

                let mut g = Graph::new();
                let fv = state
                    .model
                    .forward(&mut g, shift.as_deref(), &enc.image_tokens, data.encoder.positions(), &union)?;
                let (loss, breakdown, _) = set_loss(&mut g, &fv, &ex.gt, &cfg.loss)?;
                if !breakdown.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        slot,
                        sample: ex.id,
                        breakdown: format!("{breakdown:?}"),
                    });
                }
                g.backward(loss)?;
                g.accumulate_param_grads(state.model.params_mut(), scale)?;
                sums.l1_box += breakdown.l1_box;
                sums.giou_box += breakdown.giou_box;
                sums.score += breakdown.score;
                sums.total += breakdown.total;
                count += 1;
            }
            clip_grad_norm(state.model.params_mut(), cfg.grad_clip);
            let opt = AdamWConfig {
                lr,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            };
            adamw_step(state.model.params_mut(), &mut state.optimizer, &opt)?;
        }

        state.epoch = epoch;
        let probe = match data.probe {
            Some(ds) => Some(probe_iou_max(&state.model, data.encoder, data.lexicon, ds, cfg.query_mode)?),
            None => None,
        };
        let c = count.max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            l1_box: sums.l1_box / c,
            giou_box: sums.giou_box / c,
            score: sums.score / c,
            total: sums.total / c,
            probe_iou_max: probe,
            fallback_filter_count: fallbacks,
        };
        on_epoch(&log, &state)?;
    }
    Ok(state)
}

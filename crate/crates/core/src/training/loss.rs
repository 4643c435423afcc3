//! Set-prediction loss: Hungarian matching against high-quality ground truth,
//! box regression on matched pairs, and smoothed score supervision.

use serde::{Deserialize, Serialize};

use super::hungarian::{hungarian, MatchResult};
use super::TrainError;
use crate::autograd::{Graph, Tensor, Var};
use crate::boxgeom::{giou, giou_with_grad, iou, BBox};
use crate::dataset::ScoredBox;
use crate::decoder::ForwardVars;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_score: f64,
    /// Smooth-L1 transition point for box coordinates.
    pub box_beta: f64,
    pub score_beta: f64,
    pub smoothing_iou_threshold: f64,
    pub hq_score_threshold: f64,
    /// Weight of predictions supervised toward score 0.
    pub background_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_score: 1.0,
            box_beta: 0.1,
            score_beta: 1.0,
            smoothing_iou_threshold: 0.9,
            hq_score_threshold: 4.0,
            background_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_box: f64,
    pub giou_box: f64,
    pub score: f64,
    pub total: f64,
    pub matched: usize,
    pub smoothed: usize,
    pub background: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    Matched,
    Smoothed,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTarget {
    pub target: f64,
    pub weight: f64,
    pub rule: TargetRule,
}

/// `C[m][j] = l1 * |b_m - g_j|_1 + lg * (1 - GIoU(b_m, g_j))`, cxcywh.
pub fn build_cost(pred: &[BBox], gt: &[BBox], lambda_l1: f64, lambda_giou: f64) -> Vec<Vec<f64>> {
    pred.iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let l1: f64 = p.to_array().iter().zip(g.to_array()).map(|(a, b)| (a - b).abs()).sum();
                    lambda_l1 * l1 + lambda_giou * (1.0 - giou(p, g))
                })
                .collect()
        })
        .collect()
}

/// Indices of ground truth eligible for matching (`score >= threshold`).
pub fn high_quality(gt: &[ScoredBox], threshold: f64) -> Vec<usize> {
    (0..gt.len()).filter(|&j| gt[j].score >= threshold).collect()
}

/// Score targets by priority: matched prediction, else the best-IoU ground
/// truth over the full set when its IoU reaches the smoothing threshold,
/// else zero at reduced weight. `pairs` index into `gt` directly.
pub fn score_targets(pred: &[BBox], gt: &[ScoredBox], pairs: &[(usize, usize)], cfg: &LossConfig) -> Vec<ScoreTarget> {
    pred.iter()
        .enumerate()
        .map(|(m, p)| {
            if let Some(&(_, j)) = pairs.iter().find(|(pm, _)| *pm == m) {
                return ScoreTarget {
                    target: gt[j].score / 5.0,
                    weight: 1.0,
                    rule: TargetRule::Matched,
                };
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                let v = iou(p, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= cfg.smoothing_iou_threshold => ScoreTarget {
                    target: gt[j].score / 5.0,
                    weight: 1.0,
                    rule: TargetRule::Smoothed,
                },
                _ => ScoreTarget {
                    target: 0.0,
                    weight: cfg.background_weight,
                    rule: TargetRule::Background,
                },
            }
        })
        .collect()
}

/// Records the loss on `g` and returns its scalar handle with a breakdown.
/// `gt` is the full annotated set; matching uses its high-quality subset.
pub fn set_loss(
    g: &mut Graph,
    fv: &ForwardVars,
    gt: &[ScoredBox],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown, MatchResult), TrainError> {
    let hq = high_quality(gt, cfg.hq_score_threshold);
    if hq.is_empty() {
        return Err(TrainError::NoHighQuality);
    }
    let pred: Vec<BBox> = g
        .value(fv.pred_boxes)
        .chunks(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect();
    let hq_boxes: Vec<BBox> = hq.iter().map(|&j| gt[j].bbox).collect();
    let mut matching = hungarian(&build_cost(&pred, &hq_boxes, cfg.lambda_l1, cfg.lambda_giou))?;
    for p in &mut matching.pairs {
        p.1 = hq[p.1];
    }
    let n_pairs = matching.pairs.len() as f64;
    let pred_idx: Vec<usize> = matching.pairs.iter().map(|p| p.0).collect();
    let gt_rows: Vec<BBox> = matching.pairs.iter().map(|p| gt[p.1].bbox).collect();

    let matched = g.index_select(fv.pred_boxes, 0, &pred_idx)?;
    let target = g.constant(Tensor::new(
        vec![gt_rows.len(), 4],
        gt_rows.iter().flat_map(|b| b.to_array()).collect(),
    )?);
    let l1 = g.smooth_l1(matched, target, cfg.box_beta)?;
    let l1 = g.sum(l1, None)?;
    let l1 = g.scale(l1, 1.0 / n_pairs)?;

    let giou_rows = gt_rows.clone();
    let gl = g.map_rows(matched, 1, move |r, input, out, jac| {
        let a = BBox::new(input[0], input[1], input[2], input[3]);
        let (v, grad) = giou_with_grad(&a, &giou_rows[r]);
        out[0] = 1.0 - v;
        for k in 0..4 {
            jac[k] = -grad[k];
        }
    })?;
    let gl = g.sum(gl, None)?;
    let gl = g.scale(gl, 1.0 / n_pairs)?;

    let targets = score_targets(&pred, gt, &matching.pairs, cfg);
    let m = targets.len();
    let weight_sum: f64 = targets.iter().map(|t| t.weight).sum();
    let t_const = g.constant(Tensor::new(vec![m, 1], targets.iter().map(|t| t.target).collect())?);
    let w_const = g.constant(Tensor::new(vec![m, 1], targets.iter().map(|t| t.weight).collect())?);
    let sl = g.smooth_l1(fv.scores, t_const, cfg.score_beta)?;
    let sl = g.mul(sl, w_const)?;
    let sl = g.sum(sl, None)?;
    let sl = g.scale(sl, 1.0 / weight_sum)?;

    let a = g.scale(l1, cfg.lambda_l1)?;
    let b = g.scale(gl, cfg.lambda_giou)?;
    let c = g.scale(sl, cfg.lambda_score)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;

    let count = |rule| targets.iter().filter(|t| t.rule == rule).count();
    let breakdown = LossBreakdown {
        l1_box: g.scalar(l1),
        giou_box: g.scalar(gl),
        score: g.scalar(sl),
        total: g.scalar(total),
        matched: count(TargetRule::Matched),
        smoothed: count(TargetRule::Smoothed),
        background: count(TargetRule::Background),
    };
    Ok((total, breakdown, matching))
}

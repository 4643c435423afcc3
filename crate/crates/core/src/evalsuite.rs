//! Conditioned-cropping metrics and reports: IoU-Mean / IoU-Max of the top-1
//! crop against annotator boxes, and ACC_{K/N} against dense scored proposals.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{iou, BBox};
use crate::dataset::{Dataset, SchemaKind, ScoredBox};
use crate::decoder::{DecoderError, DecoderModel};
use crate::encoder::{EncoderError, SyntheticEncoder};
use crate::querying::{build_queries, Condition, QueryError, QueryMode};
use crate::util::rng_from;

pub const REPORT_FORMAT: &str = "cropforge-eval-v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("iou metrics need at least one annotator box")]
    NoAnnotators,
    #[error("acc needs at least {needed} proposals, got {got}")]
    TooFewProposals { needed: usize, got: usize },
    #[error("no predicted boxes")]
    NoPredictions,
    #[error("metric '{metric}' requires {requires} ground truth, but split '{split}' has schema '{schema}'")]
    SchemaMismatch {
        metric: Metric,
        requires: &'static str,
        split: String,
        schema: SchemaKind,
    },
    #[error("{0}")]
    Predictions(String),
    #[error("unknown metric '{0}' (expected iou or acc)")]
    UnknownMetric(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prediction file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

/// `(mean, max)` IoU of one predicted box against every annotator box.
pub fn iou_mean_max(pred: &BBox, annotators: &[BBox]) -> Result<(f64, f64), EvalError> {
    if annotators.is_empty() {
        return Err(EvalError::NoAnnotators);
    }
    let ious: Vec<f64> = annotators.iter().map(|a| iou(pred, a)).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let max = ious.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((mean, max))
}

/// Index of the proposal overlapping `b` most; ties go to the lowest index.
fn nearest_proposal(b: &BBox, dense: &[ScoredBox]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, p) in dense.iter().enumerate() {
        let v = iou(b, &p.bbox);
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Indices of the `n` best-scored proposals; ties go to the lowest index.
fn top_proposals(dense: &[ScoredBox], n: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..dense.len()).collect();
    order.sort_by(|&a, &b| dense[b].score.total_cmp(&dense[a].score).then(a.cmp(&b)));
    order.into_iter().take(n).collect()
}

/// 1 when any of the `K = preds.len()` boxes maps onto one of the `n`
/// best-scored proposals, else 0.
pub fn acc_k_n(preds: &[BBox], dense: &[ScoredBox], n: usize) -> Result<u8, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::NoPredictions);
    }
    if dense.len() < n || n == 0 {
        return Err(EvalError::TooFewProposals {
            needed: n.max(1),
            got: dense.len(),
        });
    }
    let top = top_proposals(dense, n);
    Ok(u8::from(preds.iter().any(|b| top.contains(&nearest_proposal(b, dense)))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// IoU-Mean and IoU-Max, over annotator boxes.
    Iou,
    /// ACC_{1/5} and ACC_{1/10}, over dense proposals.
    Acc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Acc => "acc",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "iou" => Ok(Metric::Iou),
            "acc" => Ok(Metric::Acc),
            other => Err(EvalError::UnknownMetric(other.to_string())),
        }
    }
}

/// Comma-separated metric list, deduplicated and sorted.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    let set: BTreeSet<Metric> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err(EvalError::UnknownMetric(list.to_string()));
    }
    Ok(set.into_iter().collect())
}

/// One entry of a prediction file; boxes are cxcywh, best first once sorted by score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub text_index: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl PredictionRecord {
    /// Boxes by descending score, ties keeping file order.
    fn ranked(&self) -> Vec<BBox> {
        let mut order: Vec<usize> = (0..self.boxes.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.into_iter().map(|i| self.boxes[i]).collect()
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Predictions of a trained model, or read from an external file.
pub enum PredictionSource<'a> {
    Model {
        model: &'a DecoderModel,
        encoder: &'a SyntheticEncoder,
        lexicon: &'a BTreeSet<String>,
        mode: QueryMode,
    },
    Records(&'a [PredictionRecord]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub id: String,
    pub text_index: usize,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_1_5: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_1_10: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_1_5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_1_10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub split: String,
    pub schema: SchemaKind,
    pub metrics: Vec<Metric>,
    /// `model:<mode>` or `predictions`.
    pub source: String,
    pub units: usize,
    pub aggregates: Aggregates,
    pub samples: Vec<UnitResult>,
    /// Effective configuration of the run that produced the predictions.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `metric,value` rows for the aggregates that were computed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.aggregate_rows() {
            out.push_str(&format!("{name},{v}\n"));
        }
        out
    }

    pub fn aggregate_rows(&self) -> Vec<(&'static str, f64)> {
        let a = &self.aggregates;
        [
            ("iou_mean", a.iou_mean),
            ("iou_max", a.iou_max),
            ("acc_1_5", a.acc_1_5),
            ("acc_1_10", a.acc_1_10),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }
}

pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    /// Ranked boxes kept per unit in the report.
    pub record_k: usize,
    pub config: serde_json::Value,
}

fn check_schema(metrics: &[Metric], dataset: &Dataset) -> Result<(), EvalError> {
    let schema = dataset.manifest.schema;
    for &m in metrics {
        let (ok, requires) = match m {
            Metric::Iou => (schema.has_annotators(), "annotator-box"),
            Metric::Acc => (schema.has_dense(), "dense-scored"),
        };
        if !ok {
            return Err(EvalError::SchemaMismatch {
                metric: m,
                requires,
                split: dataset.manifest.split.clone(),
                schema,
            });
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every (sample, text) unit of `dataset`. Aggregates are plain means
/// over units, accumulated in dataset order.
pub fn evaluate(source: &PredictionSource<'_>, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if opts.metrics.is_empty() {
        return Err(EvalError::UnknownMetric(String::new()));
    }
    check_schema(&opts.metrics, dataset)?;
    let lookup: BTreeMap<(&str, usize), &PredictionRecord> = match source {
        PredictionSource::Records(records) => {
            let mut map = BTreeMap::new();
            for r in records.iter() {
                if r.boxes.len() != r.scores.len() {
                    return Err(EvalError::Predictions(format!(
                        "{} text {}: {} boxes but {} scores",
                        r.id,
                        r.text_index,
                        r.boxes.len(),
                        r.scores.len()
                    )));
                }
                if map.insert((r.id.as_str(), r.text_index), r).is_some() {
                    return Err(EvalError::Predictions(format!("duplicate entry for {} text {}", r.id, r.text_index)));
                }
            }
            map
        }
        PredictionSource::Model { .. } => BTreeMap::new(),
    };
    let use_iou = opts.metrics.contains(&Metric::Iou);
    let use_acc = opts.metrics.contains(&Metric::Acc);

    let mut units = Vec::with_capacity(dataset.num_units());
    for s in &dataset.samples {
        let enc = match source {
            PredictionSource::Model { encoder, .. } => Some(encoder.encode_scene(&s.scene)?),
            PredictionSource::Records(_) => None,
        };
        for (ti, t) in s.texts.iter().enumerate() {
            let (boxes, scores) = match source {
                PredictionSource::Model {
                    model,
                    encoder,
                    lexicon,
                    mode,
                } => {
                    let queries = build_queries(*mode, Condition::Text(&t.text), lexicon, encoder)?;
                    let ranked = model.predict(encoder, enc.as_ref().expect("encoded above"), &queries, usize::MAX)?;
                    (
                        ranked.iter().map(|r| r.bbox).collect::<Vec<_>>(),
                        ranked.iter().map(|r| r.score).collect::<Vec<_>>(),
                    )
                }
                PredictionSource::Records(_) => {
                    let r = lookup.get(&(s.id.as_str(), ti)).ok_or_else(|| {
                        EvalError::Predictions(format!("no prediction for sample '{}' text {ti}", s.id))
                    })?;
                    let ranked = r.ranked();
                    let mut sc = r.scores.clone();
                    sc.sort_by(|a, b| b.total_cmp(a));
                    (ranked, sc)
                }
            };
            let top1 = *boxes.first().ok_or(EvalError::NoPredictions)?;
            let mut unit = UnitResult {
                id: s.id.clone(),
                text_index: ti,
                boxes: boxes.iter().take(opts.record_k).copied().collect(),
                scores: scores.iter().take(opts.record_k).copied().collect(),
                iou_mean: None,
                iou_max: None,
                acc_1_5: None,
                acc_1_10: None,
            };
            if use_iou {
                let ann = t.annotator_boxes.as_deref().unwrap_or(&[]);
                let (m, x) = iou_mean_max(&top1, ann)?;
                unit.iou_mean = Some(m);
                unit.iou_max = Some(x);
            }
            if use_acc {
                let dense = t.proposals.as_deref().unwrap_or(&[]);
                unit.acc_1_5 = Some(acc_k_n(&[top1], dense, 5)?);
                unit.acc_1_10 = Some(acc_k_n(&[top1], dense, 10)?);
            }
            units.push(unit);
        }
    }
    let aggregates = Aggregates {
        iou_mean: mean(units.iter().filter_map(|u| u.iou_mean)),
        iou_max: mean(units.iter().filter_map(|u| u.iou_max)),
        acc_1_5: mean(units.iter().filter_map(|u| u.acc_1_5.map(f64::from))),
        acc_1_10: mean(units.iter().filter_map(|u| u.acc_1_10.map(f64::from))),
    };
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        split: dataset.manifest.split.clone(),
        schema: dataset.manifest.schema,
        metrics: opts.metrics.clone(),
        source: match source {
            PredictionSource::Model { mode, .. } => format!("model:{mode}"),
            PredictionSource::Records(_) => "predictions".to_string(),
        },
        units: units.len(),
        aggregates,
        samples: units,
        config: opts.config.clone(),
    })
}

/// Predicts each unit's oracle ideal crop with score 1.
pub fn oracle_predictions(dataset: &Dataset) -> Vec<PredictionRecord> {
    units_of(dataset)
        .filter_map(|(id, ti, ideal)| {
            ideal.map(|b| PredictionRecord {
                id,
                text_index: ti,
                boxes: vec![b],
                scores: vec![1.0],
            })
        })
        .collect()
}

/// One box per unit with corners drawn uniformly from the canvas.
pub fn random_predictions(dataset: &Dataset, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = rng_from(seed, &[b"random-predictor"]);
    units_of(dataset)
        .map(|(id, ti, _)| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let (c, d): (f64, f64) = (rng.random(), rng.random());
            PredictionRecord {
                id,
                text_index: ti,
                boxes: vec![BBox::from_corners(a.min(b), c.min(d), a.max(b), c.max(d))],
                scores: vec![1.0],
            }
        })
        .collect()
}

fn units_of(dataset: &Dataset) -> impl Iterator<Item = (String, usize, Option<BBox>)> + '_ {
    dataset
        .samples
        .iter()
        .flat_map(|s| s.texts.iter().enumerate().map(move |(i, t)| (s.id.clone(), i, t.ideal)))
}

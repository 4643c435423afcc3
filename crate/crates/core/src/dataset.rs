//! Annotated samples (dense scored proposals and/or per-annotator boxes), a
//! synthetic scene and annotation generator driven by a programmatic
//! aesthetic oracle, grid proposals, and manifest IO with validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{iou, BBox};
use crate::encoder::{read_scene, render_scene, write_ppm, EncoderError, SceneObject, SceneSpec};
use crate::util::rng_from;

pub const DATASET_FORMAT: &str = "cropforge-dataset-v1";
pub const MAX_SPLIT_SIZE: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("sample '{sample}' {field}: {message}")]
    Invalid {
        sample: String,
        field: String,
        message: String,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("generation: {0}")]
    Generation(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchemaKind {
    /// Every text carries ~90 scored grid proposals.
    Dense,
    /// Every text carries a few annotator boxes.
    Annotators,
    #[default]
    Both,
}

impl SchemaKind {
    pub fn has_dense(self) -> bool {
        matches!(self, SchemaKind::Dense | SchemaKind::Both)
    }

    pub fn has_annotators(self) -> bool {
        matches!(self, SchemaKind::Annotators | SchemaKind::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemaKind::Dense => "dense",
            SchemaKind::Annotators => "annotators",
            SchemaKind::Both => "both",
        }
    }
}

impl fmt::Display for SchemaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemaKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dense" => Ok(SchemaKind::Dense),
            "annotators" => Ok(SchemaKind::Annotators),
            "both" => Ok(SchemaKind::Both),
            _ => Err(format!("unknown schema '{s}' (expected dense, annotators or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub text: String,
    /// Oracle ideal crop the annotations were derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ideal: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<Vec<ScoredBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_boxes: Option<Vec<BBox>>,
}

/// One image with its texts, as stored on disk (paths relative to the manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub meta: String,
    pub texts: Vec<TextAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scene: SceneSpec,
    pub texts: Vec<TextAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub anchors: usize,
    pub scales: Vec<f64>,
    /// Width-to-height ratios in pixels.
    pub aspects: Vec<f64>,
}

impl Default for ProposalParams {
    fn default() -> Self {
        ProposalParams {
            anchors: 4,
            scales: vec![0.95, 0.8, 0.65, 0.5],
            aspects: vec![1.0, 4.0 / 3.0, 3.0 / 4.0, 16.0 / 9.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub canvas: [u32; 2],
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub margin: f64,
    pub gamma: f64,
    pub jitter: f64,
    /// Annotators per text for single-text and two-text splits.
    pub annotators_single: usize,
    pub annotators_multi: usize,
    pub proposals: ProposalParams,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            canvas: [96, 96],
            min_objects: 2,
            max_objects: 5,
            min_object_size: 0.2,
            max_object_size: 0.45,
            margin: 0.08,
            gamma: 1.5,
            jitter: 0.03,
            annotators_single: 8,
            annotators_multi: 4,
            proposals: ProposalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub seed: u64,
    pub params: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub split: String,
    pub schema: SchemaKind,
    /// Concept ids the scenes draw from.
    pub vocabulary: Vec<String>,
    /// Sample files, relative to the manifest's directory.
    pub samples: Vec<String>,
    pub generator: Option<GeneratorInfo>,
}

/// A split loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of (sample, text) evaluation units.
    pub fn num_units(&self) -> usize {
        self.samples.iter().map(|s| s.texts.len()).sum()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(invalid(&s.id, "id", "duplicate sample id"));
            }
            validate_sample(s, self.manifest.schema, self.manifest.split == "train")?;
        }
        Ok(())
    }

    /// Writes `DIR/manifest.json`, `DIR/samples/*.json` and `DIR/images/*`.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let samples_dir = dir.join("samples");
        let images_dir = dir.join("images");
        std::fs::create_dir_all(&samples_dir).map_err(io_err(&samples_dir))?;
        std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
        let mut manifest = self.manifest.clone();
        manifest.samples.clear();
        for s in &self.samples {
            let record = SampleRecord {
                id: s.id.clone(),
                image: format!("images/{}.ppm", s.id),
                meta: format!("images/{}.json", s.id),
                texts: s.texts.clone(),
            };
            let img = render_scene(&s.scene)?;
            write_ppm(&dir.join(&record.image), &img)?;
            write_text(&dir.join(&record.meta), &s.scene.to_json())?;
            let rel = format!("samples/{}.json", s.id);
            write_text(&dir.join(&rel), &to_pretty(&record))?;
            manifest.samples.push(rel);
        }
        write_text(&dir.join("manifest.json"), &to_pretty(&manifest))
    }

    /// Loads and validates `DIR/manifest.json` and everything it references.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let mpath = dir.join("manifest.json");
        let manifest: DatasetManifest = read_json(&mpath)?;
        if manifest.format != DATASET_FORMAT {
            return Err(DatasetError::Manifest {
                path: mpath.display().to_string(),
                message: format!("unsupported format '{}'", manifest.format),
            });
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for rel in &manifest.samples {
            let spath = dir.join(rel);
            let record: SampleRecord = read_json(&spath)?;
            let meta_path = dir.join(&record.meta);
            let scene = read_scene(&meta_path).map_err(|e| invalid(&record.id, "meta", &e.to_string()))?;
            let image_path = dir.join(&record.image);
            if !image_path.is_file() {
                return Err(invalid(&record.id, "image", &format!("missing file {}", image_path.display())));
            }
            samples.push(Sample {
                id: record.id,
                scene,
                texts: record.texts,
            });
        }
        let ds = Dataset { manifest, samples };
        ds.validate()?;
        Ok(ds)
    }
}

/// Path of a written sample's image, given the split directory.
pub fn image_path(split_dir: &Path, sample_id: &str) -> PathBuf {
    split_dir.join("images").join(format!("{sample_id}.ppm"))
}

pub fn meta_path(split_dir: &Path, sample_id: &str) -> PathBuf {
    split_dir.join("images").join(format!("{sample_id}.json"))
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn invalid(sample: &str, field: &str, message: &str) -> DatasetError {
    DatasetError::Invalid {
        sample: sample.to_string(),
        field: field.to_string(),
        message: message.to_string(),
    }
}

pub fn validate_sample(s: &Sample, schema: SchemaKind, training: bool) -> Result<(), DatasetError> {
    if s.id.is_empty() {
        return Err(invalid("", "id", "empty id"));
    }
    if s.texts.is_empty() {
        return Err(invalid(&s.id, "texts", "at least one text is required"));
    }
    for (ti, t) in s.texts.iter().enumerate() {
        let field = |f: &str| format!("texts[{ti}].{f}");
        if t.text.trim().is_empty() {
            return Err(invalid(&s.id, &field("text"), "empty text"));
        }
        match (&t.proposals, schema.has_dense()) {
            (None, true) => return Err(invalid(&s.id, &field("proposals"), "required by the dense schema")),
            (Some(props), _) => {
                if props.is_empty() {
                    return Err(invalid(&s.id, &field("proposals"), "empty proposal list"));
                }
                for (pi, p) in props.iter().enumerate() {
                    if !(1.0..=5.0).contains(&p.score) {
                        return Err(invalid(
                            &s.id,
                            &field(&format!("proposals[{pi}].score")),
                            &format!("{} outside [1, 5]", p.score),
                        ));
                    }
                    if !p.bbox.is_valid() {
                        return Err(invalid(&s.id, &field(&format!("proposals[{pi}].box")), "invalid box"));
                    }
                }
                if training && !props.iter().any(|p| p.score >= 4.0) {
                    return Err(invalid(&s.id, &field("proposals"), "no proposal scores >= 4"));
                }
            }
            (None, false) => {}
        }
        match (&t.annotator_boxes, schema.has_annotators()) {
            (None, true) => {
                return Err(invalid(&s.id, &field("annotator_boxes"), "required by the annotators schema"))
            }
            (Some(boxes), _) => {
                if boxes.is_empty() {
                    return Err(invalid(&s.id, &field("annotator_boxes"), "empty box list"));
                }
                for (bi, b) in boxes.iter().enumerate() {
                    if !b.is_valid() {
                        return Err(invalid(&s.id, &field(&format!("annotator_boxes[{bi}]")), "invalid box"));
                    }
                }
            }
            (None, false) => {}
        }
    }
    Ok(())
}

/// Grid proposals in normalized coordinates for a canvas of the given
/// width-to-height ratio. Centers lie on a per-shape anchor lattice centered on
/// the canvas; boxes keeping less than half their area inside are dropped; the
/// rest are clamped and exact duplicates removed.
pub fn grid_proposals(image_aspect: f64, params: &ProposalParams) -> Result<Vec<BBox>, DatasetError> {
    if params.anchors == 0 || params.scales.is_empty() || params.aspects.is_empty() || image_aspect.is_nan() || image_aspect <= 0.0 {
        return Err(DatasetError::Generation("proposal parameters produce no boxes".into()));
    }
    let min_scale = params.scales.iter().copied().fold(f64::INFINITY, f64::min);
    let step = if params.anchors > 1 {
        (1.0 - min_scale).max(0.0) / (params.anchors - 1) as f64
    } else {
        0.0
    };
    let positions = |extent: f64| -> Vec<f64> {
        if extent >= 1.0 || step <= 0.0 {
            return vec![0.5];
        }
        let k = (((1.0 - extent) / step + 1e-9).floor() as usize + 1).min(params.anchors);
        (0..k).map(|i| 0.5 + (i as f64 - (k - 1) as f64 / 2.0) * step).collect()
    };
    let mut out: Vec<BBox> = Vec::new();
    for &s in &params.scales {
        for &a in &params.aspects {
            let r = (a / image_aspect).sqrt();
            let (w, h) = (s * r, s / r);
            for &cy in &positions(h) {
                for &cx in &positions(w) {
                    let b = BBox::new(cx, cy, w, h);
                    if b.intersection_area(&BBox::FULL) < 0.5 * b.area() {
                        continue;
                    }
                    let c = b.clamped();
                    if !out.iter().any(|o| o.to_array() == c.to_array()) {
                        out.push(c);
                    }
                }
            }
        }
    }
    if out.is_empty() {
        return Err(DatasetError::Generation("proposal parameters produce no boxes".into()));
    }
    Ok(out)
}

/// Ideal crop for a set of subject boxes: their tight box grown by `margin`
/// per side, nudged so the subject sits toward a third line, and shifted (or
/// shrunk if needed) back into the canvas.
pub fn ideal_crop(subjects: &[BBox], margin: f64) -> BBox {
    let x1 = subjects.iter().map(BBox::x1).fold(f64::INFINITY, f64::min);
    let y1 = subjects.iter().map(BBox::y1).fold(f64::INFINITY, f64::min);
    let x2 = subjects.iter().map(BBox::x2).fold(f64::NEG_INFINITY, f64::max);
    let y2 = subjects.iter().map(BBox::y2).fold(f64::NEG_INFINITY, f64::max);
    let axis = |lo: f64, hi: f64| -> (f64, f64) {
        let c = (lo + hi) / 2.0;
        let e = (hi - lo + 2.0 * margin).min(1.0);
        let third = if c < 0.5 { 1.0 / 3.0 } else { 2.0 / 3.0 };
        let mut center = c + 0.5 * (0.5 - third) * e;
        center = center.max(e / 2.0).min(1.0 - e / 2.0);
        (center, e)
    };
    let (cx, w) = axis(x1, x2);
    let (cy, h) = axis(y1, y2);
    BBox::new(cx, cy, w, h)
}

pub fn oracle_score(b: &BBox, ideal: &BBox, gamma: f64) -> f64 {
    1.0 + 4.0 * iou(b, ideal).max(0.0).powf(gamma)
}

fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn random_scene(rng: &mut ChaCha8Rng, concepts: &[String], p: &GeneratorParams) -> SceneSpec {
    loop {
        let k = rng.random_range(p.min_objects..=p.max_objects).min(concepts.len());
        let mut pool: Vec<&String> = concepts.iter().collect();
        pool.shuffle(rng);
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut attempts = 0;
        while objects.len() < k && attempts < 200 {
            attempts += 1;
            let w = rng.random_range(p.min_object_size..=p.max_object_size);
            let h = rng.random_range(p.min_object_size..=p.max_object_size);
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let b = BBox::new(cx, cy, w, h);
            // keep every object mostly visible
            let crowded = objects
                .iter()
                .any(|o| o.bbox.intersection_area(&b) > 0.3 * o.bbox.area().min(b.area()));
            if crowded {
                continue;
            }
            objects.push(SceneObject {
                concept: pool[objects.len()].clone(),
                bbox: b,
                color: random_color(rng, 0, 200),
            });
        }
        if objects.len() >= p.min_objects.min(k) {
            return SceneSpec {
                canvas: p.canvas,
                background: random_color(rng, 215, 255),
                objects,
            };
        }
    }
}

fn phrase(rng: &mut ChaCha8Rng, concepts: &[&str]) -> String {
    match concepts {
        [a] => {
            const ONE: [&str; 6] = ["{}", "a {}", "the {}", "a photo of the {}", "crop around the {}", "{}s"];
            ONE[rng.random_range(0..ONE.len())].replace("{}", a)
        }
        [a, b] => {
            const TWO: [&str; 4] = ["a {a} and a {b}", "the {a} near the {b}", "{a} with {b}", "a {a} beside the {b}"];
            TWO[rng.random_range(0..TWO.len())].replace("{a}", a).replace("{b}", b)
        }
        _ => concepts.join(" and "),
    }
}

fn pick_subject(rng: &mut ChaCha8Rng, n_objects: usize, exclude: Option<&[usize]>) -> Vec<usize> {
    loop {
        let size = if n_objects >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
        let mut idx: Vec<usize> = (0..n_objects).collect();
        idx.shuffle(rng);
        let mut chosen: Vec<usize> = idx[..size].to_vec();
        chosen.sort_unstable();
        if exclude != Some(chosen.as_slice()) {
            return chosen;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn annotate_text(
    split: &str,
    index: usize,
    text_index: usize,
    text: String,
    subjects: &[BBox],
    params: &GeneratorParams,
    schema: SchemaKind,
    seed: u64,
    proposals: &[BBox],
    annotators: usize,
) -> TextAnnotation {
    let ideal = ideal_crop(subjects, params.margin);
    let dense = schema.has_dense().then(|| {
        let mut props: Vec<ScoredBox> = proposals
            .iter()
            .map(|b| ScoredBox {
                bbox: *b,
                score: oracle_score(b, &ideal, params.gamma),
            })
            .collect();
        props.push(ScoredBox {
            bbox: ideal,
            score: 5.0,
        });
        props
    });
    let boxes = schema.has_annotators().then(|| {
        (0..annotators)
            .map(|a| {
                let mut tweak = 0u32;
                loop {
                    let mut rng = rng_from(
                        seed,
                        &[
                            b"annotator",
                            split.as_bytes(),
                            &(index as u64).to_le_bytes(),
                            &(text_index as u64).to_le_bytes(),
                            &(a as u64).to_le_bytes(),
                            &tweak.to_le_bytes(),
                        ],
                    );
                    let mut j = || rng.random_range(-params.jitter..=params.jitter);
                    let b = BBox::new(ideal.cx + j(), ideal.cy + j(), ideal.w + j(), ideal.h + j()).clamped();
                    if iou(&b, &ideal) >= 0.7 || tweak > 1000 {
                        return b;
                    }
                    tweak += 1;
                }
            })
            .collect()
    });
    TextAnnotation {
        text,
        ideal: Some(ideal),
        proposals: dense,
        annotator_boxes: boxes,
    }
}

/// Generates one split. Training splits carry one text per image; other splits
/// carry two texts about different object subsets.
pub fn generate_split(
    split: &str,
    size: usize,
    concepts: &[String],
    seed: u64,
    schema: SchemaKind,
    params: &GeneratorParams,
) -> Result<Dataset, DatasetError> {
    let vocab: BTreeSet<&String> = concepts.iter().collect();
    if vocab.len() < 5 {
        return Err(DatasetError::Generation(format!(
            "vocabulary needs at least 5 distinct concepts, got {}",
            vocab.len()
        )));
    }
    if size > MAX_SPLIT_SIZE {
        return Err(DatasetError::Generation(format!(
            "split '{split}' size {size} exceeds {MAX_SPLIT_SIZE}"
        )));
    }
    if params.min_objects < 1 || params.min_objects > params.max_objects {
        return Err(DatasetError::Generation("object count range is empty".into()));
    }
    if params.canvas[0] == 0 || params.canvas[1] == 0 {
        return Err(DatasetError::Generation("canvas must be at least 1x1".into()));
    }
    let concepts: Vec<String> = vocab.into_iter().cloned().collect();
    let aspect = params.canvas[0] as f64 / params.canvas[1] as f64;
    let proposals = grid_proposals(aspect, &params.proposals)?;
    let n_texts = if split == "train" { 1 } else { 2 };
    let annotators = if n_texts == 1 {
        params.annotators_single
    } else {
        params.annotators_multi
    };
    let mut samples = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = rng_from(seed, &[b"sample", split.as_bytes(), &(i as u64).to_le_bytes()]);
        let mut scene = random_scene(&mut rng, &concepts, params);
        if scene.objects.len() < 2 && n_texts == 2 {
            // two distinct subsets need two objects
            while scene.objects.len() < 2 {
                scene = random_scene(&mut rng, &concepts, params);
            }
        }
        let mut texts = Vec::with_capacity(n_texts);
        let mut previous: Option<Vec<usize>> = None;
        for t in 0..n_texts {
            let chosen = pick_subject(&mut rng, scene.objects.len(), previous.as_deref());
            let names: Vec<&str> = chosen.iter().map(|&k| scene.objects[k].concept.as_str()).collect();
            let text = phrase(&mut rng, &names);
            let subjects: Vec<BBox> = chosen.iter().map(|&k| scene.objects[k].bbox).collect();
            texts.push(annotate_text(
                split, i, t, text, &subjects, params, schema, seed, &proposals, annotators,
            ));
            previous = Some(chosen);
        }
        samples.push(Sample {
            id: format!("{split}-{i:05}"),
            scene,
            texts,
        });
    }
    let ds = Dataset {
        manifest: DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            split: split.to_string(),
            schema,
            vocabulary: concepts,
            samples: samples.iter().map(|s| format!("samples/{}.json", s.id)).collect(),
            generator: Some(GeneratorInfo {
                seed,
                params: params.clone(),
            }),
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querying::default_concepts;
    use proptest::prelude::*;

    #[test]
    fn default_grid_has_95_proposals() {
        let props = grid_proposals(1.0, &ProposalParams::default()).unwrap();
        assert_eq!(props.len(), 95);
        assert!(props.iter().all(|b| b.is_valid() && BBox::FULL.contains(b)));
        let near_full = BBox::new(0.5, 0.5, 0.95, 0.95);
        assert!(props.iter().any(|b| b.max_abs_diff(&near_full) < 1e-12));
        let wide = grid_proposals(16.0 / 9.0, &ProposalParams::default()).unwrap();
        assert!((70..=110).contains(&wide.len()), "{}", wide.len());
    }

    #[test]
    fn empty_proposal_params_error() {
        let p = ProposalParams {
            scales: vec![],
            ..ProposalParams::default()
        };
        assert!(grid_proposals(1.0, &p).is_err());
    }

    #[test]
    fn oracle_scores() {
        let ideal = BBox::new(0.4, 0.4, 0.3, 0.3);
        assert_eq!(oracle_score(&ideal, &ideal, 1.5), 5.0);
        assert_eq!(oracle_score(&BBox::new(0.9, 0.9, 0.1, 0.1), &ideal, 1.5), 1.0);
    }

    #[test]
    fn ideal_crop_rule() {
        // subject centered left of middle: grown by the margin, nudged right
        let b = BBox::from_corners(0.1, 0.3, 0.3, 0.5);
        let ideal = ideal_crop(&[b], 0.08);
        let e = 0.2 + 0.16;
        assert!((ideal.w - e).abs() < 1e-12);
        assert!((ideal.cx - (0.2 + 0.5 * (0.5 - 1.0 / 3.0) * e)).abs() < 1e-12);
        assert!(ideal.contains(&b));
        // pushed back inside at the border
        let edge = ideal_crop(&[BBox::from_corners(0.0, 0.0, 0.2, 0.2)], 0.08);
        assert!(edge.x1() >= 0.0 && edge.y1() >= 0.0);
        assert_eq!(ideal_crop(&[b], 0.08), ideal);
    }

    fn concepts() -> Vec<String> {
        default_concepts()
    }

    #[test]
    fn generated_splits_satisfy_invariants() {
        let p = GeneratorParams::default();
        let train = generate_split("train", 30, &concepts(), 7, SchemaKind::Both, &p).unwrap();
        let test = generate_split("test", 30, &concepts(), 7, SchemaKind::Both, &p).unwrap();
        for s in &train.samples {
            assert_eq!(s.texts.len(), 1);
            assert!((2..=5).contains(&s.scene.objects.len()));
            let t = &s.texts[0];
            assert!(t.proposals.as_ref().unwrap().iter().any(|p| p.score >= 4.0));
            assert_eq!(t.annotator_boxes.as_ref().unwrap().len(), 8);
        }
        for s in &test.samples {
            assert_eq!(s.texts.len(), 2);
            assert_ne!(s.texts[0].text, s.texts[1].text);
            for t in &s.texts {
                let ideal = t.ideal.unwrap();
                for b in t.annotator_boxes.as_ref().unwrap() {
                    assert!(iou(b, &ideal) >= 0.7);
                }
            }
        }
        assert_eq!(test.num_units(), 60);
        let again = generate_split("train", 30, &concepts(), 7, SchemaKind::Both, &p).unwrap();
        assert_eq!(again, train);
    }

    #[test]
    fn small_vocabulary_is_rejected() {
        let few: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(generate_split("train", 1, &few, 1, SchemaKind::Both, &GeneratorParams::default()).is_err());
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_split("val", 4, &concepts(), 3, SchemaKind::Annotators, &GeneratorParams::default()).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(image_path(dir.path(), &ds.samples[0].id).is_file());
    }

    #[test]
    fn validation_names_sample_and_field() {
        let mut ds = generate_split("train", 2, &concepts(), 3, SchemaKind::Dense, &GeneratorParams::default()).unwrap();
        ds.samples[1].texts[0].proposals.as_mut().unwrap()[3].score = 5.2;
        let msg = ds.validate().unwrap_err().to_string();
        assert!(msg.contains("train-00001") && msg.contains("proposals[3].score"), "{msg}");

        let mut ds = generate_split("train", 1, &concepts(), 3, SchemaKind::Dense, &GeneratorParams::default()).unwrap();
        ds.samples[0].texts.clear();
        assert!(ds.validate().unwrap_err().to_string().contains("texts"));

        let mut ds = generate_split("train", 1, &concepts(), 3, SchemaKind::Dense, &GeneratorParams::default()).unwrap();
        ds.samples[0].texts[0].proposals = None;
        assert!(ds.validate().is_err());
    }

    #[test]
    fn malformed_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DatasetError::Json { .. })));
    }

    proptest! {
        #[test]
        fn ideal_crop_is_pure_and_inside(x1 in 0.0..0.6f64, y1 in 0.0..0.6f64, w in 0.05..0.4f64, h in 0.05..0.4f64) {
            let b = BBox::from_corners(x1, y1, x1 + w, y1 + h);
            let a = ideal_crop(&[b], 0.08);
            prop_assert_eq!(a, ideal_crop(&[b], 0.08));
            prop_assert!(a.is_valid());
            prop_assert!(BBox::FULL.contains(&a));
        }
    }
}

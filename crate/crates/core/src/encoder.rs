//! Vision-language encoder interface and its deterministic synthetic stand-in.
//!
//! The synthetic encoder reads scene layout from sidecar metadata instead of
//! recognizing pixels. For each cell of a `G x G` token grid it emits a
//! unit-norm classification embedding, an initial (grounding) box, and an
//! image token that mixes the embedding with a positional code.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::boxgeom::{BBox, BoxFormat};
use crate::util::{cosine, normalize, rng_from, stable_hash64};

/// Largest |cos| allowed between two distinct vocabulary vectors.
pub const MAX_CONCEPT_COSINE: f64 = 0.3;

const MAX_TWEAKS: u32 = 100_000;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("synthetic encoder requires scene metadata")]
    MissingMetadata,
    #[error("query image contains no object tokens")]
    BackgroundOnlyQuery,
    #[error("text must not be empty")]
    EmptyText,
    #[error("concept '{0}' is not in the vocabulary")]
    UnknownConcept(String),
    #[error("canvas must be at least 1x1 pixels, got {0}x{1}")]
    ZeroCanvas(u32, u32),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scene metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Token grid side `G`; the encoder emits `G * G` tokens.
    pub grid: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Upper bound on the L2 norm of per-token embedding noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            grid: 12,
            dim: 64,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.grid == 0 {
            errs.push("encoder.grid must be >= 1".to_string());
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            errs.push(format!("encoder.dim must be a positive multiple of 4, got {}", self.dim));
        }
        if !(0.0..=0.05).contains(&self.noise) {
            errs.push(format!("encoder.noise must be in [0, 0.05], got {}", self.noise));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectRecord", into = "ObjectRecord")]
pub struct SceneObject {
    pub concept: String,
    pub bbox: BBox,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ObjectRecord {
    concept: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    color: [u8; 3],
    #[serde(default, skip_serializing)]
    format: BoxFormat,
}

impl TryFrom<ObjectRecord> for SceneObject {
    type Error = String;

    fn try_from(r: ObjectRecord) -> Result<Self, String> {
        let bbox = r.format.decode(r.bbox);
        if !bbox.is_valid() {
            return Err(format!("object '{}' has invalid box {:?}", r.concept, r.bbox));
        }
        if r.concept.is_empty() {
            return Err("object concept must not be empty".into());
        }
        Ok(SceneObject {
            concept: r.concept,
            bbox,
            color: r.color,
        })
    }
}

impl From<SceneObject> for ObjectRecord {
    fn from(o: SceneObject) -> Self {
        ObjectRecord {
            concept: o.concept,
            bbox: o.bbox.to_array(),
            color: o.color,
            format: BoxFormat::Cxcywh,
        }
    }
}

/// Layout of a synthetic scene: flat-colored rectangles over a background.
/// Later objects are drawn on top of earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: [u32; 2],
    pub background: [u8; 3],
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.canvas[0] == 0 || self.canvas[1] == 0 {
            return Err(EncoderError::ZeroCanvas(self.canvas[0], self.canvas[1]));
        }
        for o in &self.objects {
            if o.concept.is_empty() {
                return Err(EncoderError::InvalidScene("empty concept id".into()));
            }
            if !o.bbox.is_valid() {
                return Err(EncoderError::InvalidScene(format!(
                    "object '{}' has invalid box {:?}",
                    o.concept, o.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> SceneSpec {
        SceneSpec {
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    bbox: o.bbox.flip_horizontal(),
                    ..o.clone()
                })
                .collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let scene: SceneSpec = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Concept ids mapped to unit vectors, plus a reserved background vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    dim: usize,
    seed: u64,
    concepts: Vec<String>,
    vectors: Vec<Vec<f64>>,
    background: Vec<f64>,
}

fn random_unit(seed: u64, labels: &[&[u8]], dim: usize) -> Vec<f64> {
    let mut rng = rng_from(seed, labels);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

fn separated(v: &[f64], others: &[&[f64]]) -> bool {
    others.iter().all(|o| cosine(v, o).abs() <= MAX_CONCEPT_COSINE)
}

impl ConceptVocabulary {
    /// Builds vectors in sorted id order; each is drawn from `(seed, id)` and
    /// redrawn with a tweak counter until it is separated from those before it.
    pub fn new<S: AsRef<str>>(concepts: &[S], dim: usize, seed: u64) -> Result<Self, EncoderError> {
        let ids: BTreeSet<String> = concepts.iter().map(|c| c.as_ref().to_string()).collect();
        if ids.len() != concepts.len() {
            return Err(EncoderError::InvalidVocabulary("duplicate concept ids".into()));
        }
        for id in &ids {
            if id.is_empty() || id.chars().any(|c| !c.is_ascii_lowercase() && !c.is_ascii_digit()) {
                return Err(EncoderError::InvalidVocabulary(format!(
                    "concept '{id}' must be a single lowercase alphanumeric word"
                )));
            }
        }
        let background = random_unit(seed, &[b"background"], dim);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
        for id in &ids {
            let mut tweak = 0u32;
            let v = loop {
                let v = random_unit(seed, &[b"concept", id.as_bytes(), &tweak.to_le_bytes()], dim);
                let mut others: Vec<&[f64]> = vectors.iter().map(Vec::as_slice).collect();
                others.push(&background);
                if separated(&v, &others) {
                    break v;
                }
                tweak += 1;
                if tweak > MAX_TWEAKS {
                    return Err(EncoderError::InvalidVocabulary(format!(
                        "cannot separate {} concepts in {dim} dimensions",
                        ids.len()
                    )));
                }
            };
            vectors.push(v);
        }
        Ok(ConceptVocabulary {
            dim,
            seed,
            concepts: ids.into_iter().collect(),
            vectors,
            background,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Concept ids in sorted order.
    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.binary_search_by(|c| c.as_str().cmp(concept)).ok()
    }

    pub fn vector(&self, concept: &str) -> Option<&[f64]> {
        self.index_of(concept).map(|i| self.vectors[i].as_slice())
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Resolves a lowercase word to a concept, folding a trailing plural `s`.
    pub fn lookup_word(&self, word: &str) -> Option<usize> {
        self.index_of(word).or_else(|| word.strip_suffix('s').and_then(|w| self.index_of(w)))
    }

    /// Concepts mentioned in `text`, in vocabulary order.
    pub fn concepts_in(&self, text: &str) -> Vec<usize> {
        let found: BTreeSet<usize> = words(text).filter_map(|w| self.lookup_word(&w)).collect();
        found.into_iter().collect()
    }

    /// Text embedding: normalized mean of the mentioned concepts, or a
    /// hash-derived vector far from every concept when none is mentioned.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let found = self.concepts_in(text);
        match found.as_slice() {
            [] => Ok(self.unknown_text_vector(text)),
            [single] => Ok(self.vectors[*single].clone()),
            many => {
                let mut v = vec![0.0; self.dim];
                for &i in many {
                    v.iter_mut().zip(&self.vectors[i]).for_each(|(a, b)| *a += b);
                }
                normalize(&mut v);
                Ok(v)
            }
        }
    }

    fn unknown_text_vector(&self, text: &str) -> Vec<f64> {
        let lowered = text.to_lowercase();
        let mut others: Vec<&[f64]> = self.vectors.iter().map(Vec::as_slice).collect();
        others.push(&self.background);
        let mut tweak = 0u32;
        loop {
            let v = random_unit(self.seed, &[b"text", lowered.as_bytes(), &tweak.to_le_bytes()], self.dim);
            if others.iter().all(|o| cosine(&v, o).abs() < MAX_CONCEPT_COSINE) || tweak > MAX_TWEAKS {
                return v;
            }
            tweak += 1;
        }
    }
}

/// Lowercase alphanumeric words of `text`.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Per-image encoder output over a `G x G` token grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub grid_side: usize,
    /// `N x D` image tokens.
    pub image_tokens: Tensor,
    /// `N x D`, unit-norm rows.
    pub class_embeddings: Tensor,
    pub initial_boxes: Vec<BBox>,
    /// Whether any object covers the token's center.
    pub foreground: Vec<bool>,
}

impl EncoderOutput {
    pub fn num_tokens(&self) -> usize {
        self.initial_boxes.len()
    }

    /// Token whose cell contains the point `(x, y)`.
    pub fn token_at(&self, x: f64, y: f64) -> usize {
        let g = self.grid_side;
        let col = ((x * g as f64).floor().max(0.0) as usize).min(g - 1);
        let row = ((y * g as f64).floor().max(0.0) as usize).min(g - 1);
        row * g + col
    }
}

/// Cell extent of token `n` in a `grid x grid` layout.
pub fn token_cell(grid: usize, n: usize) -> BBox {
    let (r, c) = (n / grid, n % grid);
    let s = 1.0 / grid as f64;
    BBox::new((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, s, s)
}

/// 2D sinusoidal positional codes, `G^2 x D`, each row scaled to unit norm.
/// The first half of each row encodes the column center, the second half the
/// row center, as interleaved `sin, cos` pairs of decreasing frequency.
pub fn positional_codes(grid: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let pairs = half / 2;
    let scale = 1.0 / (pairs as f64).sqrt();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for n in 0..grid * grid {
        let cell = token_cell(grid, n);
        for coord in [cell.cx, cell.cy] {
            for k in 0..pairs {
                let freq = 10_000f64.powf(2.0 * k as f64 / half as f64);
                let angle = coord * 2.0 * std::f64::consts::PI / freq;
                data.push(angle.sin() * scale / std::f64::consts::SQRT_2);
                data.push(angle.cos() * scale / std::f64::consts::SQRT_2);
            }
        }
        data.resize((n + 1) * dim, 0.0);
    }
    Tensor::new(vec![grid * grid, dim], data).expect("consistent shape")
}

/// What the encoder accepts: a scene directly, or pixels with optional metadata.
#[derive(Debug, Clone)]
pub enum EncoderInput {
    Scene(SceneSpec),
    Pixels { image: RgbImage, meta: Option<SceneSpec> },
}

impl EncoderInput {
    fn scene(&self) -> Result<&SceneSpec, EncoderError> {
        match self {
            EncoderInput::Scene(s) => Ok(s),
            EncoderInput::Pixels { meta: Some(s), .. } => Ok(s),
            EncoderInput::Pixels { meta: None, .. } => Err(EncoderError::MissingMetadata),
        }
    }
}

/// Frozen, fully deterministic synthetic encoder.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    config: EncoderConfig,
    vocab: ConceptVocabulary,
    /// `D x 2D`, row-major.
    mixing: Vec<f64>,
    positions: Tensor,
}

impl SyntheticEncoder {
    pub fn new(config: EncoderConfig, vocab: ConceptVocabulary) -> Result<Self, EncoderError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(EncoderError::InvalidConfig(errs.join("; ")));
        }
        if vocab.dim() != config.dim {
            return Err(EncoderError::InvalidConfig(format!(
                "vocabulary dim {} differs from encoder dim {}",
                vocab.dim(),
                config.dim
            )));
        }
        let d = config.dim;
        let mut rng = rng_from(config.seed, &[b"mixing"]);
        let std = 1.0 / ((2 * d) as f64).sqrt();
        let mixing = (0..d * 2 * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        let positions = positional_codes(config.grid, d);
        Ok(SyntheticEncoder {
            config,
            vocab,
            mixing,
            positions,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &ConceptVocabulary {
        &self.vocab
    }

    /// `G^2 x D` positional codes added to image tokens for attention keys.
    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<EncoderOutput, EncoderError> {
        self.encode_scene(input.scene()?)
    }

    pub fn encode_scene(&self, scene: &SceneSpec) -> Result<EncoderOutput, EncoderError> {
        scene.validate()?;
        let g = self.config.grid;
        let d = self.config.dim;
        let concept_vectors: Vec<&[f64]> = scene
            .objects
            .iter()
            .map(|o| {
                self.vocab
                    .vector(&o.concept)
                    .ok_or_else(|| EncoderError::UnknownConcept(o.concept.clone()))
            })
            .collect::<Result<_, _>>()?;
        let scene_hash = stable_hash64(&serde_json::to_vec(scene).expect("scene serializes"));

        let n_tokens = g * g;
        let mut class = Vec::with_capacity(n_tokens * d);
        let mut tokens = Vec::with_capacity(n_tokens * d);
        let mut boxes = Vec::with_capacity(n_tokens);
        let mut foreground = Vec::with_capacity(n_tokens);
        let mut joint = vec![0.0; 2 * d];
        for n in 0..n_tokens {
            let cell = token_cell(g, n);
            let covering: Vec<usize> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.bbox.contains_point(cell.cx, cell.cy))
                .map(|(i, _)| i)
                .collect();
            let emb = if covering.is_empty() {
                boxes.push(cell);
                foreground.push(false);
                self.vocab.background().to_vec()
            } else {
                let mut e = vec![0.0; d];
                for &i in &covering {
                    e.iter_mut().zip(concept_vectors[i]).for_each(|(a, b)| *a += b);
                }
                normalize(&mut e);
                if self.config.noise > 0.0 {
                    let mut rng = rng_from(
                        self.config.seed,
                        &[b"noise", &scene_hash.to_le_bytes(), &(n as u64).to_le_bytes()],
                    );
                    let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    normalize(&mut dir);
                    let mag = self.config.noise * rng.random::<f64>();
                    e.iter_mut().zip(&dir).for_each(|(a, b)| *a += mag * b);
                    normalize(&mut e);
                }
                // ties resolve toward the object drawn last (topmost)
                let best = covering
                    .iter()
                    .copied()
                    .fold(None::<(usize, f64)>, |acc, i| {
                        let ov = scene.objects[i].bbox.intersection_area(&cell);
                        match acc {
                            Some((_, best)) if ov < best => acc,
                            _ => Some((i, ov)),
                        }
                    })
                    .map(|(i, _)| i)
                    .expect("covering is nonempty");
                boxes.push(scene.objects[best].bbox.clamped());
                foreground.push(true);
                e
            };
            joint[..d].copy_from_slice(&emb);
            joint[d..].copy_from_slice(self.positions.row(n));
            for r in 0..d {
                let row = &self.mixing[r * 2 * d..(r + 1) * 2 * d];
                tokens.push(row.iter().zip(&joint).map(|(a, b)| a * b).sum());
            }
            class.extend_from_slice(&emb);
        }
        Ok(EncoderOutput {
            grid_side: g,
            image_tokens: Tensor::new(vec![n_tokens, d], tokens).expect("consistent shape"),
            class_embeddings: Tensor::new(vec![n_tokens, d], class).expect("consistent shape"),
            initial_boxes: boxes,
            foreground,
        })
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        self.vocab.embed_text(text)
    }

    /// One-shot image query: normalized mean of the foreground class embeddings.
    pub fn embed_query_image(&self, query: &EncoderInput) -> Result<Vec<f64>, EncoderError> {
        let out = self.encode(query)?;
        let d = self.config.dim;
        let mut v = vec![0.0; d];
        let mut count = 0;
        for (n, fg) in out.foreground.iter().enumerate() {
            if *fg {
                v.iter_mut()
                    .zip(out.class_embeddings.row(n))
                    .for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
        if count == 0 {
            return Err(EncoderError::BackgroundOnlyQuery);
        }
        normalize(&mut v);
        Ok(v)
    }
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Pixel rectangle `(x0, y0, x1, y1)` (exclusive end) of a normalized box,
/// rounding corners half-up and keeping at least one pixel.
pub fn pixel_rect(b: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let (w, h) = (width as i64, height as i64);
    let [x1, y1, x2, y2] = b.corners();
    let mut px0 = round_half_up(x1 * w as f64).clamp(0, w);
    let mut py0 = round_half_up(y1 * h as f64).clamp(0, h);
    let mut px1 = round_half_up(x2 * w as f64).clamp(0, w);
    let mut py1 = round_half_up(y2 * h as f64).clamp(0, h);
    if px1 <= px0 {
        if px0 >= w {
            px0 = w - 1;
        }
        px1 = px0 + 1;
    }
    if py1 <= py0 {
        if py0 >= h {
            py0 = h - 1;
        }
        py1 = py0 + 1;
    }
    (px0 as u32, py0 as u32, px1 as u32, py1 as u32)
}

/// Rasterizes the scene: background fill, then each object in list order.
pub fn render_scene(scene: &SceneSpec) -> Result<RgbImage, EncoderError> {
    scene.validate()?;
    let [w, h] = scene.canvas;
    let mut img = RgbImage::from_pixel(w, h, Rgb(scene.background));
    for o in &scene.objects {
        let (x0, y0, x1, y1) = pixel_rect(&o.bbox, w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, Rgb(o.color));
            }
        }
    }
    Ok(img)
}

pub fn crop_pixels(img: &RgbImage, b: &BBox) -> RgbImage {
    let (x0, y0, x1, y1) = pixel_rect(b, img.width(), img.height());
    image::imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image()
}

/// Binary (P6) PPM bytes.
pub fn ppm_bytes(img: &RgbImage) -> Result<Vec<u8>, EncoderError> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| EncoderError::Image(e.to_string()))?;
    Ok(buf)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<(), EncoderError> {
    let bytes = ppm_bytes(img)?;
    std::fs::write(path, bytes).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, EncoderError> {
    let bytes = std::fs::read(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map(|i| i.to_rgb8())
        .map_err(|e| EncoderError::Image(format!("{}: {e}", path.display())))
}

pub fn read_scene(path: &Path) -> Result<SceneSpec, EncoderError> {
    let text = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    SceneSpec::from_json(&text)
}

//! Transformer crop decoder: learnable queries shifted by the mean selected
//! token attend to the full image-token set, then an offset head and a score
//! head turn each query state into a crop relative to the union box.
//!
//! Parameter count for `M` queries, `L` layers, width `D`, MLP width `H`:
//!
//! ```text
//! M*D + L*(8*D^2 + 8*D + 2*D*H + H + D + 6*D) + 2*D + 2*(D^2 + D) + 4*D + 4 + D + 1
//! ```
//!
//! Per layer: self- and cross-attention (`4*(D^2 + D)` each), MLP
//! (`2*D*H + H + D`), three affine layer norms (`6*D`). Then the final norm,
//! the three-layer offset head and the one-layer score head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Checkpoint, CheckpointMeta, Graph, ParamSet, Tensor, TensorError, Var};
use crate::boxgeom::{clamp_with_jacobian, union_box, BBox};
use crate::encoder::{EncoderOutput, SyntheticEncoder};
use crate::querying::{match_queries, QueryError, QuerySet, Selection};
use crate::util::rng_from;

const LN_EPS: f64 = 1e-5;

/// Union box used when no tokens are selected: any crop is reachable from it
/// with offsets bounded by one half.
pub const BASE_UNION: BBox = BBox::new(0.5, 0.5, 0.5, 0.5);

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("checkpoint decoder config {found} does not match expected {expected}")]
    ConfigMismatch { found: String, expected: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Offsets are `tanh(.) * offset_scale`.
    pub offset_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_queries: 16,
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            mlp_hidden: 128,
            offset_scale: 0.5,
        }
    }
}

impl DecoderConfig {
    pub fn full_scale() -> Self {
        DecoderConfig {
            num_queries: 90,
            num_layers: 6,
            model_dim: 512,
            num_heads: 8,
            mlp_hidden: 2048,
            offset_scale: 0.5,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_queries == 0 {
            errs.push("decoder.num_queries must be >= 1".to_string());
        }
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            errs.push(format!(
                "decoder.model_dim ({}) must be a positive multiple of decoder.num_heads ({})",
                self.model_dim, self.num_heads
            ));
        }
        if self.mlp_hidden == 0 {
            errs.push("decoder.mlp_hidden must be >= 1".to_string());
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            errs.push(format!("decoder.offset_scale must be positive, got {}", self.offset_scale));
        }
        errs
    }

    /// Closed-form parameter count; see the module docs.
    pub fn param_count(&self) -> usize {
        let (m, l, d, h) = (self.num_queries, self.num_layers, self.model_dim, self.mlp_hidden);
        m * d + l * (8 * d * d + 8 * d + 2 * d * h + h + d + 6 * d) + 2 * d + 2 * (d * d + d) + 4 * d + 4 + d + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` the first dimension.
    Uniform,
    Queries,
    Zeros,
    Ones,
}

fn param_specs(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, h) = (cfg.model_dim, cfg.mlp_hidden);
    let mut specs = vec![("query_tokens".to_string(), vec![cfg.num_queries, d], Init::Queries)];
    let linear = |specs: &mut Vec<_>, name: String, fan_in: usize, fan_out: usize, init: Init| {
        specs.push((format!("{name}.weight"), vec![fan_in, fan_out], init));
        specs.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
    };
    for l in 0..cfg.num_layers {
        for attn in ["self_attn", "cross_attn"] {
            for proj in ["q", "k", "v", "out"] {
                linear(&mut specs, format!("layers.{l}.{attn}.{proj}"), d, d, Init::Uniform);
            }
        }
        linear(&mut specs, format!("layers.{l}.mlp.fc1"), d, h, Init::Uniform);
        linear(&mut specs, format!("layers.{l}.mlp.fc2"), h, d, Init::Uniform);
        for norm in ["norm1", "norm2", "norm3"] {
            specs.push((format!("layers.{l}.{norm}.gamma"), vec![d], Init::Ones));
            specs.push((format!("layers.{l}.{norm}.beta"), vec![d], Init::Zeros));
        }
    }
    specs.push(("final_norm.gamma".to_string(), vec![d], Init::Ones));
    specs.push(("final_norm.beta".to_string(), vec![d], Init::Zeros));
    linear(&mut specs, "offset_head.fc1".to_string(), d, d, Init::Uniform);
    linear(&mut specs, "offset_head.fc2".to_string(), d, d, Init::Uniform);
    linear(&mut specs, "offset_head.fc3".to_string(), d, 4, Init::Zeros);
    linear(&mut specs, "score_head".to_string(), d, 1, Init::Zeros);
    specs
}

/// Per-query decoder predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub offsets: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub union_box: BBox,
    pub pred_boxes: Vec<BBox>,
}

/// Graph handles of a forward pass, for building losses.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `M x 4` offsets.
    pub offsets: Var,
    /// `M x 1` scores in (0, 1).
    pub scores: Var,
    /// `M x 4` clamped boxes, cxcywh.
    pub pred_boxes: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCrop {
    pub bbox: BBox,
    pub score: f64,
    pub query_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    config: DecoderConfig,
    params: ParamSet,
}

struct Bound<'a> {
    g: &'a mut Graph,
    vars: BTreeMap<String, Var>,
}

impl Bound<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn linear(&mut self, x: Var, name: &str) -> Result<Var, TensorError> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var, TensorError> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let y = self.g.layernorm(x, LN_EPS)?;
        let y = self.g.mul(y, gamma)?;
        self.g.add(y, beta)
    }

    fn attention(&mut self, q_in: Var, k_in: Var, v_in: Var, name: &str, heads: usize) -> Result<Var, TensorError> {
        let q = self.linear(q_in, &format!("{name}.q"))?;
        let k = self.linear(k_in, &format!("{name}.k"))?;
        let v = self.linear(v_in, &format!("{name}.v"))?;
        let d = self.g.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let qh = self.g.index_select(q, 1, &cols)?;
            let kh = self.g.index_select(k, 1, &cols)?;
            let vh = self.g.index_select(v, 1, &cols)?;
            let kt = self.g.transpose(kh)?;
            let logits = self.g.matmul(qh, kt)?;
            let logits = self.g.scale(logits, scale)?;
            let weights = self.g.softmax(logits, 1)?;
            outs.push(self.g.matmul(weights, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.g.concat(&outs, 1)? };
        self.linear(joined, &format!("{name}.out"))
    }
}

impl DecoderModel {
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self, DecoderError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(DecoderError::Config(errs));
        }
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let mut rng = rng_from(seed, &[b"decoder", name.as_bytes()]);
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Uniform => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Queries => {
                    let normal = Normal::new(0.0, 0.02).expect("valid std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(DecoderModel { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: DecoderConfig, params: ParamSet) -> Result<Self, DecoderError> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(DecoderError::Config(errs));
        }
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(DecoderError::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| DecoderError::Shape(format!("missing parameter '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(DecoderError::Shape(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(DecoderError::Shape(format!("parameter '{name}' is not finite")));
            }
        }
        Ok(DecoderModel { config, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Expected parameter shapes, without allocating them.
    pub fn param_shapes(config: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
        param_specs(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// `Q = t_qry + mean(selected tokens)`; with no selection, `Q = t_qry`.
    pub fn build_query(&self, selection: Option<&Selection>) -> Tensor {
        let base = self.params.get("query_tokens").expect("query tokens exist").clone();
        let mut q = Tensor::new(base.shape().to_vec(), base.data().to_vec()).expect("same shape");
        if let Some(mean) = selection.and_then(selected_mean) {
            let d = mean.len();
            for (i, v) in q.data_mut().iter_mut().enumerate() {
                *v += mean[i % d];
            }
        }
        q
    }

    /// Records the decoder on `g`. `query_shift` is the mean selected token
    /// (`None` in base mode). Keys are `tokens + positions`, values `tokens`.
    pub fn forward(
        &self,
        g: &mut Graph,
        query_shift: Option<&[f64]>,
        tokens: &Tensor,
        positions: &Tensor,
        union: &BBox,
    ) -> Result<ForwardVars, DecoderError> {
        let d = self.config.model_dim;
        if tokens.shape().len() != 2 || tokens.cols() != d || tokens.shape() != positions.shape() {
            return Err(DecoderError::Shape(format!(
                "image tokens {:?} and positions {:?} must both be N x {d}",
                tokens.shape(),
                positions.shape()
            )));
        }
        if let Some(s) = query_shift {
            if s.len() != d {
                return Err(DecoderError::Shape(format!("query shift has length {}, expected {d}", s.len())));
            }
        }
        let vars = self.params.iter().map(|(name, _)| Ok((name.clone(), g.param(&self.params, name)?))).collect::<Result<_, TensorError>>()?;
        let mut b = Bound { g, vars };
        let heads = self.config.num_heads;

        let mut x = b.p("query_tokens");
        if let Some(s) = query_shift {
            let shift = b.g.constant(Tensor::vector(s.to_vec()));
            x = b.g.add(x, shift)?;
        }
        let values = b.g.constant(tokens.clone());
        let pos = b.g.constant(positions.clone());
        let keys = b.g.add(values, pos)?;

        for l in 0..self.config.num_layers {
            let h = b.norm(x, &format!("layers.{l}.norm1"))?;
            let a = b.attention(h, h, h, &format!("layers.{l}.self_attn"), heads)?;
            x = b.g.add(x, a)?;
            let h = b.norm(x, &format!("layers.{l}.norm2"))?;
            let a = b.attention(h, keys, values, &format!("layers.{l}.cross_attn"), heads)?;
            x = b.g.add(x, a)?;
            let h = b.norm(x, &format!("layers.{l}.norm3"))?;
            let h = b.linear(h, &format!("layers.{l}.mlp.fc1"))?;
            let h = b.g.gelu(h)?;
            let h = b.linear(h, &format!("layers.{l}.mlp.fc2"))?;
            x = b.g.add(x, h)?;
        }
        let x = b.norm(x, "final_norm")?;

        let h = b.linear(x, "offset_head.fc1")?;
        let h = b.g.gelu(h)?;
        let h = b.linear(h, "offset_head.fc2")?;
        let h = b.g.gelu(h)?;
        let h = b.linear(h, "offset_head.fc3")?;
        let h = b.g.tanh(h)?;
        let offsets = b.g.scale(h, self.config.offset_scale)?;

        let s = b.linear(x, "score_head")?;
        let scores = b.g.sigmoid(s)?;

        let base = b.g.constant(Tensor::vector(union.to_array().to_vec()));
        let raw = b.g.add(offsets, base)?;
        let pred_boxes = b.g.map_rows(raw, 4, |_, input, out, jac| {
            let (v, j) = clamp_with_jacobian([input[0], input[1], input[2], input[3]]);
            out.copy_from_slice(&v);
            for r in 0..4 {
                jac[r * 4..(r + 1) * 4].copy_from_slice(&j[r]);
            }
        })?;
        Ok(ForwardVars {
            offsets,
            scores,
            pred_boxes,
        })
    }

    /// Inference-only decode of one image.
    pub fn decode(
        &self,
        query_shift: Option<&[f64]>,
        tokens: &Tensor,
        positions: &Tensor,
        union: &BBox,
    ) -> Result<DecoderOutput, DecoderError> {
        let mut g = Graph::inference();
        let fv = self.forward(&mut g, query_shift, tokens, positions, union)?;
        Ok(read_output(&g, fv, *union))
    }

    /// Matches queries against the encoder output (or takes base mode when the
    /// set is empty) and decodes.
    pub fn run(
        &self,
        encoder: &SyntheticEncoder,
        enc: &EncoderOutput,
        queries: &QuerySet,
    ) -> Result<DecoderOutput, DecoderError> {
        let (shift, union) = if queries.is_empty() {
            (None, BASE_UNION)
        } else {
            let sel = match_queries(queries, enc)?;
            let union = union_box(&sel.boxes).expect("selection is nonempty");
            (selected_mean(&sel), union)
        };
        self.decode(shift.as_deref(), &enc.image_tokens, encoder.positions(), &union)
    }

    /// Predicted boxes by descending score, ties by query index, cut to `top_k`.
    pub fn predict(
        &self,
        encoder: &SyntheticEncoder,
        enc: &EncoderOutput,
        queries: &QuerySet,
        top_k: usize,
    ) -> Result<Vec<RankedCrop>, DecoderError> {
        let out = self.run(encoder, enc, queries)?;
        Ok(rank(&out, top_k))
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta, optimizer: Option<&crate::autograd::AdamWState>) -> Checkpoint {
        Checkpoint::new(&self.params, meta, optimizer)
    }

    /// Rebuilds a model from a checkpoint whose metadata config carries a
    /// `decoder` section; `expected`, when given, must match it.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&DecoderConfig>) -> Result<Self, DecoderError> {
        let section = ckpt
            .metadata
            .config
            .get("decoder")
            .ok_or_else(|| DecoderError::Shape("checkpoint metadata has no decoder config".into()))?;
        let found: DecoderConfig = serde_json::from_value(section.clone())
            .map_err(|e| DecoderError::Shape(format!("checkpoint decoder config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &found {
                return Err(DecoderError::ConfigMismatch {
                    found: serde_json::to_string(&found).expect("serializes"),
                    expected: serde_json::to_string(exp).expect("serializes"),
                });
            }
        }
        Self::from_params(found, ckpt.params()?)
    }
}

/// Mean of the selected image tokens, or `None` for an empty selection.
pub fn selected_mean(sel: &Selection) -> Option<Vec<f64>> {
    if sel.is_empty() {
        return None;
    }
    let d = sel.tokens.cols();
    let mut mean = vec![0.0; d];
    for r in 0..sel.len() {
        mean.iter_mut().zip(sel.tokens.row(r)).for_each(|(a, b)| *a += b);
    }
    let n = sel.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Some(mean)
}

pub fn read_output(g: &Graph, fv: ForwardVars, union: BBox) -> DecoderOutput {
    let offsets = g.value(fv.offsets).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let pred_boxes = g
        .value(fv.pred_boxes)
        .chunks(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect();
    DecoderOutput {
        offsets,
        scores: g.value(fv.scores).to_vec(),
        union_box: union,
        pred_boxes,
    }
}

pub fn rank(out: &DecoderOutput, top_k: usize) -> Vec<RankedCrop> {
    let mut order: Vec<usize> = (0..out.scores.len()).collect();
    order.sort_by(|&a, &b| out.scores[b].total_cmp(&out.scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(top_k)
        .map(|i| RankedCrop {
            bbox: out.pred_boxes[i],
            score: out.scores[i],
            query_index: i,
        })
        .collect()
}

//! Anchor-box query decoder.
//!
//! Each query carries a content vector (a label embedding plus a one-bit
//! denoising indicator) and a 4D anchor kept in logit space. Every layer
//! runs masked self-attention, cross-attention to the scene features with
//! sinusoidal anchor positions, and a feed-forward block, then shifts the
//! anchor logits by a predicted delta. Class logits and boxes are emitted
//! after every layer for auxiliary supervision.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::denoising::{AttentionMask, QueryBatch};
use crate::error::{invalid, Result};
use crate::geometry::BBox;

const LN_EPS: f64 = 1e-5;
const LOGIT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    /// Hidden width; a multiple of 8.
    pub d_model: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Number of learnable matching queries.
    pub queries: usize,
    /// Side of the square feature grid.
    pub grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            d_model: 64,
            ffn_dim: 128,
            layers: 3,
            queries: 16,
            grid: 8,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_classes: 3,
            d_model: 8,
            ffn_dim: 16,
            layers: 2,
            queries: 4,
            grid: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(8) {
            return Err(invalid(format!("d_model {} must be a positive multiple of 8", self.d_model)));
        }
        if self.n_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.layers == 0 || self.queries == 0 || self.grid == 0 || self.ffn_dim == 0 {
            return Err(invalid(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    /// Frequencies of the sinusoidal anchor encoding, `d_model / 8` of them.
    pub fn anchor_freqs(&self) -> Vec<f64> {
        sine_freqs(self.d_model / 8)
    }
}

/// Geometric ladder of angular frequencies from `pi` to `16 pi`.
pub fn sine_freqs(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![PI];
    }
    (0..n)
        .map(|k| PI * 2f64.powf(4.0 * k as f64 / (n - 1) as f64))
        .collect()
}

/// Encoded scene: per-cell features and their fixed positional encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: usize,
    /// `grid^2 x d`, row-major over cells (row `v * grid + u`).
    pub features: Tensor,
    /// `grid^2 x d` sinusoidal encoding of each cell center.
    pub pos: Tensor,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn cells(&self) -> usize {
        self.features.nrows()
    }
}

/// 2D sinusoidal encoding of cell centers: first half x, second half y.
pub fn grid_positions(grid: usize, dim: usize) -> Tensor {
    let freqs = sine_freqs((dim / 4).max(1));
    let nf = freqs.len();
    Tensor::from_shape_fn((grid * grid, dim), |(cell, j)| {
        let (v, u) = (cell / grid, cell % grid);
        let coord = if j < dim / 2 { u } else { v };
        let x = (coord as f64 + 0.5) / grid as f64;
        let j = j % (dim / 2);
        let k = (j / 2) % nf;
        if j.is_multiple_of(2) {
            (freqs[k] * x).sin()
        } else {
            (freqs[k] * x).cos()
        }
    })
}

// Global parameter slots, followed by `PER_LAYER` slots for every layer.
const LABEL_EMBED: usize = 0;
const ANCHORS: usize = 1;
const POS1_W: usize = 2;
const POS1_B: usize = 3;
const POS2_W: usize = 4;
const POS2_B: usize = 5;
const CLS_W: usize = 6;
const CLS_B: usize = 7;
const BOX1_W: usize = 8;
const BOX1_B: usize = 9;
const BOX2_W: usize = 10;
const BOX2_B: usize = 11;
const GLOBAL: usize = 12;

const SA_Q: usize = 0;
const SA_K: usize = 1;
const SA_V: usize = 2;
const SA_O: usize = 3;
const SA_OB: usize = 4;
const LN1_G: usize = 5;
const LN1_B: usize = 6;
const CA_Q: usize = 7;
const CA_K: usize = 8;
const CA_V: usize = 9;
const CA_O: usize = 10;
const CA_OB: usize = 11;
const LN2_G: usize = 12;
const LN2_B: usize = 13;
const FF1_W: usize = 14;
const FF1_B: usize = 15;
const FF2_W: usize = 16;
const FF2_B: usize = 17;
const LN3_G: usize = 18;
const LN3_B: usize = 19;
const PER_LAYER: usize = 20;

const LAYER_NAMES: [&str; PER_LAYER] = [
    "self_attn.q", "self_attn.k", "self_attn.v", "self_attn.out", "self_attn.out_bias",
    "norm1.gain", "norm1.bias", "cross_attn.q", "cross_attn.k", "cross_attn.v",
    "cross_attn.out", "cross_attn.out_bias", "norm2.gain", "norm2.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2", "norm3.gain", "norm3.bias",
];

/// All trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let c = config.n_classes;
        let pos_in = 8 * config.anchor_freqs().len();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: Tensor| {
            names.push(name);
            tensors.push(t);
        };

        push(
            "label_embed".into(),
            Tensor::from_shape_fn((c + 1, d - 1), |_| rng.gen_range(-1.0..1.0)),
        );
        push(
            "anchors".into(),
            Tensor::from_shape_fn((config.queries, 4), |(_, j)| {
                if j < 2 {
                    logit(rng.gen_range(0.05..0.95))
                } else {
                    rng.gen_range(-2.0..0.0)
                }
            }),
        );
        push("pos_mlp.w1".into(), xavier(rng, pos_in, d));
        push("pos_mlp.b1".into(), Tensor::zeros((1, d)));
        push("pos_mlp.w2".into(), xavier(rng, d, d));
        push("pos_mlp.b2".into(), Tensor::zeros((1, d)));
        push("class_head.w".into(), xavier(rng, d, c));
        // focal-loss prior: initial foreground probability 0.01
        push("class_head.b".into(), Tensor::from_elem((1, c), -(99f64).ln()));
        push("box_head.w1".into(), xavier(rng, d, d));
        push("box_head.b1".into(), Tensor::zeros((1, d)));
        push("box_head.w2".into(), Tensor::zeros((d, 4)));
        push("box_head.b2".into(), Tensor::zeros((1, 4)));

        for l in 0..config.layers {
            for (k, name) in LAYER_NAMES.iter().enumerate() {
                let t = match k {
                    SA_Q | SA_K | SA_V | SA_O | CA_Q | CA_K | CA_V | CA_O => xavier(rng, d, d),
                    FF1_W => xavier(rng, d, config.ffn_dim),
                    FF1_B => Tensor::zeros((1, config.ffn_dim)),
                    FF2_W => xavier(rng, config.ffn_dim, d),
                    LN1_G | LN2_G | LN3_G => Tensor::ones((1, d)),
                    _ => Tensor::zeros((1, d)),
                };
                push(format!("layer{l}.{name}"), t);
            }
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// Rebuild from named tensors, checking names and shapes against `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let reference = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        if named.len() != reference.tensors.len() {
            return Err(invalid(format!(
                "expected {} parameter arrays, got {}",
                reference.tensors.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (rname, rt)) in named.into_iter().zip(reference.iter()) {
            if name != rname || t.dim() != rt.dim() {
                return Err(invalid(format!(
                    "parameter {name} {:?} does not match {rname} {:?}",
                    t.dim(),
                    rt.dim()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Current matching anchors as boxes.
    pub fn anchor_boxes(&self) -> Vec<BBox> {
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        self.tensors[ANCHORS]
            .rows()
            .into_iter()
            .map(|r| BBox::new(s(r[0]), s(r[1]), s(r[2]), s(r[3])))
            .collect()
    }

    /// Place every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles of the parameters, same order as [`ModelParams`].
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn global(&self, k: usize) -> Var {
        self.vars[k]
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[GLOBAL + l * PER_LAYER + k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-layer outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    /// `W x C` class logits.
    pub logits: Var,
    /// `W x 4` boxes in center form.
    pub boxes: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    /// Number of leading denoising slots.
    pub dn_len: usize,
    pub width: usize,
}

impl DecoderOutput {
    pub fn last(&self) -> LayerOutput {
        *self.layers.last().expect("decoder has at least one layer")
    }

    /// Plain values of every layer.
    pub fn values(&self, g: &Graph) -> Vec<LayerValues> {
        self.layers
            .iter()
            .map(|l| LayerValues {
                logits: g.value(l.logits).clone(),
                boxes: g.value(l.boxes).clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerValues {
    pub logits: Tensor,
    pub boxes: Tensor,
}

impl LayerValues {
    pub fn boxes(&self) -> Vec<BBox> {
        self.boxes
            .rows()
            .into_iter()
            .map(|r| BBox::new(r[0], r[1], r[2], r[3]))
            .collect()
    }

    /// Row-major sigmoid class probabilities.
    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
    }
}

/// Scaled dot-product attention; blocked positions get exactly zero weight.
pub fn masked_attention(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (nq, dq) = g.shape(queries);
    let (nk, dk) = g.shape(keys);
    let (nv, _) = g.shape(values);
    if dq != dk {
        return Err(invalid(format!("query width {dq} != key width {dk}")));
    }
    if nk != nv {
        return Err(invalid(format!("{nk} keys but {nv} values")));
    }
    let blocked = match mask {
        Some(m) if m.size() != nq || m.size() != nk => {
            return Err(invalid(format!(
                "mask of size {} for {nq} queries and {nk} keys",
                m.size()
            )))
        }
        Some(m) => Some(Rc::new((0..nq).flat_map(|i| m.row(i).to_vec()).collect())),
        None => None,
    };
    let scores = g.matmul_t(queries, keys);
    let scores = g.scale(scores, 1.0 / (dq as f64).sqrt());
    let weights = g.softmax(scores, blocked);
    Ok(g.matmul(weights, values))
}

fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Var {
    let n = g.normalize_rows(x, LN_EPS);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Constant graph inputs derived from a scene.
pub struct SceneInputs {
    /// Features plus positions, used for keys.
    pub keys: Var,
    pub values: Var,
}

impl SceneInputs {
    pub fn new(g: &mut Graph, f: &FeatureMap) -> Self {
        let keys = g.constant(&f.features + &f.pos);
        let values = g.constant(f.features.clone());
        Self { keys, values }
    }
}

/// Positional queries from the current anchors: sine features through a 2-layer MLP.
fn anchor_positions(g: &mut Graph, p: &BoundParams, anchors: Var, freqs: &Rc<Vec<f64>>) -> Var {
    let s = g.sine(anchors, freqs.clone());
    let h = linear(g, s, p.global(POS1_W), p.global(POS1_B));
    let h = g.relu(h);
    linear(g, h, p.global(POS2_W), p.global(POS2_B))
}

/// Box-delta head shared by all layers.
fn box_delta(g: &mut Graph, p: &BoundParams, x: Var) -> Var {
    let h = linear(g, x, p.global(BOX1_W), p.global(BOX1_B));
    let h = g.relu(h);
    linear(g, h, p.global(BOX2_W), p.global(BOX2_B))
}

/// One refinement step.
///
/// Takes query contents and anchor logits; returns updated contents and the
/// anchor logits shifted by the predicted delta. Boxes are the sigmoid of
/// the logits, so they stay inside the unit square whatever the delta.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    g: &mut Graph,
    p: &BoundParams,
    layer: usize,
    contents: Var,
    anchor_logits: Var,
    scene: &SceneInputs,
    mask: Option<&AttentionMask>,
    freqs: &Rc<Vec<f64>>,
) -> Result<(Var, Var)> {
    let anchors = g.sigmoid(anchor_logits);
    let pos = anchor_positions(g, p, anchors, freqs);

    // self-attention among queries
    let qk_in = g.add(contents, pos);
    let q = g.matmul(qk_in, p.layer(layer, SA_Q));
    let k = g.matmul(qk_in, p.layer(layer, SA_K));
    let v = g.matmul(contents, p.layer(layer, SA_V));
    let att = masked_attention(g, q, k, v, mask)?;
    let att = linear(g, att, p.layer(layer, SA_O), p.layer(layer, SA_OB));
    let x = g.add(contents, att);
    let x = layer_norm(g, x, p.layer(layer, LN1_G), p.layer(layer, LN1_B));

    // cross-attention to the scene
    let q_in = g.add(x, pos);
    let q = g.matmul(q_in, p.layer(layer, CA_Q));
    let k = g.matmul(scene.keys, p.layer(layer, CA_K));
    let v = g.matmul(scene.values, p.layer(layer, CA_V));
    let att = masked_attention(g, q, k, v, None)?;
    let att = linear(g, att, p.layer(layer, CA_O), p.layer(layer, CA_OB));
    let x2 = g.add(x, att);
    let x = layer_norm(g, x2, p.layer(layer, LN2_G), p.layer(layer, LN2_B));

    // feed-forward
    let h = linear(g, x, p.layer(layer, FF1_W), p.layer(layer, FF1_B));
    let h = g.relu(h);
    let h = linear(g, h, p.layer(layer, FF2_W), p.layer(layer, FF2_B));
    let x3 = g.add(x, h);
    let x = layer_norm(g, x3, p.layer(layer, LN3_G), p.layer(layer, LN3_B));

    let delta = box_delta(g, p, x);
    let updated = g.add(anchor_logits, delta);
    Ok((x, updated))
}

/// Decoder forward on a bound parameter set.
///
/// In [`Mode::Train`] the batch may carry a denoising part and `mask`, when
/// present, must be `W x W`. In [`Mode::Infer`] the batch must consist of the
/// matching part only.
pub fn decode(
    g: &mut Graph,
    p: &BoundParams,
    config: &ModelConfig,
    features: &FeatureMap,
    batch: &QueryBatch,
    mask: Option<&AttentionMask>,
    mode: Mode,
) -> Result<DecoderOutput> {
    let width = batch.len();
    let dn_len = batch.dn_len();
    if features.dim() != config.d_model || features.cells() != config.grid * config.grid {
        return Err(invalid(format!(
            "feature map {}x{} does not fit grid {} / d_model {}",
            features.cells(),
            features.dim(),
            config.grid,
            config.d_model
        )));
    }
    if batch.matching != config.queries {
        return Err(invalid(format!(
            "batch has {} matching queries, model has {}",
            batch.matching, config.queries
        )));
    }
    match mode {
        Mode::Infer if dn_len > 0 => {
            return Err(invalid("inference batches must not contain denoising queries"))
        }
        Mode::Train => {
            if let Some(m) = mask {
                if m.size() != width {
                    return Err(invalid(format!(
                        "attention mask of size {} for {width} queries",
                        m.size()
                    )));
                }
            }
        }
        _ => {}
    }
    if let Some(&l) = batch.label_rows(config.n_classes).iter().find(|&&l| l > config.n_classes) {
        return Err(invalid(format!("query label {l} out of range")));
    }

    let embed = g.gather_rows(
        p.global(LABEL_EMBED),
        batch.label_rows(config.n_classes),
    );
    let indicator = g.constant(Tensor::from_shape_vec(
        (width, 1),
        batch.indicators().into_iter().map(f64::from).collect(),
    )
    .expect("indicator shape"));
    let mut contents = g.concat_cols(&[embed, indicator]);

    let mut anchor_logits = if dn_len > 0 {
        let dn = g.constant(Tensor::from_shape_fn((dn_len, 4), |(i, j)| {
            logit(batch.dn_boxes[i].as_array()[j])
        }));
        g.concat_rows(&[dn, p.global(ANCHORS)])
    } else {
        p.global(ANCHORS)
    };

    let scene = SceneInputs::new(g, features);
    let freqs = Rc::new(config.anchor_freqs());
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (x, updated) = decoder_layer(g, p, l, contents, anchor_logits, &scene, mask, &freqs)?;
        let logits = linear(g, x, p.global(CLS_W), p.global(CLS_B));
        let boxes = g.sigmoid(updated);
        layers.push(LayerOutput { logits, boxes });
        contents = x;
        anchor_logits = updated;
    }
    Ok(DecoderOutput {
        layers,
        dn_len,
        width,
    })
}

/// Stand-alone forward returning plain per-layer values.
pub fn model_forward(
    params: &ModelParams,
    features: &FeatureMap,
    batch: &QueryBatch,
    mask: Option<&AttentionMask>,
    mode: Mode,
) -> Result<Vec<LayerValues>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = decode(&mut g, &bound, &params.config, features, batch, mask, mode)?;
    Ok(out.values(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_scene, DatasetConfig};
    use crate::denoising::{assemble_decoder_input, build_attention_mask, make_denoising_groups};
    use crate::geometry::NoiseConfig;

    fn setup(config: ModelConfig) -> (ModelParams, crate::datagen::Scene) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(config, &mut rng).unwrap();
        let ds = DatasetConfig {
            n_classes: config.n_classes,
            grid: config.grid,
            feature_dim: config.d_model,
            ..DatasetConfig::default()
        };
        (params, generate_scene(&ds, 0).unwrap())
    }

    #[test]
    fn attention_with_self_only_mask_returns_own_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_shape_fn((3, 2), |(i, j)| (i + j) as f64));
        let v = g.constant(Tensor::from_shape_fn((3, 2), |(i, j)| (10 * i + j) as f64));
        let mut mask = build_attention_mask(3, 1, 0);
        assert_eq!(mask.size(), 3);
        let out = masked_attention(&mut g, q, q, v, Some(&mask)).unwrap();
        assert_eq!(g.value(out), g.value(v));
        mask = AttentionMask::unblocked(2);
        assert!(masked_attention(&mut g, q, q, v, Some(&mask)).is_err());
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros((2, 4)));
        let k = g.constant(Tensor::from_elem((5, 4), 0.3));
        let v = g.constant(Tensor::from_shape_fn((5, 1), |(i, _)| i as f64));
        let out = masked_attention(&mut g, q, k, v, None).unwrap();
        for &x in g.value(out).iter() {
            assert!((x - 2.0).abs() < 1e-12);
        }
        let bad = g.constant(Tensor::zeros((4, 1)));
        assert!(masked_attention(&mut g, q, k, bad, None).is_err());
    }

    #[test]
    fn output_shapes_in_both_modes() {
        let config = ModelConfig::default();
        let (params, scene) = setup(config);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups =
            make_denoising_groups(&scene.objects, 5, &NoiseConfig::default(), 8, &mut rng).unwrap();
        let batch = assemble_decoder_input(&groups, config.queries);
        let mask = batch.mask();
        let w = 5 * scene.objects.len() + config.queries;
        let out = model_forward(&params, &scene.features, &batch, Some(&mask), Mode::Train).unwrap();
        assert_eq!(out.len(), config.layers);
        for l in &out {
            assert_eq!(l.logits.dim(), (w, 8));
            assert_eq!(l.boxes.dim(), (w, 4));
            assert!(l.boxes.iter().all(|&b| b > 0.0 && b < 1.0));
        }
        assert!(model_forward(&params, &scene.features, &batch, Some(&mask), Mode::Infer).is_err());
        let bad = AttentionMask::unblocked(w - 1);
        assert!(model_forward(&params, &scene.features, &batch, Some(&bad), Mode::Train).is_err());

        let infer = assemble_decoder_input(&[], config.queries);
        let out = model_forward(&params, &scene.features, &infer, None, Mode::Infer).unwrap();
        assert_eq!(out[0].logits.dim(), (16, 8));
        assert_eq!(out[0].boxes.dim(), (16, 4));
    }

    #[test]
    fn forward_is_deterministic() {
        let (params, scene) = setup(ModelConfig::default());
        let batch = assemble_decoder_input(&[], 16);
        let a = model_forward(&params, &scene.features, &batch, None, Mode::Infer).unwrap();
        let b = model_forward(&params, &scene.features, &batch, None, Mode::Infer).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_delta_keeps_anchors() {
        // box head output layer starts at zero
        let (params, scene) = setup(ModelConfig::default());
        let batch = assemble_decoder_input(&[], 16);
        let out = model_forward(&params, &scene.features, &batch, None, Mode::Infer).unwrap();
        let anchors = params.anchor_boxes();
        for layer in &out {
            for (b, a) in layer.boxes().iter().zip(&anchors) {
                for (x, y) in b.as_array().iter().zip(a.as_array()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn refines_once_per_layer() {
        let config = ModelConfig {
            layers: 6,
            ..ModelConfig::default()
        };
        let (mut params, scene) = setup(config);
        // nonzero box head so each layer moves the anchors
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        params.tensors_mut()[BOX2_W] = xavier(&mut rng, 64, 4);
        let batch = assemble_decoder_input(&[], config.queries);
        let out = model_forward(&params, &scene.features, &batch, None, Mode::Infer).unwrap();
        assert_eq!(out.len(), 6);
        for w in out.windows(2) {
            assert_ne!(w[0].boxes, w[1].boxes);
            assert!(w[1].boxes.iter().all(|&b| b > 0.0 && b < 1.0));
        }
    }
}

//! Patch embedding, the pre-norm encoder and the classifier head.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{self, argmax, gelu_in_place, layer_norm, linear, matmul, Tensor};
use crate::weights::{BlockWeights, WeightStore};

/// Class token at index 0 followed by patch tokens, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] != grid_rows * grid_cols + 1 {
            return Err(Error::dim(format!(
                "token tensor {:?} does not hold a class token plus a {grid_rows}x{grid_cols} grid",
                tokens.shape()
            )));
        }
        Ok(TokenSequence {
            tokens,
            grid_rows,
            grid_cols,
        })
    }

    /// Number of tokens including the class token.
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn class_token(&self) -> &[f32] {
        self.tokens.row(0)
    }
}

/// Head-averaged class-token attention row for every layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassAttentionTrace {
    pub per_layer: Vec<Vec<f32>>,
}

impl ClassAttentionTrace {
    pub fn depth(&self) -> usize {
        self.per_layer.len()
    }
}

/// One attention matrix (`[N', N']`, rows already softmax-normalized) seen during encoding.
pub struct AttentionProbe<'a> {
    pub layer: usize,
    pub head: usize,
    pub weights: &'a Tensor,
}

/// Classifier output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub pred: usize,
    pub conf: f32,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::dim(format!("expected a 3xHxW image, got shape {s:?}"))),
    }
}

/// 2x2 area pooling per channel.
pub fn downsample_half(image: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "cannot halve a {h}x{w} image: both sides must be even"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = image.data();
    let mut out = Vec::with_capacity(3 * oh * ow);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for r in 0..oh {
            let top = &plane[2 * r * w..(2 * r + 1) * w];
            let bottom = &plane[(2 * r + 1) * w..(2 * r + 2) * w];
            for k in 0..ow {
                let sum = top[2 * k] + top[2 * k + 1] + bottom[2 * k] + bottom[2 * k + 1];
                out.push(sum * 0.25);
            }
        }
    }
    Tensor::new(vec![3, oh, ow], out)
}

/// Flattened `P x P x 3` patches (channel-major inside a patch) at the given grid indices.
pub fn extract_patches(image: &Tensor, patch: usize, indices: &[usize]) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} is not divisible into {patch}px patches"
        )));
    }
    let cols = w / patch;
    let total = (h / patch) * cols;
    let plen = 3 * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(indices.len() * plen);
    for &idx in indices {
        if idx >= total {
            return Err(Error::dim(format!(
                "patch index {idx} outside a grid of {total} patches"
            )));
        }
        let (pr, pc) = (idx / cols, idx % cols);
        for c in 0..3 {
            for y in 0..patch {
                let row_start = c * h * w + (pr * patch + y) * w + pc * patch;
                out.extend_from_slice(&src[row_start..row_start + patch]);
            }
        }
    }
    Tensor::new(vec![indices.len(), plen], out)
}

/// Resamples a `[from*from, D]` table of grid embeddings to `[to*to, D]`.
///
/// Bilinear with half-pixel centers and edge clamping; for an exact 2x reduction
/// this is the 2x2 mean of the source rows.
pub fn interpolate_grid(table: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let d = table.last_dim();
    if table.shape() != [from * from, d] {
        return Err(Error::dim(format!(
            "positional table {:?} is not a {from}x{from} grid",
            table.shape()
        )));
    }
    if from == to {
        return Ok(table.clone());
    }
    let scale = from as f32 / to as f32;
    let taps = |i: usize| -> (usize, usize, f32) {
        let src = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (from - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, src - lo as f32)
    };
    let mut out = Tensor::zeros(&[to * to, d]);
    for r in 0..to {
        let (r0, r1, fr) = taps(r);
        for c in 0..to {
            let (c0, c1, fc) = taps(c);
            let corners = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ];
            let dst = out.row_mut(r * to + c);
            for (sr, sc, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(table.row(sr * from + sc)) {
                    *o += wgt * v;
                }
            }
        }
    }
    Ok(out)
}

/// Positional rows for the patch grid of side `side` (class row excluded).
pub fn grid_positions(w: &WeightStore, side: usize) -> Result<Tensor> {
    let fine = w.config.fine_side();
    let d = w.config.dim;
    let patch_rows = Tensor::new(
        vec![fine * fine, d],
        w.pos_embed.data()[d..].to_vec(),
    )?;
    interpolate_grid(&patch_rows, fine, side)
}

/// Patch tokens (projection + bias + positional row) for the given grid indices.
pub fn embed_patches(
    image: &Tensor,
    indices: &[usize],
    positions: &Tensor,
    w: &WeightStore,
) -> Result<Tensor> {
    let patches = extract_patches(image, w.config.patch, indices)?;
    let mut tokens = linear(&patches, &w.patch_proj, Some(w.patch_bias.data()))?;
    for (i, &idx) in indices.iter().enumerate() {
        for (t, p) in tokens.row_mut(i).iter_mut().zip(positions.row(idx)) {
            *t += p;
        }
    }
    Ok(tokens)
}

/// Class token plus its positional row.
pub fn class_token(w: &WeightStore) -> Vec<f32> {
    w.cls_token
        .data()
        .iter()
        .zip(w.pos_embed.row(0))
        .map(|(c, p)| c + p)
        .collect()
}

/// Builds the input sequence for a full-resolution or half-resolution image.
pub fn embed(image: &Tensor, w: &WeightStore) -> Result<TokenSequence> {
    let cfg = &w.config;
    let (h, wd) = image_dims(image)?;
    if h != wd {
        return Err(Error::dim(format!("image must be square, got {h}x{wd}")));
    }
    if h % cfg.patch != 0 {
        return Err(Error::dim(format!(
            "image side {h} is not divisible by patch size {}",
            cfg.patch
        )));
    }
    if h != cfg.image_side && h != cfg.image_side / 2 {
        return Err(Error::dim(format!(
            "image side {h} is neither {} nor its half",
            cfg.image_side
        )));
    }
    let side = h / cfg.patch;
    let positions = grid_positions(w, side)?;
    let indices: Vec<usize> = (0..side * side).collect();
    let patches = embed_patches(image, &indices, &positions, w)?;
    let mut data = class_token(w);
    data.extend_from_slice(patches.data());
    TokenSequence::new(Tensor::new(vec![side * side + 1, cfg.dim], data)?, side, side)
}

fn head_slice(x: &Tensor, head: usize, head_dim: usize) -> Tensor {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n * head_dim);
    for row in x.rows() {
        out.extend_from_slice(&row[head * head_dim..(head + 1) * head_dim]);
    }
    Tensor::new(vec![n, head_dim], out).expect("head slice shape")
}

/// Multi-head self-attention on an already normalized input. Returns the projected
/// output and the head-averaged class-token attention row.
fn self_attention(
    x: &Tensor,
    blk: &BlockWeights,
    cfg: &ModelConfig,
    layer: usize,
    observer: &mut dyn FnMut(AttentionProbe<'_>),
) -> Result<(Tensor, Vec<f32>)> {
    let n = x.shape()[0];
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let q = linear(x, &blk.q_weight, Some(blk.q_bias.data()))?;
    let k = linear(x, &blk.k_weight, Some(blk.k_bias.data()))?;
    let v = linear(x, &blk.v_weight, Some(blk.v_bias.data()))?;
    let mut concat = Tensor::zeros(&[n, cfg.dim]);
    let mut cls_row = vec![0.0f32; n];
    for h in 0..cfg.heads {
        let qh = head_slice(&q, h, hd);
        let kh = head_slice(&k, h, hd).transpose()?;
        let vh = head_slice(&v, h, hd);
        let mut scores = matmul(&qh, &kh)?;
        for s in scores.data_mut() {
            *s *= scale;
        }
        let attn = tensor::softmax(&scores);
        observer(AttentionProbe {
            layer,
            head: h,
            weights: &attn,
        });
        for (acc, a) in cls_row.iter_mut().zip(attn.row(0)) {
            *acc += a;
        }
        let ctx = matmul(&attn, &vh)?;
        for (i, row) in ctx.rows().enumerate() {
            concat.row_mut(i)[h * hd..(h + 1) * hd].copy_from_slice(row);
        }
    }
    let inv = 1.0 / cfg.heads as f32;
    cls_row.iter_mut().for_each(|v| *v *= inv);
    let out = linear(&concat, &blk.out_weight, Some(blk.out_bias.data()))?;
    Ok((out, cls_row))
}

fn feed_forward(x: &Tensor, blk: &BlockWeights) -> Result<Tensor> {
    let mut hidden = linear(x, &blk.fc1_weight, Some(blk.fc1_bias.data()))?;
    gelu_in_place(&mut hidden);
    linear(&hidden, &blk.fc2_weight, Some(blk.fc2_bias.data()))
}

/// Runs every encoder block and records the class-attention trace.
pub fn encode(seq: &TokenSequence, w: &WeightStore) -> Result<(TokenSequence, ClassAttentionTrace)> {
    encode_observed(seq, w, &mut |_| {})
}

/// As [`encode`], also handing every per-head attention matrix to `observer`.
pub fn encode_observed(
    seq: &TokenSequence,
    w: &WeightStore,
    observer: &mut dyn FnMut(AttentionProbe<'_>),
) -> Result<(TokenSequence, ClassAttentionTrace)> {
    let cfg = &w.config;
    if seq.tokens.last_dim() != cfg.dim {
        return Err(Error::dim(format!(
            "token width {} does not match model dim {}",
            seq.tokens.last_dim(),
            cfg.dim
        )));
    }
    let mut z = seq.tokens.clone();
    let mut trace = ClassAttentionTrace::default();
    for (layer, blk) in w.blocks.iter().enumerate() {
        let normed = layer_norm(&z, blk.norm1_gamma.data(), blk.norm1_beta.data(), cfg.eps)?;
        let (attn_out, cls_row) = self_attention(&normed, blk, cfg, layer, observer)?;
        z.add_assign(&attn_out)?;
        trace.per_layer.push(cls_row);
        let normed = layer_norm(&z, blk.norm2_gamma.data(), blk.norm2_beta.data(), cfg.eps)?;
        z.add_assign(&feed_forward(&normed, blk)?)?;
    }
    Ok((
        TokenSequence {
            tokens: z,
            grid_rows: seq.grid_rows,
            grid_cols: seq.grid_cols,
        },
        trace,
    ))
}

/// Applies the head to the class token.
pub fn classify(seq: &TokenSequence, w: &WeightStore) -> Result<Prediction> {
    let cls = Tensor::new(vec![1, seq.tokens.last_dim()], seq.class_token().to_vec())?;
    let logits = linear(&cls, &w.head_weight, Some(w.head_bias.data()))?.into_data();
    Ok(predict_from_logits(logits))
}

pub fn predict_from_logits(logits: Vec<f32>) -> Prediction {
    let mut probs = logits.clone();
    tensor::softmax_slice(&mut probs);
    let pred = argmax(&probs);
    Prediction {
        conf: probs[pred],
        logits,
        probs,
        pred,
    }
}

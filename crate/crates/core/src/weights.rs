//! Model parameters and the LFW1 weight file.
//!
//! An LFW1 file is a single-line JSON manifest terminated by `\n`, followed by a
//! blob of little-endian `f32` values. Manifest entries carry byte offsets relative
//! to the start of the blob and must tile it contiguously in manifest order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "LFW1";

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// All learned parameters. Immutable once built; share it behind `&` or `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub config: ModelConfig,
    /// `[3*P*P, D]`, shared by both resolutions.
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    /// `[N_fine + 1, D]`; row 0 belongs to the class token.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub align_weight: Tensor,
    pub align_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// How a parameter is initialized by [`WeightStore::random`].
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.dim;
    let f = cfg.ffn_dim();
    let p = cfg.patch_len();
    let uni = |fan_in| Init::Uniform { fan_in };
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| specs.push(ParamSpec { name, shape, init });
    push("patch_embed.weight".into(), vec![p, d], uni(p));
    push("patch_embed.bias".into(), vec![d], uni(p));
    push("cls_token".into(), vec![d], uni(d));
    push("pos_embed".into(), vec![cfg.fine_tokens() + 1, d], uni(d));
    for b in 0..cfg.depth {
        let n = |s: &str| format!("blocks.{b}.{s}");
        push(n("norm1.weight"), vec![d], Init::Ones);
        push(n("norm1.bias"), vec![d], Init::Zeros);
        for proj in ["q", "k", "v", "out"] {
            push(n(&format!("attn.{proj}.weight")), vec![d, d], uni(d));
            push(n(&format!("attn.{proj}.bias")), vec![d], uni(d));
        }
        push(n("norm2.weight"), vec![d], Init::Ones);
        push(n("norm2.bias"), vec![d], Init::Zeros);
        push(n("mlp.fc1.weight"), vec![d, f], uni(d));
        push(n("mlp.fc1.bias"), vec![f], uni(d));
        push(n("mlp.fc2.weight"), vec![f, d], uni(f));
        push(n("mlp.fc2.bias"), vec![d], uni(f));
    }
    push("align.weight".into(), vec![d, d], uni(d));
    push("align.bias".into(), vec![d], uni(d));
    push("head.weight".into(), vec![d, cfg.classes], uni(d));
    push("head.bias".into(), vec![cfg.classes], uni(d));
    specs
}

impl WeightStore {
    /// Tensors in canonical file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".into(), &self.patch_proj),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{b}.{s}");
            out.extend([
                (n("norm1.weight"), &blk.norm1_gamma),
                (n("norm1.bias"), &blk.norm1_beta),
                (n("attn.q.weight"), &blk.q_weight),
                (n("attn.q.bias"), &blk.q_bias),
                (n("attn.k.weight"), &blk.k_weight),
                (n("attn.k.bias"), &blk.k_bias),
                (n("attn.v.weight"), &blk.v_weight),
                (n("attn.v.bias"), &blk.v_bias),
                (n("attn.out.weight"), &blk.out_weight),
                (n("attn.out.bias"), &blk.out_bias),
                (n("norm2.weight"), &blk.norm2_gamma),
                (n("norm2.bias"), &blk.norm2_beta),
                (n("mlp.fc1.weight"), &blk.fc1_weight),
                (n("mlp.fc1.bias"), &blk.fc1_bias),
                (n("mlp.fc2.weight"), &blk.fc2_weight),
                (n("mlp.fc2.bias"), &blk.fc2_bias),
            ]);
        }
        out.extend([
            ("align.weight".into(), &self.align_weight),
            ("align.bias".into(), &self.align_bias),
            ("head.weight".into(), &self.head_weight),
            ("head.bias".into(), &self.head_bias),
        ]);
        out
    }

    /// Builds a store from tensors listed in canonical order, checking every shape.
    fn from_ordered(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::format(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::dim(format!(
                    "tensor {} has shape {:?}, config requires {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let patch_proj = next();
        let patch_bias = next();
        let cls_token = next();
        let pos_embed = next();
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                norm1_gamma: next(),
                norm1_beta: next(),
                q_weight: next(),
                q_bias: next(),
                k_weight: next(),
                k_bias: next(),
                v_weight: next(),
                v_bias: next(),
                out_weight: next(),
                out_bias: next(),
                norm2_gamma: next(),
                norm2_beta: next(),
                fc1_weight: next(),
                fc1_bias: next(),
                fc2_weight: next(),
                fc2_bias: next(),
            })
            .collect();
        Ok(WeightStore {
            patch_proj,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            align_weight: next(),
            align_bias: next(),
            head_weight: next(),
            head_bias: next(),
            config,
        })
    }

    /// Deterministic initialization from a ChaCha8 stream seeded with `seed`.
    ///
    /// Tensors are drawn in file order. Matrices and their biases are uniform in
    /// `±1/sqrt(fan_in)`; the class token and positional table use `fan_in = D`;
    /// layer-norm scales are one and shifts zero.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(config)
            .into_iter()
            .map(|spec| match spec.init {
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        WeightStore::from_ordered(config.clone(), tensors)
    }

    /// Same architecture, different policy knobs (η, m, α, β, focus mode).
    pub fn with_policy(mut self, policy: &ModelConfig) -> Result<Self> {
        let arch_matches = policy.depth == self.config.depth
            && policy.dim == self.config.dim
            && policy.heads == self.config.heads
            && policy.patch == self.config.patch
            && policy.image_side == self.config.image_side
            && policy.classes == self.config.classes;
        if !arch_matches {
            return Err(Error::config(
                "policy override changes the architecture of the loaded weights",
            ));
        }
        policy.validate()?;
        self.config = policy.clone();
        Ok(self)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in self.named_tensors() {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            config: self.config.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("LFW1 manifest is not newline-terminated"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::format(format!("unreadable LFW1 manifest: {e}")))?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::format(format!(
                "unsupported weight format {:?}",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let blob = &bytes[split + 1..];
        let specs = param_specs(&manifest.config);
        if manifest.tensors.len() != specs.len() {
            return Err(Error::format(format!(
                "manifest lists {} tensors, config requires {}",
                manifest.tensors.len(),
                specs.len()
            )));
        }
        let mut cursor = 0usize;
        let mut tensors = Vec::with_capacity(specs.len());
        for (entry, spec) in manifest.tensors.iter().zip(&specs) {
            if entry.name != spec.name {
                return Err(Error::format(format!(
                    "manifest entry {:?} found where {:?} was expected",
                    entry.name, spec.name
                )));
            }
            if entry.shape != spec.shape {
                return Err(Error::dim(format!(
                    "tensor {} has shape {:?}, config requires {:?}",
                    entry.name, entry.shape, spec.shape
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.offset != cursor || entry.length != count * 4 {
                return Err(Error::format(format!(
                    "manifest inconsistent at {}: offset {} length {} (expected offset {} length {})",
                    entry.name,
                    entry.offset,
                    entry.length,
                    cursor,
                    count * 4
                )));
            }
            let end = cursor + entry.length;
            let raw = blob.get(cursor..end).ok_or_else(|| {
                Error::format(format!(
                    "blob truncated: {} needs bytes {cursor}..{end} of {}",
                    entry.name,
                    blob.len()
                ))
            })?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
            cursor = end;
        }
        if cursor != blob.len() {
            return Err(Error::format(format!(
                "manifest inconsistent: {} trailing blob bytes",
                blob.len() - cursor
            )));
        }
        WeightStore::from_ordered(manifest.config, tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        WeightStore::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

/// Writes a freshly initialized LFW1 file; the same `(config, seed)` always yields the same bytes.
pub fn gen_weights(config: &ModelConfig, seed: u64, path: impl AsRef<Path>) -> Result<WeightStore> {
    let store = WeightStore::random(config, seed)?;
    store.save(path)?;
    Ok(store)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

//! Miniature vision transformer with per-layer prompt tokens.
//!
//! Each block runs pre-norm attention and MLP over the row order
//! `[cls, p_1..p_M, x_1..x_N]`. Prompt rows are fresh parameters at every
//! layer: the block's outputs for prompt positions are dropped, so a block
//! always maps `N+1` carried rows to `N+1` carried rows. Prompts receive no
//! positional embeddings.
//!
//! Checkpoints are little-endian:
//!
//! ```text
//! magic      4 bytes "DVPT"
//! version    u32     1
//! image, patch, channels, embed, layers, heads  u32 each
//! mlp_ratio  f64
//! classes, prompts_per_layer, prompt_init, policy  u32 each
//! parameters raw f64, in visit order: patch_w, patch_b, cls, pos,
//!            per block {w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
//!                       ln1_gain, ln1_bias, ln2_gain, ln2_bias,
//!                       mlp_up_w, mlp_up_b, mlp_down_w, mlp_down_b,
//!                       prompts},
//!            head_w, head_b
//! ```

use crate::data::Dataset;
use crate::streams::{rng, Stream};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DVPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image has {actual} bytes, config expects {expected}")]
    ImageBytes { expected: usize, actual: usize },
    #[error("guided layer {layer} out of range for {layers} layers")]
    GuidedLayer { layer: usize, layers: usize },
    #[error("bad checkpoint magic {0:?}, expected {CHECKPOINT_MAGIC:?}")]
    CkptMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    CkptVersion(u32),
    #[error("checkpoint length mismatch: expected {expected} bytes, got {actual}")]
    CkptLength { expected: u64, actual: u64 },
    #[error("checkpoint field {field} holds invalid value {value}")]
    CkptField { field: &'static str, value: u32 },
    #[error("data_mean prompt initialization needs a dataset")]
    NeedData,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How prompt banks are filled at model creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptInit {
    /// N(0, 0.02^2) truncated at two standard deviations.
    TruncNormal,
    /// Per-layer mean post-attention visual-token representation over one
    /// promptless pass of a dataset.
    DataMean,
}

/// Which parameters train. Everything else stays frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Classifier head only.
    Linear,
    /// Head plus per-layer prompts.
    VptDeep,
    /// Same trainable set as `VptDeep`; metric guidance is a loss-side switch.
    DaVpt,
    /// Additionally unfreezes the Key and Value projection biases.
    DaVptPlus,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Linear => "linear",
            Policy::VptDeep => "vpt_deep",
            Policy::DaVpt => "da_vpt",
            Policy::DaVptPlus => "da_vpt_plus",
        }
    }

    pub fn parse(s: &str) -> Option<Policy> {
        match s {
            "linear" => Some(Policy::Linear),
            "vpt_deep" => Some(Policy::VptDeep),
            "da_vpt" => Some(Policy::DaVpt),
            "da_vpt_plus" => Some(Policy::DaVptPlus),
            _ => None,
        }
    }

    fn code(self) -> u32 {
        match self {
            Policy::Linear => 0,
            Policy::VptDeep => 1,
            Policy::DaVpt => 2,
            Policy::DaVptPlus => 3,
        }
    }

    fn from_code(v: u32) -> Option<Policy> {
        [Policy::Linear, Policy::VptDeep, Policy::DaVpt, Policy::DaVptPlus]
            .into_iter()
            .find(|p| p.code() == v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub prompts_per_layer: usize,
    pub prompt_init: PromptInit,
}

impl ViTConfig {
    /// Desk-scale default: 32x32 grayscale, 8x8 patches, 4 layers of width
    /// 64 with 4 heads, 8 prompts per layer.
    pub fn desk_default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            num_classes: 8,
            prompts_per_layer: 8,
            prompt_init: PromptInit::TruncNormal,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(VitError::Config("image_size, patch_size, channels must be >= 1".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(VitError::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(VitError::Config("embed_dim, num_layers, num_heads must be >= 1".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(VitError::Config(format!(
                "num_heads {} does not divide embed_dim {}",
                self.num_heads, self.embed_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(VitError::Config("num_classes must be >= 1".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(VitError::Config(format!("mlp_ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Rows a block sees: cls + prompts + visual tokens.
    pub fn seq_len(&self) -> usize {
        1 + self.prompts_per_layer + self.num_patches()
    }

    pub fn image_bytes(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_up_w: Tensor,
    pub mlp_up_b: Tensor,
    pub mlp_down_w: Tensor,
    pub mlp_down_b: Tensor,
    /// Prompt bank `P^l`, one row per prompt.
    pub prompts: Tensor,
}

/// All model parameters plus their trainability flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn trunc_normal(shape: Vec<usize>, std: f64, r: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = dist.sample(r);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

impl ModelParams {
    /// Fresh parameters from the model-init stream of `seed`. Prompt banks
    /// draw from their own stream, so the backbone is identical across
    /// different prompt counts. The head starts at zero; nothing is
    /// trainable until [`ModelParams::set_trainability`].
    pub fn init(config: &ViTConfig, seed: u64) -> Result<ModelParams, VitError> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden_dim();
        let mut rm = rng(seed, Stream::ModelInit);
        let patch_w = trunc_normal(vec![d, config.patch_dim()], 0.02, &mut rm);
        let patch_b = Tensor::zeros(vec![d]);
        let cls = trunc_normal(vec![1, d], 0.02, &mut rm);
        let pos = trunc_normal(vec![config.num_patches() + 1, d], 0.02, &mut rm);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(BlockParams {
                w_q: trunc_normal(vec![d, d], 0.02, &mut rm),
                b_q: Tensor::zeros(vec![d]),
                w_k: trunc_normal(vec![d, d], 0.02, &mut rm),
                b_k: Tensor::zeros(vec![d]),
                w_v: trunc_normal(vec![d, d], 0.02, &mut rm),
                b_v: Tensor::zeros(vec![d]),
                w_o: trunc_normal(vec![d, d], 0.02, &mut rm),
                b_o: Tensor::zeros(vec![d]),
                ln1_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln1_bias: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                ln2_bias: Tensor::zeros(vec![d]),
                mlp_up_w: trunc_normal(vec![d, h], 0.02, &mut rm),
                mlp_up_b: Tensor::zeros(vec![h]),
                mlp_down_w: trunc_normal(vec![h, d], 0.02, &mut rm),
                mlp_down_b: Tensor::zeros(vec![d]),
                prompts: Tensor::zeros(vec![config.prompts_per_layer, d]),
            });
        }
        let head_w = Tensor::zeros(vec![config.num_classes, d]);
        let head_b = Tensor::zeros(vec![config.num_classes]);
        let mut params = ModelParams {
            config: config.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            head_w,
            head_b,
        };
        if config.prompt_init == PromptInit::TruncNormal {
            params.redraw_prompts(seed);
        }
        Ok(params)
    }

    fn redraw_prompts(&mut self, seed: u64) {
        let mut rp = rng(seed, Stream::PromptInit);
        let d = self.config.embed_dim;
        for b in &mut self.blocks {
            let t = trunc_normal(vec![self.config.prompts_per_layer, d], 0.02, &mut rp);
            b.prompts.data = t.data;
        }
    }

    /// Visit every parameter in checkpoint order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor)) {
        f("patch_w", &self.patch_w);
        f("patch_b", &self.patch_b);
        f("cls", &self.cls);
        f("pos", &self.pos);
        for (l, b) in self.blocks.iter().enumerate() {
            let name = |field: &str| format!("block{l}.{field}");
            f(&name("w_q"), &b.w_q);
            f(&name("b_q"), &b.b_q);
            f(&name("w_k"), &b.w_k);
            f(&name("b_k"), &b.b_k);
            f(&name("w_v"), &b.w_v);
            f(&name("b_v"), &b.b_v);
            f(&name("w_o"), &b.w_o);
            f(&name("b_o"), &b.b_o);
            f(&name("ln1_gain"), &b.ln1_gain);
            f(&name("ln1_bias"), &b.ln1_bias);
            f(&name("ln2_gain"), &b.ln2_gain);
            f(&name("ln2_bias"), &b.ln2_bias);
            f(&name("mlp_up_w"), &b.mlp_up_w);
            f(&name("mlp_up_b"), &b.mlp_up_b);
            f(&name("mlp_down_w"), &b.mlp_down_w);
            f(&name("mlp_down_b"), &b.mlp_down_b);
            f(&name("prompts"), &b.prompts);
        }
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        f("patch_w", &mut self.patch_w);
        f("patch_b", &mut self.patch_b);
        f("cls", &mut self.cls);
        f("pos", &mut self.pos);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let name = |field: &str| format!("block{l}.{field}");
            f(&name("w_q"), &mut b.w_q);
            f(&name("b_q"), &mut b.b_q);
            f(&name("w_k"), &mut b.w_k);
            f(&name("b_k"), &mut b.b_k);
            f(&name("w_v"), &mut b.w_v);
            f(&name("b_v"), &mut b.b_v);
            f(&name("w_o"), &mut b.w_o);
            f(&name("b_o"), &mut b.b_o);
            f(&name("ln1_gain"), &mut b.ln1_gain);
            f(&name("ln1_bias"), &mut b.ln1_bias);
            f(&name("ln2_gain"), &mut b.ln2_gain);
            f(&name("ln2_bias"), &mut b.ln2_bias);
            f(&name("mlp_up_w"), &mut b.mlp_up_w);
            f(&name("mlp_up_b"), &mut b.mlp_up_b);
            f(&name("mlp_down_w"), &mut b.mlp_down_w);
            f(&name("mlp_down_b"), &mut b.mlp_down_b);
            f(&name("prompts"), &mut b.prompts);
        }
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }

    /// Flag the trainable set for `policy`; everything else freezes.
    /// The head (weight and bias) trains under every policy.
    pub fn set_trainability(&mut self, policy: Policy) {
        self.visit_mut(&mut |_, t| t.requires_grad = false);
        self.head_w.requires_grad = true;
        self.head_b.requires_grad = true;
        match policy {
            Policy::Linear => {}
            Policy::VptDeep | Policy::DaVpt => {
                for b in &mut self.blocks {
                    b.prompts.requires_grad = true;
                }
            }
            Policy::DaVptPlus => {
                for b in &mut self.blocks {
                    b.prompts.requires_grad = true;
                    b.b_k.requires_grad = true;
                    b.b_v.requires_grad = true;
                }
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| {
            if t.requires_grad {
                n += t.numel();
            }
        });
        n
    }

    pub fn to_bytes(&self, policy: Policy) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.image_size, c.patch_size, c.channels, c.embed_dim, c.num_layers, c.num_heads] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.mlp_ratio.to_le_bytes());
        let init_code = match c.prompt_init {
            PromptInit::TruncNormal => 0u32,
            PromptInit::DataMean => 1,
        };
        for v in [c.num_classes as u32, c.prompts_per_layer as u32, init_code, policy.code()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.visit(&mut |_, t| {
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Policy), VitError> {
        const HEADER: usize = 4 + 4 + 6 * 4 + 8 + 4 * 4;
        if bytes.len() < HEADER {
            return Err(VitError::CkptLength { expected: HEADER as u64, actual: bytes.len() as u64 });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(VitError::CkptMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(VitError::CkptVersion(version));
        }
        let mlp_ratio = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let init_code = word(48);
        let prompt_init = match init_code {
            0 => PromptInit::TruncNormal,
            1 => PromptInit::DataMean,
            v => return Err(VitError::CkptField { field: "prompt_init", value: v }),
        };
        let policy_code = word(52);
        let policy = Policy::from_code(policy_code)
            .ok_or(VitError::CkptField { field: "policy", value: policy_code })?;
        let config = ViTConfig {
            image_size: word(8) as usize,
            patch_size: word(12) as usize,
            channels: word(16) as usize,
            embed_dim: word(20) as usize,
            num_layers: word(24) as usize,
            num_heads: word(28) as usize,
            mlp_ratio,
            num_classes: word(40) as usize,
            prompts_per_layer: word(44) as usize,
            prompt_init,
        };
        config.validate()?;
        let mut params = ModelParams::init(&config, 0)?;
        let mut count = 0usize;
        params.visit(&mut |_, t| count += t.numel());
        let expected = HEADER as u64 + 8 * count as u64;
        if bytes.len() as u64 != expected {
            return Err(VitError::CkptLength { expected, actual: bytes.len() as u64 });
        }
        let mut at = HEADER;
        params.visit_mut(&mut |_, t| {
            for v in t.data.iter_mut() {
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
                at += 8;
            }
        });
        params.set_trainability(policy);
        Ok((params, policy))
    }

    pub fn save(&self, policy: Policy, path: &Path) -> Result<(), VitError> {
        Ok(std::fs::write(path, self.to_bytes(policy))?)
    }

    pub fn load(path: &Path) -> Result<(ModelParams, Policy), VitError> {
        ModelParams::from_bytes(&std::fs::read(path)?)
    }
}

/// Attention weights of one block for one sample: `heads` stacked
/// `rows x rows` row-stochastic matrices.
#[derive(Debug, Clone)]
pub struct AttnMaps {
    pub heads: usize,
    pub rows: usize,
    data: Vec<f64>,
}

impl AttnMaps {
    pub fn row(&self, head: usize, row: usize) -> &[f64] {
        let r = self.rows;
        &self.data[head * r * r + row * r..head * r * r + (row + 1) * r]
    }

    /// Mean attention row over heads.
    pub fn mean_row(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for h in 0..self.heads {
            for (o, v) in out.iter_mut().zip(self.row(h, row)) {
                *o += v / self.heads as f64;
            }
        }
        out
    }
}

/// Tape handles and attention values captured at one guided layer.
#[derive(Debug)]
pub struct LayerTrace {
    pub layer: usize,
    /// Per sample, the block's attention maps.
    pub attention: Vec<AttnMaps>,
    /// Per sample, the concatenated-head attention output rows for the
    /// visual tokens: an `[N, D]` node.
    pub token_reps: Vec<NodeId>,
    /// `P^l W_Q^l + b_Q`, an `[M, D]` node. Absent when the layer holds no
    /// prompts.
    pub query_prompts: Option<NodeId>,
    /// The raw prompt bank leaf for this layer.
    pub prompts_raw: Option<NodeId>,
}

/// Everything a forward pass exposes for losses, audits, and export.
#[derive(Debug)]
pub struct ForwardTrace {
    pub guided: Vec<LayerTrace>,
    /// Per sample, the final-layer CLS row as a `[1, D]` node.
    pub cls_final: Vec<NodeId>,
    /// Batch logits, `[B, C]`.
    pub logits: NodeId,
}

impl ForwardTrace {
    pub fn layer(&self, layer: usize) -> Option<&LayerTrace> {
        self.guided.iter().find(|t| t.layer == layer)
    }
}

struct BoundBlock {
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    mlp_up_w: NodeId,
    mlp_up_b: NodeId,
    mlp_down_w: NodeId,
    mlp_down_b: NodeId,
    prompts: Option<NodeId>,
}

struct Bound {
    patch_w: NodeId,
    patch_b: NodeId,
    cls: NodeId,
    pos: NodeId,
    blocks: Vec<BoundBlock>,
    head_w: NodeId,
    head_b: NodeId,
}

fn bind(tape: &mut Tape, params: &mut ModelParams, insert_prompts: bool) -> Bound {
    let mut blocks = Vec::with_capacity(params.blocks.len());
    let m = params.config.prompts_per_layer;
    for b in &mut params.blocks {
        blocks.push(BoundBlock {
            w_q: tape.leaf(&mut b.w_q),
            b_q: tape.leaf(&mut b.b_q),
            w_k: tape.leaf(&mut b.w_k),
            b_k: tape.leaf(&mut b.b_k),
            w_v: tape.leaf(&mut b.w_v),
            b_v: tape.leaf(&mut b.b_v),
            w_o: tape.leaf(&mut b.w_o),
            b_o: tape.leaf(&mut b.b_o),
            ln1_gain: tape.leaf(&mut b.ln1_gain),
            ln1_bias: tape.leaf(&mut b.ln1_bias),
            ln2_gain: tape.leaf(&mut b.ln2_gain),
            ln2_bias: tape.leaf(&mut b.ln2_bias),
            mlp_up_w: tape.leaf(&mut b.mlp_up_w),
            mlp_up_b: tape.leaf(&mut b.mlp_up_b),
            mlp_down_w: tape.leaf(&mut b.mlp_down_w),
            mlp_down_b: tape.leaf(&mut b.mlp_down_b),
            prompts: (insert_prompts && m > 0).then(|| tape.leaf(&mut b.prompts)),
        });
    }
    Bound {
        patch_w: tape.leaf(&mut params.patch_w),
        patch_b: tape.leaf(&mut params.patch_b),
        cls: tape.leaf(&mut params.cls),
        pos: tape.leaf(&mut params.pos),
        blocks,
        head_w: tape.leaf(&mut params.head_w),
        head_b: tape.leaf(&mut params.head_b),
    }
}

/// Normalize image bytes to `[0, 1]`, cut row-major patches, project them,
/// prepend the CLS row, and add positional embeddings. Prompts are not
/// involved here and never receive positions.
fn patchify(
    tape: &mut Tape,
    bound: &Bound,
    config: &ViTConfig,
    image: &[u8],
) -> Result<NodeId, VitError> {
    if image.len() != config.image_bytes() {
        return Err(VitError::ImageBytes { expected: config.image_bytes(), actual: image.len() });
    }
    let (side, p, ch) = (config.grid_side(), config.patch_size, config.channels);
    let w = config.image_size;
    let mut rows = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for py in 0..side {
        for px in 0..side {
            for dy in 0..p {
                for dx in 0..p {
                    let base = ((py * p + dy) * w + px * p + dx) * ch;
                    for c in 0..ch {
                        rows.push(image[base + c] as f64 / 255.0);
                    }
                }
            }
        }
    }
    let pix = tape.leaf_const(vec![config.num_patches(), config.patch_dim()], rows)?;
    let emb = tape.matmul_nt(pix, bound.patch_w)?;
    let emb = tape.add_bias(emb, bound.patch_b)?;
    let seq = tape.concat_rows(&[bound.cls, emb])?;
    Ok(tape.add(seq, bound.pos)?)
}

struct BlockOut {
    out: NodeId,
    attention: Option<AttnMaps>,
    token_reps: Option<NodeId>,
}

/// One pre-norm transformer block over rows `[cls, prompts, visual]`.
/// Prompt rows take part in attention and the MLP as queries, keys, and
/// values, but their outputs are dropped: the result always carries
/// `N + 1` rows.
fn forward_block(
    tape: &mut Tape,
    bb: &BoundBlock,
    x: NodeId,
    config: &ViTConfig,
    m: usize,
    capture: bool,
) -> Result<BlockOut, VitError> {
    let t_rows = tape.shape(x)[0];
    let dh = config.head_dim();

    let ln1 = tape.layer_norm(x, bb.ln1_gain, bb.ln1_bias)?;
    let q = tape.matmul(ln1, bb.w_q)?;
    let q = tape.add_bias(q, bb.b_q)?;
    let k = tape.matmul(ln1, bb.w_k)?;
    let k = tape.add_bias(k, bb.b_k)?;
    let v = tape.matmul(ln1, bb.w_v)?;
    let v = tape.add_bias(v, bb.b_v)?;

    let mut head_outs = Vec::with_capacity(config.num_heads);
    let mut attn = capture.then(|| Vec::with_capacity(config.num_heads * t_rows * t_rows));
    for i in 0..config.num_heads {
        let qi = tape.slice_cols(q, i * dh, dh)?;
        let ki = tape.slice_cols(k, i * dh, dh)?;
        let vi = tape.slice_cols(v, i * dh, dh)?;
        let scores = tape.matmul_nt(qi, ki)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let a = tape.softmax_rows(scores)?;
        if let Some(buf) = attn.as_mut() {
            buf.extend_from_slice(tape.value(a));
        }
        head_outs.push(tape.matmul(a, vi)?);
    }
    let heads = tape.concat_cols(&head_outs)?;

    let token_reps = if capture {
        let visual: Vec<usize> = (1 + m..t_rows).collect();
        Some(tape.select_rows(heads, &visual)?)
    } else {
        None
    };

    let proj = tape.matmul(heads, bb.w_o)?;
    let proj = tape.add_bias(proj, bb.b_o)?;
    let x1 = tape.add(x, proj)?;
    let ln2 = tape.layer_norm(x1, bb.ln2_gain, bb.ln2_bias)?;
    let up = tape.matmul(ln2, bb.mlp_up_w)?;
    let up = tape.add_bias(up, bb.mlp_up_b)?;
    let up = tape.gelu(up)?;
    let down = tape.matmul(up, bb.mlp_down_w)?;
    let down = tape.add_bias(down, bb.mlp_down_b)?;
    let x2 = tape.add(x1, down)?;

    let out = if m > 0 {
        let keep: Vec<usize> = std::iter::once(0).chain(1 + m..t_rows).collect();
        tape.select_rows(x2, &keep)?
    } else {
        x2
    };
    Ok(BlockOut {
        out,
        attention: attn.map(|data| AttnMaps { heads: config.num_heads, rows: t_rows, data }),
        token_reps,
    })
}

fn forward_inner(
    tape: &mut Tape,
    params: &mut ModelParams,
    images: &[&[u8]],
    guided_layers: &[usize],
    insert_prompts: bool,
) -> Result<ForwardTrace, VitError> {
    let config = params.config.clone();
    config.validate()?;
    for &l in guided_layers {
        if l >= config.num_layers {
            return Err(VitError::GuidedLayer { layer: l, layers: config.num_layers });
        }
    }
    let m = if insert_prompts { config.prompts_per_layer } else { 0 };
    let n = config.num_patches();
    let bound = bind(tape, params, insert_prompts);

    let mut guided: Vec<LayerTrace> = guided_layers
        .iter()
        .map(|&l| {
            let (query_prompts, prompts_raw) = match bound.blocks[l].prompts {
                Some(p) if m > 0 => {
                    let qp = tape.matmul(p, bound.blocks[l].w_q)?;
                    let qp = tape.add_bias(qp, bound.blocks[l].b_q)?;
                    (Some(qp), Some(p))
                }
                _ => (None, None),
            };
            Ok(LayerTrace {
                layer: l,
                attention: Vec::new(),
                token_reps: Vec::new(),
                query_prompts,
                prompts_raw,
            })
        })
        .collect::<Result<_, VitError>>()?;

    let mut cls_final = Vec::with_capacity(images.len());
    let mut logit_rows = Vec::with_capacity(images.len());
    let visual_of_carried: Vec<usize> = (1..=n).collect();
    for &image in images {
        let mut x = patchify(tape, &bound, &config, image)?;
        for l in 0..config.num_layers {
            if m > 0 {
                let cls_row = tape.select_rows(x, &[0])?;
                let visual = tape.select_rows(x, &visual_of_carried)?;
                x = tape.concat_rows(&[cls_row, bound.blocks[l].prompts.unwrap(), visual])?;
            }
            let capture = guided.iter().any(|t| t.layer == l);
            let out = forward_block(tape, &bound.blocks[l], x, &config, m, capture)?;
            if capture {
                let t = guided.iter_mut().find(|t| t.layer == l).unwrap();
                t.attention.push(out.attention.unwrap());
                t.token_reps.push(out.token_reps.unwrap());
            }
            x = out.out;
        }
        let cls_row = tape.select_rows(x, &[0])?;
        cls_final.push(cls_row);
        let logit = tape.matmul_nt(cls_row, bound.head_w)?;
        logit_rows.push(tape.add_bias(logit, bound.head_b)?);
    }
    let logits = tape.concat_rows(&logit_rows)?;
    Ok(ForwardTrace { guided, cls_final, logits })
}

/// Forward a batch, capturing traces at `guided_layers`. Parameters are
/// registered as tape leaves, so after `tape.backward` their gradients can
/// be collected with [`Tape::write_back`].
pub fn forward_model(
    tape: &mut Tape,
    params: &mut ModelParams,
    images: &[&[u8]],
    guided_layers: &[usize],
) -> Result<ForwardTrace, VitError> {
    forward_inner(tape, params, images, guided_layers, true)
}

/// Per-layer mean of the post-attention visual-token representation over a
/// promptless pass of `data`. Row `l` is the `[D]` mean at layer `l`.
pub fn collect_token_means(params: &mut ModelParams, data: &Dataset) -> Result<Vec<Vec<f64>>, VitError> {
    let config = params.config.clone();
    if data.sample_bytes() != config.image_bytes() {
        return Err(VitError::ImageBytes { expected: config.image_bytes(), actual: data.sample_bytes() });
    }
    let d = config.embed_dim;
    let all_layers: Vec<usize> = (0..config.num_layers).collect();
    let mut sums = vec![vec![0.0; d]; config.num_layers];
    let mut rows_seen = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(32) {
        let images: Vec<&[u8]> = chunk.iter().map(|&i| data.sample(i).0).collect();
        let mut tape = Tape::new();
        let trace = forward_inner(&mut tape, params, &images, &all_layers, false)?;
        for t in &trace.guided {
            for &node in &t.token_reps {
                let vals = tape.value(node);
                for row in vals.chunks(d) {
                    for (s, v) in sums[t.layer].iter_mut().zip(row) {
                        *s += v;
                    }
                }
            }
        }
        rows_seen += images.len() * config.num_patches();
    }
    for layer in sums.iter_mut() {
        for v in layer.iter_mut() {
            *v /= rows_seen as f64;
        }
    }
    Ok(sums)
}

/// (Re)initialize prompt banks. `TruncNormal` draws from the prompt stream
/// of `seed`; `DataMean` sets every prompt at layer `l` to the mean
/// post-attention visual-token representation at that layer over one
/// promptless pass of `data`.
pub fn init_prompts(
    params: &mut ModelParams,
    mode: PromptInit,
    data: Option<&Dataset>,
    seed: u64,
) -> Result<(), VitError> {
    match mode {
        PromptInit::TruncNormal => {
            params.redraw_prompts(seed);
            Ok(())
        }
        PromptInit::DataMean => {
            let data = data.ok_or(VitError::NeedData)?;
            let means = collect_token_means(params, data)?;
            let m = params.config.prompts_per_layer;
            for (b, mean) in params.blocks.iter_mut().zip(&means) {
                for row in 0..m {
                    b.prompts.data[row * mean.len()..(row + 1) * mean.len()].copy_from_slice(mean);
                }
            }
            Ok(())
        }
    }
}

//! The desk-scale mixture-of-experts transformer.
//!
//! Each block is pre-norm: `h = x + attn(ln1(x))`, then `x' = h + moe(ln2(h))`.
//! Attention is single-head and causal. The MoE sublayer routes every token to
//! the `top_k` experts with the largest router logits, combines their outputs
//! with softmax weights renormalized over the selected logits, and adds the
//! shared expert's output when one is configured. A final layer norm feeds the
//! output head. Token and learned positional embeddings are summed at the input.

mod checkpoint;
mod forward;
mod routing;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward_prefill, greedy_decode, greedy_decode_uncached, KvCache, Prefill,
};
pub(crate) use forward::{attend, layer_norm, moe_forward, ExpertOut, LnOut, MoeOut};
pub use routing::{route_topk, route_topk_slice, NoopObserver, Routing, RoutingObserver};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_shared_expert: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_experts: 8,
            top_k: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 32,
            max_seq_len: 32,
            use_shared_expert: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::Config(format!("{name} does not fit in 32 bits")));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds num_experts {}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Address of one routed expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertId {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertId {
    pub fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.num_layers || self.expert >= config.num_experts {
            return Err(Error::Domain(format!(
                "expert {self} out of range for {} layers x {} experts",
                config.num_layers, config.num_experts
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.E{}", self.layer, self.expert)
    }
}

/// Two-matrix feed-forward expert: `silu(x · w_in) · w_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub w_in: Tensor,
    pub w_out: Tensor,
}

impl ExpertWeights {
    fn init(d_model: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        Self {
            w_in: init_matrix(d_model, d_ff, rng),
            w_out: init_matrix(d_ff, d_model, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_out.len()
    }

    /// All parameters, `w_in` first.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w_in.data().iter().chain(self.w_out.data()).copied()
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w_in, &mut self.w_out]
    }

    pub fn bit_eq(&self, other: &ExpertWeights) -> bool {
        self.w_in.bit_eq(&other.w_in) && self.w_out.bit_eq(&other.w_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_moe: LayerNorm,
    /// `[d_model × num_experts]`
    pub router: Tensor,
    pub experts: Vec<ExpertWeights>,
    pub shared_expert: Option<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    /// `[vocab_size × d_model]`
    pub embedding: Tensor,
    /// `[max_seq_len × d_model]`
    pub positions: Tensor,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    /// `[d_model × vocab_size]`
    pub head: Tensor,
}

/// Standard deviation used to initialize a weight matrix with `fan_in` inputs.
pub fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn init_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let std = init_std(rows);
    let data = (0..rows * cols).map(|_| rng.normal(std)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

impl ExpertWeights {
    /// Fresh parameters drawn exactly as at model initialization.
    pub fn fresh(config: &ModelConfig, rng: &mut RngStream) -> Self {
        Self::init(config.d_model, config.d_ff, rng)
    }
}

impl MoEModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed);
        let d = config.d_model;
        let mut rng = root.child(&[0]);
        let embedding = Tensor::new(
            vec![config.vocab_size, d],
            (0..config.vocab_size * d).map(|_| rng.standard_normal()).collect(),
        )?;
        let positions = Tensor::new(
            vec![config.max_seq_len, d],
            (0..config.max_seq_len * d)
                .map(|_| rng.standard_normal())
                .collect(),
        )?;
        let blocks = (0..config.num_layers)
            .map(|l| {
                let mut rng = root.child(&[1, l as u64]);
                Block {
                    ln_attn: LayerNorm::new(d),
                    wq: init_matrix(d, d, &mut rng),
                    wk: init_matrix(d, d, &mut rng),
                    wv: init_matrix(d, d, &mut rng),
                    wo: init_matrix(d, d, &mut rng),
                    ln_moe: LayerNorm::new(d),
                    router: init_matrix(d, config.num_experts, &mut rng),
                    experts: (0..config.num_experts)
                        .map(|e| {
                            let mut rng = root.child(&[2, l as u64, e as u64]);
                            ExpertWeights::init(d, config.d_ff, &mut rng)
                        })
                        .collect(),
                    shared_expert: config.use_shared_expert.then(|| {
                        let mut rng = root.child(&[3, l as u64]);
                        ExpertWeights::init(d, config.d_ff, &mut rng)
                    }),
                }
            })
            .collect();
        let mut rng = root.child(&[4]);
        let head = init_matrix(d, config.vocab_size, &mut rng);
        Ok(Self {
            config,
            embedding,
            positions,
            blocks,
            ln_final: LayerNorm::new(d),
            head,
        })
    }

    /// A model of the same shape with every parameter zero; used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    pub fn expert(&self, id: ExpertId) -> Result<&ExpertWeights> {
        id.check(&self.config)?;
        Ok(&self.blocks[id.layer].experts[id.expert])
    }

    pub fn expert_mut(&mut self, id: ExpertId) -> Result<&mut ExpertWeights> {
        id.check(&self.config)?;
        Ok(&mut self.blocks[id.layer].experts[id.expert])
    }

    /// Every parameter tensor in checkpoint order: embedding, positions, then per
    /// block `ln_attn.{gain,bias}`, `wq`, `wk`, `wv`, `wo`, `ln_moe.{gain,bias}`,
    /// `router`, each expert's `w_in`/`w_out`, the shared expert if present;
    /// finally `ln_final.{gain,bias}` and `head`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding, &self.positions];
        for b in &self.blocks {
            out.extend([
                &b.ln_attn.gain,
                &b.ln_attn.bias,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln_moe.gain,
                &b.ln_moe.bias,
                &b.router,
            ]);
            for e in b.experts.iter().chain(&b.shared_expert) {
                out.extend([&e.w_in, &e.w_out]);
            }
        }
        out.extend([&self.ln_final.gain, &self.ln_final.bias, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding, &mut self.positions];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln_attn.gain,
                &mut b.ln_attn.bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln_moe.gain,
                &mut b.ln_moe.bias,
                &mut b.router,
            ]);
            for e in b.experts.iter_mut().chain(b.shared_expert.iter_mut()) {
                out.extend([&mut e.w_in, &mut e.w_out]);
            }
        }
        out.extend([
            &mut self.ln_final.gain,
            &mut self.ln_final.bias,
            &mut self.head,
        ]);
        out
    }

    /// For each entry of [`tensors`](Self::tensors), the routed expert that
    /// owns it, if any.
    pub fn tensor_owners(&self) -> Vec<Option<ExpertId>> {
        let mut out = vec![None, None];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend([None; 9]);
            for e in 0..b.experts.len() {
                out.extend([Some(ExpertId::new(l, e)); 2]);
            }
            if b.shared_expert.is_some() {
                out.extend([None; 2]);
            }
        }
        out.extend([None; 3]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn bit_eq(&self, other: &MoEModel) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.bit_eq(b))
    }
}

//! Inference: prefill, incremental decoding against a KV cache, and the
//! per-position kernels shared with the training forward pass.
//!
//! Prefill and decoding both go through [`KvCache::step`], and the training
//! pass calls the same kernels in the same order, so logits agree bit for bit
//! across all three paths.

use super::routing::reborrow;
use super::{Block, ExpertWeights, LayerNorm, MoEModel, Routing, RoutingObserver, Token};
use crate::error::{Error, Result};
use crate::tensor::{argmax, dot, softmax_slice, vec_mat, vec_mat_into};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LnOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: f64,
}

pub(crate) fn layer_norm(x: &[f64], ln: &LayerNorm) -> LnOut {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(ln.gain.data())
        .zip(ln.bias.data())
        .map(|((h, g), b)| h * g + b)
        .collect();
    LnOut { y, xhat, rstd }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) struct ExpertOut {
    /// pre-activation
    pub u: Vec<f64>,
    /// post-activation
    pub z: Vec<f64>,
    pub y: Vec<f64>,
}

pub(crate) fn expert_forward(e: &ExpertWeights, x: &[f64]) -> ExpertOut {
    let d_ff = e.w_in.cols();
    let d_model = e.w_out.cols();
    let u = vec_mat(x, e.w_in.data(), d_ff);
    let z: Vec<f64> = u.iter().map(|&v| silu(v)).collect();
    let y = vec_mat(&z, e.w_out.data(), d_model);
    ExpertOut { u, z, y }
}

/// Causal attention for one query over `keys`/`values` (flat rows of width `d`).
/// Returns the attention probabilities and the context vector.
pub(crate) fn attend(q: &[f64], keys: &[f64], values: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys.chunks_exact(d).map(|k| dot(q, k) * scale).collect();
    let probs = softmax_slice(&scores);
    let mut ctx = vec![0.0; d];
    for (p, v) in probs.iter().zip(values.chunks_exact(d)) {
        for (c, &vi) in ctx.iter_mut().zip(v) {
            *c += p * vi;
        }
    }
    (probs, ctx)
}

pub(crate) struct MoeOut {
    pub routing: Routing,
    pub experts: Vec<ExpertOut>,
    pub shared: Option<ExpertOut>,
    pub y: Vec<f64>,
}

pub(crate) fn moe_forward(block: &Block, x: &[f64], top_k: usize) -> MoeOut {
    let logits = vec_mat(x, block.router.data(), block.router.cols());
    let routing = super::route_topk_slice(&logits, top_k).expect("top_k validated with config");
    let mut y = vec![0.0; x.len()];
    let experts: Vec<ExpertOut> = routing
        .experts
        .iter()
        .zip(&routing.weights)
        .map(|(&e, &w)| {
            let out = expert_forward(&block.experts[e], x);
            for (acc, &v) in y.iter_mut().zip(&out.y) {
                *acc += w * v;
            }
            out
        })
        .collect();
    let shared = block.shared_expert.as_ref().map(|e| {
        let out = expert_forward(e, x);
        for (acc, &v) in y.iter_mut().zip(&out.y) {
            *acc += v;
        }
        out
    });
    MoeOut {
        routing,
        experts,
        shared,
        y,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    pub fn new(model: &MoEModel) -> Self {
        Self {
            layers: vec![LayerCache::default(); model.config.num_layers],
            len: 0,
        }
    }

    /// Positions processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached rows per layer; identical across layers.
    pub fn layer_lens(&self, d_model: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l.keys.len() / d_model).collect()
    }

    /// Feeds one token at the next position and returns its next-token logits.
    pub fn step(
        &mut self,
        model: &MoEModel,
        token: Token,
        mut observer: Option<&mut dyn RoutingObserver>,
    ) -> Result<Vec<f64>> {
        let cfg = &model.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "position {} exceeds max_seq_len {}",
                self.len, cfg.max_seq_len
            )));
        }
        check_token(token, cfg.vocab_size)?;
        let d = cfg.d_model;
        let mut x: Vec<f64> = model
            .embedding
            .row(token as usize)
            .iter()
            .zip(model.positions.row(self.len))
            .map(|(e, p)| e + p)
            .collect();
        let mut q = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut o = vec![0.0; d];
        for (l, (block, cache)) in model.blocks.iter().zip(&mut self.layers).enumerate() {
            let a = layer_norm(&x, &block.ln_attn).y;
            vec_mat_into(&a, block.wq.data(), d, &mut q);
            vec_mat_into(&a, block.wk.data(), d, &mut kv);
            cache.keys.extend_from_slice(&kv);
            vec_mat_into(&a, block.wv.data(), d, &mut kv);
            cache.values.extend_from_slice(&kv);
            let (_, ctx) = attend(&q, &cache.keys, &cache.values, d);
            vec_mat_into(&ctx, block.wo.data(), d, &mut o);
            let h: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let b = layer_norm(&h, &block.ln_moe).y;
            let moe = moe_forward(block, &b, cfg.top_k);
            if let Some(obs) = observer.as_mut() {
                obs.record(l, &moe.routing);
            }
            x = h.iter().zip(&moe.y).map(|(a, b)| a + b).collect();
        }
        if let Some(obs) = observer.as_mut() {
            obs.token_processed();
        }
        self.len += 1;
        let f = layer_norm(&x, &model.ln_final).y;
        Ok(vec_mat(&f, model.head.data(), cfg.vocab_size))
    }
}

fn check_token(token: Token, vocab: usize) -> Result<()> {
    if token as usize >= vocab {
        return Err(Error::Input(format!(
            "token {token} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// Next-token logits for every prompt position, plus the populated cache.
#[derive(Debug, Clone)]
pub struct Prefill {
    /// One row of `vocab_size` logits per input position.
    pub logits: Vec<Vec<f64>>,
    pub cache: KvCache,
}

pub fn forward_prefill(
    model: &MoEModel,
    tokens: &[Token],
    mut observer: Option<&mut dyn RoutingObserver>,
) -> Result<Prefill> {
    let cfg = &model.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    for &t in tokens {
        check_token(t, cfg.vocab_size)?;
    }
    let mut cache = KvCache::new(model);
    let logits = tokens
        .iter()
        .map(|&t| cache.step(model, t, reborrow(&mut observer)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prefill { logits, cache })
}

fn check_decode_capacity(model: &MoEModel, prompt: &[Token], max_new: usize) -> Result<()> {
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(Error::Capacity(format!(
            "prompt {} + max_new {max_new} exceeds max_seq_len {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    if prompt.is_empty() && max_new > 0 {
        return Err(Error::Input("cannot decode from an empty prompt".into()));
    }
    Ok(())
}

/// Greedy decoding with an incrementally extended KV cache. Generation stops
/// after `max_new` tokens or when `stop` is produced; the stop token itself is
/// not included in the output.
pub fn greedy_decode(
    model: &MoEModel,
    prompt: &[Token],
    max_new: usize,
    stop: Option<Token>,
    mut observer: Option<&mut dyn RoutingObserver>,
) -> Result<Vec<Token>> {
    check_decode_capacity(model, prompt, max_new)?;
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    let Prefill { logits, mut cache } = forward_prefill(model, prompt, reborrow(&mut observer))?;
    let mut last = logits.into_iter().last().expect("non-empty prompt");
    for i in 0..max_new {
        let next = argmax(&last) as Token;
        if Some(next) == stop {
            break;
        }
        out.push(next);
        if i + 1 < max_new {
            last = cache.step(model, next, reborrow(&mut observer))?;
        }
    }
    Ok(out)
}

/// Reference decoder that re-runs the whole prefix from scratch for every new
/// token. Used to validate the cached path.
pub fn greedy_decode_uncached(
    model: &MoEModel,
    prompt: &[Token],
    max_new: usize,
    stop: Option<Token>,
) -> Result<Vec<Token>> {
    check_decode_capacity(model, prompt, max_new)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let pre = crate::model::forward_prefill(model, &seq, None)?;
        let next = argmax(pre.logits.last().expect("non-empty")) as Token;
        if Some(next) == stop {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

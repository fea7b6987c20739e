//! Training forward pass with stored activations, and its exact reverse pass.
//!
//! The forward pass runs the inference kernels in the same order as
//! [`KvCache::step`](crate::model::KvCache::step), so its logits are bitwise
//! identical to prefill. Routing selection is held fixed in the reverse
//! pass; gradients reach the router only through the softmax weights of the
//! selected experts.

use serde::{Deserialize, Serialize};

use super::task::Sample;
use super::vocab::EOS;
use crate::model::{attend, layer_norm, moe_forward, Block, ExpertWeights, LayerNorm, LnOut, MoEModel, MoeOut, ExpertOut, Token};
use crate::tensor::{dot, mat_vec_acc, outer_acc, vec_mat};

/// An input sequence with an optional next-token target per position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<Token>,
    pub targets: Vec<Option<Token>>,
}

impl Example {
    /// Teacher-forced sequence `prompt ++ gold ++ [EOS]`, supervised on the
    /// gold answer and the end-of-sequence token only.
    pub fn from_sample(s: &Sample) -> Self {
        let full: Vec<Token> = s
            .prompt
            .iter()
            .chain(&s.gold)
            .copied()
            .chain([EOS])
            .collect();
        let input = full[..full.len() - 1].to_vec();
        let targets = (0..input.len())
            .map(|t| (t + 1 >= s.prompt.len()).then(|| full[t + 1]))
            .collect();
        Self { input, targets }
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

struct LayerTrace {
    ln_attn: Vec<LnOut>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    ln_moe: Vec<LnOut>,
    moe: Vec<MoeOut>,
}

pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    ln_final: Vec<LnOut>,
    pub logits: Vec<Vec<f64>>,
}

impl Trace {
    /// Selected experts per layer and position.
    pub(crate) fn routing_signature(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.moe.iter().map(|m| m.routing.experts.clone()))
            .collect()
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub(crate) fn forward_trace(model: &MoEModel, input: &[Token]) -> Trace {
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut xs: Vec<Vec<f64>> = input
        .iter()
        .enumerate()
        .map(|(t, &tok)| add(model.embedding.row(tok as usize), model.positions.row(t)))
        .collect();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for block in &model.blocks {
        let ln_attn: Vec<LnOut> = xs.iter().map(|x| layer_norm(x, &block.ln_attn)).collect();
        let project = |w: &[f64]| -> Vec<Vec<f64>> {
            ln_attn.iter().map(|a| vec_mat(&a.y, w, d)).collect()
        };
        let (q, k, v) = (project(block.wq.data()), project(block.wk.data()), project(block.wv.data()));
        let keys = k.concat();
        let values = v.concat();
        let mut probs = Vec::with_capacity(xs.len());
        let mut ctxs = Vec::with_capacity(xs.len());
        let mut ln_moe = Vec::with_capacity(xs.len());
        let mut moe = Vec::with_capacity(xs.len());
        for (t, x) in xs.iter_mut().enumerate() {
            let (p, ctx) = attend(&q[t], &keys[..(t + 1) * d], &values[..(t + 1) * d], d);
            let o = vec_mat(&ctx, block.wo.data(), d);
            let h = add(x, &o);
            let ln = layer_norm(&h, &block.ln_moe);
            let m = moe_forward(block, &ln.y, cfg.top_k);
            *x = add(&h, &m.y);
            probs.push(p);
            ctxs.push(ctx);
            ln_moe.push(ln);
            moe.push(m);
        }
        layers.push(LayerTrace {
            ln_attn,
            q,
            k,
            v,
            probs,
            ctx: ctxs,
            ln_moe,
            moe,
        });
    }
    let ln_final: Vec<LnOut> = xs.iter().map(|x| layer_norm(x, &model.ln_final)).collect();
    let logits = ln_final
        .iter()
        .map(|f| vec_mat(&f.y, model.head.data(), cfg.vocab_size))
        .collect();
    Trace {
        layers,
        ln_final,
        logits,
    }
}

fn ln_backward(dy: &[f64], out: &LnOut, ln: &LayerNorm, grad: &mut LayerNorm) -> Vec<f64> {
    let n = dy.len() as f64;
    let gain = ln.gain.data();
    add_into(grad.bias.data_mut(), dy);
    let dxhat: Vec<f64> = dy.iter().zip(gain).map(|(d, g)| d * g).collect();
    for ((gg, d), xh) in grad.gain.data_mut().iter_mut().zip(dy).zip(&out.xhat) {
        *gg += d * xh;
    }
    let m1 = dxhat.iter().sum::<f64>() / n;
    let m2 = dot(&dxhat, &out.xhat) / n;
    dxhat
        .iter()
        .zip(&out.xhat)
        .map(|(dh, xh)| out.rstd * (dh - m1 - xh * m2))
        .collect()
}

fn silu_grad(u: f64) -> f64 {
    let s = 1.0 / (1.0 + (-u).exp());
    s * (1.0 + u * (1.0 - s))
}

fn expert_backward(
    w: &ExpertWeights,
    grad: &mut ExpertWeights,
    x: &[f64],
    out: &ExpertOut,
    dy: &[f64],
    dx: &mut [f64],
) {
    outer_acc(grad.w_out.data_mut(), &out.z, dy);
    let mut dz = vec![0.0; out.z.len()];
    mat_vec_acc(w.w_out.data(), dy, &mut dz);
    let du: Vec<f64> = dz.iter().zip(&out.u).map(|(g, &u)| g * silu_grad(u)).collect();
    outer_acc(grad.w_in.data_mut(), x, &du);
    mat_vec_acc(w.w_in.data(), &du, dx);
}

/// Gradient of the MoE sublayer w.r.t. its (normalized) input `b`.
fn moe_backward(block: &Block, grad: &mut Block, b: &[f64], moe: &MoeOut, dm: &[f64]) -> Vec<f64> {
    let mut db = vec![0.0; b.len()];
    let r = &moe.routing;
    let mut dg = Vec::with_capacity(r.experts.len());
    for ((&e, &w), out) in r.experts.iter().zip(&r.weights).zip(&moe.experts) {
        dg.push(dot(dm, &out.y));
        let dy: Vec<f64> = dm.iter().map(|v| w * v).collect();
        expert_backward(&block.experts[e], &mut grad.experts[e], b, out, &dy, &mut db);
    }
    // softmax over the selected logits
    let s: f64 = r.weights.iter().zip(&dg).map(|(w, g)| w * g).sum();
    let num_experts = block.router.cols();
    let router = block.router.data();
    let grouter = grad.router.data_mut();
    for ((&e, &w), &g) in r.experts.iter().zip(&r.weights).zip(&dg) {
        let dr = w * (g - s);
        for (j, (&bj, dbj)) in b.iter().zip(db.iter_mut()).enumerate() {
            grouter[j * num_experts + e] += bj * dr;
            *dbj += router[j * num_experts + e] * dr;
        }
    }
    if let (Some(w), Some(gw), Some(out)) = (&block.shared_expert, &mut grad.shared_expert, &moe.shared) {
        expert_backward(w, gw, b, out, dm, &mut db);
    }
    db
}

/// Accumulates parameter gradients into `grad` given `dlogits` per position.
pub(crate) fn backward(
    model: &MoEModel,
    input: &[Token],
    trace: &Trace,
    dlogits: &[Option<Vec<f64>>],
    grad: &mut MoEModel,
) {
    let d = model.config.d_model;
    let n = input.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dx = vec![vec![0.0; d]; n];
    for (t, dl) in dlogits.iter().enumerate() {
        let Some(dl) = dl else { continue };
        outer_acc(grad.head.data_mut(), &trace.ln_final[t].y, dl);
        let mut df = vec![0.0; d];
        mat_vec_acc(model.head.data(), dl, &mut df);
        dx[t] = ln_backward(&df, &trace.ln_final[t], &model.ln_final, &mut grad.ln_final);
    }
    for ((block, gblock), lt) in model
        .blocks
        .iter()
        .zip(grad.blocks.iter_mut())
        .zip(&trace.layers)
        .rev()
    {
        // x_out = h + moe(ln(h))
        let mut dh = dx.clone();
        for t in 0..n {
            let db = moe_backward(block, gblock, &lt.ln_moe[t].y, &lt.moe[t], &dx[t]);
            let back = ln_backward(&db, &lt.ln_moe[t], &block.ln_moe, &mut gblock.ln_moe);
            add_into(&mut dh[t], &back);
        }
        // h = x + attend(ln(x)) · wo
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for t in 0..n {
            outer_acc(gblock.wo.data_mut(), &lt.ctx[t], &dh[t]);
            let mut dctx = vec![0.0; d];
            mat_vec_acc(block.wo.data(), &dh[t], &mut dctx);
            let probs = &lt.probs[t];
            let dalpha: Vec<f64> = (0..=t).map(|j| dot(&dctx, &lt.v[j])).collect();
            let s: f64 = probs.iter().zip(&dalpha).map(|(p, g)| p * g).sum();
            for j in 0..=t {
                for (dvi, c) in dv[j].iter_mut().zip(&dctx) {
                    *dvi += probs[j] * c;
                }
                let ds = probs[j] * (dalpha[j] - s) * scale;
                for (dqi, ki) in dq[t].iter_mut().zip(&lt.k[j]) {
                    *dqi += ds * ki;
                }
                for (dki, qi) in dk[j].iter_mut().zip(&lt.q[t]) {
                    *dki += ds * qi;
                }
            }
        }
        for t in 0..n {
            let a = &lt.ln_attn[t].y;
            outer_acc(gblock.wq.data_mut(), a, &dq[t]);
            outer_acc(gblock.wk.data_mut(), a, &dk[t]);
            outer_acc(gblock.wv.data_mut(), a, &dv[t]);
            let mut da = vec![0.0; d];
            mat_vec_acc(block.wq.data(), &dq[t], &mut da);
            mat_vec_acc(block.wk.data(), &dk[t], &mut da);
            mat_vec_acc(block.wv.data(), &dv[t], &mut da);
            let back = ln_backward(&da, &lt.ln_attn[t], &block.ln_attn, &mut gblock.ln_attn);
            add_into(&mut dh[t], &back);
        }
        dx = dh;
    }
    for (t, (&tok, g)) in input.iter().zip(&dx).enumerate() {
        add_into(grad.embedding.row_mut(tok as usize), g);
        add_into(grad.positions.row_mut(t), g);
    }
}

fn log_softmax_at(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / z).collect();
    (logits[target] - max - z.ln(), probs)
}

/// Mean cross-entropy over every supervised position of the batch.
pub fn batch_loss(model: &MoEModel, batch: &[Example]) -> f64 {
    let count: usize = batch.iter().map(Example::target_count).sum();
    let mut total = 0.0;
    for (ex, run) in batch.iter().zip(batch_logits(model, batch)) {
        for (logits, target) in run.logits.iter().zip(&ex.targets) {
            if let Some(t) = target {
                total -= log_softmax_at(logits, *t as usize).0;
            }
        }
    }
    total / count.max(1) as f64
}

/// Logits and routing decisions of one sequence.
pub(crate) struct SequenceRun {
    pub logits: Vec<Vec<f64>>,
    pub routes: Vec<Vec<usize>>,
}

pub(crate) fn batch_logits(model: &MoEModel, batch: &[Example]) -> Vec<SequenceRun> {
    batch
        .iter()
        .map(|ex| {
            let trace = forward_trace(model, &ex.input);
            SequenceRun {
                routes: trace.routing_signature(),
                logits: trace.logits,
            }
        })
        .collect()
}

/// Mean cross-entropy and its gradient w.r.t. every parameter.
pub fn loss_and_grad(model: &MoEModel, batch: &[Example]) -> (f64, MoEModel) {
    let count = batch.iter().map(Example::target_count).sum::<usize>().max(1) as f64;
    let mut grad = model.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let trace = forward_trace(model, &ex.input);
        let dlogits: Vec<Option<Vec<f64>>> = trace
            .logits
            .iter()
            .zip(&ex.targets)
            .map(|(logits, target)| {
                target.map(|t| {
                    let (lp, mut probs) = log_softmax_at(logits, t as usize);
                    total -= lp;
                    probs[t as usize] -= 1.0;
                    probs.iter().map(|p| p / count).collect()
                })
            })
            .collect();
        backward(model, &ex.input, &trace, &dlogits, &mut grad);
    }
    (total / count, grad)
}

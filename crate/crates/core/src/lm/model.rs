//! Transformer forward/backward and the AR/NAR batch formats and losses.
//!
//! Backprop is explicit: every block caches what its backward pass needs.
//! Visibility is always a contiguous per-row prefix — prompt rows see the
//! prompt, pair rows see the prompt plus pairs up to themselves, NAR rows see
//! everything — so no mask tensor is materialized.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::CodeId;
use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{accumulate_nt, axpy, dot, matmul_nn, matmul_nt, ParamStore, Tensor};
use super::{BlockP, LayerNormP, LinearP, LmConfig, LmWeights, QUANT_LAYERS};

const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// One AR training sequence: prompt phonemes, then the block-rate pair stream.
#[derive(Debug, Clone)]
pub struct ArBatch {
    pub prompt: Vec<PhonemeId>,
    /// Block-rate layer-1 codes a^1 (merged).
    pub acoustic: Vec<CodeId>,
    /// Block-rate aligned phonemes, same length as `acoustic`.
    pub aligned: Vec<PhonemeId>,
}

impl ArBatch {
    pub fn validate(&self, config: &LmConfig) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::invalid("AR batch needs a non-empty prompt"));
        }
        if self.acoustic.len() != self.aligned.len() {
            return Err(Error::invalid(format!(
                "acoustic stream length {} != aligned phoneme length {}",
                self.acoustic.len(),
                self.aligned.len()
            )));
        }
        if self.acoustic.is_empty() {
            return Err(Error::invalid("AR batch needs at least one pair"));
        }
        let n = self.seq_len();
        if n > config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {n} exceeds max_seq {}",
                config.max_seq
            )));
        }
        if self.prompt.iter().any(|&p| p >= config.p_bos()) {
            return Err(Error::invalid("prompt phoneme id out of range"));
        }
        let a_limit = config.acoustic_tokens() as CodeId;
        let p_limit = config.phoneme_tokens() as PhonemeId;
        if self.acoustic.iter().any(|&a| a >= a_limit)
            || self.aligned.iter().any(|&p| p >= p_limit)
        {
            return Err(Error::invalid("pair-stream token out of range"));
        }
        Ok(())
    }

    /// Number of predicted steps (pairs plus the trailing EOS step).
    pub fn steps(&self) -> usize {
        self.acoustic.len() + 1
    }

    /// Total transformer positions: prompt + BOS pair + pairs.
    pub fn seq_len(&self) -> usize {
        self.prompt.len() + self.acoustic.len() + 1
    }
}

/// One NAR training sequence at the full frame rate.
#[derive(Debug, Clone)]
pub struct NarBatch {
    pub aligned: Vec<PhonemeId>,
    /// Conditioning codes for layers 1..n-1 (outer index = layer - 1).
    pub context: Vec<Vec<CodeId>>,
    /// Target quantizer layer n in [2, 8].
    pub target_layer: usize,
    pub targets: Vec<CodeId>,
}

impl NarBatch {
    pub fn validate(&self, config: &LmConfig) -> Result<()> {
        if !(2..=QUANT_LAYERS).contains(&self.target_layer) {
            return Err(Error::invalid(format!(
                "NAR target layer {} not in [2, {QUANT_LAYERS}]",
                self.target_layer
            )));
        }
        let t = self.aligned.len();
        if t == 0 {
            return Err(Error::invalid("NAR batch needs at least one frame"));
        }
        if t > config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence length {t} exceeds max_seq {}",
                config.max_seq
            )));
        }
        if self.context.len() != self.target_layer - 1 {
            return Err(Error::invalid(format!(
                "NAR context has {} layers, expected {}",
                self.context.len(),
                self.target_layer - 1
            )));
        }
        if self.context.iter().any(|row| row.len() != t) || self.targets.len() != t {
            return Err(Error::invalid("NAR stream lengths differ"));
        }
        let k = config.acoustic_k as CodeId;
        if self.context.iter().flatten().any(|&c| c >= k) {
            return Err(Error::invalid("NAR context code out of range"));
        }
        let p_limit = config.phoneme_tokens() as PhonemeId;
        if self.aligned.iter().any(|&p| p >= p_limit) {
            return Err(Error::invalid("NAR aligned phoneme out of range"));
        }
        // Targets may contain PAD (excluded from the loss) but nothing else
        // outside the code range.
        if self.targets.iter().any(|&c| c >= k && c != config.a_pad()) {
            return Err(Error::invalid("NAR target code out of range"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

fn apply_dropout<S: Scalar>(x: &mut Tensor<S>, drop: &mut Option<Dropout<'_>>) -> Option<Vec<S>> {
    match drop {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let scale = S::from_f64(1.0 / keep);
            let mask: Vec<S> = x
                .data
                .iter_mut()
                .map(|v| {
                    if d.rng.random::<f64>() < keep {
                        *v = *v * scale;
                        scale
                    } else {
                        *v = S::zero();
                        S::zero()
                    }
                })
                .collect();
            Some(mask)
        }
        _ => None,
    }
}

fn backprop_dropout<S: Scalar>(dy: &mut Tensor<S>, mask: &Option<Vec<S>>) {
    if let Some(m) = mask {
        for (g, &f) in dy.data.iter_mut().zip(m) {
            *g = *g * f;
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive layers
// ---------------------------------------------------------------------------

struct LnCache<S: Scalar> {
    normed: Tensor<S>,
    rstd: Vec<S>,
}

fn layernorm_forward<S: Scalar>(
    store: &ParamStore<S>,
    ln: &LayerNormP,
    x: &Tensor<S>,
) -> (Tensor<S>, LnCache<S>) {
    let dim = x.cols;
    let gain = store.value(ln.gain);
    let bias = store.value(ln.bias);
    let mut out = Tensor::zeros(x.rows, dim);
    let mut normed = Tensor::zeros(x.rows, dim);
    let mut rstd = vec![S::zero(); x.rows];
    let inv_dim = S::from_usize(dim).recip();
    let eps = S::from_f64(LN_EPS);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() * inv_dim;
        let var = row
            .iter()
            .map(|&v| {
                let d = v - mean;
                d * d
            })
            .sum::<S>()
            * inv_dim;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        let n = normed.row_mut(r);
        let o = out.row_mut(r);
        for j in 0..dim {
            n[j] = (row[j] - mean) * rs;
            o[j] = n[j] * gain.row(0)[j] + bias.row(0)[j];
        }
    }
    (out, LnCache { normed, rstd })
}

fn layernorm_backward<S: Scalar>(
    store: &mut ParamStore<S>,
    ln: &LayerNormP,
    cache: &LnCache<S>,
    dy: &Tensor<S>,
) -> Tensor<S> {
    let dim = dy.cols;
    let inv_dim = S::from_usize(dim).recip();
    let mut dx = Tensor::zeros(dy.rows, dim);
    {
        let gain = store.value(ln.gain).clone();
        for r in 0..dy.rows {
            let dyr = dy.row(r);
            let n = cache.normed.row(r);
            // dnormed = dy * gain
            let mut sum_dn = S::zero();
            let mut sum_dn_n = S::zero();
            let mut dn = vec![S::zero(); dim];
            for j in 0..dim {
                dn[j] = dyr[j] * gain.row(0)[j];
                sum_dn += dn[j];
                sum_dn_n += dn[j] * n[j];
            }
            let rs = cache.rstd[r];
            let dxr = dx.row_mut(r);
            for j in 0..dim {
                dxr[j] = rs * (dn[j] - sum_dn * inv_dim - n[j] * (sum_dn_n * inv_dim));
            }
        }
    }
    {
        let dgain = store.grad_mut(ln.gain);
        for r in 0..dy.rows {
            for j in 0..dim {
                dgain.data[j] += dy.row(r)[j] * cache.normed.row(r)[j];
            }
        }
    }
    {
        let dbias = store.grad_mut(ln.bias);
        for r in 0..dy.rows {
            for j in 0..dim {
                dbias.data[j] += dy.row(r)[j];
            }
        }
    }
    dx
}

fn linear_forward<S: Scalar>(store: &ParamStore<S>, lin: &LinearP, x: &Tensor<S>) -> Tensor<S> {
    matmul_nt(x, store.value(lin.w), lin.b.map(|b| store.value(b)))
}

fn linear_backward<S: Scalar>(
    store: &mut ParamStore<S>,
    lin: &LinearP,
    x: &Tensor<S>,
    dy: &Tensor<S>,
) -> Tensor<S> {
    let dx = matmul_nn(dy, store.value(lin.w));
    accumulate_nt(store.grad_mut(lin.w), dy, x);
    if let Some(b) = lin.b {
        let db = store.grad_mut(b);
        for r in 0..dy.rows {
            for (g, &v) in db.data.iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Visibility
// ---------------------------------------------------------------------------

/// Per-row attention span. Every row sees a contiguous prefix of columns.
#[derive(Debug, Clone, Copy)]
pub enum Visibility {
    /// Prompt rows see the whole prompt; later rows see everything up to self.
    PromptCausal { prompt_len: usize },
    /// Unmasked self-attention.
    Full,
}

impl Visibility {
    #[inline]
    fn end(&self, row: usize, n: usize) -> usize {
        match *self {
            Visibility::Full => n,
            Visibility::PromptCausal { prompt_len } => {
                if row < prompt_len {
                    prompt_len
                } else {
                    row + 1
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer core
// ---------------------------------------------------------------------------

struct BlockCache<S: Scalar> {
    ln1: LnCache<S>,
    /// ln1 output (input to the q/k/v projections).
    h1: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// Row i holds heads blocks of n attention probabilities.
    probs: Tensor<S>,
    ctx: Tensor<S>,
    attn_mask: Option<Vec<S>>,
    ln2: LnCache<S>,
    /// ln2 output (input to ff1).
    h2: Tensor<S>,
    ff_pre: Tensor<S>,
    ff_act: Tensor<S>,
    ffn_mask: Option<Vec<S>>,
}

struct CoreCache<S: Scalar> {
    input_mask: Option<Vec<S>>,
    blocks: Vec<BlockCache<S>>,
    final_ln: LnCache<S>,
}

fn attention_forward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    vis: Visibility,
) -> (Tensor<S>, Tensor<S>) {
    let n = q.rows;
    let dim = q.cols;
    let dh = dim / heads;
    let inv = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = Tensor::zeros(n, dim);
    let mut probs = Tensor::zeros(n, heads * n);

    let row_job = |i: usize, ctx_row: &mut [S], probs_row: &mut [S]| {
        let end = vis.end(i, n);
        for h in 0..heads {
            let qh = &q.row(i)[h * dh..(h + 1) * dh];
            let p = &mut probs_row[h * n..h * n + end];
            let mut maxv = S::neg_infinity();
            for (j, slot) in p.iter_mut().enumerate() {
                let kh = &k.row(j)[h * dh..(h + 1) * dh];
                let s = dot(qh, kh) * inv;
                *slot = s;
                if s > maxv {
                    maxv = s;
                }
            }
            let mut denom = S::zero();
            for slot in p.iter_mut() {
                *slot = (*slot - maxv).exp();
                denom += *slot;
            }
            let rdenom = denom.recip();
            let ctx_h = &mut ctx_row[h * dh..(h + 1) * dh];
            for (j, slot) in p.iter_mut().enumerate() {
                *slot = *slot * rdenom;
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                axpy(*slot, vh, ctx_h);
            }
        }
    };

    if n >= 48 {
        ctx.data
            .par_chunks_mut(dim)
            .zip(probs.data.par_chunks_mut(heads * n))
            .enumerate()
            .for_each(|(i, (c, p))| row_job(i, c, p));
    } else {
        for i in 0..n {
            let c = &mut ctx.data[i * dim..(i + 1) * dim];
            let p = &mut probs.data[i * heads * n..(i + 1) * heads * n];
            row_job(i, c, p);
        }
    }
    (ctx, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    probs: &Tensor<S>,
    dctx: &Tensor<S>,
    heads: usize,
    vis: Visibility,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let n = q.rows;
    let dim = q.cols;
    let dh = dim / heads;
    let inv = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(n, dim);
    let mut dk = Tensor::zeros(n, dim);
    let mut dv = Tensor::zeros(n, dim);

    for i in 0..n {
        let end = vis.end(i, n);
        for h in 0..heads {
            let p = &probs.row(i)[h * n..h * n + end];
            let dctx_h = &dctx.row(i)[h * dh..(h + 1) * dh];
            // dprobs and the softmax Jacobian contraction.
            let mut dp = vec![S::zero(); end];
            let mut inner = S::zero();
            for j in 0..end {
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                dp[j] = dot(dctx_h, vh);
                inner += dp[j] * p[j];
            }
            let qh: Vec<S> = q.row(i)[h * dh..(h + 1) * dh].to_vec();
            let mut dqh = vec![S::zero(); dh];
            for j in 0..end {
                let ds = p[j] * (dp[j] - inner) * inv;
                // dv_h[j] += p[j] * dctx_h
                axpy(p[j], dctx_h, &mut dv.row_mut(j)[h * dh..(h + 1) * dh]);
                if ds != S::zero() {
                    let kh = &k.row(j)[h * dh..(h + 1) * dh];
                    axpy(ds, kh, &mut dqh);
                    axpy(ds, &qh, &mut dk.row_mut(j)[h * dh..(h + 1) * dh]);
                }
            }
            for (slot, g) in dq.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(dqh) {
                *slot += g;
            }
        }
    }
    (dq, dk, dv)
}

fn core_forward<S: Scalar>(
    store: &ParamStore<S>,
    blocks: &[BlockP],
    final_ln: &LayerNormP,
    heads: usize,
    mut x: Tensor<S>,
    vis: Visibility,
    drop: &mut Option<Dropout<'_>>,
) -> (Tensor<S>, CoreCache<S>) {
    let input_mask = apply_dropout(&mut x, drop);
    let mut caches = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (h1, ln1) = layernorm_forward(store, &block.ln1, &x);
        let q = linear_forward(store, &block.wq, &h1);
        let k = linear_forward(store, &block.wk, &h1);
        let v = linear_forward(store, &block.wv, &h1);
        let (ctx, probs) = attention_forward(&q, &k, &v, heads, vis);
        let mut attn = linear_forward(store, &block.wo, &ctx);
        let attn_mask = apply_dropout(&mut attn, drop);
        let mut x_mid = x;
        for (a, b) in x_mid.data.iter_mut().zip(&attn.data) {
            *a += *b;
        }
        let (h2, ln2) = layernorm_forward(store, &block.ln2, &x_mid);
        let ff_pre = linear_forward(store, &block.ff1, &h2);
        let mut ff_act = ff_pre.clone();
        for a in ff_act.data.iter_mut() {
            *a = gelu(*a);
        }
        let mut ff_out = linear_forward(store, &block.ff2, &ff_act);
        let ffn_mask = apply_dropout(&mut ff_out, drop);
        let mut x_out = x_mid;
        for (a, b) in x_out.data.iter_mut().zip(&ff_out.data) {
            *a += *b;
        }
        caches.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln2,
            h2,
            ff_pre,
            ff_act,
            ffn_mask,
        });
        x = x_out;
    }
    let (h, fln) = layernorm_forward(store, final_ln, &x);
    (
        h,
        CoreCache {
            input_mask,
            blocks: caches,
            final_ln: fln,
        },
    )
}

fn core_backward<S: Scalar>(
    store: &mut ParamStore<S>,
    blocks: &[BlockP],
    final_ln: &LayerNormP,
    heads: usize,
    cache: &CoreCache<S>,
    dh_final: &Tensor<S>,
    vis: Visibility,
) -> Tensor<S> {
    let mut dx = layernorm_backward(store, final_ln, &cache.final_ln, dh_final);
    for (block, bc) in blocks.iter().zip(&cache.blocks).rev() {
        // FFN branch.
        let mut dff_out = dx.clone();
        backprop_dropout(&mut dff_out, &bc.ffn_mask);
        let mut dff_act = linear_backward(store, &block.ff2, &bc.ff_act, &dff_out);
        for (g, &pre) in dff_act.data.iter_mut().zip(&bc.ff_pre.data) {
            *g = *g * gelu_grad(pre);
        }
        let dh2 = linear_backward(store, &block.ff1, &bc.h2, &dff_act);
        let dx_mid_from_ln2 = layernorm_backward(store, &block.ln2, &bc.ln2, &dh2);
        let mut dx_mid = dx; // residual path
        for (a, b) in dx_mid.data.iter_mut().zip(&dx_mid_from_ln2.data) {
            *a += *b;
        }

        // Attention branch.
        let mut dattn = dx_mid.clone();
        backprop_dropout(&mut dattn, &bc.attn_mask);
        let dctx = linear_backward(store, &block.wo, &bc.ctx, &dattn);
        let (dq, dk, dv) = attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, &dctx, heads, vis);
        let mut dh1 = linear_backward(store, &block.wq, &bc.h1, &dq);
        let dh1_k = linear_backward(store, &block.wk, &bc.h1, &dk);
        let dh1_v = linear_backward(store, &block.wv, &bc.h1, &dv);
        for ((a, b), c) in dh1.data.iter_mut().zip(&dh1_k.data).zip(&dh1_v.data) {
            *a = *a + *b + *c;
        }
        let dx_from_ln1 = layernorm_backward(store, &block.ln1, &bc.ln1, &dh1);
        for (a, b) in dx_mid.data.iter_mut().zip(&dx_from_ln1.data) {
            *a += *b;
        }
        dx = dx_mid;
    }
    backprop_dropout(&mut dx, &cache.input_mask);
    dx
}

// ---------------------------------------------------------------------------
// Input assembly
// ---------------------------------------------------------------------------

/// Assemble the AR input matrix: prompt rows then pair rows.
/// Pair j's input is acoustic(a_{j-1}) + phoneme(p_{j-1}) + position.
pub fn assemble_ar_input<S: Scalar>(w: &LmWeights<S>, batch: &ArBatch) -> Result<Tensor<S>> {
    let ar = w.ar()?;
    let config = &w.config;
    batch.validate(config)?;
    let p_len = batch.prompt.len();
    let n = batch.seq_len();
    let dim = config.dim;
    let mut x = Tensor::zeros(n, dim);
    let phon = w.store.value(ar.phoneme_emb);
    let acou = w.store.value(ar.acoustic_emb);
    let pos = w.store.value(ar.pos_emb);
    for (i, &p) in batch.prompt.iter().enumerate() {
        let row = x.row_mut(i);
        for j in 0..dim {
            row[j] = phon.row(p as usize)[j] + pos.row(i)[j];
        }
    }
    for s in 0..batch.acoustic.len() + 1 {
        let (a_tok, p_tok) = if s == 0 {
            (config.a_bos(), config.p_bos())
        } else {
            (batch.acoustic[s - 1], batch.aligned[s - 1])
        };
        let row = x.row_mut(p_len + s);
        for j in 0..dim {
            row[j] = acou.row(a_tok as usize)[j]
                + phon.row(p_tok as usize)[j]
                + pos.row(p_len + s)[j];
        }
    }
    Ok(x)
}

fn scatter_ar_input_grads<S: Scalar>(w: &mut LmWeights<S>, batch: &ArBatch, dx: &Tensor<S>) {
    let ar = w.ar().unwrap().clone();
    let p_len = batch.prompt.len();
    let dim = w.config.dim;
    let (a_bos, p_bos) = (w.config.a_bos(), w.config.p_bos());
    let store = &mut w.store;
    for (i, &p) in batch.prompt.iter().enumerate() {
        let dxr: Vec<S> = dx.row(i).to_vec();
        axpy(S::one(), &dxr, &mut store.grad_mut(ar.phoneme_emb).row_mut(p as usize)[..dim]);
        axpy(S::one(), &dxr, &mut store.grad_mut(ar.pos_emb).row_mut(i)[..dim]);
    }
    for s in 0..batch.acoustic.len() + 1 {
        let (a_tok, p_tok) = if s == 0 {
            (a_bos, p_bos)
        } else {
            (batch.acoustic[s - 1], batch.aligned[s - 1])
        };
        let dxr: Vec<S> = dx.row(p_len + s).to_vec();
        axpy(S::one(), &dxr, &mut store.grad_mut(ar.acoustic_emb).row_mut(a_tok as usize)[..dim]);
        axpy(S::one(), &dxr, &mut store.grad_mut(ar.phoneme_emb).row_mut(p_tok as usize)[..dim]);
        axpy(S::one(), &dxr, &mut store.grad_mut(ar.pos_emb).row_mut(p_len + s)[..dim]);
    }
}

/// Assemble the NAR input matrix: per frame, aligned phoneme + position +
/// sum of lower-layer code embeddings + target-layer indicator.
pub fn assemble_nar_input<S: Scalar>(w: &LmWeights<S>, batch: &NarBatch) -> Result<Tensor<S>> {
    let nar = w.nar()?;
    let config = &w.config;
    batch.validate(config)?;
    let t = batch.aligned.len();
    let dim = config.dim;
    let mut x = Tensor::zeros(t, dim);
    let phon = w.store.value(nar.phoneme_emb);
    let pos = w.store.value(nar.pos_emb);
    let layer_emb = w.store.value(nar.layer_idx_emb);
    let layer_row = batch.target_layer - 2;
    for i in 0..t {
        let row = x.row_mut(i);
        for j in 0..dim {
            row[j] = phon.row(batch.aligned[i] as usize)[j]
                + pos.row(i)[j]
                + layer_emb.row(layer_row)[j];
        }
    }
    for (layer, codes) in batch.context.iter().enumerate() {
        let table = w.store.value(nar.acoustic_embs[layer]);
        for i in 0..t {
            let row = x.row_mut(i);
            for j in 0..dim {
                row[j] += table.row(codes[i] as usize)[j];
            }
        }
    }
    Ok(x)
}

fn scatter_nar_input_grads<S: Scalar>(w: &mut LmWeights<S>, batch: &NarBatch, dx: &Tensor<S>) {
    let nar = w.nar().unwrap().clone();
    let dim = w.config.dim;
    let layer_row = batch.target_layer - 2;
    let store = &mut w.store;
    for i in 0..batch.aligned.len() {
        let dxr: Vec<S> = dx.row(i).to_vec();
        axpy(
            S::one(),
            &dxr,
            &mut store.grad_mut(nar.phoneme_emb).row_mut(batch.aligned[i] as usize)[..dim],
        );
        axpy(S::one(), &dxr, &mut store.grad_mut(nar.pos_emb).row_mut(i)[..dim]);
        axpy(
            S::one(),
            &dxr,
            &mut store.grad_mut(nar.layer_idx_emb).row_mut(layer_row)[..dim],
        );
        for (layer, codes) in batch.context.iter().enumerate() {
            axpy(
                S::one(),
                &dxr,
                &mut store
                    .grad_mut(nar.acoustic_embs[layer])
                    .row_mut(codes[i] as usize)[..dim],
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Heads and losses
// ---------------------------------------------------------------------------

/// Per-step logits for both AR heads.
#[derive(Debug, Clone)]
pub struct ArLogits<S: Scalar> {
    pub acoustic: Tensor<S>,
    pub phoneme: Tensor<S>,
}

/// Forward pass (eval mode). Logit rows cover the pair stream: row s predicts
/// step s+1's pair; the last row predicts EOS.
pub fn ar_forward<S: Scalar>(w: &LmWeights<S>, batch: &ArBatch) -> Result<ArLogits<S>> {
    let (h, _cache) = ar_core(w, batch, &mut None)?;
    Ok(ar_heads(w, batch, &h))
}

fn ar_core<S: Scalar>(
    w: &LmWeights<S>,
    batch: &ArBatch,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Tensor<S>, CoreCache<S>)> {
    let ar = w.ar()?;
    let x = assemble_ar_input(w, batch)?;
    let vis = Visibility::PromptCausal {
        prompt_len: batch.prompt.len(),
    };
    Ok(core_forward(
        &w.store,
        &ar.blocks,
        &ar.final_ln,
        w.config.heads,
        x,
        vis,
        drop,
    ))
}

fn ar_heads<S: Scalar>(w: &LmWeights<S>, batch: &ArBatch, h: &Tensor<S>) -> ArLogits<S> {
    let ar = w.ar().unwrap();
    let p_len = batch.prompt.len();
    let steps = batch.steps();
    let dim = w.config.dim;
    let mut h_pairs = Tensor::zeros(steps, dim);
    for s in 0..steps {
        h_pairs.row_mut(s).copy_from_slice(h.row(p_len + s));
    }
    let acoustic = matmul_nt(&h_pairs, w.store.value(ar.acoustic_head), None);
    let phoneme = matmul_nt(&h_pairs, w.store.value(ar.phoneme_head), None);
    ArLogits { acoustic, phoneme }
}

/// Loss components: total = acoustic + lambda * phoneme, means over non-PAD targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub acoustic: f64,
    pub phoneme: f64,
    pub acoustic_count: usize,
    pub phoneme_count: usize,
}

/// Softmax rows; returns probabilities.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut probs = logits.clone();
    for r in 0..probs.rows {
        let row = probs.row_mut(r);
        let mut maxv = S::neg_infinity();
        for &v in row.iter() {
            if v > maxv {
                maxv = v;
            }
        }
        let mut denom = S::zero();
        for v in row.iter_mut() {
            *v = (*v - maxv).exp();
            denom += *v;
        }
        let r = denom.recip();
        for v in row.iter_mut() {
            *v = *v * r;
        }
    }
    probs
}

/// Mean cross-entropy over non-PAD targets.
/// Returns (mean, count, probs) so callers can build gradients.
fn masked_ce<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[u16],
    pad: u16,
) -> Result<(f64, usize, Tensor<S>)> {
    assert_eq!(logits.rows, targets.len());
    let probs = softmax_rows(logits);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        let p = probs.row(r)[t as usize].as_f64();
        // A non-finite probability must surface as a non-finite loss rather
        // than being clamped away; training treats that as divergence.
        let p = if p.is_finite() { p.max(1e-300) } else { f64::NAN };
        sum -= p.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((sum / count as f64, count, probs))
}

/// dlogits for the mean CE above, scaled by `scale / count`.
fn ce_grad<S: Scalar>(probs: &Tensor<S>, targets: &[u16], pad: u16, count: usize, scale: f64) -> Tensor<S> {
    let mut d = probs.clone();
    let f = S::from_f64(scale / count as f64);
    for (r, &t) in targets.iter().enumerate() {
        let row = d.row_mut(r);
        if t == pad {
            for v in row.iter_mut() {
                *v = S::zero();
            }
        } else {
            row[t as usize] -= S::one();
            for v in row.iter_mut() {
                *v = *v * f;
            }
        }
    }
    d
}

/// Teacher-forcing targets for an AR batch: the pair stream shifted by one,
/// closed with an EOS step.
pub fn ar_targets(config: &LmConfig, batch: &ArBatch) -> (Vec<CodeId>, Vec<PhonemeId>) {
    let mut a: Vec<CodeId> = batch.acoustic.clone();
    a.push(config.a_eos());
    let mut p: Vec<PhonemeId> = batch.aligned.clone();
    p.push(config.p_eos());
    (a, p)
}

/// The AR loss on given logits: mean acoustic CE + lambda * mean phoneme CE.
pub fn ar_loss_from_logits<S: Scalar>(
    config: &LmConfig,
    logits: &ArLogits<S>,
    batch: &ArBatch,
    lambda: f64,
) -> Result<LossParts> {
    let (a_targets, p_targets) = ar_targets(config, batch);
    let (a_mean, a_count, _) = masked_ce(&logits.acoustic, &a_targets, config.a_pad())?;
    let (p_mean, p_count, _) = masked_ce(&logits.phoneme, &p_targets, config.p_pad())?;
    Ok(LossParts {
        total: a_mean + lambda * p_mean,
        acoustic: a_mean,
        phoneme: p_mean,
        acoustic_count: a_count,
        phoneme_count: p_count,
    })
}

/// Eval-mode forward + loss (the quantity the gradient check differentiates).
pub fn ar_loss_value<S: Scalar>(w: &LmWeights<S>, batch: &ArBatch, lambda: f64) -> Result<LossParts> {
    let logits = ar_forward(w, batch)?;
    ar_loss_from_logits(&w.config, &logits, batch, lambda)
}

/// Forward + backward; accumulates parameter gradients into the store.
pub fn ar_train_step<S: Scalar>(
    w: &mut LmWeights<S>,
    batch: &ArBatch,
    lambda: f64,
    mut drop: Option<Dropout<'_>>,
) -> Result<LossParts> {
    let (h, cache) = ar_core(w, batch, &mut drop)?;
    let logits = ar_heads(w, batch, &h);
    let config = w.config.clone();
    let (a_targets, p_targets) = ar_targets(&config, batch);
    let (a_mean, a_count, a_probs) = masked_ce(&logits.acoustic, &a_targets, config.a_pad())?;
    let (p_mean, p_count, p_probs) = masked_ce(&logits.phoneme, &p_targets, config.p_pad())?;
    let da = ce_grad(&a_probs, &a_targets, config.a_pad(), a_count, 1.0);
    let dp = ce_grad(&p_probs, &p_targets, config.p_pad(), p_count, lambda);

    // Heads: logits = h_pairs * W^T, so dW += d^T h_pairs, dh_pairs = d * W.
    let ar = w.ar()?.clone();
    let p_len = batch.prompt.len();
    let steps = batch.steps();
    let dim = config.dim;
    let mut h_pairs = Tensor::zeros(steps, dim);
    for s in 0..steps {
        h_pairs.row_mut(s).copy_from_slice(h.row(p_len + s));
    }
    let mut dh_pairs = matmul_nn(&da, w.store.value(ar.acoustic_head));
    let dh_p = matmul_nn(&dp, w.store.value(ar.phoneme_head));
    for (a, b) in dh_pairs.data.iter_mut().zip(&dh_p.data) {
        *a += *b;
    }
    accumulate_nt(w.store.grad_mut(ar.acoustic_head), &da, &h_pairs);
    accumulate_nt(w.store.grad_mut(ar.phoneme_head), &dp, &h_pairs);

    let mut dh = Tensor::zeros(h.rows, dim);
    for s in 0..steps {
        dh.row_mut(p_len + s).copy_from_slice(dh_pairs.row(s));
    }
    let vis = Visibility::PromptCausal { prompt_len: p_len };
    let dx = core_backward(
        &mut w.store,
        &ar.blocks,
        &ar.final_ln,
        config.heads,
        &cache,
        &dh,
        vis,
    );
    scatter_ar_input_grads(w, batch, &dx);
    Ok(LossParts {
        total: a_mean + lambda * p_mean,
        acoustic: a_mean,
        phoneme: p_mean,
        acoustic_count: a_count,
        phoneme_count: p_count,
    })
}

/// NAR forward (eval): per-frame logits for the batch's target layer.
pub fn nar_forward<S: Scalar>(w: &LmWeights<S>, batch: &NarBatch) -> Result<Tensor<S>> {
    let (h, _cache) = nar_core(w, batch, &mut None)?;
    Ok(nar_head(w, batch, &h))
}

fn nar_core<S: Scalar>(
    w: &LmWeights<S>,
    batch: &NarBatch,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Tensor<S>, CoreCache<S>)> {
    let nar = w.nar()?;
    let x = assemble_nar_input(w, batch)?;
    Ok(core_forward(
        &w.store,
        &nar.blocks,
        &nar.final_ln,
        w.config.heads,
        x,
        Visibility::Full,
        drop,
    ))
}

fn nar_head<S: Scalar>(w: &LmWeights<S>, batch: &NarBatch, h: &Tensor<S>) -> Tensor<S> {
    let nar = w.nar().unwrap();
    let head = nar.heads[batch.target_layer - 2];
    matmul_nt(h, w.store.value(head), None)
}

pub fn nar_loss_value<S: Scalar>(w: &LmWeights<S>, batch: &NarBatch) -> Result<LossParts> {
    let logits = nar_forward(w, batch)?;
    let (mean, count, _) = masked_ce(&logits, &batch.targets, w.config.a_pad())?;
    Ok(LossParts {
        total: mean,
        acoustic: mean,
        phoneme: 0.0,
        acoustic_count: count,
        phoneme_count: 0,
    })
}

pub fn nar_train_step<S: Scalar>(
    w: &mut LmWeights<S>,
    batch: &NarBatch,
    mut drop: Option<Dropout<'_>>,
) -> Result<LossParts> {
    let (h, cache) = nar_core(w, batch, &mut drop)?;
    let logits = nar_head(w, batch, &h);
    let config = w.config.clone();
    let (mean, count, probs) = masked_ce(&logits, &batch.targets, config.a_pad())?;
    let dlogits = ce_grad(&probs, &batch.targets, config.a_pad(), count, 1.0);

    let nar = w.nar()?.clone();
    let head = nar.heads[batch.target_layer - 2];
    let dh = matmul_nn(&dlogits, w.store.value(head));
    accumulate_nt(w.store.grad_mut(head), &dlogits, &h);
    let dx = core_backward(
        &mut w.store,
        &nar.blocks,
        &nar.final_ln,
        config.heads,
        &cache,
        &dh,
        Visibility::Full,
    );
    scatter_nar_input_grads(w, batch, &dx);
    Ok(LossParts {
        total: mean,
        acoustic: mean,
        phoneme: 0.0,
        acoustic_count: count,
        phoneme_count: 0,
    })
}

/// Run the transformer core on a pre-assembled input (exposed for
/// permutation-equivariance tests).
pub fn core_eval<S: Scalar>(
    w: &LmWeights<S>,
    x: Tensor<S>,
    vis: Visibility,
) -> Result<Tensor<S>> {
    let (blocks, final_ln) = match w.kind {
        super::ModelKind::Ar => {
            let ar = w.ar()?;
            (&ar.blocks, &ar.final_ln)
        }
        super::ModelKind::Nar => {
            let nar = w.nar()?;
            (&nar.blocks, &nar.final_ln)
        }
    };
    let (h, _) = core_forward(&w.store, blocks, final_ln, w.config.heads, x, vis, &mut None);
    Ok(h)
}

/// Argmax accuracy over non-PAD targets.
pub fn argmax_accuracy<S: Scalar>(logits: &Tensor<S>, targets: &[u16], pad: u16) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        total += 1;
        let row = logits.row(r);
        let mut best = 0usize;
        let mut best_v = S::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == t as usize {
            correct += 1;
        }
    }
    (correct, total)
}

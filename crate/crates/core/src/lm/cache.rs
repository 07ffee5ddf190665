//! Incremental AR decoding with per-layer key/value caches.
//!
//! A session primes on the prompt phonemes plus any known pairs, then serves
//! one pair per `step` call in O(position) instead of re-running the full
//! forward. The stepwise path must agree with the full training forward to
//! float tolerance; a dedicated test pins that.

use crate::codec::CodeId;
use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::model::Visibility;
use super::tensor::{axpy, dot, matmul_nt, Tensor};
use super::{LayerNormP, LinearP, LmWeights};

const LN_EPS: f64 = 1e-5;

/// Logits for the next (acoustic, phoneme) pair.
#[derive(Debug, Clone)]
pub struct StepLogits<S: Scalar> {
    pub acoustic: Vec<S>,
    pub phoneme: Vec<S>,
}

struct LayerKv<S: Scalar> {
    k: Tensor<S>,
    v: Tensor<S>,
}

pub struct ArSession<'w, S: Scalar> {
    w: &'w LmWeights<S>,
    kv: Vec<LayerKv<S>>,
    /// Positions currently in the cache.
    len: usize,
    prompt_len: usize,
    capture_attn: bool,
    /// Head-averaged first-block attention over all cached columns for the
    /// most recent step.
    last_attn: Option<Vec<S>>,
}

fn layernorm_row<S: Scalar>(
    w: &LmWeights<S>,
    ln: &LayerNormP,
    x: &[S],
) -> Vec<S> {
    let dim = x.len();
    let gain = w.store.value(ln.gain);
    let bias = w.store.value(ln.bias);
    let inv_dim = S::from_usize(dim).recip();
    let mean = x.iter().copied().sum::<S>() * inv_dim;
    let var = x
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<S>()
        * inv_dim;
    let rstd = (var + S::from_f64(LN_EPS)).sqrt().recip();
    (0..dim)
        .map(|j| (x[j] - mean) * rstd * gain.row(0)[j] + bias.row(0)[j])
        .collect()
}

fn linear_row<S: Scalar>(w: &LmWeights<S>, lin: &LinearP, x: &[S]) -> Vec<S> {
    let wt = w.store.value(lin.w);
    let mut out: Vec<S> = (0..wt.rows).map(|o| dot(x, wt.row(o))).collect();
    if let Some(b) = lin.b {
        for (v, &bv) in out.iter_mut().zip(w.store.value(b).row(0)) {
            *v += bv;
        }
    }
    out
}

impl<'w, S: Scalar> ArSession<'w, S> {
    pub fn new(w: &'w LmWeights<S>, capture_attn: bool) -> Result<Self> {
        let ar = w.ar()?;
        let kv = ar
            .blocks
            .iter()
            .map(|_| LayerKv {
                k: Tensor::zeros(w.config.max_seq, w.config.dim),
                v: Tensor::zeros(w.config.max_seq, w.config.dim),
            })
            .collect();
        Ok(ArSession {
            w,
            kv,
            len: 0,
            prompt_len: 0,
            capture_attn,
            last_attn: None,
        })
    }

    pub fn positions_used(&self) -> usize {
        self.len
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn max_positions(&self) -> usize {
        self.w.config.max_seq
    }

    /// Head-averaged first-block attention row from the latest step,
    /// restricted to the prompt columns.
    pub fn last_prompt_attention(&self) -> Option<Vec<S>> {
        self.last_attn
            .as_ref()
            .map(|row| row[..self.prompt_len].to_vec())
    }

    /// Process the prompt phonemes (bidirectional region) and any known pairs
    /// (the BOS pair is supplied by the session). Returns the logits
    /// predicting the first unseen pair.
    pub fn prime(
        &mut self,
        prompt: &[PhonemeId],
        pairs: &[(CodeId, PhonemeId)],
    ) -> Result<StepLogits<S>> {
        if self.len != 0 {
            return Err(Error::invalid("session already primed"));
        }
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must be non-empty"));
        }
        let config = &self.w.config;
        let needed = prompt.len() + pairs.len() + 1;
        if needed + 1 > config.max_seq {
            return Err(Error::Capacity(format!(
                "prompt + pairs need {needed} positions, max_seq is {}",
                config.max_seq
            )));
        }
        if prompt.iter().any(|&p| p >= config.p_bos()) {
            return Err(Error::invalid("prompt phoneme id out of range"));
        }
        self.prompt_len = prompt.len();

        // Prompt region: full bidirectional attention among prompt rows.
        let ar = self.w.ar()?;
        let dim = config.dim;
        let mut x = Tensor::zeros(prompt.len(), dim);
        {
            let phon = self.w.store.value(ar.phoneme_emb);
            let pos = self.w.store.value(ar.pos_emb);
            for (i, &p) in prompt.iter().enumerate() {
                let row = x.row_mut(i);
                for j in 0..dim {
                    row[j] = phon.row(p as usize)[j] + pos.row(i)[j];
                }
            }
        }
        self.forward_rows(x, Visibility::PromptCausal { prompt_len: prompt.len() }, 0)?;

        // Pair stream: BOS pair, then the provided pairs, causally.
        let mut logits = self.step(config.a_bos(), config.p_bos())?;
        for &(a, p) in pairs {
            logits = self.step(a, p)?;
        }
        Ok(logits)
    }

    /// Feed one (acoustic, phoneme) pair; returns logits for the next pair.
    pub fn step(&mut self, a_prev: CodeId, p_prev: PhonemeId) -> Result<StepLogits<S>> {
        if self.prompt_len == 0 {
            return Err(Error::invalid("session must be primed before stepping"));
        }
        let config = &self.w.config;
        if self.len + 1 > config.max_seq {
            return Err(Error::Capacity(format!(
                "KV cache full at {} positions",
                self.len
            )));
        }
        if (a_prev as usize) >= config.acoustic_tokens()
            || (p_prev as usize) >= config.phoneme_tokens()
        {
            return Err(Error::invalid("pair token out of range"));
        }
        let ar = self.w.ar()?;
        let dim = config.dim;
        let pos_idx = self.len;
        let mut row = vec![S::zero(); dim];
        {
            let acou = self.w.store.value(ar.acoustic_emb);
            let phon = self.w.store.value(ar.phoneme_emb);
            let pos = self.w.store.value(ar.pos_emb);
            for j in 0..dim {
                row[j] = acou.row(a_prev as usize)[j]
                    + phon.row(p_prev as usize)[j]
                    + pos.row(pos_idx)[j];
            }
        }
        let h = self.forward_single(row)?;
        let acoustic_logits = matmul_nt(
            &Tensor::from_vec(h.clone(), 1, dim),
            self.w.store.value(ar.acoustic_head),
            None,
        );
        let phoneme_logits = matmul_nt(
            &Tensor::from_vec(h, 1, dim),
            self.w.store.value(ar.phoneme_head),
            None,
        );
        Ok(StepLogits {
            acoustic: acoustic_logits.data,
            phoneme: phoneme_logits.data,
        })
    }

    /// Run several rows at once (prompt priming). Rows attend according to
    /// `vis` offset by `base` cached positions (zero for the prompt).
    fn forward_rows(&mut self, x: Tensor<S>, vis: Visibility, base: usize) -> Result<()> {
        let ar = self.w.ar()?;
        let config = &self.w.config;
        let heads = config.heads;
        let dim = config.dim;
        let dh = config.head_dim();
        let inv = S::from_f64(1.0 / (dh as f64).sqrt());
        let rows = x.rows;
        let mut cur = x;
        for (block, kvstore) in ar.blocks.iter().zip(self.kv.iter_mut()) {
            let mut next = cur.clone();
            for i in 0..rows {
                let h1 = layernorm_row(self.w, &block.ln1, cur.row(i));
                let k = linear_row(self.w, &block.wk, &h1);
                let v = linear_row(self.w, &block.wv, &h1);
                kvstore.k.row_mut(base + i).copy_from_slice(&k);
                kvstore.v.row_mut(base + i).copy_from_slice(&v);
            }
            for i in 0..rows {
                let h1 = layernorm_row(self.w, &block.ln1, cur.row(i));
                let q = linear_row(self.w, &block.wq, &h1);
                let end = base
                    + match vis {
                        Visibility::Full => rows,
                        Visibility::PromptCausal { prompt_len } => {
                            if i < prompt_len {
                                prompt_len
                            } else {
                                i + 1
                            }
                        }
                    };
                let mut ctx = vec![S::zero(); dim];
                for h in 0..heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let mut scores: Vec<S> = (0..end)
                        .map(|j| dot(qh, &kvstore.k.row(j)[h * dh..(h + 1) * dh]) * inv)
                        .collect();
                    softmax_in_place(&mut scores);
                    for (j, &p) in scores.iter().enumerate() {
                        axpy(p, &kvstore.v.row(j)[h * dh..(h + 1) * dh], &mut ctx[h * dh..(h + 1) * dh]);
                    }
                }
                let attn = linear_row(self.w, &block.wo, &ctx);
                let mid: Vec<S> = cur
                    .row(i)
                    .iter()
                    .zip(&attn)
                    .map(|(&a, &b)| a + b)
                    .collect();
                let h2 = layernorm_row(self.w, &block.ln2, &mid);
                let f1 = linear_row(self.w, &block.ff1, &h2);
                let act: Vec<S> = f1.iter().map(|&v| super::model::gelu(v)).collect();
                let f2 = linear_row(self.w, &block.ff2, &act);
                for (slot, (m, f)) in next.row_mut(i).iter_mut().zip(mid.iter().zip(&f2)) {
                    *slot = *m + *f;
                }
            }
            cur = next;
        }
        self.len = base + rows;
        Ok(())
    }

    /// Append one row causally through all blocks; returns the final hidden.
    fn forward_single(&mut self, row: Vec<S>) -> Result<Vec<S>> {
        let ar = self.w.ar()?;
        let config = &self.w.config;
        let heads = config.heads;
        let dim = config.dim;
        let dh = config.head_dim();
        let inv = S::from_f64(1.0 / (dh as f64).sqrt());
        let pos = self.len;
        let mut cur = row;
        let mut attn_trace: Option<Vec<S>> = None;
        for (layer_idx, (block, kvstore)) in
            ar.blocks.iter().zip(self.kv.iter_mut()).enumerate()
        {
            let h1 = layernorm_row(self.w, &block.ln1, &cur);
            let q = linear_row(self.w, &block.wq, &h1);
            let k = linear_row(self.w, &block.wk, &h1);
            let v = linear_row(self.w, &block.wv, &h1);
            kvstore.k.row_mut(pos).copy_from_slice(&k);
            kvstore.v.row_mut(pos).copy_from_slice(&v);
            let end = pos + 1;
            let mut ctx = vec![S::zero(); dim];
            let mut avg: Option<Vec<S>> = if self.capture_attn && layer_idx == 0 {
                Some(vec![S::zero(); end])
            } else {
                None
            };
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut scores: Vec<S> = (0..end)
                    .map(|j| dot(qh, &kvstore.k.row(j)[h * dh..(h + 1) * dh]) * inv)
                    .collect();
                softmax_in_place(&mut scores);
                if let Some(acc) = avg.as_mut() {
                    let wgt = S::from_usize(heads).recip();
                    for (a, &s) in acc.iter_mut().zip(&scores) {
                        *a += s * wgt;
                    }
                }
                for (j, &p) in scores.iter().enumerate() {
                    axpy(p, &kvstore.v.row(j)[h * dh..(h + 1) * dh], &mut ctx[h * dh..(h + 1) * dh]);
                }
            }
            if let Some(acc) = avg {
                attn_trace = Some(acc);
            }
            let attn = linear_row(self.w, &block.wo, &ctx);
            let mid: Vec<S> = cur.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
            let h2 = layernorm_row(self.w, &block.ln2, &mid);
            let f1 = linear_row(self.w, &block.ff1, &h2);
            let act: Vec<S> = f1.iter().map(|&v| super::model::gelu(v)).collect();
            let f2 = linear_row(self.w, &block.ff2, &act);
            cur = mid.iter().zip(&f2).map(|(&m, &f)| m + f).collect();
        }
        if self.capture_attn {
            self.last_attn = attn_trace;
        }
        self.len = pos + 1;
        Ok(layernorm_row(self.w, &ar.final_ln, &cur))
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
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

#[cfg(test)]
mod tests {
    use super::super::model::{ar_forward, ArBatch};
    use super::super::{LmConfig, LmWeights};
    use super::*;

    fn tiny_config() -> LmConfig {
        LmConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
            dropout: 0.0,
            max_seq: 64,
            acoustic_k: 8,
            phoneme_vocab: 6,
        }
    }

    #[test]
    fn stepwise_matches_full_forward() {
        let w = LmWeights::<f64>::new_ar(tiny_config(), 99).unwrap();
        let batch = ArBatch {
            prompt: vec![0, 3, 1, 2],
            acoustic: vec![2, 7, 0, 4, 4],
            aligned: vec![0, 3, 3, 1, 2],
        };
        let full = ar_forward(&w, &batch).unwrap();

        let mut session = ArSession::new(&w, false).unwrap();
        let mut logits = session.prime(&batch.prompt, &[]).unwrap();
        for s in 0..batch.steps() {
            let mut max_diff = 0.0f64;
            for (a, b) in logits.acoustic.iter().zip(full.acoustic.row(s)) {
                max_diff = max_diff.max((a - b).abs());
            }
            for (a, b) in logits.phoneme.iter().zip(full.phoneme.row(s)) {
                max_diff = max_diff.max((a - b).abs());
            }
            assert!(
                max_diff < 1e-5,
                "step {s}: cached vs full logits differ by {max_diff}"
            );
            if s < batch.acoustic.len() {
                logits = session.step(batch.acoustic[s], batch.aligned[s]).unwrap();
            }
        }
    }

    #[test]
    fn prime_with_pairs_matches_stepping() {
        let w = LmWeights::<f64>::new_ar(tiny_config(), 5).unwrap();
        let prompt = vec![1u16, 2];
        let pairs = vec![(3u16, 0u16), (5, 1)];
        let mut a = ArSession::new(&w, false).unwrap();
        let la = a.prime(&prompt, &pairs).unwrap();
        let mut b = ArSession::new(&w, false).unwrap();
        let mut lb = b.prime(&prompt, &[]).unwrap();
        for &(x, y) in &pairs {
            lb = b.step(x, y).unwrap();
        }
        assert_eq!(la.acoustic, lb.acoustic);
        assert_eq!(la.phoneme, lb.phoneme);
    }

    #[test]
    fn capacity_error_when_cache_full() {
        let w = LmWeights::<f64>::new_ar(tiny_config(), 5).unwrap();
        let mut s = ArSession::new(&w, false).unwrap();
        s.prime(&[0], &[]).unwrap();
        let mut hit_capacity = false;
        for _ in 0..70 {
            match s.step(0, 0) {
                Ok(_) => {}
                Err(Error::Capacity(_)) => {
                    hit_capacity = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
        assert!(hit_capacity);
    }

    #[test]
    fn attention_capture_has_prompt_width_and_submass() {
        let w = LmWeights::<f64>::new_ar(tiny_config(), 5).unwrap();
        let mut s = ArSession::new(&w, true).unwrap();
        s.prime(&[0, 1, 2], &[]).unwrap();
        s.step(1, 0).unwrap();
        let row = s.last_prompt_attention().unwrap();
        assert_eq!(row.len(), 3);
        let sum: f64 = row.iter().sum();
        assert!(sum > 0.0 && sum <= 1.0 + 1e-9);
    }
}

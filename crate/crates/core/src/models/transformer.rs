use rand::Rng;
use serde::Serialize;

use super::{init_normal, Objective};
use crate::autograd::{AutogradError, ParamId, ParamStore, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    /// Hidden width of each MLP block.
    pub d_ff: usize,
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab: 256,
            d_model: 64,
            layers: 2,
            heads: 2,
            context: 64,
            d_ff: 256,
            init_std: 0.02,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.vocab, self.d_model, self.layers, self.heads, self.context, self.d_ff];
        if positive.contains(&0) {
            return Err(AutogradError::InvalidArgument(format!("transformer sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(AutogradError::InvalidArgument(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(AutogradError::InvalidArgument("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm2: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm decoder-only transformer with learned positions and an untied head.
#[derive(Debug, Clone)]
pub struct TinyTransformerLM {
    cfg: TransformerConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_f: ParamId,
    head: ParamId,
}

/// Token batch of `batch` sequences of length `seq`, flattened batch-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TinyTransformerLM {
    /// Registers parameters in forward order and seals the store.
    pub fn new<R: Rng>(cfg: TransformerConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, std) = (cfg.d_model, cfg.init_std);
        let ones = |n: usize| Tensor::ones(vec![n]).expect("positive size");
        let zeros = |n: usize| Tensor::zeros(vec![n]).expect("positive size");
        let tok = store.add("tok_emb", init_normal(&[cfg.vocab, d], std, rng));
        let pos = store.add("pos_emb", init_normal(&[cfg.context, d], std, rng));
        let blocks = (0..cfg.layers)
            .map(|l| {
                let mut add = |name: &str, t: Tensor| store.add(format!("layer{l}.{name}"), t);
                Block {
                    norm1: add("norm1", ones(d)),
                    wq: add("wq", init_normal(&[d, d], std, rng)),
                    wk: add("wk", init_normal(&[d, d], std, rng)),
                    wv: add("wv", init_normal(&[d, d], std, rng)),
                    wo: add("wo", init_normal(&[d, d], std, rng)),
                    norm2: add("norm2", ones(d)),
                    w1: add("w1", init_normal(&[d, cfg.d_ff], std, rng)),
                    b1: add("b1", zeros(cfg.d_ff)),
                    w2: add("w2", init_normal(&[cfg.d_ff, d], std, rng)),
                    b2: add("b2", zeros(d)),
                }
            })
            .collect();
        let norm_f = store.add("norm_f", ones(d));
        let head = store.add("head", init_normal(&[d, cfg.vocab], std, rng));
        store.seal();
        Ok(TinyTransformerLM {
            cfg,
            tok,
            pos,
            blocks,
            norm_f,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Logits `[batch*seq x vocab]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &LmBatch) -> Result<Var> {
        let (b, t) = (batch.batch, batch.seq);
        if t > self.cfg.context || batch.inputs.len() != b * t {
            return Err(AutogradError::InvalidArgument(format!(
                "batch of {} tokens does not match {b} x {t} within context {}",
                batch.inputs.len(),
                self.cfg.context
            )));
        }
        let tok = tape.param(store.get(self.tok));
        let pos = tape.param(store.get(self.pos));
        let emb = tape.gather(tok, &batch.inputs)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pe = tape.gather(pos, &positions)?;
        let mut x = tape.add(emb, pe)?;
        for blk in &self.blocks {
            let g1 = tape.param(store.get(blk.norm1));
            let h = tape.rms_norm(x, g1)?;
            let [wq, wk, wv, wo] = [blk.wq, blk.wk, blk.wv, blk.wo].map(|id| tape.param(store.get(id)));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let a = tape.causal_attention(q, k, v, b, t, self.cfg.heads)?;
            let o = tape.matmul(a, wo)?;
            x = tape.add(x, o)?;

            let g2 = tape.param(store.get(blk.norm2));
            let h = tape.rms_norm(x, g2)?;
            let [w1, b1, w2, b2] = [blk.w1, blk.b1, blk.w2, blk.b2].map(|id| tape.param(store.get(id)));
            let z = tape.matmul(h, w1)?;
            let z = tape.add_bias(z, b1)?;
            let z = tape.gelu(z);
            let z = tape.matmul(z, w2)?;
            let z = tape.add_bias(z, b2)?;
            x = tape.add(x, z)?;
        }
        let gf = tape.param(store.get(self.norm_f));
        let x = tape.rms_norm(x, gf)?;
        let head = tape.param(store.get(self.head));
        tape.matmul(x, head)
    }

    /// Mean next-token cross-entropy and the logits it was computed from.
    pub fn loss_and_logits(&self, tape: &mut Tape, store: &ParamStore, batch: &LmBatch) -> Result<(Var, Var)> {
        let logits = self.forward(tape, store, batch)?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        Ok((loss, logits))
    }
}

impl Objective for TinyTransformerLM {
    type Batch = LmBatch;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, batch: &LmBatch) -> Result<Var> {
        Ok(self.loss_and_logits(tape, store, batch)?.0)
    }
}

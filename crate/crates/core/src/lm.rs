//! Small pre-norm decoder-only transformer plus the LoRA and soft-prompt
//! parameter sets that attach to it.
//!
//! Sequences are packed row-wise into one matrix and attention is restricted
//! to each sequence by causal groups, so a batch costs one set of matmuls.
//!
//! Position layout: the first `prompt_slots` positions are reserved for
//! prompt tokens, right-aligned, so content always starts at position
//! `prompt_slots` whatever the prompt length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnGroup, Var};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    pub prompt_slots: usize,
    pub lora_rank: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("lm dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.prompt_slots >= self.context {
            return Err(Error::Config(format!(
                "prompt_slots {} leaves no room in context {}",
                self.prompt_slots, self.context
            )));
        }
        Ok(())
    }

    /// `s = 2 / r`
    pub fn lora_scale(&self) -> f64 {
        2.0 / self.lora_rank as f64
    }

    /// Matrices that receive a LoRA delta.
    pub fn lora_targets(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| [format!("block{l}.q"), format!("block{l}.v")])
            .collect()
    }

    /// `Σ r·(2·d′)` over adapted matrices.
    pub fn lora_param_count(&self) -> usize {
        self.lora_targets().len() * self.lora_rank * 2 * self.d_model
    }

    pub fn init_backbone<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let d = self.d_model;
        let mut s = ParamStore::new();
        let lin = |i: usize, o: usize, std: f64, rng: &mut R| Tensor::normal(&[i, o], std, rng);
        let resid_std = 1.0 / ((d as f64).sqrt() * (2.0 * self.layers as f64).sqrt());
        s.insert("lm.tok_emb", Tensor::normal(&[self.vocab_size, d], 0.1, rng));
        s.insert("lm.pos_emb", Tensor::normal(&[self.context, d], 0.1, rng));
        for l in 0..self.layers {
            let p = format!("lm.block{l}");
            s.insert(format!("{p}.ln1.g"), Tensor::new(&[d], vec![1.0; d]).unwrap());
            s.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
            for m in ["q", "k", "v"] {
                s.insert(format!("{p}.w{m}"), lin(d, d, 1.0 / (d as f64).sqrt(), rng));
                s.insert(format!("{p}.b{m}"), Tensor::zeros(&[d]));
            }
            s.insert(format!("{p}.wo"), lin(d, d, resid_std, rng));
            s.insert(format!("{p}.bo"), Tensor::zeros(&[d]));
            s.insert(format!("{p}.ln2.g"), Tensor::new(&[d], vec![1.0; d]).unwrap());
            s.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
            s.insert(format!("{p}.w1"), lin(d, self.mlp_hidden, 1.0 / (d as f64).sqrt(), rng));
            s.insert(format!("{p}.b1"), Tensor::zeros(&[self.mlp_hidden]));
            s.insert(format!("{p}.w2"), lin(self.mlp_hidden, d, resid_std, rng));
            s.insert(format!("{p}.b2"), Tensor::zeros(&[d]));
        }
        s.insert("lm.lnf.g", Tensor::new(&[d], vec![1.0; d]).unwrap());
        s.insert("lm.lnf.b", Tensor::zeros(&[d]));
        // near-zero head: an untrained model predicts almost uniformly
        s.insert("lm.head", lin(d, self.vocab_size, 0.01, rng));
        s
    }

    /// `A ~ N(0, 1/d′)` (`r×d′`), `B = 0` (`d′×r`).
    pub fn init_lora<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let d = self.d_model;
        let r = self.lora_rank;
        let mut s = ParamStore::new();
        for t in self.lora_targets() {
            s.insert(format!("lora.{t}.a"), Tensor::normal(&[r, d], 1.0 / (d as f64).sqrt(), rng));
            s.insert(format!("lora.{t}.b"), Tensor::zeros(&[d, r]));
        }
        s
    }

    pub fn init_soft_prompt<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<ParamStore> {
        if len == 0 {
            return Err(Error::Config("soft prompt length must be at least 1".into()));
        }
        let mut s = ParamStore::new();
        let b = 1.0 / (self.d_model as f64).sqrt();
        s.insert("soft.tokens", Tensor::uniform(&[len, self.d_model], b, rng));
        Ok(s)
    }
}

/// An embedded sequence ready for [`forward`], with next-token labels.
#[derive(Clone, Debug)]
pub struct LmInput {
    pub embeds: Var,
    /// Label per position; only meaningful where `mask` is true.
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl LmInput {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn embed_tokens(s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
    let table = s.param("lm.tok_emb")?;
    s.graph.gather_rows(table, ids)
}

/// `[prompt ‖ features ‖ instruction ‖ BOS ‖ target[..n−1]]` plus positions.
///
/// `target` ends with EOS; the loss mask is true exactly on the positions
/// whose next token is a target token (BOS through the last non-EOS token).
pub fn build_input(
    s: &mut Session<'_>,
    cfg: &LmConfig,
    prompt: Option<Var>,
    features: Var,
    instruction: &[usize],
    bos: usize,
    target: &[usize],
) -> Result<LmInput> {
    let fed = &target[..target.len().saturating_sub(1)];
    let mut input = assemble(s, cfg, prompt, features, instruction, bos, fed)?;
    let first = input.len() - fed.len() - 1;
    for (j, &t) in target.iter().enumerate() {
        input.labels[first + j] = t;
        input.mask[first + j] = true;
    }
    Ok(input)
}

/// Same layout as [`build_input`] for decoding: tokens generated so far
/// follow BOS and nothing is masked.
pub fn build_prefix(
    s: &mut Session<'_>,
    cfg: &LmConfig,
    prompt: Option<Var>,
    features: Var,
    instruction: &[usize],
    bos: usize,
    generated: &[usize],
) -> Result<LmInput> {
    assemble(s, cfg, prompt, features, instruction, bos, generated)
}

fn assemble(
    s: &mut Session<'_>,
    cfg: &LmConfig,
    prompt: Option<Var>,
    features: Var,
    instruction: &[usize],
    bos: usize,
    after_bos: &[usize],
) -> Result<LmInput> {
    let k = prompt.map_or(0, |p| s.graph.shape(p)[0]);
    let f = s.graph.shape(features)[0];
    let content = f + instruction.len() + 1 + after_bos.len();
    if k > cfg.prompt_slots || cfg.prompt_slots + content > cfg.context {
        return Err(Error::Capacity {
            prompt: k,
            features: f,
            instruction: instruction.len(),
            target: after_bos.len(),
            total: cfg.prompt_slots.max(k) + content,
            capacity: cfg.context,
        });
    }
    let mut ids = instruction.to_vec();
    ids.push(bos);
    ids.extend_from_slice(after_bos);
    let tokens = embed_tokens(s, &ids)?;
    let mut parts = Vec::with_capacity(3);
    parts.extend(prompt);
    parts.push(features);
    parts.push(tokens);
    let x = s.graph.concat_rows(&parts)?;
    let positions: Vec<usize> = (cfg.prompt_slots - k..cfg.prompt_slots + content).collect();
    let table = s.param("lm.pos_emb")?;
    let pos = s.graph.gather_rows(table, &positions)?;
    let embeds = s.graph.add(x, pos)?;
    let len = k + content;
    Ok(LmInput {
        embeds,
        labels: vec![0; len],
        mask: vec![false; len],
    })
}

fn linear(s: &mut Session<'_>, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = s.param(w)?;
    let b = s.param(b)?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add_row(y, b)
}

fn lora_delta(s: &mut Session<'_>, cfg: &LmConfig, h: Var, target: &str) -> Result<Var> {
    let a = s.param(&format!("lora.{target}.a"))?;
    let b = s.param(&format!("lora.{target}.b"))?;
    let low = s.graph.matmul_nt(h, a)?;
    let up = s.graph.matmul_nt(low, b)?;
    Ok(s.graph.scale(up, cfg.lora_scale()))
}

/// Causal forward over packed sequences of the given lengths; returns
/// `Σlen × V` logits.
pub fn forward(s: &mut Session<'_>, cfg: &LmConfig, x: Var, seq_lens: &[usize], lora: bool) -> Result<Var> {
    let total: usize = seq_lens.iter().sum();
    if s.graph.shape(x) != [total, cfg.d_model] {
        return Err(Error::shape("lm forward", s.graph.shape(x), &[total, cfg.d_model]));
    }
    let mut groups = Vec::with_capacity(seq_lens.len());
    let mut start = 0;
    for &len in seq_lens {
        groups.push(AttnGroup {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            causal: true,
        });
        start += len;
    }
    let mut x = x;
    for l in 0..cfg.layers {
        let p = format!("lm.block{l}");
        let g1 = s.param(&format!("{p}.ln1.g"))?;
        let b1 = s.param(&format!("{p}.ln1.b"))?;
        let h = s.graph.layer_norm(x, g1, b1, 1e-5)?;
        let mut q = linear(s, h, &format!("{p}.wq"), &format!("{p}.bq"))?;
        let k = linear(s, h, &format!("{p}.wk"), &format!("{p}.bk"))?;
        let mut v = linear(s, h, &format!("{p}.wv"), &format!("{p}.bv"))?;
        if lora {
            let dq = lora_delta(s, cfg, h, &format!("block{l}.q"))?;
            q = s.graph.add(q, dq)?;
            let dv = lora_delta(s, cfg, h, &format!("block{l}.v"))?;
            v = s.graph.add(v, dv)?;
        }
        let a = s.graph.attention(q, k, v, cfg.heads, &groups)?;
        let o = linear(s, a, &format!("{p}.wo"), &format!("{p}.bo"))?;
        x = s.graph.add(x, o)?;
        let g2 = s.param(&format!("{p}.ln2.g"))?;
        let b2 = s.param(&format!("{p}.ln2.b"))?;
        let h = s.graph.layer_norm(x, g2, b2, 1e-5)?;
        let m = linear(s, h, &format!("{p}.w1"), &format!("{p}.b1"))?;
        let m = s.graph.gelu(m);
        let m = linear(s, m, &format!("{p}.w2"), &format!("{p}.b2"))?;
        x = s.graph.add(x, m)?;
    }
    let gf = s.param("lm.lnf.g")?;
    let bf = s.param("lm.lnf.b")?;
    let h = s.graph.layer_norm(x, gf, bf, 1e-5)?;
    let head = s.param("lm.head")?;
    s.graph.matmul(h, head)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

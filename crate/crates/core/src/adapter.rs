//! Windowed query adapter.
//!
//! A variable-length feature sequence is cut into fixed windows; a set of
//! learnable queries cross-attends to each window independently and the
//! result is projected to the model width. Output length is
//! `ceil(T / W) · Q_w` regardless of feature values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnGroup, Var};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub out_dim: usize,
    pub window: usize,
    pub queries: usize,
    pub heads: usize,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.queries == 0 || self.heads == 0 {
            return Err(Error::Config(
                "adapter window, queries and heads must be at least 1".into(),
            ));
        }
        if self.feature_dim == 0 || self.out_dim == 0 || !self.attn_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "adapter attn_dim {} must be a positive multiple of heads {}",
                self.attn_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn output_tokens(&self, frames: usize) -> usize {
        frames.div_ceil(self.window) * self.queries
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        let lin = |i: usize, o: usize, rng: &mut R| Tensor::normal(&[i, o], 1.0 / (i as f64).sqrt(), rng);
        s.insert("adapter.queries", Tensor::normal(&[self.queries, self.attn_dim], 1.0, rng));
        s.insert("adapter.w_q", lin(self.attn_dim, self.attn_dim, rng));
        s.insert("adapter.w_k", lin(self.feature_dim, self.attn_dim, rng));
        s.insert("adapter.w_v", lin(self.feature_dim, self.attn_dim, rng));
        s.insert("adapter.w_out", lin(self.attn_dim, self.out_dim, rng));
        s
    }
}

/// One fixed-size window; rows at or beyond `valid` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub frames: Tensor,
    pub valid: usize,
}

pub fn split_windows(features: &Tensor, window: usize) -> Result<Vec<Window>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window size must be at least 1".into()));
    }
    let t = features.rows();
    if t == 0 {
        return Err(Error::EmptySequence("feature sequence"));
    }
    let d = features.cols();
    Ok((0..t.div_ceil(window))
        .map(|w| {
            let start = w * window;
            let valid = window.min(t - start);
            let mut data = vec![0.0; window * d];
            data[..valid * d].copy_from_slice(&features.data()[start * d..(start + valid) * d]);
            Window {
                frames: Tensor::from_raw(vec![window, d], data),
                valid,
            }
        })
        .collect())
}

/// Runs the adapter over several feature sequences at once; returns one
/// `(ceil(T/W)·Q_w) × d′` node per sequence.
pub fn adapt_batch(s: &mut Session<'_>, cfg: &AdapterConfig, batch: &[&Tensor]) -> Result<Vec<Var>> {
    let mut padded = Vec::new();
    let mut groups = Vec::new();
    let mut query_ids = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    let mut n_windows = 0;
    for features in batch {
        if features.cols() != cfg.feature_dim {
            return Err(Error::shape("adapt", features.shape(), &[features.rows(), cfg.feature_dim]));
        }
        let windows = split_windows(features, cfg.window)?;
        let first = n_windows * cfg.queries;
        for w in &windows {
            groups.push(AttnGroup {
                q_start: n_windows * cfg.queries,
                q_len: cfg.queries,
                k_start: n_windows * cfg.window,
                k_len: w.valid,
                causal: false,
            });
            query_ids.extend(0..cfg.queries);
            padded.extend_from_slice(w.frames.data());
            n_windows += 1;
        }
        spans.push(first..n_windows * cfg.queries);
    }
    let frames = s.graph.constant(Tensor::new(
        &[n_windows * cfg.window, cfg.feature_dim],
        padded,
    )?);
    let queries = s.param("adapter.queries")?;
    let w_q = s.param("adapter.w_q")?;
    let w_k = s.param("adapter.w_k")?;
    let w_v = s.param("adapter.w_v")?;
    let w_out = s.param("adapter.w_out")?;
    let g = &mut s.graph;
    let qp = g.matmul(queries, w_q)?;
    let q_all = g.gather_rows(qp, &query_ids)?;
    let k_all = g.matmul(frames, w_k)?;
    let v_all = g.matmul(frames, w_v)?;
    let attended = g.attention(q_all, k_all, v_all, cfg.heads, &groups)?;
    let out = g.matmul(attended, w_out)?;
    if batch.len() == 1 {
        return Ok(vec![out]);
    }
    spans
        .into_iter()
        .map(|r| g.gather_rows(out, &r.collect::<Vec<_>>()))
        .collect()
}

pub fn adapt(s: &mut Session<'_>, cfg: &AdapterConfig, features: &Tensor) -> Result<Var> {
    Ok(adapt_batch(s, cfg, &[features])?.remove(0))
}

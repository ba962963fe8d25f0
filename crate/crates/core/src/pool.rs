//! Learnable key-value prompt pool and per-instance prompt selection.
//!
//! A query `q` (the mean of the input token sequence) is matched against `P`
//! keys; the values of the `k` chosen keys become the instance's prompt. Three
//! strategies are provided:
//!
//! * **similarity**: top-k by cosine similarity; raw values; key loss
//!   `Σ_{i∈K} ‖q − k_i‖`.
//! * **attention**: top-k by `softmax(q·kᵢ)`; values scaled by their weight;
//!   key loss `−Σ_{i∈K} αᵢ ln αᵢ`.
//! * **residual**: greedy residual quantisation of `q` by distinct keys; raw
//!   values in pick order; key loss `Σ_j ‖r_j‖`.
//!
//! Index choices never carry gradient. Keys train through the key losses and,
//! for the attention strategy, through the weights applied to the values.
//! Ties are always broken in favour of the lowest index.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{dot, norm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Similarity,
    Attention,
    Residual,
}

impl SelectionStrategy {
    pub fn short_name(self) -> &'static str {
        match self {
            SelectionStrategy::Similarity => "sim",
            SelectionStrategy::Attention => "attn",
            SelectionStrategy::Residual => "res",
        }
    }
}

/// `P` keys of dimension `d` paired with `P` values of dimension `d′`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    keys: Tensor,
    values: Tensor,
}

impl PromptPool {
    /// Keys uniform in `±1/√d`, values uniform in `±1/√d′`, seeded.
    pub fn init(size: usize, key_dim: usize, value_dim: usize, seed: u64) -> Result<Self> {
        if size == 0 || key_dim == 0 || value_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "prompt pool dimensions must be positive, got P={size} d={key_dim} d'={value_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kb = 1.0 / (key_dim as f64).sqrt();
        let vb = 1.0 / (value_dim as f64).sqrt();
        let mut keys = Tensor::uniform(&[size, key_dim], kb, &mut rng);
        // cosine similarity needs every key to be nonzero
        for i in 0..size {
            while norm(keys.row(i)) == 0.0 {
                let row = &mut keys.data_mut()[i * key_dim..(i + 1) * key_dim];
                row.iter_mut().for_each(|x| *x = rng.random_range(-kb..=kb));
            }
        }
        let values = Tensor::uniform(&[size, value_dim], vb, &mut rng);
        Ok(Self { keys, values })
    }

    pub fn from_parts(keys: Tensor, values: Tensor) -> Result<Self> {
        if keys.shape().len() != 2 || values.shape().len() != 2 || keys.rows() != values.rows() {
            return Err(Error::shape("prompt pool", keys.shape(), values.shape()));
        }
        Ok(Self { keys, values })
    }

    pub fn size(&self) -> usize {
        self.keys.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.values.cols()
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.keys, self.values)
    }

    /// Header `(P, d, d′)` as little-endian u64, then keys, then values, as
    /// row-major little-endian f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for dim in [self.size(), self.key_dim(), self.value_dim()] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for x in self.keys.data().iter().chain(self.values.data()) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word)
                .map_err(|e| Error::Checkpoint(format!("pool header: {e}")))?;
            *d = u64::from_le_bytes(word) as usize;
        }
        let [p, d, dv] = dims;
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Checkpoint(format!("pool data: {e}")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let keys = Tensor::new(&[p, d], read_block(p * d)?)?;
        let values = Tensor::new(&[p, dv], read_block(p * dv)?)?;
        Self::from_parts(keys, values)
    }
}

/// A pool whose keys and values are bound into a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub keys: Var,
    pub values: Var,
}

impl PoolVars {
    pub fn size(&self, g: &Graph) -> usize {
        g.shape(self.keys)[0]
    }
}

/// Query vector `q` as a `1×d` graph node.
#[derive(Clone, Copy, Debug)]
pub struct QueryVector(pub Var);

/// Outcome of prompt selection for one instance.
#[derive(Clone, Debug)]
pub struct Selection {
    /// Distinct pool indices in selection order.
    pub indices: Vec<usize>,
    /// `k×d′`; row `j` belongs to `indices[j]`.
    pub prompt_values: Var,
    /// Scalar auxiliary loss for this instance.
    pub key_loss: Var,
    /// Softmax weight per selected index (similarity, attention) or the
    /// residual norm after each pick (residual).
    pub scores: Vec<f64>,
}

/// `q = (1/T) Σ_t X_t` over the rows of `x`.
pub fn compute_query(g: &mut Graph, x: Var) -> Result<QueryVector> {
    if g.shape(x).first().copied().unwrap_or(0) == 0 {
        return Err(Error::EmptySequence("query input"));
    }
    Ok(QueryVector(g.mean_rows(x)?))
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k == 0 || k > p {
        return Err(Error::InvalidArgument(format!(
            "prompt size k={k} must lie in [1, {p}]"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest scores, ties to the lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps ascending index order among equal scores; adding
    // 0.0 maps -0.0 to +0.0 so the two zeros tie
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)));
    order.truncate(k);
    order
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    crate::kernels::softmax_in_place(&mut out);
    out
}

/// Cosine similarity of `q` with every key.
pub fn cosine_scores(keys: &Tensor, q: &[f64]) -> Result<Vec<f64>> {
    let qn = norm(q);
    if qn == 0.0 {
        return Err(Error::ZeroQuery);
    }
    Ok((0..keys.rows())
        .map(|i| dot(q, keys.row(i)) / (qn * norm(keys.row(i))))
        .collect())
}

// Both rankers order by the pre-softmax score: softmax is monotone, and
// ranking before `exp` keeps rounding from merging distinct scores.

/// Top-k of the softmax over cosine similarities. Returns `(indices, α)`.
pub fn rank_similarity(keys: &Tensor, q: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    check_k(k, keys.rows())?;
    let sims = cosine_scores(keys, q)?;
    Ok((top_k(&sims, k), softmax(&sims)))
}

/// Top-k of the softmax over dot products. Returns `(indices, α)`.
pub fn rank_attention(keys: &Tensor, q: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    check_k(k, keys.rows())?;
    let logits: Vec<f64> = (0..keys.rows()).map(|i| dot(q, keys.row(i))).collect();
    Ok((top_k(&logits, k), softmax(&logits)))
}

/// Greedy residual quantisation. Returns `(indices, ‖r_j‖ per step)`.
pub fn rank_residual(keys: &Tensor, q: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    check_k(k, keys.rows())?;
    let p = keys.rows();
    let mut residual = q.to_vec();
    let mut used = vec![false; p];
    let mut picks = Vec::with_capacity(k);
    let mut norms = Vec::with_capacity(k);
    let mut diff = vec![0.0; q.len()];
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..p).filter(|&i| !used[i]) {
            for ((d, r), ki) in diff.iter_mut().zip(&residual).zip(keys.row(i)) {
                *d = r - ki;
            }
            let dist = norm(&diff);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("k <= P leaves a candidate");
        used[i] = true;
        for (r, ki) in residual.iter_mut().zip(keys.row(i)) {
            *r -= ki;
        }
        picks.push(i);
        norms.push(norm(&residual));
    }
    Ok((picks, norms))
}

/// Index-only selection, for analysis and inference without gradients.
pub fn rank(
    strategy: SelectionStrategy,
    keys: &Tensor,
    q: &[f64],
    k: usize,
) -> Result<Vec<usize>> {
    Ok(match strategy {
        SelectionStrategy::Similarity => rank_similarity(keys, q, k)?.0,
        SelectionStrategy::Attention => rank_attention(keys, q, k)?.0,
        SelectionStrategy::Residual => rank_residual(keys, q, k)?.0,
    })
}

pub fn select(
    g: &mut Graph,
    strategy: SelectionStrategy,
    pool: PoolVars,
    q: QueryVector,
    k: usize,
) -> Result<Selection> {
    match strategy {
        SelectionStrategy::Similarity => select_similarity(g, pool, q, k),
        SelectionStrategy::Attention => select_attention(g, pool, q, k),
        SelectionStrategy::Residual => select_residual(g, pool, q, k),
    }
}

pub fn select_similarity(
    g: &mut Graph,
    pool: PoolVars,
    q: QueryVector,
    k: usize,
) -> Result<Selection> {
    let (indices, alpha) = rank_similarity(g.value(pool.keys), g.value(q.0).data(), k)?;
    let scores = indices.iter().map(|&i| alpha[i]).collect();
    let prompt_values = g.gather_rows(pool.values, &indices)?;
    let chosen = g.gather_rows(pool.keys, &indices)?;
    let neg_q = g.scale(q.0, -1.0);
    let diff = g.add_row(chosen, neg_q)?;
    let dists = g.row_norms(diff)?;
    let key_loss = g.sum(dists);
    Ok(Selection {
        indices,
        prompt_values,
        key_loss,
        scores,
    })
}

pub fn select_attention(
    g: &mut Graph,
    pool: PoolVars,
    q: QueryVector,
    k: usize,
) -> Result<Selection> {
    let p = pool.size(g);
    check_k(k, p)?;
    let logits = g.matmul_nt(q.0, pool.keys)?;
    let alpha = g.softmax_rows(logits)?;
    let indices = top_k(g.value(logits).data(), k);
    let scores = indices.iter().map(|&i| g.value(alpha).data()[i]).collect();
    let alpha_col = g.reshape(alpha, &[p, 1])?;
    let weights = g.gather_rows(alpha_col, &indices)?;
    let raw = g.gather_rows(pool.values, &indices)?;
    let prompt_values = g.scale_rows(raw, weights)?;
    let logw = g.ln(weights);
    let plogp = g.mul(weights, logw)?;
    let s = g.sum(plogp);
    let key_loss = g.scale(s, -1.0);
    Ok(Selection {
        indices,
        prompt_values,
        key_loss,
        scores,
    })
}

pub fn select_residual(
    g: &mut Graph,
    pool: PoolVars,
    q: QueryVector,
    k: usize,
) -> Result<Selection> {
    let (indices, scores) = rank_residual(g.value(pool.keys), g.value(q.0).data(), k)?;
    let mut residual = q.0;
    let mut norms = Vec::with_capacity(k);
    for &i in &indices {
        let key = g.gather_rows(pool.keys, &[i])?;
        residual = g.sub(residual, key)?;
        norms.push(g.row_norms(residual)?);
    }
    let stacked = g.concat_rows(&norms)?;
    let key_loss = g.sum(stacked);
    let prompt_values = g.gather_rows(pool.values, &indices)?;
    Ok(Selection {
        indices,
        prompt_values,
        key_loss,
        scores,
    })
}

/// `k ~ U{1, …, upper}`.
pub fn sample_prompt_size<R: Rng + ?Sized>(upper: usize, rng: &mut R) -> usize {
    assert!(upper >= 1, "prompt size upper bound must be at least 1");
    rng.random_range(1..=upper)
}

/// `lm_loss + alpha · key_loss`.
pub fn total_loss(g: &mut Graph, lm_loss: Var, key_loss: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "key-loss weight must be non-negative, got {alpha}"
        )));
    }
    let scaled = g.scale(key_loss, alpha);
    g.add(lm_loss, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(g: &mut Graph, keys: Vec<Vec<f64>>, dv: usize) -> PoolVars {
        let p = keys.len();
        let keys = g.leaf(Tensor::from_rows(&keys).unwrap(), true);
        let vals: Vec<f64> = (0..p * dv).map(|i| i as f64 + 1.0).collect();
        let values = g.leaf(Tensor::new(&[p, dv], vals).unwrap(), true);
        PoolVars { keys, values }
    }

    fn query(g: &mut Graph, q: &[f64]) -> QueryVector {
        QueryVector(g.leaf(Tensor::new(&[1, q.len()], q.to_vec()).unwrap(), true))
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = PromptPool::init(400, 64, 64, 7).unwrap();
        assert_eq!(a.keys().shape(), &[400, 64]);
        assert_eq!(a.values().shape(), &[400, 64]);
        assert_eq!(a, PromptPool::init(400, 64, 64, 7).unwrap());
        let tiny = PromptPool::init(1, 1, 1, 3).unwrap();
        assert!(tiny.keys().item() != 0.0);
        assert!(PromptPool::init(0, 1, 1, 3).is_err());
        let bound = 1.0 / 8.0;
        assert!(a.keys().data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn query_is_row_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let q = compute_query(&mut g, x).unwrap();
        assert_eq!(g.value(q.0).data(), &[2., 3.]);
        let x = g.constant(Tensor::from_rows(&[vec![0.5, -1.5], vec![-0.5, 1.5]]).unwrap());
        let q = compute_query(&mut g, x).unwrap();
        assert_eq!(g.value(q.0).data(), &[0., 0.]);
    }

    #[test]
    fn similarity_exact_match_has_zero_loss() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]], 2);
        let q = query(&mut g, &[1., 0., 0.]);
        let sel = select_similarity(&mut g, pool, q, 1).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(g.value(sel.key_loss).item(), 0.0);
    }

    #[test]
    fn similarity_tie_uses_lowest_index_first() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.], vec![0., 1.]], 2);
        let s = 1.0 / 2f64.sqrt();
        let q = query(&mut g, &[s, s]);
        let sel = select_similarity(&mut g, pool, q, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        let want = 2.0 * ((s - 1.0).powi(2) + s * s).sqrt();
        assert!((g.value(sel.key_loss).item() - want).abs() < 1e-12);
        assert!((want / 2.0 - 0.7654).abs() < 1e-4);
        // values are not reweighted
        assert_eq!(g.value(sel.prompt_values).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn similarity_zero_query_is_an_error() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.]], 1);
        let q = query(&mut g, &[0., 0.]);
        assert!(matches!(
            select_similarity(&mut g, pool, q, 1),
            Err(Error::ZeroQuery)
        ));
    }

    #[test]
    fn attention_hand_example() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.], vec![0., 1.]], 2);
        let q = query(&mut g, &[1., 0.]);
        let sel = select_attention(&mut g, pool, q, 1).unwrap();
        let e = 1f64.exp();
        let a0 = e / (e + 1.0);
        assert_eq!(sel.indices, vec![0]);
        assert!((sel.scores[0] - a0).abs() < 1e-15);
        let pv = g.value(sel.prompt_values).data();
        assert!((pv[0] - a0).abs() < 1e-15 && (pv[1] - 2.0 * a0).abs() < 1e-15);
        assert!((g.value(sel.key_loss).item() - (-a0 * a0.ln())).abs() < 1e-15);
        // ≈ 0.229 to three decimals
        assert!((g.value(sel.key_loss).item() - 0.229).abs() < 5e-4);
    }

    #[test]
    fn attention_uniform_for_zero_query() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.], vec![0., 1.], vec![1., 1.], vec![-1., 2.]], 1);
        let q = query(&mut g, &[0., 0.]);
        let sel = select_attention(&mut g, pool, q, 4).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
        assert!(sel.scores.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        assert!((sel.scores.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g.value(sel.key_loss).item() - 4f64.ln()).abs() < 1e-12);
        let sel = select_attention(&mut g, pool, q, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(g.value(sel.prompt_values).data(), &[0.25, 0.5]);
    }

    #[test]
    fn residual_hand_trace() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.], vec![0., 1.], vec![5., 5.]], 1);
        let q = query(&mut g, &[1., 1.]);
        let sel = select_residual(&mut g, pool, q, 2).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
        assert_eq!(sel.scores, vec![1.0, 0.0]);
        assert_eq!(g.value(sel.key_loss).item(), 1.0);
        assert_eq!(g.value(sel.prompt_values).data(), &[1., 2.]);
    }

    #[test]
    fn residual_exact_key_match() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.], vec![0.3, -0.2], vec![5., 5.]], 1);
        let q = query(&mut g, &[0.3, -0.2]);
        let sel = select_residual(&mut g, pool, q, 1).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert_eq!(g.value(sel.key_loss).item(), 0.0);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(top_k(&[-0.0, 0.0, -0.0, 1.0], 4), vec![3, 0, 1, 2]);
    }

    #[test]
    fn k_out_of_range() {
        let mut g = Graph::new();
        let pool = bind(&mut g, vec![vec![1., 0.]], 1);
        let q = query(&mut g, &[1., 0.]);
        for s in [
            SelectionStrategy::Similarity,
            SelectionStrategy::Attention,
            SelectionStrategy::Residual,
        ] {
            assert!(select(&mut g, s, pool, q, 0).is_err());
            assert!(select(&mut g, s, pool, q, 2).is_err());
        }
    }

    #[test]
    fn prompt_size_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| sample_prompt_size(1, &mut rng) == 1));
        assert!((0..1000)
            .map(|_| sample_prompt_size(400, &mut rng))
            .all(|k| (1..=400).contains(&k)));
    }

    #[test]
    fn total_loss_combines_linearly() {
        let mut g = Graph::new();
        let lm = g.constant(Tensor::scalar(1.0));
        let key = g.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut g, lm, key, 0.1).unwrap();
        assert!((g.value(t).item() - 1.05).abs() < 1e-15);
        let t = total_loss(&mut g, lm, key, 0.0).unwrap();
        assert_eq!(g.value(t).item().to_bits(), 1f64.to_bits());
        assert!(total_loss(&mut g, lm, key, -1.0).is_err());
    }

    #[test]
    fn pool_bytes_round_trip() {
        let pool = PromptPool::init(5, 3, 4, 11).unwrap();
        let mut buf = Vec::new();
        pool.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 8 * (15 + 20));
        let back = PromptPool::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, pool);
    }
}

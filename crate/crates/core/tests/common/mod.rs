//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dps_core::adapter::{adapt_batch, AdapterConfig};
use dps_core::graph::{AttnGroup, Graph, Var};
use dps_core::pool::{select, PoolVars, QueryVector, SelectionStrategy};
use dps_core::{Example, ParamStore, Result, Session, Task, Tensor, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

/// Scalar value, per-input gradients, and a signature of any discrete
/// choices (selected indices) made while evaluating.
pub type Eval = (f64, Vec<Vec<f64>>, Vec<usize>);

/// Relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`; zero when both are below
/// 1e-9.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let nrm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = nrm(a).max(nrm(n));
    if scale < 1e-9 {
        return 0.0;
    }
    nrm(&diff) / scale
}

/// Central differences over every input element. `None` when a
/// perturbation changes the discrete signature (the function is not smooth
/// there), otherwise the worst per-input relative error.
pub fn fd_check(inputs: &[Tensor], run: &dyn Fn(&[Tensor]) -> Result<Eval>) -> Option<f64> {
    let (_, analytic, sig) = run(inputs).expect("base evaluation");
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut bumped = inputs.to_vec();
            let x0 = input.data()[j];
            bumped[i].data_mut()[j] = x0 + FD_STEP;
            let (fp, _, sp) = run(&bumped).expect("plus evaluation");
            bumped[i].data_mut()[j] = x0 - FD_STEP;
            let (fm, _, sm) = run(&bumped).expect("minus evaluation");
            if sp != sig || sm != sig {
                return None;
            }
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    Some(worst)
}

/// Builds a scalar from bound inputs; also returns the discrete selection it
/// made, so a perturbation that changes it can be detected.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<(Var, Vec<usize>)> + 'a;

/// Binds `inputs` as gradient leaves, builds the scalar with `f` and
/// returns its value and gradients.
pub fn graph_eval(
    inputs: &[Tensor],
    f: &Build<'_>,
) -> Result<Eval> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let (loss, sig) = f(&mut g, &vars)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, grads, sig))
}

/// `Σ out ⊙ w` for a fixed weight tensor; turns any output into a scalar
/// with a generic gradient.
pub fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub skipped: usize,
    pub max_err: f64,
}

/// Draws instances until `n` are smooth, up to `4n` attempts.
fn run_op(
    name: &'static str,
    n: usize,
    seed: u64,
    mut case: impl FnMut(&mut ChaCha8Rng) -> Option<f64>,
) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut done, mut skipped, mut max_err) = (0, 0, 0.0f64);
    while done < n && done + skipped < 4 * n {
        match case(&mut rng) {
            Some(e) => {
                done += 1;
                max_err = max_err.max(e);
            }
            None => skipped += 1,
        }
    }
    OpReport {
        name,
        instances: done,
        skipped,
        max_err,
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn graph_case(
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<(Var, Vec<usize>)>,
) -> Option<f64> {
    fd_check(&inputs, &|x: &[Tensor]| graph_eval(x, &f))
}

fn pool_case(rng: &mut ChaCha8Rng, strategy: SelectionStrategy, values_loss: bool) -> Option<f64> {
    let p = dims(rng, 3, 8);
    let d = dims(rng, 2, 5);
    let dv = dims(rng, 2, 4);
    let k = dims(rng, 1, p);
    let keys = normal(rng, &[p, d]);
    let values = normal(rng, &[p, dv]);
    let q = normal(rng, &[1, d]);
    let w = normal(rng, &[k, dv]);
    graph_case(vec![keys, values, q], move |g, v| {
        let pool = PoolVars {
            keys: v[0],
            values: v[1],
        };
        let sel = select(g, strategy, pool, QueryVector(v[2]), k)?;
        let loss = if values_loss {
            contract(g, sel.prompt_values, &w)?
        } else {
            sel.key_loss
        };
        Ok((loss, sel.indices))
    })
}

fn adapter_case(rng: &mut ChaCha8Rng) -> Option<f64> {
    let cfg = AdapterConfig {
        feature_dim: dims(rng, 2, 4),
        attn_dim: 4,
        out_dim: dims(rng, 2, 3),
        window: dims(rng, 1, 4),
        queries: dims(rng, 1, 2),
        heads: dims(rng, 1, 2),
    };
    let store = cfg.init(rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let t1 = dims(rng, 1, 7);
    let t2 = dims(rng, 1, 5);
    let f1 = normal(rng, &[t1, cfg.feature_dim]);
    let f2 = normal(rng, &[t2, cfg.feature_dim]);
    let total = cfg.output_tokens(t1) + cfg.output_tokens(t2);
    let w = normal(rng, &[total, cfg.out_dim]);
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let run = |x: &[Tensor]| -> Result<Eval> {
        let mut st = ParamStore::new();
        for (n, t) in names.iter().zip(x) {
            st.insert(n.clone(), t.clone());
        }
        let mut s = Session::new(&st, &["adapter"]);
        let outs = adapt_batch(&mut s, &cfg, &[&f1, &f2])?;
        let both = s.graph.concat_rows(&outs)?;
        let loss = contract(&mut s.graph, both, &w)?;
        let value = s.graph.value(loss).item();
        s.graph.backward(loss)?;
        let grads = names.iter().map(|n| s.grad_of(n).unwrap()).collect();
        Ok((value, grads, Vec::new()))
    };
    fd_check(&inputs, &run)
}

/// Finite-difference check of every differentiable operation, `n` smooth
/// instances each.
pub fn gradient_suite(n: usize) -> Vec<OpReport> {
    let mut out = Vec::new();
    out.push(run_op("matmul", n, 1, |rng| {
        let (m, k, p) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let w = normal(rng, &[m, p]);
        graph_case(vec![normal(rng, &[m, k]), normal(rng, &[k, p])], move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            Ok((contract(g, y, &w)?, vec![]))
        })
    }));
    out.push(run_op("matmul_nt", n, 2, |rng| {
        let (m, k, p) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
        let w = normal(rng, &[m, p]);
        graph_case(vec![normal(rng, &[m, k]), normal(rng, &[p, k])], move |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            Ok((contract(g, y, &w)?, vec![]))
        })
    }));
    out.push(run_op("softmax", n, 3, |rng| {
        let (m, c) = (dims(rng, 1, 3), dims(rng, 2, 6));
        let w = normal(rng, &[m, c]);
        graph_case(vec![normal(rng, &[m, c])], move |g, v| {
            let y = g.softmax_rows(v[0])?;
            Ok((contract(g, y, &w)?, vec![]))
        })
    }));
    out.push(run_op("layer_norm", n, 4, |rng| {
        // two columns normalize to ±1 whatever x is, leaving an O(eps) gradient
        let (m, c) = (dims(rng, 1, 3), dims(rng, 3, 6));
        let w = normal(rng, &[m, c]);
        graph_case(
            vec![normal(rng, &[m, c]), normal(rng, &[1, c]), normal(rng, &[1, c])],
            move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok((contract(g, y, &w)?, vec![]))
            },
        )
    }));
    out.push(run_op("cross_entropy", n, 5, |rng| {
        let (m, c) = (dims(rng, 1, 4), dims(rng, 2, 6));
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        graph_case(vec![normal(rng, &[m, c])], move |g, v| {
            Ok((g.cross_entropy_logits(v[0], &targets, &mask)?, vec![]))
        })
    }));
    out.push(run_op("gelu", n, 6, |rng| {
        let (m, c) = (dims(rng, 1, 3), dims(rng, 1, 5));
        let w = normal(rng, &[m, c]);
        graph_case(vec![normal(rng, &[m, c])], move |g, v| {
            let y = g.gelu(v[0]);
            Ok((contract(g, y, &w)?, vec![]))
        })
    }));
    out.push(run_op("row_ops", n, 7, |rng| {
        // add_row, scale_rows, mean_rows, row_norms, ln, transpose, gather, concat
        let (m, c) = (dims(rng, 2, 4), dims(rng, 1, 4));
        let ids: Vec<usize> = (0..dims(rng, 1, 5)).map(|_| rng.random_range(0..m)).collect();
        let w = normal(rng, &[c, ids.len() + 1]);
        let pos = Tensor::uniform(&[m, 1], 0.5, rng).data().iter().map(|x| x + 1.0).collect::<Vec<_>>();
        graph_case(
            vec![normal(rng, &[m, c]), normal(rng, &[1, c]), Tensor::new(&[m, 1], pos).unwrap()],
            move |g, v| {
                let a = g.add_row(v[0], v[1])?;
                let s = g.ln(v[2]);
                let b = g.scale_rows(a, s)?;
                let mean = g.mean_rows(b)?;
                let picked = g.gather_rows(b, &ids)?;
                let stacked = g.concat_rows(&[picked, mean])?;
                let norms = g.row_norms(stacked)?;
                let t = g.transpose(stacked)?;
                let y = contract(g, t, &w)?;
                let n = g.sum(norms);
                let sub = g.sub(y, n)?;
                Ok((g.scale(sub, 0.5), vec![]))
            },
        )
    }));
    out.push(run_op("causal_attention", n, 8, |rng| {
        let heads = dims(rng, 1, 2);
        let (d, dv) = (2 * heads, 2 * heads);
        let (l1, l2) = (dims(rng, 1, 4), dims(rng, 1, 3));
        let t = l1 + l2;
        let groups = [
            AttnGroup {
                q_start: 0,
                q_len: l1,
                k_start: 0,
                k_len: l1,
                causal: true,
            },
            AttnGroup {
                q_start: l1,
                q_len: l2,
                k_start: l1,
                k_len: l2,
                causal: true,
            },
        ];
        let w = normal(rng, &[t, dv]);
        graph_case(
            vec![normal(rng, &[t, d]), normal(rng, &[t, d]), normal(rng, &[t, dv])],
            move |g, v| {
                let y = g.attention(v[0], v[1], v[2], heads, &groups)?;
                Ok((contract(g, y, &w)?, vec![]))
            },
        )
    }));
    out.push(run_op("adapter_cross_attention", n, 9, adapter_case));
    out.push(run_op("attention_value_scaling", n, 10, |rng| {
        pool_case(rng, SelectionStrategy::Attention, true)
    }));
    out.push(run_op("key_loss_similarity", n, 11, |rng| {
        pool_case(rng, SelectionStrategy::Similarity, false)
    }));
    out.push(run_op("key_loss_attention", n, 12, |rng| {
        pool_case(rng, SelectionStrategy::Attention, false)
    }));
    out.push(run_op("key_loss_residual", n, 13, |rng| {
        pool_case(rng, SelectionStrategy::Residual, false)
    }));
    out
}

// ---- selection oracles ----

/// Indices sorted by descending score, ties ascending; first `k`.
pub fn oracle_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort: plainly stable
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx.truncate(k);
    idx
}

pub fn oracle_cosine(keys: &[Vec<f64>], q: &[f64]) -> Vec<f64> {
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    keys.iter()
        .map(|k| {
            let nk = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (nk * nq)
        })
        .collect()
}

pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Greedy residual picks: at each step the unused key nearest to the
/// current residual, lowest index on ties.
pub fn oracle_residual(keys: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut r = q.to_vec();
    let mut picks: Vec<usize> = Vec::new();
    for _ in 0..k {
        let dist = |i: usize| -> f64 {
            keys[i].iter().zip(&r).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
        };
        let best = (0..keys.len())
            .filter(|i| !picks.contains(i))
            .fold(None::<usize>, |b, i| match b {
                Some(j) if dist(j) <= dist(i) => Some(j),
                _ => Some(i),
            })
            .unwrap();
        for (x, y) in r.iter_mut().zip(&keys[best]) {
            *x -= y;
        }
        picks.push(best);
    }
    picks
}

/// Random pool with deliberate ties: entries are drawn from a small grid so
/// equal scores and duplicate keys occur.
pub fn random_pool(rng: &mut ChaCha8Rng, p: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let gridded = rng.random_bool(0.3);
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if gridded {
            rng.random_range(-2i32..=2) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    let keys: Vec<Vec<f64>> = (0..p)
        .map(|_| loop {
            let row: Vec<f64> = (0..d).map(|_| draw(rng)).collect();
            if row.iter().any(|&x| x != 0.0) {
                break row;
            }
        })
        .collect();
    let q = loop {
        let q: Vec<f64> = (0..d).map(|_| draw(rng)).collect();
        if q.iter().any(|&x| x != 0.0) {
            break q;
        }
    };
    (keys, q)
}

/// Alphabet size the task oracle supports.
pub const ORACLE_SYMBOLS: usize = 16;

/// Plain restatement of each task on symbol strings.
pub fn oracle_target(e: &Example, v: &Vocab) -> Vec<usize> {
    let xs = &e.symbols;
    let mut out: Vec<usize> = match e.task {
        Task::Copy => xs.clone(),
        Task::Reverse => {
            let mut r = Vec::new();
            for i in (0..xs.len()).rev() {
                r.push(xs[i]);
            }
            r
        }
        Task::Sort => {
            // counting sort
            let mut counts = [0usize; ORACLE_SYMBOLS];
            for &x in xs {
                counts[x] += 1;
            }
            let mut r = Vec::new();
            for (sym, &c) in counts.iter().enumerate() {
                r.extend(std::iter::repeat_n(sym, c));
            }
            r
        }
        Task::Max => vec![xs.iter().fold(0, |m, &x| m.max(x))],
        Task::PosQuery => vec![xs[e.instruction[1]]],
        Task::Parity => {
            let odd = xs.iter().filter(|&&x| x % 2 == 1).count() % 2 == 1;
            vec![if odd { v.odd() } else { v.even() }]
        }
    };
    out.push(v.eos());
    out
}

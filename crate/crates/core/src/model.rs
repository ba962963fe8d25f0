//! Full prompted model: adapter → query → prompt (pool selection, soft
//! prompt, or nothing) → frozen decoder, for every training strategy.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_batch, AdapterConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::lm::{argmax, build_input, build_prefix, embed_tokens, forward, LmConfig, LmInput};
use crate::params::{ParamStore, Session};
use crate::pool::{compute_query, select, total_loss, PromptPool, Selection, SelectionStrategy};
use crate::taskgen::{Example, Vocab};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Adapter only, no prompt and no backbone delta.
    None,
    Lora,
    Soft,
    Dps(SelectionStrategy),
}

/// A [`Method`] plus whether the prompt length is resampled every batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Strategy {
    pub method: Method,
    pub stochastic: bool,
}

impl Strategy {
    pub fn new(method: Method, stochastic: bool) -> Self {
        Self { method, stochastic }
    }

    pub fn dps(strategy: SelectionStrategy) -> Self {
        Self::new(Method::Dps(strategy), false)
    }

    pub fn uses_prompt(&self) -> bool {
        matches!(self.method, Method::Soft | Method::Dps(_))
    }

    /// Parameter components updated by the optimizer.
    pub fn trainable(&self) -> &'static [&'static str] {
        match self.method {
            Method::None => &["adapter"],
            Method::Lora => &["adapter", "lora"],
            Method::Soft => &["adapter", "soft"],
            Method::Dps(_) => &["adapter", "pool"],
        }
    }

    fn base_name(&self) -> String {
        match self.method {
            Method::None => "none".into(),
            Method::Lora => "lora".into(),
            Method::Soft => "soft".into(),
            Method::Dps(s) => format!("dps-{}", s.short_name()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.base_name())?;
        if self.stochastic {
            f.write_str("-stochastic")?;
        }
        Ok(())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (base, stochastic) = match lower.strip_suffix("-stochastic") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let method = match base {
            "none" => Method::None,
            "lora" => Method::Lora,
            "soft" => Method::Soft,
            "dps-sim" | "dps-similarity" => Method::Dps(SelectionStrategy::Similarity),
            "dps-attn" | "dps-attention" => Method::Dps(SelectionStrategy::Attention),
            "dps-res" | "dps-residual" => Method::Dps(SelectionStrategy::Residual),
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        };
        if stochastic && matches!(method, Method::None | Method::Lora) {
            return Err(Error::Config(format!("{base} has no prompt length to sample")));
        }
        Ok(Self { method, stochastic })
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub adapter: AdapterConfig,
    pub strategy: Strategy,
    pub pool_size: usize,
    /// Pool key dimension; the query lives in model space so this must
    /// equal `lm.d_model`.
    pub key_dim: usize,
    pub soft_len: usize,
    pub alpha: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.adapter.validate()?;
        if self.adapter.out_dim != self.lm.d_model {
            return Err(Error::Config(format!(
                "adapter out_dim {} must equal d_model {}",
                self.adapter.out_dim, self.lm.d_model
            )));
        }
        if self.key_dim != self.lm.d_model {
            return Err(Error::Config(format!(
                "key_dim {} must equal d_model {} (queries are token means)",
                self.key_dim, self.lm.d_model
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.max_prompt() > self.lm.prompt_slots {
            return Err(Error::Config(format!(
                "prompt capacity {} exceeds lm.prompt_slots {}",
                self.max_prompt(),
                self.lm.prompt_slots
            )));
        }
        Ok(())
    }

    /// Largest prompt this strategy can emit.
    pub fn max_prompt(&self) -> usize {
        match self.strategy.method {
            Method::None | Method::Lora => 0,
            Method::Soft => self.soft_len,
            Method::Dps(_) => self.pool_size,
        }
    }

    pub fn check_prompt_size(&self, k: usize) -> Result<()> {
        let max = self.max_prompt();
        if self.strategy.uses_prompt() && (k == 0 || k > max) {
            return Err(Error::InvalidArgument(format!(
                "prompt size {k} must lie in [1, {max}] for {}",
                self.strategy
            )));
        }
        Ok(())
    }
}

/// Per-batch loss terms.
pub struct BatchLoss {
    pub total: Var,
    pub lm: Var,
    pub key: Option<Var>,
    pub selections: Vec<Selection>,
}

/// Adapter tokens, prompt and selection of one example.
type Prepared = (Var, Option<Var>, Option<Selection>);

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
}

impl Model {
    /// Fresh trainable parts around an existing backbone (`lm.*`).
    pub fn new(cfg: ModelConfig, vocab: Vocab, backbone: ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.lm.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "lm vocab_size {} != benchmark vocab {}",
                cfg.lm.vocab_size,
                vocab.size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = backbone;
        store.retain_components(&["lm"]);
        store.extend(cfg.adapter.init(&mut rng));
        match cfg.strategy.method {
            Method::None => {}
            Method::Lora => store.extend(cfg.lm.init_lora(&mut rng)),
            Method::Soft => store.extend(cfg.lm.init_soft_prompt(cfg.soft_len, &mut rng)?),
            Method::Dps(_) => {
                let pool = PromptPool::init(cfg.pool_size, cfg.key_dim, cfg.lm.d_model, rand::Rng::random(&mut rng))?;
                let (k, v) = pool.into_parts();
                store.insert("pool.keys", k);
                store.insert("pool.values", v);
            }
        }
        Ok(Self { cfg, vocab, store })
    }

    pub fn pool(&self) -> Option<PromptPool> {
        let k = self.store.get("pool.keys").ok()?.clone();
        let v = self.store.get("pool.values").ok()?.clone();
        PromptPool::from_parts(k, v).ok()
    }

    pub fn trainable_count(&self) -> usize {
        self.cfg
            .strategy
            .trainable()
            .iter()
            .map(|c| self.store.numel(c))
            .sum()
    }

    fn selection_strategy(&self) -> Option<SelectionStrategy> {
        match self.cfg.strategy.method {
            Method::Dps(s) => Some(s),
            _ => None,
        }
    }

    /// Adapter tokens plus the prompt and selection for each example.
    fn prepare(
        &self,
        s: &mut Session<'_>,
        examples: &[&Example],
        k: usize,
    ) -> Result<Vec<Prepared>> {
        self.cfg.check_prompt_size(k)?;
        let feats: Vec<&Tensor> = examples.iter().map(|e| &e.features).collect();
        let tokens = adapt_batch(s, &self.cfg.adapter, &feats)?;
        let mut out = Vec::with_capacity(examples.len());
        for (e, &f) in examples.iter().zip(&tokens) {
            let (prompt, sel) = match self.cfg.strategy.method {
                Method::None | Method::Lora => (None, None),
                Method::Soft => {
                    let table = s.param("soft.tokens")?;
                    (Some(s.graph.gather_rows(table, &(0..k).collect::<Vec<_>>())?), None)
                }
                Method::Dps(strategy) => {
                    let instr = embed_tokens(s, &e.instruction)?;
                    let x = s.graph.concat_rows(&[f, instr])?;
                    let q = compute_query(&mut s.graph, x)?;
                    let pool = crate::pool::PoolVars {
                        keys: s.param("pool.keys")?,
                        values: s.param("pool.values")?,
                    };
                    let sel = select(&mut s.graph, strategy, pool, q, k)?;
                    (Some(sel.prompt_values), Some(sel))
                }
            };
            out.push((f, prompt, sel));
        }
        Ok(out)
    }

    /// Mean over examples of the masked next-token loss, plus `alpha` times
    /// the batch-mean key loss for pool strategies.
    pub fn batch_loss(&self, s: &mut Session<'_>, examples: &[&Example], k: usize) -> Result<BatchLoss> {
        if examples.is_empty() {
            return Err(Error::EmptySequence("batch"));
        }
        let prepared = self.prepare(s, examples, k)?;
        let mut inputs = Vec::with_capacity(examples.len());
        let mut selections = Vec::new();
        for (e, (f, prompt, sel)) in examples.iter().zip(prepared) {
            inputs.push(build_input(
                s,
                &self.cfg.lm,
                prompt,
                f,
                &e.instruction,
                self.vocab.bos(),
                &e.target,
            )?);
            selections.extend(sel);
        }
        let lm = packed_lm_loss(s, &self.cfg.lm, &inputs, self.cfg.strategy.method == Method::Lora)?;
        if selections.is_empty() {
            return Ok(BatchLoss {
                total: lm,
                lm,
                key: None,
                selections,
            });
        }
        let per: Vec<Var> = selections.iter().map(|sel| sel.key_loss).collect();
        let rows = per
            .iter()
            .map(|&v| s.graph.reshape(v, &[1, 1]))
            .collect::<Result<Vec<_>>>()?;
        let stacked = s.graph.concat_rows(&rows)?;
        let sum = s.graph.sum(stacked);
        let key = s.graph.scale(sum, 1.0 / selections.len() as f64);
        let total = total_loss(&mut s.graph, lm, key, self.cfg.alpha)?;
        Ok(BatchLoss {
            total,
            lm,
            key: Some(key),
            selections,
        })
    }

    /// Pool indices each example selects at prompt size `k` (no decoding).
    pub fn selected_indices(&self, examples: &[&Example], k: usize) -> Result<Vec<Vec<usize>>> {
        if self.selection_strategy().is_none() {
            return Err(Error::Strategy(format!(
                "{} has no prompt pool to select from",
                self.cfg.strategy
            )));
        }
        let mut s = Session::inference(&self.store);
        Ok(self
            .prepare(&mut s, examples, k)?
            .into_iter()
            .map(|(_, _, sel)| sel.expect("pool strategy").indices)
            .collect())
    }

    /// Greedy argmax decoding from BOS until EOS or `max_len` tokens. The
    /// returned tokens include the EOS when one was produced.
    pub fn greedy_decode(&self, examples: &[&Example], k: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let fixed: Vec<(Tensor, Option<Tensor>)> = {
            let mut s = Session::inference(&self.store);
            let prepared = self.prepare(&mut s, examples, k)?;
            prepared
                .into_iter()
                .map(|(f, p, _)| (s.graph.value(f).clone(), p.map(|p| s.graph.value(p).clone())))
                .collect()
        };
        let lora = self.cfg.strategy.method == Method::Lora;
        let eos = self.vocab.eos();
        let mut generated = vec![Vec::new(); examples.len()];
        let mut active: Vec<usize> = (0..examples.len()).collect();
        while !active.is_empty() {
            let mut s = Session::inference(&self.store);
            let mut inputs = Vec::with_capacity(active.len());
            for &i in &active {
                let (f, p) = &fixed[i];
                let f = s.graph.constant(f.clone());
                let p = p.as_ref().map(|p| s.graph.constant(p.clone()));
                inputs.push(build_prefix(
                    &mut s,
                    &self.cfg.lm,
                    p,
                    f,
                    &examples[i].instruction,
                    self.vocab.bos(),
                    &generated[i],
                )?);
            }
            let logits = packed_logits(&mut s, &self.cfg.lm, &inputs, lora)?;
            let lv = s.graph.value(logits);
            let mut end = 0;
            for (input, &i) in inputs.iter().zip(&active) {
                end += input.len();
                generated[i].push(argmax(lv.row(end - 1)));
            }
            active.retain(|&i| {
                generated[i].last() != Some(&eos) && generated[i].len() < max_len
            });
        }
        Ok(generated)
    }
}

fn packed_logits(s: &mut Session<'_>, cfg: &LmConfig, inputs: &[LmInput], lora: bool) -> Result<Var> {
    let embeds: Vec<Var> = inputs.iter().map(|i| i.embeds).collect();
    let lens: Vec<usize> = inputs.iter().map(LmInput::len).collect();
    let x = if embeds.len() == 1 {
        embeds[0]
    } else {
        s.graph.concat_rows(&embeds)?
    };
    forward(s, cfg, x, &lens, lora)
}

/// Mean over sequences of each sequence's mean masked cross-entropy.
pub fn packed_lm_loss(s: &mut Session<'_>, cfg: &LmConfig, inputs: &[LmInput], lora: bool) -> Result<Var> {
    let logits = packed_logits(s, cfg, inputs, lora)?;
    let b = inputs.len() as f64;
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for input in inputs {
        let count = input.mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateMask);
        }
        let w = 1.0 / (count as f64 * b);
        labels.extend_from_slice(&input.labels);
        weights.extend(input.mask.iter().map(|&m| if m { w } else { 0.0 }));
    }
    s.graph.weighted_cross_entropy(logits, &labels, &weights)
}

/// Greedy decoding of the text-only form used by [`text_batch_loss`].
pub fn text_greedy_decode(
    store: &ParamStore,
    cfg: &LmConfig,
    vocab: &Vocab,
    batch: &[(&Example, usize)],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let eos = vocab.eos();
    let mut generated = vec![Vec::new(); batch.len()];
    let mut active: Vec<usize> = (0..batch.len()).collect();
    while !active.is_empty() {
        let mut s = Session::inference(store);
        let mut inputs = Vec::with_capacity(active.len());
        for &i in &active {
            let (e, pad_prefix) = batch[i];
            let prompt = if pad_prefix > 0 {
                Some(embed_tokens(&mut s, &vec![vocab.pad(); pad_prefix])?)
            } else {
                None
            };
            let symbols = embed_tokens(&mut s, &e.symbols)?;
            inputs.push(build_prefix(&mut s, cfg, prompt, symbols, &e.instruction, vocab.bos(), &generated[i])?);
        }
        let logits = packed_logits(&mut s, cfg, &inputs, false)?;
        let lv = s.graph.value(logits);
        let mut end = 0;
        for (input, &i) in inputs.iter().zip(&active) {
            end += input.len();
            generated[i].push(argmax(lv.row(end - 1)));
        }
        active.retain(|&i| generated[i].last() != Some(&eos) && generated[i].len() < max_len);
    }
    Ok(generated)
}

/// Text-only counterpart of an example used to pretrain the backbone: the
/// symbols enter as token embeddings after `pad_prefix` PAD tokens. When
/// `noise` is given, its i-th tensor (one row per symbol) is added to the
/// i-th example's symbol embeddings.
pub fn text_batch_loss(
    s: &mut Session<'_>,
    cfg: &LmConfig,
    vocab: &Vocab,
    batch: &[(&Example, usize)],
    noise: Option<&[Tensor]>,
) -> Result<Var> {
    let mut inputs = Vec::with_capacity(batch.len());
    for (i, (e, pad_prefix)) in batch.iter().enumerate() {
        let prompt = if *pad_prefix > 0 {
            Some(embed_tokens(s, &vec![vocab.pad(); *pad_prefix])?)
        } else {
            None
        };
        let mut symbols = embed_tokens(s, &e.symbols)?;
        if let Some(n) = noise.and_then(|n| n.get(i)) {
            let n = s.graph.constant(n.clone());
            symbols = s.graph.add(symbols, n)?;
        }
        inputs.push(build_input(s, cfg, prompt, symbols, &e.instruction, vocab.bos(), &e.target)?);
    }
    packed_lm_loss(s, cfg, &inputs, false)
}

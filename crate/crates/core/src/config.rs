//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::model::{Method, ModelConfig, Strategy};
use crate::optim::{AdamWConfig, Schedule};
use crate::taskgen::{Benchmark, Task, TaskSpec, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    pub lora_rank: usize,
    pub window: usize,
    pub adapter_queries: usize,
    pub adapter_heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub symbols: usize,
    pub feature_dim: usize,
    pub frames_per_symbol: usize,
    pub noise: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub tasks: Vec<Task>,
    pub proto_seed: u64,
    /// Task left out of training batches; still evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<Task>,
}

/// Text-only pretraining of the decoder that is later frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    /// Longest PAD prefix shown in front of the content; defaults to the
    /// prompt slot count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_max: Option<usize>,
    /// Gaussian noise added to symbol embeddings, as a multiple of the
    /// embedding table's RMS; the adapter's tokens are never exact embeddings.
    #[serde(default)]
    pub embed_noise: f64,
    /// Load from / cache to this file when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub stochastic: bool,
    pub pool_size: usize,
    pub prompt_size: usize,
    /// Upper bound of the sampled prompt length; defaults to the pool size
    /// (or soft-prompt length).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic_upper: Option<usize>,
    pub soft_len: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    /// Held-out examples per task for the periodic evaluation.
    pub eval_probe_per_task: usize,
    /// Held-out examples per task for the final evaluation.
    pub eval_per_task: usize,
    pub out_dir: PathBuf,
    pub model: ModelDims,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
}

impl TrainConfig {
    /// Laptop-scale default: P=64, k=32, d′=128, 20K steps.
    pub fn desk() -> Self {
        Self {
            strategy: Strategy::dps(crate::pool::SelectionStrategy::Similarity),
            stochastic: false,
            pool_size: 64,
            prompt_size: 32,
            stochastic_upper: None,
            soft_len: 32,
            alpha: 0.1,
            batch_size: 8,
            total_steps: 20_000,
            warmup_steps: 500,
            max_lr: 3e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 1,
            log_every: 50,
            eval_every: 1000,
            eval_probe_per_task: 20,
            eval_per_task: 200,
            out_dir: PathBuf::from("runs/desk"),
            model: ModelDims {
                d_model: 128,
                heads: 2,
                layers: 2,
                mlp_hidden: 256,
                context: 256,
                lora_rank: 8,
                window: 2,
                adapter_queries: 1,
                adapter_heads: 1,
            },
            data: DataConfig {
                symbols: 16,
                feature_dim: 32,
                frames_per_symbol: 2,
                noise: 0.2,
                len_min: 4,
                len_max: 10,
                tasks: Task::ALL.to_vec(),
                proto_seed: 0,
                holdout: None,
            },
            backbone: BackboneConfig {
                seed: 0,
                steps: 8000,
                batch_size: 16,
                warmup_steps: 100,
                max_lr: 1e-3,
                prefix_max: None,
                embed_noise: 0.5,
                path: None,
            },
        }
    }

    /// Large-scale hyperparameters: pool of
    /// 400, prompt of 160, 90K steps, peak lr 3e-5 after 3000 warmup steps.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.pool_size = 400;
        c.prompt_size = 160;
        c.soft_len = 160;
        c.total_steps = 90_000;
        c.warmup_steps = 3000;
        c.max_lr = 3e-5;
        c.model.context = 448;
        c.out_dir = PathBuf::from("runs/full");
        c
    }

    /// Minutes-scale sanity run.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.pool_size = 16;
        c.prompt_size = 8;
        c.soft_len = 8;
        c.total_steps = 500;
        c.warmup_steps = 50;
        c.max_lr = 1e-3;
        c.eval_every = 250;
        c.eval_probe_per_task = 5;
        c.eval_per_task = 20;
        c.model.d_model = 64;
        c.model.mlp_hidden = 128;
        c.model.context = 64;
        c.data.len_max = 6;
        c.backbone.steps = 300;
        c.out_dir = PathBuf::from("runs/smoke");
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Config(format!("unknown profile {name:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Strategy with the stochastic flag folded in.
    pub fn effective_strategy(&self) -> Strategy {
        Strategy::new(self.strategy.method, self.strategy.stochastic || self.stochastic)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.data.symbols)
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.data
            .tasks
            .iter()
            .map(|&task| TaskSpec {
                task,
                len_min: self.data.len_min,
                len_max: self.data.len_max,
                noise: self.data.noise,
                frames_per_symbol: self.data.frames_per_symbol,
            })
            .collect()
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::new(self.vocab(), self.data.feature_dim, self.task_specs(), self.data.proto_seed)
    }

    /// Tasks that appear in training batches.
    pub fn train_tasks(&self) -> Vec<Task> {
        self.data
            .tasks
            .iter()
            .copied()
            .filter(|&t| Some(t) != self.data.holdout)
            .collect()
    }

    /// Prompt positions reserved in the context: the largest prompt any
    /// strategy of this config can produce.
    pub fn prompt_slots(&self) -> usize {
        self.pool_size.max(self.soft_len)
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            vocab_size: self.vocab().size(),
            d_model: self.model.d_model,
            heads: self.model.heads,
            layers: self.model.layers,
            mlp_hidden: self.model.mlp_hidden,
            context: self.model.context,
            prompt_slots: self.prompt_slots(),
            lora_rank: self.model.lora_rank,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lm: self.lm_config(),
            adapter: AdapterConfig {
                feature_dim: self.data.feature_dim,
                attn_dim: self.model.d_model,
                out_dim: self.model.d_model,
                window: self.model.window,
                queries: self.model.adapter_queries,
                heads: self.model.adapter_heads,
            },
            strategy: self.effective_strategy(),
            pool_size: self.pool_size,
            key_dim: self.model.d_model,
            soft_len: self.soft_len,
            alpha: self.alpha,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            max_lr: self.max_lr,
            min_lr: self.min_lr,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Upper bound for the per-batch prompt length of stochastic training.
    pub fn sample_upper(&self) -> usize {
        let cap = match self.strategy.method {
            Method::Soft => self.soft_len,
            _ => self.pool_size,
        };
        self.stochastic_upper.unwrap_or(cap).min(cap)
    }

    /// Longest target plus EOS, plus two tokens of slack.
    pub fn decode_max_len(&self) -> usize {
        self.data.len_max + 3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.prompt_size == 0 || self.prompt_size > self.pool_size {
            return bad(format!(
                "prompt_size {} must lie in [1, pool_size {}]",
                self.prompt_size, self.pool_size
            ));
        }
        if self.strategy.method == Method::Soft && self.prompt_size > self.soft_len {
            return bad(format!(
                "prompt_size {} exceeds soft_len {}",
                self.prompt_size, self.soft_len
            ));
        }
        if self.batch_size == 0 || self.backbone.batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.stochastic && matches!(self.strategy.method, Method::None | Method::Lora) {
            return bad(format!("{} cannot be stochastic", self.strategy));
        }
        if self.stochastic_upper == Some(0) {
            return bad("stochastic_upper must be at least 1".into());
        }
        if self.data.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if let Some(h) = self.data.holdout {
            if !self.data.tasks.contains(&h) || self.data.tasks.iter().all(|&t| t == h) {
                return bad(format!("holdout {h} must be one of several configured tasks"));
            }
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return bad("log_every and eval_every must be positive".into());
        }
        if !(self.grad_clip > 0.0) || !(self.max_lr >= 0.0) || !(self.min_lr >= 0.0) {
            return bad("grad_clip must be positive and learning rates non-negative".into());
        }
        if !(self.backbone.embed_noise >= 0.0) || !self.backbone.embed_noise.is_finite() {
            return bad("backbone.embed_noise must be finite and non-negative".into());
        }
        // adapter tokens, instruction (task token plus optional position),
        // BOS, and the longest decode prefix
        let frames = self.data.len_max * self.data.frames_per_symbol;
        let content = frames.div_ceil(self.model.window.max(1)) * self.model.adapter_queries
            + 2
            + 1
            + self.decode_max_len()
            - 1;
        if self.prompt_slots() + content > self.model.context {
            return bad(format!(
                "context {} cannot hold {} prompt slots plus {} content tokens",
                self.model.context,
                self.prompt_slots(),
                content
            ));
        }
        self.model_config().validate()
    }
}

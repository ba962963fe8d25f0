//! Backbone pretraining, the prompt-training loop and evaluation.
//!
//! Every batch is a pure function of `(seed, step)`, so a run resumed from a
//! checkpoint sees exactly the batches the uninterrupted run would have.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_store, save_store, Checkpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{Metrics, Score};
use crate::model::{text_batch_loss, Method, Model};
use crate::optim::{adamw_step, clip_global_norm, AdamState, AdamWConfig, Schedule};
use crate::params::{component_of, ParamStore, Session};
use crate::pool::sample_prompt_size;
use crate::taskgen::{Benchmark, Example};
use crate::tensor::Tensor;

/// Examples decoded together in one packed forward pass.
const DECODE_CHUNK: usize = 32;

/// SplitMix64 finalizer over `seed ⊕ stream·φ`; decorrelates per-step seeds.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const BACKBONE_STREAM: u64 = 0xB4C4_B0E5;

/// Batch for step `step`: tasks cycle round-robin across the run, each
/// example is regenerated from a sub-seed, and stochastic runs draw the
/// prompt length from the same stream.
pub fn training_batch(cfg: &TrainConfig, bench: &Benchmark, step: usize) -> Result<(Vec<Example>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, step as u64));
    let tasks = cfg.train_tasks();
    let examples = (0..cfg.batch_size)
        .map(|i| {
            let task = tasks[(step * cfg.batch_size + i) % tasks.len()];
            bench.example_from_seed(task, rng.random())
        })
        .collect::<Result<Vec<_>>>()?;
    let k = if cfg.effective_strategy().stochastic {
        sample_prompt_size(cfg.sample_upper(), &mut rng)
    } else {
        cfg.prompt_size
    };
    Ok((examples, k))
}

/// Held-out split: `n_per_task` examples per task from stream `seed + 1`.
pub fn eval_split(cfg: &TrainConfig, bench: &Benchmark, n_per_task: usize) -> Result<Vec<Example>> {
    bench.gen_dataset(n_per_task, cfg.seed.wrapping_add(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub store: ParamStore,
    /// Training loss per step; empty when loaded from disk.
    pub losses: Vec<f64>,
}

/// Trains the decoder on text versions of the tasks (symbols given as
/// tokens behind a random-length PAD prefix), or loads it from
/// `backbone.path` when that file exists. The result is what every strategy
/// later freezes.
pub fn pretrain_backbone(cfg: &TrainConfig) -> Result<Backbone> {
    let lm = cfg.lm_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed);
    let mut store = lm.init_backbone(&mut rng);
    if let Some(path) = cfg.backbone.path.as_deref().filter(|p| p.exists()) {
        let loaded = load_store(path)?;
        for (name, t) in store.iter() {
            let got = loaded.get(name).map_err(|_| {
                Error::Checkpoint(format!("{}: missing backbone tensor {name}", path.display()))
            })?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: {name} has shape {:?}, config expects {:?}",
                    path.display(),
                    got.shape(),
                    t.shape()
                )));
            }
        }
        return Ok(Backbone {
            store: loaded,
            losses: Vec::new(),
        });
    }
    let bench = cfg.benchmark()?;
    let vocab = cfg.vocab();
    let bb = &cfg.backbone;
    let schedule = Schedule {
        warmup_steps: bb.warmup_steps.min(bb.steps.saturating_sub(1)),
        total_steps: bb.steps,
        max_lr: bb.max_lr,
        min_lr: 0.0,
    };
    let prefix_max = bb.prefix_max.unwrap_or(lm.prompt_slots).min(lm.prompt_slots);
    let hp = AdamWConfig::default();
    let mut adam = AdamState::default();
    let tasks = cfg.train_tasks();
    let mut losses = Vec::with_capacity(bb.steps);
    for step in 0..bb.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(bb.seed ^ BACKBONE_STREAM, step as u64));
        let batch = (0..bb.batch_size)
            .map(|i| {
                let task = tasks[(step * bb.batch_size + i) % tasks.len()];
                let e = bench.example_from_seed(task, rng.random())?;
                Ok((e, rng.random_range(0..=prefix_max)))
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&Example, usize)> = batch.iter().map(|(e, p)| (e, *p)).collect();
        let noise = (bb.embed_noise > 0.0).then(|| {
            let emb = store.get("lm.tok_emb").expect("backbone has a token embedding");
            let rms = (emb.data().iter().map(|x| x * x).sum::<f64>() / emb.numel() as f64).sqrt();
            refs.iter()
                .map(|(e, _)| Tensor::normal(&[e.symbols.len(), lm.d_model], bb.embed_noise * rms, &mut rng))
                .collect::<Vec<_>>()
        });
        let mut s = Session::new(&store, &["lm"]);
        let loss = text_batch_loss(&mut s, &lm, &vocab, &refs, noise.as_deref())?;
        let value = s.graph.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("backbone loss {value}"),
            });
        }
        s.graph.backward(loss)?;
        let mut grads = full_grads(&s, &store, &["lm"]);
        clip_global_norm(&mut grads, cfg.grad_clip);
        drop(s);
        adamw_step(&mut store, &grads, &mut adam, schedule.lr_at(step), &hp)?;
        losses.push(value);
    }
    if let Some(path) = &bb.path {
        save_store(&store, path)?;
    }
    Ok(Backbone { store, losses })
}

/// Gradient for every parameter of the trainable components, zero-filled
/// where the graph did not reach it.
fn full_grads(s: &Session<'_>, store: &ParamStore, trainable: &[&str]) -> IndexMap<String, Vec<f64>> {
    store
        .iter()
        .filter(|(n, _)| trainable.contains(&component_of(n)))
        .map(|(n, t)| {
            let g = s.grad_of(n).unwrap_or_else(|| vec![0.0; t.numel()]);
            (n.to_string(), g)
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lm_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_loss: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub prompt_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Every step, not only the logged ones.
    pub history: Vec<LogRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_metrics: Metrics,
    pub checkpoint: Option<PathBuf>,
}

impl RunReport {
    pub fn mean_loss(&self) -> f64 {
        if self.history.is_empty() {
            return f64::NAN;
        }
        self.history.iter().map(|r| r.loss).sum::<f64>() / self.history.len() as f64
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub bench: Benchmark,
    pub model: Model,
    pub adam: AdamState,
    /// Optimizer steps completed.
    pub step: usize,
    schedule: Schedule,
    hp: AdamWConfig,
}

impl Trainer {
    /// Pretrains (or loads) the backbone, then wraps it.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let backbone = pretrain_backbone(&config)?;
        Self::with_backbone(config, backbone.store)
    }

    pub fn with_backbone(config: TrainConfig, backbone: ParamStore) -> Result<Self> {
        config.validate()?;
        let bench = config.benchmark()?;
        let model = Model::new(config.model_config(), config.vocab(), backbone, mix(config.seed, u64::MAX))?;
        Ok(Self {
            schedule: config.schedule(),
            hp: config.adamw(),
            config,
            bench,
            model,
            adam: AdamState::default(),
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let model = ck.model()?;
        let config = ck.config;
        Ok(Self {
            schedule: config.schedule(),
            hp: config.adamw(),
            bench: config.benchmark()?,
            config,
            model,
            adam: ck.adam,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            store: self.model.store.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// One optimizer step. A non-finite loss or gradient leaves the model
    /// untouched and returns [`Error::Diverged`].
    pub fn step(&mut self) -> Result<LogRecord> {
        let step = self.step;
        let (examples, k) = training_batch(&self.config, &self.bench, step)?;
        let refs: Vec<&Example> = examples.iter().collect();
        let trainable = self.model.cfg.strategy.trainable();
        let mut s = Session::new(&self.model.store, trainable);
        let loss = self.model.batch_loss(&mut s, &refs, k)?;
        let total = s.graph.value(loss.total).item();
        let lm_loss = s.graph.value(loss.lm).item();
        let key_loss = loss.key.map(|v| s.graph.value(v).item());
        if !total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {total}"),
            });
        }
        s.graph.backward(loss.total)?;
        let mut grads = full_grads(&s, &self.model.store, trainable);
        drop(s);
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        let lr = self.schedule.lr_at(step);
        adamw_step(&mut self.model.store, &grads, &mut self.adam, lr, &self.hp)?;
        self.step += 1;
        Ok(LogRecord {
            step,
            loss: total,
            lm_loss,
            key_loss,
            lr,
            grad_norm,
            prompt_size: k,
        })
    }

    /// Trains until `total_steps`. With an output directory it appends
    /// logged steps to `metrics.jsonl`, periodic evaluations to
    /// `eval.jsonl`, and finishes with `final.ckpt` and `metrics.csv`. On
    /// divergence the pre-step state is saved as `last_good.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<RunReport> {
        let mut log = match out_dir {
            Some(dir) => Some(RunFiles::open(dir, self.step == 0)?),
            None => None,
        };
        let probe = if self.config.eval_probe_per_task > 0 {
            eval_split(&self.config, &self.bench, self.config.eval_probe_per_task)?
        } else {
            Vec::new()
        };
        let mut history = Vec::with_capacity(self.config.total_steps.saturating_sub(self.step));
        let mut evals = Vec::new();
        while !self.is_done() {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("last_good.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(f) = log.as_mut() {
                if rec.step % self.config.log_every == 0 || self.is_done() {
                    f.write_json(FileKind::Steps, &rec)?;
                }
            }
            history.push(rec);
            if self.step.is_multiple_of(self.config.eval_every) && !probe.is_empty() && !self.is_done() {
                let metrics = evaluate(&self.model, &probe, self.config.prompt_size, self.config.decode_max_len())?;
                let r = EvalRecord {
                    step: self.step,
                    metrics,
                };
                if let Some(f) = log.as_mut() {
                    f.write_json(FileKind::Evals, &r)?;
                }
                evals.push(r);
            }
        }
        let held_out = eval_split(&self.config, &self.bench, self.config.eval_per_task)?;
        let final_metrics = evaluate(
            &self.model,
            &held_out,
            self.config.prompt_size,
            self.config.decode_max_len(),
        )?;
        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join("final.ckpt");
                self.checkpoint().save(&path)?;
                let csv = dir.join("metrics.csv");
                std::fs::write(&csv, final_metrics.to_csv()).map_err(|e| Error::io(&csv, e))?;
                if let Some(f) = log.as_mut() {
                    f.write_json(
                        FileKind::Evals,
                        &EvalRecord {
                            step: self.step,
                            metrics: final_metrics.clone(),
                        },
                    )?;
                    f.flush()?;
                }
                Some(path)
            }
            None => None,
        };
        Ok(RunReport {
            history,
            evals,
            final_metrics,
            checkpoint,
        })
    }
}

/// Pretrains the backbone, trains the configured strategy and evaluates it.
pub fn train(cfg: TrainConfig) -> Result<(Trainer, RunReport)> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut trainer = Trainer::new(cfg)?;
    let report = trainer.run(Some(&out))?;
    Ok((trainer, report))
}

/// Greedy-decodes every example with prompt size `k_infer` and scores the
/// output against the target (EOS included on both sides).
pub fn evaluate(model: &Model, examples: &[Example], k_infer: usize, max_len: usize) -> Result<Metrics> {
    let scores = score_examples(model, examples, k_infer, max_len)?;
    Ok(Metrics::from_scores(&scores))
}

pub fn score_examples(
    model: &Model,
    examples: &[Example],
    k_infer: usize,
    max_len: usize,
) -> Result<Vec<(crate::taskgen::Task, Score)>> {
    let k = match model.cfg.strategy.method {
        Method::None | Method::Lora => 0,
        _ => {
            model.cfg.check_prompt_size(k_infer)?;
            k_infer
        }
    };
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(DECODE_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let decoded = model.greedy_decode(&refs, k, max_len)?;
        for (e, pred) in chunk.iter().zip(decoded) {
            out.push((e.task, Score::of(&pred, &e.target)));
        }
    }
    Ok(out)
}

enum FileKind {
    Steps,
    Evals,
}

struct RunFiles {
    dir: PathBuf,
    steps: BufWriter<File>,
    evals: BufWriter<File>,
}

impl RunFiles {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            steps: open("metrics.jsonl")?,
            evals: open("eval.jsonl")?,
        })
    }

    fn write_json<T: Serialize>(&mut self, kind: FileKind, value: &T) -> Result<()> {
        let (w, name) = match kind {
            FileKind::Steps => (&mut self.steps, "metrics.jsonl"),
            FileKind::Evals => (&mut self.evals, "eval.jsonl"),
        };
        let line = serde_json::to_string(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let path = self.dir.join(name);
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush().map_err(|e| Error::io(&self.dir, e))?;
        self.evals.flush().map_err(|e| Error::io(&self.dir, e))
    }
}

impl Drop for RunFiles {
    fn drop(&mut self) {
        let _ = self.steps.flush();
        let _ = self.evals.flush();
    }
}

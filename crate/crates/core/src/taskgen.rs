//! Synthetic multitask benchmark.
//!
//! Each example is a noisy "audio-like" feature sequence spelling out a
//! random symbol string (`F` frames per symbol), an instruction naming the
//! task, and a symbolic target derived from the clean symbols.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dot, norm};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
    Max,
    PosQuery,
    Parity,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Copy,
        Task::Reverse,
        Task::Sort,
        Task::Max,
        Task::PosQuery,
        Task::Parity,
    ];

    pub fn index(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Sort => "sort",
            Task::Max => "max",
            Task::PosQuery => "pos_query",
            Task::Parity => "parity",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Token layout: symbols `0..S`, then BOS, EOS, PAD, EVEN, ODD, then one
/// instruction token per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: usize,
}

impl Vocab {
    pub fn new(symbols: usize) -> Self {
        Self { symbols }
    }

    pub fn bos(&self) -> usize {
        self.symbols
    }

    pub fn eos(&self) -> usize {
        self.symbols + 1
    }

    pub fn pad(&self) -> usize {
        self.symbols + 2
    }

    pub fn even(&self) -> usize {
        self.symbols + 3
    }

    pub fn odd(&self) -> usize {
        self.symbols + 4
    }

    pub fn task_token(&self, task: Task) -> usize {
        self.symbols + 5 + task.index()
    }

    pub fn size(&self) -> usize {
        self.symbols + 5 + Task::ALL.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub len_min: usize,
    pub len_max: usize,
    pub noise: f64,
    pub frames_per_symbol: usize,
}

impl TaskSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.len_min == 0 || self.len_max < self.len_min {
            return Err(Error::Config(format!(
                "{}: need 1 <= len_min <= len_max, got [{}, {}]",
                self.task, self.len_min, self.len_max
            )));
        }
        if !(self.noise >= 0.0) || self.frames_per_symbol == 0 {
            return Err(Error::Config(format!(
                "{}: noise must be >= 0 and frames_per_symbol >= 1",
                self.task
            )));
        }
        // positions are spelled with symbol tokens
        if self.task == Task::PosQuery && self.len_max > vocab.symbols {
            return Err(Error::Config(format!(
                "pos_query: len_max {} exceeds the {} symbol tokens used to name positions",
                self.len_max, vocab.symbols
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub task: Task,
    pub symbols: Vec<usize>,
    pub features: Tensor,
    pub instruction: Vec<usize>,
    /// Target token ids, always ending in EOS.
    pub target: Vec<usize>,
    pub seed: u64,
}

/// `S` unit vectors with pairwise cosine below 0.99.
pub fn make_prototypes(symbols: usize, dim: usize, seed: u64) -> Result<Tensor> {
    if symbols < 2 || dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "prototypes need S >= 2 and d_f >= 2, got S={symbols} d_f={dim}"
        )));
    }
    const MAX_TRIES: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(symbols);
    while rows.len() < symbols {
        let mut accepted = false;
        for _ in 0..MAX_TRIES {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = norm(&v);
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            if rows.iter().all(|r| dot(r, &v) < 0.99) {
                rows.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "could not separate {symbols} prototypes in {dim} dims after {MAX_TRIES} resamples"
            )));
        }
    }
    Tensor::from_rows(&rows)
}

/// Target tokens (including the trailing EOS) for a clean symbol string.
pub fn target_for(task: Task, symbols: &[usize], position: Option<usize>, vocab: &Vocab) -> Vec<usize> {
    let mut out = match task {
        Task::Copy => symbols.to_vec(),
        Task::Reverse => symbols.iter().rev().copied().collect(),
        Task::Sort => {
            let mut s = symbols.to_vec();
            s.sort_unstable();
            s
        }
        Task::Max => vec![*symbols.iter().max().expect("non-empty symbols")],
        Task::PosQuery => vec![symbols[position.expect("pos_query needs a position")]],
        Task::Parity => {
            let sum: usize = symbols.iter().sum();
            vec![if sum.is_multiple_of(2) { vocab.even() } else { vocab.odd() }]
        }
    };
    out.push(vocab.eos());
    out
}

/// Vocabulary, prototypes and task mix of one benchmark instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub vocab: Vocab,
    pub prototypes: Tensor,
    pub specs: Vec<TaskSpec>,
}

impl Benchmark {
    pub fn new(vocab: Vocab, feature_dim: usize, specs: Vec<TaskSpec>, proto_seed: u64) -> Result<Self> {
        for s in &specs {
            s.validate(&vocab)?;
        }
        let prototypes = make_prototypes(vocab.symbols, feature_dim, proto_seed)?;
        Ok(Self {
            vocab,
            prototypes,
            specs,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn spec(&self, task: Task) -> Option<&TaskSpec> {
        self.specs.iter().find(|s| s.task == task)
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.specs.iter().map(|s| s.task).collect()
    }

    /// Draws one example; everything is a function of `rng`'s state.
    pub fn gen_example<R: Rng + ?Sized>(&self, spec: &TaskSpec, rng: &mut R, seed: u64) -> Example {
        let s = self.vocab.symbols;
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let symbols: Vec<usize> = (0..len).map(|_| rng.random_range(0..s)).collect();
        let d = self.feature_dim();
        let f = spec.frames_per_symbol;
        let mut data = Vec::with_capacity(len * f * d);
        for &sym in &symbols {
            for _ in 0..f {
                for &p in self.prototypes.row(sym) {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(p + spec.noise * z);
                }
            }
        }
        let features = Tensor::from_raw(vec![len * f, d], data);
        let mut instruction = vec![self.vocab.task_token(spec.task)];
        let position = (spec.task == Task::PosQuery).then(|| rng.random_range(0..len));
        if let Some(p) = position {
            instruction.push(p);
        }
        let target = target_for(spec.task, &symbols, position, &self.vocab);
        Example {
            task: spec.task,
            symbols,
            features,
            instruction,
            target,
            seed,
        }
    }

    /// Regenerates an example from its sub-seed alone.
    pub fn example_from_seed(&self, task: Task, seed: u64) -> Result<Example> {
        let spec = self
            .spec(task)
            .ok_or_else(|| Error::InvalidArgument(format!("task {task} not in benchmark")))?;
        Ok(self.gen_example(spec, &mut ChaCha8Rng::seed_from_u64(seed), seed))
    }

    /// `n_per_task` examples of every task, interleaved round-robin.
    pub fn gen_dataset(&self, n_per_task: usize, seed: u64) -> Result<Vec<Example>> {
        if n_per_task == 0 {
            return Err(Error::InvalidArgument("n_per_task must be at least 1".into()));
        }
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_per_task * self.specs.len());
        for _ in 0..n_per_task {
            for spec in &self.specs {
                let sub: u64 = master.random();
                out.push(self.gen_example(spec, &mut ChaCha8Rng::seed_from_u64(sub), sub));
            }
        }
        Ok(out)
    }
}

/// Line record of a dataset dump; features are regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub task: Task,
    pub symbols: Vec<usize>,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
    pub seed: u64,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        Self {
            task: e.task,
            symbols: e.symbols.clone(),
            instruction: e.instruction.clone(),
            target: e.target.clone(),
            seed: e.seed,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_dump<W: Write>(examples: &[Example], w: &mut W) -> Result<()> {
    for e in examples {
        let line = serde_json::to_string(&ExampleRecord::from(e))
            .map_err(|err| Error::InvalidArgument(err.to_string()))?;
        writeln!(w, "{line}").map_err(|err| Error::io("<dataset dump>", err))?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(r: R) -> Result<Vec<ExampleRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io("<dataset dump>", e))?;
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("dataset dump: {e}")))
        })
        .collect()
}

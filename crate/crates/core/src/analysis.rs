//! Which pool entries each task selects, and how much tasks share.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Method, Model};
use crate::taskgen::{Example, Task};

/// Selection counts per task over pool indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageMatrix {
    pub tasks: Vec<Task>,
    /// `counts[t][i]`: times task `t` selected pool entry `i`.
    pub counts: Vec<Vec<u64>>,
    pub k_infer: usize,
    pub n_examples: Vec<usize>,
}

impl UsageMatrix {
    pub fn pool_size(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn row(&self, task: Task) -> Option<&[u64]> {
        self.tasks.iter().position(|&t| t == task).map(|i| self.counts[i].as_slice())
    }

    /// Indices with count ≥ `threshold` for each task.
    pub fn token_sets(&self, threshold: u64) -> Vec<BTreeSet<usize>> {
        self.counts
            .iter()
            .map(|row| (0..row.len()).filter(|&i| row[i] >= threshold).collect())
            .collect()
    }

    /// Pool indices ordered by descending count in the first task's row,
    /// ties by index.
    pub fn column_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.pool_size()).collect();
        if let Some(first) = self.counts.first() {
            order.sort_by(|&a, &b| first[b].cmp(&first[a]).then(a.cmp(&b)));
        }
        order
    }
}

/// Runs selection (no decoding) for every example and tallies the chosen
/// pool indices per task. Tasks appear in first-seen order.
pub fn collect_usage(model: &Model, examples: &[Example], k_infer: usize) -> Result<UsageMatrix> {
    let Method::Dps(_) = model.cfg.strategy.method else {
        return Err(Error::Strategy(format!(
            "usage analysis needs a pool strategy, checkpoint is {}",
            model.cfg.strategy
        )));
    };
    model.cfg.check_prompt_size(k_infer)?;
    let p = model.cfg.pool_size;
    let mut tasks: Vec<Task> = Vec::new();
    for e in examples {
        if !tasks.contains(&e.task) {
            tasks.push(e.task);
        }
    }
    let mut counts = vec![vec![0u64; p]; tasks.len()];
    let mut n_examples = vec![0usize; tasks.len()];
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        for (e, idx) in chunk.iter().zip(model.selected_indices(&refs, k_infer)?) {
            let t = tasks.iter().position(|&t| t == e.task).expect("task registered above");
            n_examples[t] += 1;
            for i in idx {
                counts[t][i] += 1;
            }
        }
    }
    Ok(UsageMatrix {
        tasks,
        counts,
        k_infer,
        n_examples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub tasks: Vec<Task>,
    pub threshold: u64,
    pub jaccard: Vec<Vec<f64>>,
    pub distinct_tokens_total: usize,
    pub distinct_tokens_per_task: Vec<usize>,
}

impl OverlapReport {
    pub fn between(&self, a: Task, b: Task) -> Option<f64> {
        let i = self.tasks.iter().position(|&t| t == a)?;
        let j = self.tasks.iter().position(|&t| t == b)?;
        Some(self.jaccard[i][j])
    }
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// A task uses an index when it selected it at least `threshold` times.
pub fn jaccard_overlap(usage: &UsageMatrix, threshold: u64) -> Result<OverlapReport> {
    if threshold == 0 {
        return Err(Error::InvalidArgument("threshold must be at least 1".into()));
    }
    let sets = usage.token_sets(threshold);
    let jaccard = sets
        .iter()
        .map(|a| sets.iter().map(|b| jaccard(a, b)).collect())
        .collect();
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    Ok(OverlapReport {
        tasks: usage.tasks.clone(),
        threshold,
        jaccard,
        distinct_tokens_total: union.len(),
        distinct_tokens_per_task: sets.iter().map(BTreeSet::len).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tasks: Vec<Task>,
    pub k_infer: usize,
    pub threshold: u64,
    pub n_examples: Vec<usize>,
    pub distinct_tokens_total: usize,
    pub distinct_tokens_per_task: Vec<usize>,
}

pub const USAGE_FILE: &str = "usage.csv";
pub const JACCARD_FILE: &str = "jaccard.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `usage.csv` (columns are pool indices ordered by the first task's
/// frequency), `jaccard.csv` and `summary.json` into `out_dir`.
pub fn export_report(usage: &UsageMatrix, overlap: &OverlapReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let order = usage.column_order();
    let mut csv = String::from("task");
    for i in &order {
        csv.push_str(&format!(",{i}"));
    }
    csv.push('\n');
    for (task, row) in usage.tasks.iter().zip(&usage.counts) {
        csv.push_str(task.name());
        for &i in &order {
            csv.push_str(&format!(",{}", row[i]));
        }
        csv.push('\n');
    }
    write(out_dir, USAGE_FILE, &csv)?;

    let mut csv = String::from("task");
    for t in &overlap.tasks {
        csv.push_str(&format!(",{t}"));
    }
    csv.push('\n');
    for (t, row) in overlap.tasks.iter().zip(&overlap.jaccard) {
        csv.push_str(t.name());
        for v in row {
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push('\n');
    }
    write(out_dir, JACCARD_FILE, &csv)?;

    let summary = Summary {
        tasks: usage.tasks.clone(),
        k_infer: usage.k_infer,
        threshold: overlap.threshold,
        n_examples: usage.n_examples.clone(),
        distinct_tokens_total: overlap.distinct_tokens_total,
        distinct_tokens_per_task: overlap.distinct_tokens_per_task.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write(out_dir, SUMMARY_FILE, &json)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

/// Column labels, row tasks, rows.
type LabelledMatrix<T> = (Vec<String>, Vec<Task>, Vec<Vec<T>>);

/// Parses a labelled matrix: header `task,c0,c1,…`, then `name,v0,v1,…`.
fn parse_matrix<T: std::str::FromStr>(text: &str, what: &str) -> Result<LabelledMatrix<T>> {
    let bad = |m: String| Error::Config(format!("{what}: {m}"));
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut tasks = Vec::new();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut cells = line.split(',');
        let task: Task = cells.next().unwrap_or_default().parse()?;
        let row = cells
            .map(|c| c.parse::<T>().map_err(|_| bad(format!("bad cell {c:?}"))))
            .collect::<Result<Vec<T>>>()?;
        if row.len() != header.len() {
            return Err(bad(format!("row for {task} has {} cells, header {}", row.len(), header.len())));
        }
        tasks.push(task);
        rows.push(row);
    }
    Ok((header, tasks, rows))
}

/// Reads back the files written by [`export_report`].
pub fn read_report(dir: &Path) -> Result<(UsageMatrix, OverlapReport)> {
    let summary: Summary = serde_json::from_str(&read(dir, SUMMARY_FILE)?)
        .map_err(|e| Error::Config(format!("{SUMMARY_FILE}: {e}")))?;
    let (header, tasks, rows) = parse_matrix::<u64>(&read(dir, USAGE_FILE)?, USAGE_FILE)?;
    let columns = header
        .iter()
        .map(|h| h.parse::<usize>().map_err(|_| Error::Config(format!("bad column {h:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let p = columns.len();
    let mut counts = vec![vec![0u64; p]; rows.len()];
    for (r, row) in rows.iter().enumerate() {
        for (c, &i) in columns.iter().enumerate() {
            if i >= p {
                return Err(Error::Config(format!("column {i} outside pool of {p}")));
            }
            counts[r][i] = row[c];
        }
    }
    let (_, jtasks, jaccard) = parse_matrix::<f64>(&read(dir, JACCARD_FILE)?, JACCARD_FILE)?;
    if tasks != summary.tasks || jtasks != summary.tasks {
        return Err(Error::Config("task order differs between report files".into()));
    }
    Ok((
        UsageMatrix {
            tasks: tasks.clone(),
            counts,
            k_infer: summary.k_infer,
            n_examples: summary.n_examples,
        },
        OverlapReport {
            tasks,
            threshold: summary.threshold,
            jaccard,
            distinct_tokens_total: summary.distinct_tokens_total,
            distinct_tokens_per_task: summary.distinct_tokens_per_task,
        },
    ))
}

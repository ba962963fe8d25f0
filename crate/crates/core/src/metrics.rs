//! Sequence metrics over token ids: exact match, token error rate
//! (Levenshtein distance over reference length) and LCS-based Rouge-L F1.

use serde::{Deserialize, Serialize};

use crate::taskgen::Task;

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn token_error_rate(prediction: &[usize], reference: &[usize]) -> f64 {
    let d = levenshtein(prediction, reference);
    if reference.is_empty() {
        return if d == 0 { 0.0 } else { 1.0 };
    }
    d as f64 / reference.len() as f64
}

pub fn rouge_l(prediction: &[usize], reference: &[usize]) -> f64 {
    if prediction.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(prediction, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / prediction.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Scores of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub exact: bool,
    pub error_rate: f64,
    pub rouge_l: f64,
}

impl Score {
    pub fn of(prediction: &[usize], reference: &[usize]) -> Self {
        Self {
            exact: prediction == reference,
            error_rate: token_error_rate(prediction, reference),
            rouge_l: rouge_l(prediction, reference),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: Task,
    pub n: usize,
    pub exact_match: f64,
    pub token_error_rate: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_task: Vec<TaskMetrics>,
    pub aggregate: TaskMetricsAggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetricsAggregate {
    pub n: usize,
    pub exact_match: f64,
    pub token_error_rate: f64,
    pub rouge_l: f64,
}

/// Order-independent mean: values are sorted before summation.
fn exact_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

fn summarize(scores: &[Score]) -> (usize, f64, f64, f64) {
    let n = scores.len();
    let exact = scores.iter().filter(|s| s.exact).count();
    let mut err: Vec<f64> = scores.iter().map(|s| s.error_rate).collect();
    let mut rl: Vec<f64> = scores.iter().map(|s| s.rouge_l).collect();
    let em = if n == 0 { 0.0 } else { exact as f64 / n as f64 };
    (n, em, exact_mean(&mut err), exact_mean(&mut rl))
}

impl Metrics {
    /// Groups per-example scores by task; tasks appear in canonical order.
    pub fn from_scores(scored: &[(Task, Score)]) -> Self {
        let per_task = Task::ALL
            .iter()
            .filter_map(|&task| {
                let s: Vec<Score> = scored.iter().filter(|(t, _)| *t == task).map(|(_, s)| *s).collect();
                if s.is_empty() {
                    return None;
                }
                let (n, exact_match, token_error_rate, rouge_l) = summarize(&s);
                Some(TaskMetrics {
                    task,
                    n,
                    exact_match,
                    token_error_rate,
                    rouge_l,
                })
            })
            .collect();
        let all: Vec<Score> = scored.iter().map(|(_, s)| *s).collect();
        let (n, exact_match, token_error_rate, rouge_l) = summarize(&all);
        Self {
            per_task,
            aggregate: TaskMetricsAggregate {
                n,
                exact_match,
                token_error_rate,
                rouge_l,
            },
        }
    }

    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        self.per_task.iter().find(|m| m.task == task)
    }

    /// Comma-separated table: one row per task plus an `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,n,exact_match,token_error_rate,rouge_l\n");
        for m in &self.per_task {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.task, m.n, m.exact_match, m.token_error_rate, m.rouge_l
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "all,{},{},{},{}\n",
            a.n, a.exact_match, a.token_error_rate, a.rouge_l
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let s = Score::of(&[1, 2, 3], &[1, 2, 3]);
        assert!(s.exact);
        assert_eq!(s.error_rate, 0.0);
        assert_eq!(s.rouge_l, 1.0);
    }

    #[test]
    fn one_substitution() {
        assert_eq!(levenshtein(&[1, 2, 4], &[1, 2, 3]), 1);
        assert!((token_error_rate(&[1, 2, 4], &[1, 2, 3]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rouge_with_deletion() {
        assert_eq!(lcs_len(&[1, 3], &[1, 2, 3]), 2);
        assert!((rouge_l(&[1, 3], &[1, 2, 3]) - 0.8).abs() < 1e-15);
        assert_eq!(rouge_l(&[7], &[1, 2]), 0.0);
    }

    #[test]
    fn error_rate_can_exceed_one() {
        assert_eq!(token_error_rate(&[5, 5, 5, 5], &[1]), 4.0);
    }

    #[test]
    fn csv_has_one_row_per_task_and_total() {
        let scored = vec![
            (Task::Copy, Score::of(&[1], &[1])),
            (Task::Parity, Score::of(&[1], &[2])),
        ];
        let m = Metrics::from_scores(&scored);
        assert_eq!(m.aggregate.exact_match, 0.5);
        assert_eq!(m.to_csv().lines().count(), 4);
    }
}

//! pass@k estimation, difficulty buckets, best-of-n selection and error
//! histograms.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Problem;
use crate::reward::RewardModel;
use crate::sandbox::{ResourceLimits, Sandbox, VerdictStatus};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid arguments: n={n}, c={c}, k={k}")]
    InvalidArgs { n: usize, c: usize, k: usize },
    #[error("no completions to choose from")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Unbiased pass@k from `n` samples of which `c` pass.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::InvalidArgs { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut fail = 1.0;
    for i in (n - c + 1)..=n {
        fail *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - fail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "EZY")]
    Ezy,
    #[serde(rename = "MED")]
    Med,
    #[serde(rename = "HRD")]
    Hrd,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Ezy, Bucket::Med, Bucket::Hrd];

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Ezy => "EZY",
            Bucket::Med => "MED",
            Bucket::Hrd => "HRD",
        }
    }

    pub fn from_length(chars: usize) -> Self {
        if chars < 50 {
            Bucket::Ezy
        } else if chars <= 100 {
            Bucket::Med
        } else {
            Bucket::Hrd
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bucket by character length of the reference, trailing newline excluded.
pub fn bucket_difficulty(problem: &Problem) -> Bucket {
    let code = problem.reference_code.strip_suffix('\n').unwrap_or(&problem.reference_code);
    Bucket::from_length(code.chars().count())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub problem_id: u32,
    pub bucket: Bucket,
    pub n: usize,
    pub c: usize,
    pub pass_at: BTreeMap<usize, f64>,
    pub statuses: Vec<VerdictStatus>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub problems: usize,
    /// Mean pass@k over problems, keyed by k.
    pub pass_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub ks: Vec<usize>,
    pub per_problem: Vec<ProblemResult>,
    pub overall: Aggregate,
    pub per_bucket: BTreeMap<Bucket, Aggregate>,
}

fn aggregate<'a>(results: impl Iterator<Item = &'a ProblemResult>, ks: &[usize]) -> Aggregate {
    let mut agg = Aggregate::default();
    for r in results {
        agg.problems += 1;
        for (k, v) in &r.pass_at {
            *agg.pass_at.entry(*k).or_insert(0.0) += v;
        }
    }
    for k in ks {
        let sum = agg.pass_at.entry(*k).or_insert(0.0);
        if agg.problems > 0 {
            *sum /= agg.problems as f64;
        }
    }
    agg
}

impl EvalReport {
    pub fn from_results(n: usize, ks: &[usize], per_problem: Vec<ProblemResult>) -> Self {
        let overall = aggregate(per_problem.iter(), ks);
        let per_bucket = Bucket::ALL
            .iter()
            .map(|b| (*b, aggregate(per_problem.iter().filter(|r| r.bucket == *b), ks)))
            .collect();
        Self { n, ks: ks.to_vec(), per_problem, overall, per_bucket }
    }

    /// pass@k rows by bucket columns, plus an overall column.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}{:>10}{:>10}{:>10}{:>10}", "metric", "EZY", "MED", "HRD", "all");
        let cell = |agg: Option<&Aggregate>, k: usize| match agg {
            Some(a) if a.problems > 0 => format!("{:.1}", 100.0 * a.pass_at.get(&k).copied().unwrap_or(0.0)),
            _ => "-".to_string(),
        };
        for k in &self.ks {
            let _ = write!(out, "{:<10}", format!("pass@{k}"));
            for b in Bucket::ALL {
                let _ = write!(out, "{:>10}", cell(self.per_bucket.get(&b), *k));
            }
            let _ = writeln!(out, "{:>10}", cell(Some(&self.overall), *k));
        }
        let _ = write!(out, "{:<10}", "problems");
        for b in Bucket::ALL {
            let _ = write!(out, "{:>10}", self.per_bucket.get(&b).map_or(0, |a| a.problems));
        }
        let _ = writeln!(out, "{:>10}", self.overall.problems);
        out
    }

    /// One record per problem followed by one summary record.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for r in &self.per_problem {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        let summary = serde_json::json!({
            "summary": true,
            "n": self.n,
            "ks": self.ks,
            "overall": self.overall,
            "per_bucket": self.per_bucket,
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Samples `n` completions per problem through `generate`, verifies each
/// against the problem tests and aggregates pass@k. Sandbox failures count
/// as failed samples.
pub fn evaluate_policy<G>(
    sandbox: &Sandbox,
    problems: &[&Problem],
    n: usize,
    ks: &[usize],
    limits: &ResourceLimits,
    generate: G,
) -> Result<EvalReport, EvalError>
where
    G: Fn(&Problem, usize) -> Vec<String> + Sync + Send,
{
    for &k in ks {
        if k == 0 || k > n {
            return Err(EvalError::InvalidArgs { n, c: 0, k });
        }
    }
    let results: Vec<Result<ProblemResult, EvalError>> = sandbox.par_map(problems, |p| {
        let completions = generate(p, n);
        let statuses: Vec<VerdictStatus> = completions
            .iter()
            .take(n)
            .map(|code| match sandbox.verify(code, &p.tests, limits) {
                Ok(v) => v.status,
                Err(e) => {
                    warn!("problem {}: sandbox error counted as failure: {e}", p.id);
                    VerdictStatus::RuntimeError
                }
            })
            .collect();
        let c = statuses.iter().filter(|s| **s == VerdictStatus::AllPassed).count();
        let mut pass_at = BTreeMap::new();
        for &k in ks {
            pass_at.insert(k, pass_at_k(n, c, k)?);
        }
        Ok(ProblemResult { problem_id: p.id, bucket: bucket_difficulty(p), n, c, pass_at, statuses })
    });
    let per_problem = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_results(n, ks, per_problem))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScore {
    #[default]
    Sum,
    Min,
    Mean,
}

impl SelectionScore {
    pub fn apply(self, segment_rewards: &[f64]) -> f64 {
        if segment_rewards.is_empty() {
            return f64::NEG_INFINITY;
        }
        match self {
            SelectionScore::Sum => segment_rewards.iter().sum(),
            SelectionScore::Min => segment_rewards.iter().copied().fold(f64::INFINITY, f64::min),
            SelectionScore::Mean => segment_rewards.iter().sum::<f64>() / segment_rewards.len() as f64,
        }
    }
}

/// Index of the highest scoring candidate; ties keep the earliest.
pub fn select_best(scores: &[f64]) -> Result<usize, EvalError> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or(EvalError::Empty)
}

/// Segment rewards of a completion under a process reward model.
pub fn completion_segments(prm: &RewardModel, prompt: &str, code: &str) -> Vec<f64> {
    let body = code.strip_suffix('\n').unwrap_or(code);
    if body.is_empty() {
        return Vec::new();
    }
    let lines: Vec<String> = body.split('\n').map(str::to_owned).collect();
    prm.segment_rewards(prompt, &lines)
}

/// Draws `n` completions and returns the index and text of the one the PRM
/// scores highest.
pub fn rejection_sample<G>(
    prm: &RewardModel,
    problem: &Problem,
    n: usize,
    score: SelectionScore,
    generate: G,
) -> Result<(usize, String), EvalError>
where
    G: FnOnce(&Problem, usize) -> Vec<String>,
{
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let mut completions = generate(problem, n);
    completions.truncate(n);
    let scores: Vec<f64> =
        completions.iter().map(|c| score.apply(&completion_segments(prm, &problem.prompt, c))).collect();
    let best = select_best(&scores)?;
    Ok((best, completions.swap_remove(best)))
}

/// Counts over failing verdict categories.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorHistogram {
    pub counts: BTreeMap<String, usize>,
    /// Number of failing verdicts; passing ones are ignored.
    pub total: usize,
}

impl ErrorHistogram {
    pub fn fraction(&self, status: VerdictStatus) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts.get(status.as_str()).copied().unwrap_or(0) as f64 / self.total as f64
    }

    pub fn fractions(&self) -> BTreeMap<String, f64> {
        VerdictStatus::ERRORS.iter().map(|s| (s.as_str().to_string(), self.fraction(*s))).collect()
    }

    /// Total-variation distance between the two category distributions.
    pub fn tv_distance(&self, other: &ErrorHistogram) -> f64 {
        VerdictStatus::ERRORS
            .iter()
            .map(|s| (self.fraction(*s) - other.fraction(*s)).abs())
            .sum::<f64>()
            / 2.0
    }
}

pub fn error_distribution<'a>(statuses: impl IntoIterator<Item = &'a VerdictStatus>) -> ErrorHistogram {
    let mut h = ErrorHistogram {
        counts: VerdictStatus::ERRORS.iter().map(|s| (s.as_str().to_string(), 0)).collect(),
        total: 0,
    };
    for s in statuses {
        if *s == VerdictStatus::AllPassed {
            continue;
        }
        *h.counts.entry(s.as_str().to_string()).or_insert(0) += 1;
        h.total += 1;
    }
    h
}

/// Side-by-side fractions of two sources plus their distance.
pub fn compare_distributions(left: (&str, &ErrorHistogram), right: (&str, &ErrorHistogram)) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16}{:>12}{:>12}", "category", left.0, right.0);
    for s in VerdictStatus::ERRORS {
        let _ = writeln!(out, "{:<16}{:>12.3}{:>12.3}", s.as_str(), left.1.fraction(s), right.1.fraction(s));
    }
    let _ = writeln!(out, "{:<16}{:>12}{:>12}", "total", left.1.total, right.1.total);
    let _ = writeln!(out, "tv_distance {:.4}", left.1.tv_distance(right.1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardKind;
    use proptest::prelude::*;

    fn binom(n: usize, k: usize) -> f64 {
        if k > n {
            return 0.0;
        }
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(5, 0, 2).unwrap(), 0.0);
        assert_eq!(pass_at_k(5, 5, 2).unwrap(), 1.0);
        assert!((pass_at_k(5, 2, 3).unwrap() - 0.9).abs() < 1e-12);
        assert!((pass_at_k(200, 1, 1).unwrap() - 0.005).abs() < 1e-12);
        assert!(pass_at_k(3, 4, 1).is_err());
        assert!(pass_at_k(3, 1, 0).is_err());
        assert!(pass_at_k(3, 1, 4).is_err());
    }

    proptest! {
        #[test]
        fn pass_at_k_matches_closed_form(n in 1usize..40, c in 0usize..40, k in 1usize..40) {
            prop_assume!(c <= n && k <= n);
            let expected = 1.0 - binom(n - c, k) / binom(n, k);
            prop_assert!((pass_at_k(n, c, k).unwrap() - expected).abs() < 1e-9);
        }

        #[test]
        fn pass_at_k_monotone(n in 1usize..30, c in 0usize..30, k in 1usize..30) {
            prop_assume!(c < n && k < n);
            let v = pass_at_k(n, c, k).unwrap();
            prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v);
            prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v);
        }
    }

    fn problem_with(len: usize) -> Problem {
        Problem {
            id: 1,
            description: String::new(),
            prompt: String::new(),
            reference_code: format!("{}\n", "x".repeat(len)),
            tests: vec![],
            split: None,
        }
    }

    #[test]
    fn bucket_thresholds() {
        assert_eq!(bucket_difficulty(&problem_with(30)), Bucket::Ezy);
        assert_eq!(bucket_difficulty(&problem_with(49)), Bucket::Ezy);
        assert_eq!(bucket_difficulty(&problem_with(50)), Bucket::Med);
        assert_eq!(bucket_difficulty(&problem_with(100)), Bucket::Med);
        assert_eq!(bucket_difficulty(&problem_with(101)), Bucket::Hrd);
    }

    #[test]
    fn select_best_ties_keep_first() {
        assert_eq!(select_best(&[1.0, 2.0, 2.0]).unwrap(), 1);
        assert_eq!(select_best(&[0.5]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn rejection_prefers_higher_scoring() {
        let mut prm = RewardModel::zeros(RewardKind::Prm, 1 << 10);
        let good = "def f(x):\n    return x\n";
        let bad = "def f(x):\n    return y\n";
        let fg = crate::reward::featurize_dim("p", "def f(x):\n    return x", 1 << 10);
        for (i, v) in fg.iter() {
            prm.weights[i] += v;
        }
        let (idx, text) = rejection_sample(&prm, &Problem { prompt: "p".into(), ..problem_with(1) }, 2, SelectionScore::Sum, |_, _| {
            vec![bad.to_string(), good.to_string()]
        })
        .unwrap();
        assert_eq!((idx, text.as_str()), (1, good));
        let (idx, _) =
            rejection_sample(&prm, &problem_with(1), 1, SelectionScore::Sum, |_, _| vec![bad.to_string()]).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn histogram_fractions() {
        let s = [
            VerdictStatus::TestFailed,
            VerdictStatus::TestFailed,
            VerdictStatus::TestFailed,
            VerdictStatus::CompileError,
            VerdictStatus::AllPassed,
        ];
        let h = error_distribution(&s);
        assert_eq!(h.total, 4);
        assert!((h.fraction(VerdictStatus::TestFailed) - 0.75).abs() < 1e-12);
        assert!((h.fraction(VerdictStatus::CompileError) - 0.25).abs() < 1e-12);
        let clean = error_distribution(&[VerdictStatus::AllPassed]);
        assert_eq!(clean.total, 0);
        assert!(clean.counts.values().all(|c| *c == 0));
        assert_eq!(h.tv_distance(&h), 0.0);
        let other = error_distribution(&[VerdictStatus::Timeout]);
        assert!((h.tv_distance(&other) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates() {
        let mk = |id, bucket, c| ProblemResult {
            problem_id: id,
            bucket,
            n: 4,
            c,
            pass_at: [(1, pass_at_k(4, c, 1).unwrap())].into_iter().collect(),
            statuses: vec![],
        };
        let r = EvalReport::from_results(4, &[1], vec![mk(1, Bucket::Ezy, 4), mk(2, Bucket::Ezy, 0), mk(3, Bucket::Hrd, 2)]);
        assert!((r.overall.pass_at[&1] - 0.5).abs() < 1e-12);
        assert!((r.per_bucket[&Bucket::Ezy].pass_at[&1] - 0.5).abs() < 1e-12);
        assert_eq!(r.per_bucket[&Bucket::Med].problems, 0);
        assert!(r.table().contains("pass@1"));
    }
}

//! Step-level (prompt, prefix, label) samples built from reference solutions
//! and verified line edits, and their emission as train/validation/test
//! line-delimited files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeLines, Problem};
use crate::mutator::{edits_for_problem, teacher_rewrite, EditMode, LineEdit, MutationRuleSet};
use crate::sandbox::{ExecutionVerdict, ResourceLimits, Sandbox, SandboxError, VerdictStatus};
use crate::teacher::TeacherClient;
use crate::util::{hash_parts, seeded_rng};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{edits} edits but {verdicts} verdicts")]
    AlignmentError { edits: usize, verdicts: usize },
    #[error("problem id {0} maps to no split")]
    UnmappedId(u32),
    #[error("record {index}: {message}")]
    ParseError { index: usize, message: String },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_verdict(status: VerdictStatus) -> Self {
        if status == VerdictStatus::AllPassed {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    Reference,
    Mutate,
    Refactor,
}

impl From<EditMode> for SampleSource {
    fn from(m: EditMode) -> Self {
        match m {
            EditMode::Mutate => SampleSource::Mutate,
            EditMode::Refactor => SampleSource::Refactor,
        }
    }
}

/// One supervised step: the prompt, the code up to and including the
/// labeled line, and its label. Lines after the labeled one are absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSample {
    pub problem_id: u32,
    pub prompt: String,
    pub prefix_lines: Vec<String>,
    pub label: Label,
    pub source: SampleSource,
    /// `None` for reference-derived positives, which are never executed.
    pub verdict_status: Option<VerdictStatus>,
}

/// Serialized form of a [`StepSample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub problem_id: u32,
    pub prompt: String,
    pub prefix: String,
    pub label: Label,
    pub source: SampleSource,
    pub verdict: Option<VerdictStatus>,
}

impl StepSample {
    pub fn prefix(&self) -> String {
        self.prefix_lines.join("\n")
    }

    /// 0-based index of the labeled line.
    pub fn line_index(&self) -> usize {
        self.prefix_lines.len() - 1
    }

    pub fn last_line(&self) -> &str {
        self.prefix_lines.last().map(String::as_str).unwrap_or("")
    }

    pub fn to_record(&self) -> StepRecord {
        StepRecord {
            problem_id: self.problem_id,
            prompt: self.prompt.clone(),
            prefix: self.prefix(),
            label: self.label,
            source: self.source,
            verdict: self.verdict_status,
        }
    }

    pub fn from_record(r: StepRecord) -> Self {
        Self {
            problem_id: r.problem_id,
            prompt: r.prompt,
            prefix_lines: r.prefix.split('\n').map(str::to_owned).collect(),
            label: r.label,
            source: r.source,
            verdict_status: r.verdict,
        }
    }

    /// Whether the label agrees with the source/verdict rule.
    pub fn label_consistent(&self) -> bool {
        let expect = self.source == SampleSource::Reference
            || self.verdict_status == Some(VerdictStatus::AllPassed);
        self.label.is_positive() == expect
    }
}

/// One positive sample per prefix length of the reference solution.
pub fn build_positive_prefixes(problem: &Problem) -> Vec<StepSample> {
    let lines = problem.code_lines();
    (1..=lines.line_count())
        .map(|l| StepSample {
            problem_id: problem.id,
            prompt: problem.prompt.clone(),
            prefix_lines: lines.lines[..l].to_vec(),
            label: Label::Positive,
            source: SampleSource::Reference,
            verdict_status: None,
        })
        .collect()
}

/// One sample per edit: the original lines before the edited one, then the
/// edited line, labeled by its verdict.
pub fn build_edit_samples(
    problem: &Problem,
    edits: &[LineEdit],
    verdicts: &[ExecutionVerdict],
) -> Result<Vec<StepSample>, DatasetError> {
    if edits.len() != verdicts.len() {
        return Err(DatasetError::AlignmentError { edits: edits.len(), verdicts: verdicts.len() });
    }
    let lines = problem.code_lines();
    Ok(edits
        .iter()
        .zip(verdicts)
        .map(|(e, v)| {
            let mut prefix_lines = lines.lines[..e.line_index].to_vec();
            prefix_lines.push(e.edited_line.clone());
            StepSample {
                problem_id: problem.id,
                prompt: problem.prompt.clone(),
                prefix_lines,
                label: Label::from_verdict(v.status),
                source: e.mode.into(),
                verdict_status: Some(v.status),
            }
        })
        .collect())
}

/// The full program a sample's label was derived from: the reference with
/// the labeled line replaced by the sample's last prefix line.
pub fn reconstruct_program(problem: &Problem, sample: &StepSample) -> String {
    let mut lines: CodeLines = problem.code_lines();
    let idx = sample.line_index();
    if idx < lines.lines.len() {
        lines.lines[idx] = sample.last_line().to_owned();
    }
    lines.to_source()
}

/// Keeps the first occurrence of each (prompt, prefix).
pub fn dedupe(samples: Vec<StepSample>) -> Vec<StepSample> {
    let mut seen = HashSet::new();
    samples
        .into_iter()
        .filter(|s| seen.insert(hash_parts(&[s.prompt.as_bytes(), s.prefix().as_bytes()])))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub rules: MutationRuleSet,
    pub modes: Vec<EditMode>,
    pub limits: ResourceLimits,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            rules: MutationRuleSet::default(),
            modes: vec![EditMode::Mutate, EditMode::Refactor],
            limits: ResourceLimits::default(),
        }
    }
}

/// Edits proposed by the rule set or, when given, the external teacher.
/// The teacher is asked once per (line, mode); failures drop that slot.
pub fn collect_edits(problem: &Problem, opts: &BuildOptions, teacher: Option<&TeacherClient>) -> Vec<LineEdit> {
    match teacher {
        None => edits_for_problem(problem, &opts.rules, &opts.modes),
        Some(client) => {
            let lines = problem.code_lines();
            let slots: Vec<(usize, EditMode)> = (0..lines.line_count())
                .filter(|&i| !lines.lines[i].trim().is_empty())
                .flat_map(|i| opts.modes.iter().map(move |&m| (i, m)))
                .collect();
            client
                .map_bounded(slots, |c, (i, m)| match teacher_rewrite(c, problem, &lines, i, m) {
                    Ok(e) => Some(e),
                    Err(e) => {
                        log::warn!("problem {} line {i} {}: {e}", problem.id, m.as_str());
                        None
                    }
                })
                .into_iter()
                .flatten()
                .collect()
        }
    }
}

/// Reference positives plus verified edit samples for one problem.
pub fn build_problem_samples(
    sandbox: &Sandbox,
    problem: &Problem,
    opts: &BuildOptions,
    teacher: Option<&TeacherClient>,
) -> Result<Vec<StepSample>, DatasetError> {
    let mut out = build_positive_prefixes(problem);
    let edits = collect_edits(problem, opts, teacher);
    let lines = problem.code_lines();
    let verdicts = edits
        .iter()
        .map(|e| sandbox.verify(&e.apply(&lines), &problem.tests, &opts.limits))
        .collect::<Result<Vec<_>, _>>()?;
    out.extend(build_edit_samples(problem, &edits, &verdicts)?);
    Ok(out)
}

/// Builds and deduplicates samples for all problems, verifying on the
/// sandbox worker pool. Output order follows problem order.
pub fn build_samples(
    sandbox: &Sandbox,
    problems: &[&Problem],
    opts: &BuildOptions,
    teacher: Option<&TeacherClient>,
) -> Result<Vec<StepSample>, DatasetError> {
    let per = sandbox.par_map(problems, |p| build_problem_samples(sandbox, p, opts, teacher));
    let mut all = Vec::new();
    for r in per {
        all.extend(r?);
    }
    Ok(dedupe(all))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Problem id to dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMap {
    /// Hash of (seed, id) into fractions; unlisted remainder goes to test.
    Hashed { seed: u64, train: f64, validation: f64 },
    /// Explicit assignment; ids not listed are unmapped.
    Explicit { ids: BTreeMap<u32, SplitName> },
}

impl Default for SplitMap {
    fn default() -> Self {
        SplitMap::Hashed { seed: 0, train: 0.8, validation: 0.1 }
    }
}

impl SplitMap {
    pub fn lookup(&self, id: u32) -> Option<SplitName> {
        match self {
            SplitMap::Hashed { seed, train, validation } => {
                let u = (hash_parts(&[&seed.to_le_bytes(), &id.to_le_bytes()]) >> 11) as f64 / (1u64 << 53) as f64;
                Some(if u < *train {
                    SplitName::Train
                } else if u < train + validation {
                    SplitName::Validation
                } else {
                    SplitName::Test
                })
            }
            SplitMap::Explicit { ids } => ids.get(&id).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<StepSample>,
    pub positive_count: usize,
    pub negative_count: usize,
}

impl DatasetSplit {
    pub fn new(name: SplitName, samples: Vec<StepSample>) -> Self {
        let positive_count = samples.iter().filter(|s| s.label.is_positive()).count();
        let negative_count = samples.len() - positive_count;
        Self { name, samples, positive_count, negative_count }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for s in &self.samples {
            serde_json::to_writer(&mut f, &s.to_record()).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(name: SplitName, path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: StepRecord = serde_json::from_str(line)
                .map_err(|e| DatasetError::ParseError { index, message: e.to_string() })?;
            samples.push(StepSample::from_record(r));
        }
        Ok(Self::new(name, samples))
    }
}

#[derive(Debug, Clone, Default)]
pub struct EmitOptions {
    pub seed: u64,
    /// Cap the majority class at `ratio` times the minority class per split.
    pub max_class_ratio: Option<f64>,
}

/// Partitions samples by problem id, optionally downsamples the majority
/// class, and shuffles each split with a fixed seed.
pub fn partition(
    samples: Vec<StepSample>,
    map: &SplitMap,
    opts: &EmitOptions,
) -> Result<[DatasetSplit; 3], DatasetError> {
    let mut buckets: [Vec<StepSample>; 3] = Default::default();
    for s in samples {
        let name = map.lookup(s.problem_id).ok_or(DatasetError::UnmappedId(s.problem_id))?;
        buckets[name as usize].push(s);
    }
    let mut out = Vec::with_capacity(3);
    for (name, mut bucket) in SplitName::ALL.into_iter().zip(buckets) {
        let mut rng = seeded_rng(opts.seed, name as u64 + 1);
        if let Some(ratio) = opts.max_class_ratio {
            bucket = downsample(bucket, ratio, &mut rng);
        }
        bucket.shuffle(&mut rng);
        out.push(DatasetSplit::new(name, bucket));
    }
    Ok(out.try_into().expect("three splits"))
}

fn downsample(samples: Vec<StepSample>, ratio: f64, rng: &mut impl rand::Rng) -> Vec<StepSample> {
    let (pos, neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.label.is_positive());
    let cap = ((pos.len().min(neg.len()) as f64) * ratio).floor() as usize;
    let trim = |mut v: Vec<StepSample>, rng: &mut dyn rand::RngCore| {
        if v.len() > cap {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, v.len(), cap).into_vec();
            idx.sort_unstable();
            let mut keep = Vec::with_capacity(cap);
            let mut it = idx.into_iter().peekable();
            for (i, s) in v.drain(..).enumerate() {
                if it.peek() == Some(&i) {
                    keep.push(s);
                    it.next();
                }
            }
            keep
        } else {
            v
        }
    };
    let mut out = trim(pos, rng);
    out.extend(trim(neg, rng));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: SplitName,
    pub samples: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl` and `stats.json`
/// under `dir`.
pub fn emit_splits(
    samples: Vec<StepSample>,
    map: &SplitMap,
    opts: &EmitOptions,
    dir: &Path,
) -> Result<[DatasetSplit; 3], DatasetError> {
    let splits = partition(samples, map, opts)?;
    fs::create_dir_all(dir)?;
    let mut stats = Vec::new();
    for s in &splits {
        s.write_jsonl(&dir.join(format!("{}.jsonl", s.name)))?;
        log::info!("{}: {} positive / {} negative", s.name, s.positive_count, s.negative_count);
        stats.push(SplitStats {
            split: s.name,
            samples: s.len(),
            positive: s.positive_count,
            negative: s.negative_count,
        });
    }
    let json = serde_json::to_string_pretty(&stats).map_err(std::io::Error::from)?;
    fs::write(dir.join("stats.json"), json + "\n")?;
    Ok(splits)
}

pub fn read_splits(dir: &Path) -> Result<[DatasetSplit; 3], DatasetError> {
    let mut out = Vec::with_capacity(3);
    for name in SplitName::ALL {
        out.push(DatasetSplit::read_jsonl(name, &dir.join(format!("{name}.jsonl")))?);
    }
    Ok(out.try_into().expect("three splits"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TestCase;
    use crate::mutator::Provenance;

    fn problem(code: &str) -> Problem {
        Problem {
            id: 7,
            description: "d".into(),
            prompt: "p".into(),
            reference_code: code.into(),
            tests: vec![TestCase::seed("assert f(1) == 1")],
            split: None,
        }
    }

    fn verdict(status: VerdictStatus) -> ExecutionVerdict {
        ExecutionVerdict { status, passed_count: 0, total_count: 1, first_failure: None, wall_time_ms: 0 }
    }

    fn edit(idx: usize, line: &str, mode: EditMode) -> LineEdit {
        LineEdit {
            problem_id: 7,
            line_index: idx,
            original_line: String::new(),
            edited_line: line.into(),
            mode,
            provenance: Provenance::Rule("x".into()),
        }
    }

    #[test]
    fn one_positive_per_line() {
        let p = problem("def f(x):\n    y = x\n    z = y\n    w = z\n    return w\n");
        let s = build_positive_prefixes(&p);
        assert_eq!(s.len(), 5);
        assert_eq!(s[4].prefix_lines.len(), 5);
        assert!(s.iter().all(|s| s.label == Label::Positive && s.source == SampleSource::Reference));
        let one = build_positive_prefixes(&problem("f = abs\n"));
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].prefix(), "f = abs");
    }

    #[test]
    fn edit_labels_follow_verdicts() {
        let p = problem("def f(x):\n    return x\n");
        let edits = [
            edit(1, "    return -x", EditMode::Mutate),
            edit(1, "    return (x)", EditMode::Refactor),
            edit(1, "    return x + 0", EditMode::Mutate),
        ];
        let verdicts = [
            verdict(VerdictStatus::TestFailed),
            verdict(VerdictStatus::AllPassed),
            verdict(VerdictStatus::AllPassed),
        ];
        let s = build_edit_samples(&p, &edits, &verdicts).unwrap();
        assert_eq!(s[0].label, Label::Negative);
        assert_eq!(s[1].label, Label::Positive);
        assert_eq!(s[1].source, SampleSource::Refactor);
        assert_eq!(s[2].label, Label::Positive);
        assert_eq!(s[0].prefix_lines, vec!["def f(x):", "    return -x"]);
        assert!(s.iter().all(StepSample::label_consistent));
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let p = problem("x = 1\n");
        let err = build_edit_samples(&p, &[edit(0, "x = 2", EditMode::Mutate)], &[]).unwrap_err();
        assert!(matches!(err, DatasetError::AlignmentError { edits: 1, verdicts: 0 }));
    }

    #[test]
    fn reconstruct_replaces_only_labeled_line() {
        let p = problem("def f(x):\n    y = x\n    return y\n");
        let s = build_edit_samples(&p, &[edit(1, "    y = -x", EditMode::Mutate)], &[verdict(VerdictStatus::TestFailed)])
            .unwrap();
        assert_eq!(reconstruct_program(&p, &s[0]), "def f(x):\n    y = -x\n    return y\n");
    }

    #[test]
    fn record_round_trip() {
        let p = problem("a = 1\nb = 2\n");
        let s = build_positive_prefixes(&p).pop().unwrap();
        let back = StepSample::from_record(serde_json::from_str(&serde_json::to_string(&s.to_record()).unwrap()).unwrap());
        assert_eq!(back, s);
        let json = serde_json::to_value(s.to_record()).unwrap();
        for k in ["problem_id", "prompt", "prefix", "label", "source", "verdict"] {
            assert!(json.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn dedupe_keeps_first() {
        let p = problem("a = 1\n");
        let mut s = build_positive_prefixes(&p);
        let mut dup = s[0].clone();
        dup.label = Label::Negative;
        s.push(dup);
        let d = dedupe(s);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, Label::Positive);
    }

    #[test]
    fn empty_emits_three_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let splits = emit_splits(Vec::new(), &SplitMap::default(), &EmitOptions::default(), dir.path()).unwrap();
        assert!(splits.iter().all(DatasetSplit::is_empty));
        for n in ["train", "validation", "test"] {
            assert_eq!(fs::read_to_string(dir.path().join(format!("{n}.jsonl"))).unwrap(), "");
        }
        assert!(dir.path().join("stats.json").exists());
    }

    #[test]
    fn one_problem_lands_in_one_split() {
        let p = problem("a = 1\n");
        let samples: Vec<StepSample> = (0..100)
            .map(|i| {
                let mut s = build_positive_prefixes(&p).remove(0);
                s.prefix_lines = vec![format!("a = {i}")];
                s
            })
            .collect();
        let splits = partition(samples, &SplitMap::default(), &EmitOptions::default()).unwrap();
        let sizes: Vec<usize> = splits.iter().map(DatasetSplit::len).collect();
        assert_eq!(sizes.iter().filter(|&&n| n == 100).count(), 1);
        assert_eq!(sizes.iter().sum::<usize>(), 100);
    }

    #[test]
    fn unmapped_id_rejected() {
        let p = problem("a = 1\n");
        let map = SplitMap::Explicit { ids: BTreeMap::new() };
        let err = partition(build_positive_prefixes(&p), &map, &EmitOptions::default()).unwrap_err();
        assert!(matches!(err, DatasetError::UnmappedId(7)));
    }

    #[test]
    fn downsampling_balances_classes() {
        let samples: Vec<StepSample> = (0..30)
            .map(|i| StepSample {
                problem_id: 7,
                prompt: "p".into(),
                prefix_lines: vec![format!("a = {i}")],
                label: if i < 10 { Label::Positive } else { Label::Negative },
                source: SampleSource::Mutate,
                verdict_status: Some(if i < 10 { VerdictStatus::AllPassed } else { VerdictStatus::TestFailed }),
            })
            .collect();
        let map = SplitMap::Explicit { ids: BTreeMap::from([(7, SplitName::Train)]) };
        let opts = EmitOptions { seed: 3, max_class_ratio: Some(1.0) };
        let [train, _, _] = partition(samples, &map, &opts).unwrap();
        assert_eq!((train.positive_count, train.negative_count), (10, 10));
    }

    #[test]
    fn hashed_map_is_total_and_roughly_proportional() {
        let map = SplitMap::default();
        let train = (1..=1000).filter(|&i| map.lookup(i) == Some(SplitName::Train)).count();
        assert!((700..900).contains(&train), "{train}");
    }
}

//! Problem corpora: the canonical data model, source normalization,
//! line-delimited ingestion and split assignment.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pylex::{lex_line, TokKind};

/// Default prompt: the problem text followed by the seed assertions.
pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "{description} Your code should satisfy these tests:\n{tests}";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: indentation mixes tabs and spaces ambiguously")]
    MixedIndentationUnresolvable { line: usize },
    #[error("record {index}: {message}")]
    ParseError { index: usize, message: String },
    #[error("duplicate problem id {0}")]
    DuplicateId(u32),
    #[error("problem id {0} is not covered by the split map")]
    UnmappedId(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SftSeed,
    RlTrain,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::SftSeed => "sft_seed",
            Split::RlTrain => "rl_train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOrigin {
    Seed,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub assertion: String,
    pub origin: TestOrigin,
}

impl TestCase {
    pub fn seed(assertion: impl Into<String>) -> Self {
        Self { assertion: assertion.into(), origin: TestOrigin::Seed }
    }

    pub fn augmented(assertion: impl Into<String>) -> Self {
        Self { assertion: assertion.into(), origin: TestOrigin::Augmented }
    }
}

/// A normalized program split at newlines. Joining `lines` with `\n`
/// reproduces the normalized source without its trailing newline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeLines {
    pub lines: Vec<String>,
}

impl CodeLines {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn join(&self) -> String {
        self.lines.join("\n")
    }

    /// Program text with a trailing newline, as stored in a [`Problem`].
    pub fn to_source(&self) -> String {
        let mut s = self.join();
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: u32,
    pub description: String,
    /// The rendered prompt shown to generators and reward models.
    pub prompt: String,
    /// Normalized reference solution, always ending in a single newline.
    pub reference_code: String,
    pub tests: Vec<TestCase>,
    pub split: Option<Split>,
}

impl Problem {
    pub fn code_lines(&self) -> CodeLines {
        split_lines(&self.reference_code)
    }

    pub fn seed_tests(&self) -> impl Iterator<Item = &TestCase> {
        self.tests.iter().filter(|t| t.origin == TestOrigin::Seed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub problems: Vec<Problem>,
}

impl Corpus {
    pub fn new(problems: Vec<Problem>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for p in &problems {
            if !seen.insert(p.id) {
                return Err(CorpusError::DuplicateId(p.id));
            }
        }
        Ok(Self { problems })
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Problem> {
        self.problems.iter().filter(move |p| p.split == Some(split))
    }

    /// Writes the corpus in the input record format plus `split` and
    /// `test_origin` fields.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for p in &self.problems {
            let record = CorpusRecord::from_problem(p);
            let line = serde_json::to_string(&record).expect("corpus record serializes");
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub task_id: u32,
    pub text: String,
    pub code: String,
    pub test_list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_origin: Option<Vec<TestOrigin>>,
}

impl CorpusRecord {
    pub fn from_problem(p: &Problem) -> Self {
        Self {
            task_id: p.id,
            text: p.description.clone(),
            code: p.reference_code.clone(),
            test_list: p.tests.iter().map(|t| t.assertion.clone()).collect(),
            split: p.split,
            test_origin: Some(p.tests.iter().map(|t| t.origin).collect()),
        }
    }
}

/// Canonicalizes program text: each block indentation level becomes 4
/// spaces (a tab counts as 4 columns when measuring levels), continuation
/// lines inside brackets keep their width, trailing whitespace is stripped
/// and the text ends in exactly one newline.
pub fn normalize(source: &str) -> Result<String, CorpusError> {
    let unified = source.replace("\r\n", "\n").replace('\r', "\n");
    let mut parsed: Vec<(usize, &str)> = Vec::new();
    for (i, raw) in unified.split('\n').enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            parsed.push((0, ""));
            continue;
        }
        let body_start = line.find(|c: char| c != ' ' && c != '\t').unwrap_or(line.len());
        let (lead, body) = line.split_at(body_start);
        // a space before a tab has no unambiguous width
        if let Some(first_space) = lead.find(' ') {
            if lead[first_space..].contains('\t') {
                return Err(CorpusError::MixedIndentationUnresolvable { line: i + 1 });
            }
        }
        let width: usize = lead.chars().map(|c| if c == '\t' { 4 } else { 1 }).sum();
        parsed.push((width, body));
    }
    while parsed.last().is_some_and(|(_, body)| body.is_empty()) {
        parsed.pop();
    }

    let mut out = String::with_capacity(unified.len() + 1);
    let mut stack: Vec<usize> = vec![0];
    let mut depth = 0i32;
    let mut continued = false;
    for (i, (width, body)) in parsed.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if body.is_empty() {
            continue;
        }
        let width = if depth > 0 || continued {
            *width
        } else {
            while stack.len() > 1 && *stack.last().unwrap() > *width {
                stack.pop();
            }
            if *stack.last().unwrap() < *width {
                stack.push(*width);
            }
            4 * (stack.len() - 1)
        };
        out.extend(std::iter::repeat_n(' ', width));
        out.push_str(body);
        let toks = lex_line(body);
        depth = (depth + bracket_delta(body, &toks)).max(0);
        continued = body.ends_with('\\') && !toks.last().is_some_and(|t| t.kind == TokKind::Comment);
    }
    out.push('\n');
    Ok(out)
}

fn bracket_delta(line: &str, toks: &[crate::pylex::Tok]) -> i32 {
    toks.iter()
        .filter(|t| t.kind == TokKind::Op)
        .map(|t| match t.text(line) {
            "(" | "[" | "{" => 1,
            ")" | "]" | "}" => -1,
            _ => 0,
        })
        .sum()
}

/// Splits normalized source into lines; blank lines are kept as empty
/// entries and the trailing newline does not produce an extra line.
pub fn split_lines(source: &str) -> CodeLines {
    let body = source.strip_suffix('\n').unwrap_or(source);
    CodeLines { lines: body.split('\n').map(str::to_owned).collect() }
}

/// Fills `{description}`, `{tests}` (all seed assertions, one per line)
/// and `{test1}`, `{test2}`, ... placeholders.
pub fn render_prompt(template: &str, description: &str, seed_tests: &[&str]) -> String {
    let mut out = template.replace("{description}", description.trim());
    out = out.replace("{tests}", &seed_tests.join("\n"));
    for (i, t) in seed_tests.iter().enumerate() {
        out = out.replace(&format!("{{test{}}}", i + 1), t);
    }
    out
}

/// Reads a line-delimited corpus file. Blank lines are ignored; a record
/// whose code cannot be normalized (or that has no code lines or no tests)
/// is skipped with a warning.
pub fn ingest(path: &Path, prompt_template: &str) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut problems = Vec::new();
    let mut index = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::ParseError { index, message: e.to_string() })?;
        if let Some(p) = problem_from_record(record, prompt_template, index)? {
            problems.push(p);
        }
        index += 1;
    }
    Corpus::new(problems)
}

pub fn problem_from_record(
    record: CorpusRecord,
    prompt_template: &str,
    index: usize,
) -> Result<Option<Problem>, CorpusError> {
    let code = match normalize(&record.code) {
        Ok(c) => c,
        Err(e) => {
            warn!("skipping task {} (record {index}): {e}", record.task_id);
            return Ok(None);
        }
    };
    if code.trim().is_empty() {
        warn!("skipping task {} (record {index}): empty code", record.task_id);
        return Ok(None);
    }
    if record.test_list.is_empty() {
        warn!("skipping task {} (record {index}): no tests", record.task_id);
        return Ok(None);
    }
    let origins = match record.test_origin {
        Some(o) if o.len() == record.test_list.len() => o,
        Some(_) => {
            return Err(CorpusError::ParseError {
                index,
                message: "test_origin length differs from test_list".into(),
            })
        }
        None => vec![TestOrigin::Seed; record.test_list.len()],
    };
    let tests: Vec<TestCase> = record
        .test_list
        .into_iter()
        .zip(origins)
        .map(|(assertion, origin)| TestCase { assertion: assertion.trim().to_owned(), origin })
        .collect();
    let seeds: Vec<&str> = tests
        .iter()
        .filter(|t| t.origin == TestOrigin::Seed)
        .map(|t| t.assertion.as_str())
        .collect();
    let prompt = render_prompt(prompt_template, &record.text, &seeds);
    Ok(Some(Problem {
        id: record.task_id,
        description: record.text.trim().to_owned(),
        prompt,
        reference_code: code,
        tests,
        split: record.split,
    }))
}

/// Inclusive id ranges mapped to splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub ranges: Vec<(u32, u32, Split)>,
}

impl Default for SplitRanges {
    /// The MBPP re-partition: 601-974 seed/SFT, 101-500 RL, 501-600
    /// validation, 1-100 test.
    fn default() -> Self {
        Self {
            ranges: vec![
                (601, 974, Split::SftSeed),
                (101, 500, Split::RlTrain),
                (501, 600, Split::Validation),
                (1, 100, Split::Test),
            ],
        }
    }
}

impl SplitRanges {
    pub fn lookup(&self, id: u32) -> Option<Split> {
        self.ranges.iter().find(|(lo, hi, _)| (*lo..=*hi).contains(&id)).map(|r| r.2)
    }
}

pub fn assign_splits(corpus: Corpus, ranges: &SplitRanges) -> Result<Corpus, CorpusError> {
    let mut problems = corpus.problems;
    for p in &mut problems {
        p.split = Some(ranges.lookup(p.id).ok_or(CorpusError::UnmappedId(p.id))?);
    }
    Ok(Corpus { problems })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    /// Whitespace rewriter used only as a test oracle: strip trailing
    /// whitespace per line, drop trailing blank lines, add one newline.
    fn strip_oracle(s: &str) -> String {
        let lines: Vec<&str> = s.split('\n').map(|l| l.trim_end()).collect();
        let mut end = lines.len();
        while end > 0 && lines[end - 1].is_empty() {
            end -= 1;
        }
        format!("{}\n", lines[..end].join("\n"))
    }

    #[test]
    fn tab_becomes_four_spaces() {
        assert_eq!(normalize("def f():\n\treturn 1").unwrap(), "def f():\n    return 1\n");
    }

    #[test]
    fn normalized_text_is_fixed_point() {
        let s = "def f(x):\n    if x:\n        return 1\n    return 2\n";
        assert_eq!(normalize(s).unwrap(), s);
    }

    #[test]
    fn trailing_whitespace_and_blank_lines() {
        let input = "a=1  \n\n\nb=2";
        assert_eq!(normalize(input).unwrap(), "a=1\n\n\nb=2\n");
        assert_eq!(normalize(input).unwrap(), strip_oracle(input));
    }

    #[test]
    fn two_space_indent_rescaled() {
        let s = "def f(x):\n  if x:\n    return 1\n  return 2";
        assert_eq!(
            normalize(s).unwrap(),
            "def f(x):\n    if x:\n        return 1\n    return 2\n"
        );
    }

    #[test]
    fn crlf_handled() {
        assert_eq!(normalize("a = 1\r\nb = 2\r\n").unwrap(), "a = 1\nb = 2\n");
    }

    #[test]
    fn ambiguous_mix_reports_line() {
        let err = normalize("def f():\n \treturn 1\n").unwrap_err();
        assert!(matches!(err, CorpusError::MixedIndentationUnresolvable { line: 2 }));
    }

    #[test]
    fn tab_then_spaces_is_resolvable() {
        assert_eq!(normalize("f(1,\n\t  2)").unwrap(), "f(1,\n      2)\n");
    }

    #[test]
    fn split_examples() {
        let c = split_lines("a=1\nb=2\n");
        assert_eq!(c.lines, vec!["a=1", "b=2"]);
        assert_eq!(c.line_count(), 2);
        assert_eq!(split_lines("x=0\n").line_count(), 1);
        let blank = split_lines("a\n\nb\n");
        assert_eq!(blank.lines, vec!["a", "", "b"]);
    }

    #[test]
    fn seven_line_solution() {
        let src = "def remove_Occ(s,ch): \r\n    for i in range(len(s)): \r\n        if (s[i] == ch): \r\n            s = s[0 : i] + s[i + 1:] \r\n            break\r\n    for i in range(len(s) - 1,-1,-1):  \r\n        if (s[i] == ch): \r\n            s = s[0 : i] + s[i + 1:] \r\n            break\r\n    return s ";
        // hand count: 10 physical lines
        assert_eq!(split_lines(&normalize(src).unwrap()).line_count(), 10);
        let seven = "def f(a):\n    b = 0\n    for x in a:\n        if x:\n            b += 1\n    c = b\n    return c\n";
        assert_eq!(split_lines(seven).line_count(), 7);
    }

    #[test]
    fn ingest_three_tests() {
        let f = write_tmp(concat!(
            r#"{"task_id": 11, "text": "Add two numbers.", "code": "def add(a, b):\r\n\treturn a + b", "test_list": ["assert add(1, 2) == 3", "assert add(0, 0) == 0", "assert add(-1, 1) == 0"]}"#,
            "\n"
        ));
        let corpus = ingest(f.path(), DEFAULT_PROMPT_TEMPLATE).unwrap();
        assert_eq!(corpus.len(), 1);
        let p = &corpus.problems[0];
        assert_eq!(p.tests.len(), 3);
        assert!(p.tests.iter().all(|t| t.origin == TestOrigin::Seed));
        assert_eq!(p.reference_code, "def add(a, b):\n    return a + b\n");
        assert_eq!(
            p.prompt,
            "Add two numbers. Your code should satisfy these tests:\nassert add(1, 2) == 3\nassert add(0, 0) == 0\nassert add(-1, 1) == 0"
        );
    }

    #[test]
    fn ingest_empty_file() {
        let f = write_tmp("");
        assert!(ingest(f.path(), DEFAULT_PROMPT_TEMPLATE).unwrap().is_empty());
    }

    #[test]
    fn ingest_missing_code_is_parse_error() {
        let f = write_tmp(concat!(
            r#"{"task_id": 1, "text": "t", "code": "x = 1", "test_list": ["assert x == 1"]}"#,
            "\n",
            r#"{"task_id": 2, "text": "t", "test_list": ["assert True"]}"#,
            "\n"
        ));
        let err = ingest(f.path(), DEFAULT_PROMPT_TEMPLATE).unwrap_err();
        assert!(matches!(err, CorpusError::ParseError { index: 1, .. }), "{err}");
    }

    #[test]
    fn ingest_duplicate_id() {
        let rec = r#"{"task_id": 3, "text": "t", "code": "x = 1", "test_list": ["assert x == 1"]}"#;
        let f = write_tmp(&format!("{rec}\n{rec}\n"));
        assert!(matches!(
            ingest(f.path(), DEFAULT_PROMPT_TEMPLATE).unwrap_err(),
            CorpusError::DuplicateId(3)
        ));
    }

    #[test]
    fn ingest_skips_ambiguous_indentation() {
        let f = write_tmp(concat!(
            r#"{"task_id": 1, "text": "t", "code": "def f():\n \treturn 1", "test_list": ["assert f() == 1"]}"#,
            "\n",
            r#"{"task_id": 2, "text": "t", "code": "x = 1", "test_list": ["assert x == 1"]}"#,
            "\n"
        ));
        let corpus = ingest(f.path(), DEFAULT_PROMPT_TEMPLATE).unwrap();
        assert_eq!(corpus.problems.iter().map(|p| p.id).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn write_then_ingest_keeps_split_and_origin() {
        let p = Problem {
            id: 700,
            description: "d".into(),
            prompt: String::new(),
            reference_code: "x = 1\n".into(),
            tests: vec![TestCase::seed("assert x == 1"), TestCase::augmented("assert x > 0")],
            split: Some(Split::SftSeed),
        };
        let corpus = Corpus::new(vec![p]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        corpus.write_jsonl(f.path()).unwrap();
        let back = ingest(f.path(), "{description}|{tests}").unwrap();
        let q = &back.problems[0];
        assert_eq!(q.split, Some(Split::SftSeed));
        assert_eq!(q.tests[1].origin, TestOrigin::Augmented);
        assert_eq!(q.prompt, "d|assert x == 1");
    }

    #[test]
    fn split_assignment_examples() {
        let r = SplitRanges::default();
        assert_eq!(r.lookup(700), Some(Split::SftSeed));
        assert_eq!(r.lookup(50), Some(Split::Test));
        assert_eq!(r.lookup(101), Some(Split::RlTrain));
        assert_eq!(r.lookup(600), Some(Split::Validation));
        assert_eq!(r.lookup(1000), None);
        let p = |id| Problem {
            id,
            description: String::new(),
            prompt: String::new(),
            reference_code: "x\n".into(),
            tests: vec![TestCase::seed("assert 1")],
            split: None,
        };
        let c = Corpus::new(vec![p(700), p(1000)]).unwrap();
        assert!(matches!(assign_splits(c, &r), Err(CorpusError::UnmappedId(1000))));
    }

    #[test]
    fn default_ranges_partition_mbpp() {
        let r = SplitRanges::default();
        for id in 1..=974u32 {
            let hits = r.ranges.iter().filter(|(lo, hi, _)| (*lo..=*hi).contains(&id)).count();
            assert_eq!(hits, 1, "id {id}");
        }
    }

    proptest! {
        #[test]
        fn normalize_idempotent(s in "[ \ta-z=():\n]{0,80}") {
            if let Ok(n) = normalize(&s) {
                prop_assert_eq!(normalize(&n).unwrap(), n.clone());
                let joined = split_lines(&n).join();
                prop_assert_eq!(joined, n.strip_suffix('\n').unwrap().to_string());
            }
        }
    }
}

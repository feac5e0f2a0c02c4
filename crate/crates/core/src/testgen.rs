//! Test augmentation toward higher adequacy. Adequacy is measured as the
//! fraction of rule mutants the tests kill; new assertions come from running
//! the reference on enumerated small inputs, or from an external teacher.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Problem, TestCase, TestOrigin};
use crate::mutator::{edits_for_problem, EditMode, LineEdit, MutationRuleSet};
use crate::sandbox::{ResourceLimits, Sandbox, SandboxError};
use crate::teacher::{TeacherClient, TeacherError, TeacherRequest};

/// Instruction sent to the teacher with the code and its tests.
pub const TESTGEN_INSTRUCTION: &str =
    "Given the following code and its existing test cases, supplement with a new test case to achieve full path coverage.";

#[derive(Debug, Error)]
pub enum TestgenError {
    #[error("coverage measurement needs the coverage shim, which is not built")]
    ShimUnavailable,
    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(String),
    #[error("no candidate tests for problem {0}")]
    NoCandidates(u32),
    #[error("reference solution of problem {0} fails its own tests")]
    ReferenceFails(u32),
    #[error("problem {0} has no test naming a function to call")]
    NoEntryPoint(u32),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

impl From<TeacherError> for TestgenError {
    fn from(e: TeacherError) -> Self {
        TestgenError::TeacherUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdequacyMethod {
    Coverage,
    MutationKill,
}

#[derive(Debug, Clone)]
pub struct TestgenConfig {
    pub rules: MutationRuleSet,
    pub limits: ResourceLimits,
    /// Most tests appended per problem.
    pub max_new_tests: usize,
    /// Candidates confirmed in the sandbox per problem.
    pub max_candidates: usize,
    /// Cap on enumerated argument tuples.
    pub max_inputs: usize,
    /// Teacher requests per problem when an endpoint is configured.
    pub teacher_rounds: usize,
}

impl Default for TestgenConfig {
    fn default() -> Self {
        Self {
            rules: MutationRuleSet::all(0),
            limits: ResourceLimits::default().with_wall_time(Duration::from_secs(2)),
            max_new_tests: 5,
            max_candidates: 40,
            max_inputs: 400,
            teacher_rounds: 5,
        }
    }
}

/// Mutants of a problem's reference and whether the current tests kill them.
#[derive(Debug, Clone)]
pub struct MutantReport {
    pub mutants: Vec<LineEdit>,
    pub killed: Vec<bool>,
}

impl MutantReport {
    pub fn adequacy(&self) -> f64 {
        if self.mutants.is_empty() {
            return 1.0;
        }
        self.killed.iter().filter(|k| **k).count() as f64 / self.mutants.len() as f64
    }

    pub fn survivors(&self) -> impl Iterator<Item = &LineEdit> {
        self.mutants.iter().zip(&self.killed).filter(|(_, k)| !**k).map(|(m, _)| m)
    }

    pub fn survivor_count(&self) -> usize {
        self.killed.iter().filter(|k| !**k).count()
    }
}

/// All mutation-mode rule edits of the reference, each verified against
/// `tests`.
pub fn mutant_report(
    sandbox: &Sandbox,
    problem: &Problem,
    tests: &[TestCase],
    cfg: &TestgenConfig,
) -> Result<MutantReport, TestgenError> {
    let reference = sandbox.verify(&problem.reference_code, tests, &cfg.limits)?;
    if !reference.passed() {
        return Err(TestgenError::ReferenceFails(problem.id));
    }
    let mutants = edits_for_problem(problem, &cfg.rules, &[EditMode::Mutate]);
    let lines = problem.code_lines();
    let mut killed = Vec::with_capacity(mutants.len());
    for m in &mutants {
        killed.push(!sandbox.verify(&m.apply(&lines), tests, &cfg.limits)?.passed());
    }
    Ok(MutantReport { mutants, killed })
}

pub fn measure_adequacy(
    sandbox: &Sandbox,
    problem: &Problem,
    method: AdequacyMethod,
    cfg: &TestgenConfig,
) -> Result<f64, TestgenError> {
    match method {
        AdequacyMethod::Coverage => Err(TestgenError::ShimUnavailable),
        AdequacyMethod::MutationKill => Ok(mutant_report(sandbox, problem, &problem.tests, cfg)?.adequacy()),
    }
}

/// Name of the function called by the first test, e.g. `f` in
/// `assert f(1) == 2`.
pub fn entry_point(problem: &Problem) -> Option<String> {
    problem.tests.iter().find_map(|t| {
        let rest = t.assertion.trim().strip_prefix("assert")?.trim_start();
        let end = rest.find('(')?;
        let name = rest[..end].trim();
        (!name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_')).then(|| name.to_string())
    })
}

const ENUMERATE: &str = r#"
import copy, inspect, itertools, json, random, signal
POOL = [-3, -2, -1, 0, 1, 2, 3, '', 'a', 'ab', 'aba', 'hello world', [], [1], [1, 2, 3], [3, -1, 2, 2], [-2, 0]]
class _Slow(Exception):
    pass
def _alarm(*_):
    raise _Slow()
signal.signal(signal.SIGALRM, _alarm)
ns = {}
exec(CODE, ns)
fn = ns[FNAME]
try:
    arity = len([p for p in inspect.signature(fn).parameters.values() if p.default is p.empty])
except (TypeError, ValueError):
    arity = 1
combos = list(itertools.product(range(len(POOL)), repeat=arity))
if len(combos) > MAX_INPUTS:
    random.Random(SEED).shuffle(combos)
    combos = sorted(combos[:MAX_INPUTS])
out = []
for combo in combos:
    args = [copy.deepcopy(POOL[i]) for i in combo]
    text = ", ".join(repr(a) for a in args)
    try:
        signal.setitimer(signal.ITIMER_REAL, 0.2)
        v = fn(*args)
        signal.setitimer(signal.ITIMER_REAL, 0)
        r = repr(v)
        if len(r) <= 200 and eval(r) == v:
            out.append("assert %s(%s) == %s" % (FNAME, text, r))
    except BaseException:
        signal.setitimer(signal.ITIMER_REAL, 0)
print(json.dumps(out))
"#;

fn literal(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// Assertions from running the reference on every tuple of small inputs
/// (integers -3..3, short strings and lists) matching the entry point's
/// arity, keeping calls that return a value whose `repr` round-trips.
pub fn enumerate_candidates(
    sandbox: &Sandbox,
    problem: &Problem,
    cfg: &TestgenConfig,
) -> Result<Vec<TestCase>, TestgenError> {
    let fname = entry_point(problem).ok_or(TestgenError::NoEntryPoint(problem.id))?;
    let script = format!(
        "CODE = {}\nFNAME = {}\nMAX_INPUTS = {}\nSEED = {}\n{}",
        literal(&problem.reference_code),
        literal(&fname),
        cfg.max_inputs,
        problem.id,
        ENUMERATE
    );
    let limits = ResourceLimits::default().with_wall_time(Duration::from_secs(60));
    let run = sandbox.run_script(&script, &limits)?;
    let found: Vec<String> = if run.code() == 0 { serde_json::from_str(run.stdout.trim()).unwrap_or_default() } else { Vec::new() };
    let existing: BTreeSet<&str> = problem.tests.iter().map(|t| t.assertion.as_str()).collect();
    Ok(found
        .into_iter()
        .filter(|a| !existing.contains(a.as_str()))
        .map(TestCase::augmented)
        .collect())
}

/// Teacher request for one additional test.
pub fn teacher_request(problem: &Problem) -> TeacherRequest {
    let tests: Vec<&str> = problem.tests.iter().map(|t| t.assertion.as_str()).collect();
    TeacherRequest {
        mode: "testgen".into(),
        line: String::new(),
        context: format!("{}\n{}", problem.reference_code, tests.join("\n")),
        problem: format!("{TESTGEN_INSTRUCTION}\n{}", problem.prompt),
    }
}

/// Single-line `assert` statements in a teacher reply.
pub fn parse_assertions(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(str::trim)
        .filter(|l| l.starts_with("assert ") && !l.ends_with(':'))
        .map(str::to_owned)
        .collect()
}

/// Candidate tests: from the teacher when a client is given, otherwise by
/// enumeration.
pub fn propose_tests(
    sandbox: &Sandbox,
    problem: &Problem,
    teacher: Option<&TeacherClient>,
    cfg: &TestgenConfig,
) -> Result<Vec<TestCase>, TestgenError> {
    let candidates = match teacher {
        None => enumerate_candidates(sandbox, problem, cfg)?,
        Some(client) => {
            let req = teacher_request(problem);
            let mut out: Vec<TestCase> = Vec::new();
            for _ in 0..cfg.teacher_rounds.max(1) {
                let reply = client.request_field(&req, "assertion")?;
                for a in parse_assertions(&reply) {
                    if !out.iter().any(|t| t.assertion == a) && !problem.tests.iter().any(|t| t.assertion == a) {
                        out.push(TestCase::augmented(a));
                    }
                }
            }
            out
        }
    };
    if candidates.is_empty() {
        return Err(TestgenError::NoCandidates(problem.id));
    }
    Ok(candidates)
}

const SCREEN: &str = r#"
import json, signal
class _Slow(Exception):
    pass
def _alarm(*_):
    raise _Slow()
signal.signal(signal.SIGALRM, _alarm)
rows = []
for prog in PROGRAMS:
    row = []
    try:
        signal.setitimer(signal.ITIMER_REAL, 0.5)
        ns = {}
        exec(prog, ns)
        signal.setitimer(signal.ITIMER_REAL, 0)
    except BaseException:
        signal.setitimer(signal.ITIMER_REAL, 0)
        rows.append([True] * len(TESTS))
        continue
    for t in TESTS:
        try:
            signal.setitimer(signal.ITIMER_REAL, 0.2)
            exec(t, dict(ns))
            signal.setitimer(signal.ITIMER_REAL, 0)
            row.append(False)
        except BaseException:
            signal.setitimer(signal.ITIMER_REAL, 0)
            row.append(True)
    rows.append(row)
print(json.dumps(rows))
"#;

/// In-process estimate of which candidates fail on which programs, used only
/// to order sandbox confirmations. `None` if the screen itself fails.
fn screen(sandbox: &Sandbox, programs: &[String], tests: &[TestCase]) -> Option<Vec<Vec<bool>>> {
    let tests: Vec<&str> = tests.iter().map(|t| t.assertion.as_str()).collect();
    let script = format!(
        "PROGRAMS = {}\nTESTS = {}\n{}",
        serde_json::to_string(programs).ok()?,
        serde_json::to_string(&tests).ok()?,
        SCREEN
    );
    let limits = ResourceLimits::default().with_wall_time(Duration::from_secs(120));
    let run = sandbox.run_script(&script, &limits).ok()?;
    if run.code() != 0 {
        return None;
    }
    serde_json::from_str(run.stdout.trim()).ok()
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub problem: Problem,
    pub adequacy_before: f64,
    pub adequacy_after: f64,
    pub accepted: Vec<TestCase>,
    pub survivors_before: usize,
    pub survivors_after: usize,
}

/// Appends candidates the reference passes and that kill at least one
/// surviving mutant, each confirmed in the sandbox. Stops when no mutant
/// survives or `max_new_tests` were added.
pub fn accept_tests(
    sandbox: &Sandbox,
    problem: &Problem,
    candidates: &[TestCase],
    cfg: &TestgenConfig,
) -> Result<AugmentOutcome, TestgenError> {
    let report = mutant_report(sandbox, problem, &problem.tests, cfg)?;
    let lines = problem.code_lines();
    let survivors: Vec<String> = report.survivors().map(|m| m.apply(&lines)).collect();
    let total = report.mutants.len();
    let mut alive = vec![true; survivors.len()];
    let mut out = problem.clone();
    let mut accepted = Vec::new();

    // Screened candidates go in order of estimated new kills.
    let matrix = if survivors.is_empty() { None } else { screen(sandbox, &survivors, candidates) };
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut tried = 0;
    while alive.contains(&true) && accepted.len() < cfg.max_new_tests && tried < cfg.max_candidates && !order.is_empty() {
        let pick = match &matrix {
            Some(m) => {
                let score = |c: usize| (0..alive.len()).filter(|&s| alive[s] && m[s][c]).count();
                let pos = (0..order.len()).max_by_key(|&i| (score(order[i]), std::cmp::Reverse(i))).expect("non-empty");
                if score(order[pos]) == 0 {
                    break;
                }
                order.remove(pos)
            }
            None => order.remove(0),
        };
        tried += 1;
        let cand = &candidates[pick];
        let single = std::slice::from_ref(cand);
        if !sandbox.verify(&problem.reference_code, single, &cfg.limits)?.passed() {
            continue;
        }
        let mut newly = Vec::new();
        for (i, prog) in survivors.iter().enumerate().filter(|(i, _)| alive[*i]) {
            if !sandbox.verify(prog, single, &cfg.limits)?.passed() {
                newly.push(i);
            }
        }
        if newly.is_empty() {
            continue;
        }
        for i in newly {
            alive[i] = false;
        }
        out.tests.push(TestCase { assertion: cand.assertion.clone(), origin: TestOrigin::Augmented });
        accepted.push(cand.clone());
    }
    let survivors_after = alive.iter().filter(|a| **a).count();
    let adequacy_after = if total == 0 { 1.0 } else { (total - survivors_after) as f64 / total as f64 };
    Ok(AugmentOutcome {
        problem: out,
        adequacy_before: report.adequacy(),
        adequacy_after,
        accepted,
        survivors_before: survivors.len(),
        survivors_after,
    })
}

/// Measures adequacy, proposes and accepts tests when below 1. Problems
/// without candidates come back unchanged.
pub fn augment_problem(
    sandbox: &Sandbox,
    problem: &Problem,
    teacher: Option<&TeacherClient>,
    cfg: &TestgenConfig,
) -> Result<AugmentOutcome, TestgenError> {
    let report = mutant_report(sandbox, problem, &problem.tests, cfg)?;
    let unchanged = |adequacy: f64, survivors: usize| AugmentOutcome {
        problem: problem.clone(),
        adequacy_before: adequacy,
        adequacy_after: adequacy,
        accepted: Vec::new(),
        survivors_before: survivors,
        survivors_after: survivors,
    };
    if report.survivor_count() == 0 {
        return Ok(unchanged(report.adequacy(), 0));
    }
    match propose_tests(sandbox, problem, teacher, cfg) {
        Ok(c) => accept_tests(sandbox, problem, &c, cfg),
        Err(TestgenError::NoCandidates(id)) => {
            log::warn!("problem {id}: no candidate tests, left unaugmented");
            Ok(unchanged(report.adequacy(), report.survivor_count()))
        }
        Err(e) => Err(e),
    }
}

//! PPO with segment-level rewards on a small program-synthesis environment.
//!
//! The policy is a hashed logit table over (task, last `n` tokens); the
//! value model is linear over hashed state features. Rewards come from a
//! process reward model (one reward per emitted line), a learned outcome
//! model, or compiler feedback (one terminal reward).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_prompt, Problem, TestCase, DEFAULT_PROMPT_TEMPLATE};
use crate::dataset::{build_samples, reconstruct_program, BuildOptions, DatasetError, SampleSource, StepSample};
use crate::mutator::{edits_for_problem, EditMode, MutationRuleSet};
use crate::pylex::lex_line;
use crate::reward::{
    example_from_sample, reward_orm_compiler, train_logistic, train_orm_original, train_orm_preference,
    rank_by_verdict, CompilerRewardMap, LabeledProgram, PreferenceGroup, RewardError, RewardKind, RewardModel,
    RewardTrace, TrainConfig,
};
use crate::sandbox::{ExecutionVerdict, ResourceLimits, Sandbox, SandboxError};
use crate::util::{hash_parts, mix64, seeded_rng};

pub const NEWLINE: &str = "\n";
pub const INDENT: &str = "<indent>";
pub const EOS: &str = "<eos>";

/// Keywords, identifiers, punctuation, operators, literals and layout tokens.
pub const VOCABULARY: &[&str] = &[
    "def", "return", "if", "else", "for", "in", "while", "and", "or", "not", "range", "len", "True", "False",
    "min", "max", "sum", "abs", "f", "a", "b", "x", "s", "i", "n", "(", ")", "[", "]", ":", ",", "=", "+", "-",
    "*", "//", "%", "==", "!=", "<", ">", "<=", ">=", "+=", "-=", "-3", "-2", "-1", "0", "1", "2", "3", NEWLINE,
    INDENT, EOS,
];

const INDENT_WIDTH: usize = 4;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("non-finite loss at step {step}: policy {policy_loss}, value {value_loss}")]
    NonFiniteLoss { step: usize, policy_loss: f64, value_loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgs(String),
    #[error("sandbox: {0}")]
    Sandbox(#[from] SandboxError),
    #[error("reward model: {0}")]
    Reward(#[from] RewardError),
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A task of the toy suite with a vocabulary-expressible passing program.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub problem: Problem,
    pub reference: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyEnvironment {
    pub tasks: Vec<ToyTask>,
    pub vocabulary: Vec<String>,
    pub max_length: usize,
    index: HashMap<String, usize>,
}

/// (description, reference, tests) in the spaced layout the detokenizer emits.
const TASKS: &[(&str, &str, &[&str])] = &[
    (
        "Return the sum of a and b.",
        "def f ( a , b ) :\n    return a + b",
        &["assert f(1, 2) == 3", "assert f(-3, 3) == 0", "assert f(5, 7) == 12"],
    ),
    (
        "Return twice x plus three.",
        "def f ( x ) :\n    n = x * 2\n    return n + 3",
        &["assert f(0) == 3", "assert f(3) == 9", "assert f(-2) == -1"],
    ),
    (
        "Return the larger of a and b.",
        "def f ( a , b ) :\n    if a > b : return a\n    return b",
        &["assert f(1, 2) == 2", "assert f(5, -1) == 5", "assert f(3, 3) == 3"],
    ),
    (
        "Return the absolute value of x.",
        "def f ( x ) :\n    if x < 0 : return - x\n    return x",
        &["assert f(-4) == 4", "assert f(3) == 3", "assert f(0) == 0"],
    ),
    (
        "Return the length of the list s.",
        "def f ( s ) :\n    n = 0\n    for x in s : n += 1\n    return n",
        &["assert f([]) == 0", "assert f([1, 2, 3]) == 3", "assert f([5]) == 1"],
    ),
    (
        "Count the positive elements of s.",
        "def f ( s ) :\n    n = 0\n    for x in s : n += ( x > 0 )\n    return n",
        &["assert f([1, -2, 3]) == 2", "assert f([]) == 0", "assert f([-1, 0]) == 0"],
    ),
    (
        "Return whether x is even.",
        "def f ( x ) :\n    return x % 2 == 0",
        &["assert f(4) == True", "assert f(7) == False", "assert f(0) == True"],
    ),
    (
        "Return the sum of the elements of s.",
        "def f ( s ) :\n    n = 0\n    for x in s : n += x\n    return n",
        &["assert f([1, 2, 3]) == 6", "assert f([]) == 0", "assert f([-5, 5, 2]) == 2"],
    ),
    (
        "Return the product of a and b minus one.",
        "def f ( a , b ) :\n    n = a * b\n    return n - 1",
        &["assert f(2, 3) == 5", "assert f(0, 9) == -1", "assert f(-2, 2) == -5"],
    ),
    (
        "Return the sign of x as 1, -1 or 0.",
        "def f ( x ) :\n    if x > 0 : return 1\n    return -1 if x < 0 else 0",
        &["assert f(5) == 1", "assert f(-7) == -1", "assert f(0) == 0"],
    ),
    (
        "Return the first element of s, or 0 when s is empty.",
        "def f ( s ) :\n    if not s : return 0\n    return s [ 0 ]",
        &["assert f([]) == 0", "assert f([4, 5]) == 4", "assert f([-2]) == -2"],
    ),
    (
        "Return the square of x.",
        "def f ( x ) :\n    return x * x",
        &["assert f(3) == 9", "assert f(-2) == 4", "assert f(0) == 0"],
    ),
    (
        "Return twice the last element of s.",
        "def f ( s ) :\n    return s [ -1 ] * 2",
        &["assert f([1, 2]) == 4", "assert f([-3]) == -6", "assert f([5, 0]) == 0"],
    ),
];

impl ToyEnvironment {
    pub fn standard() -> Self {
        Self::with_max_length(64)
    }

    pub fn with_max_length(max_length: usize) -> Self {
        let vocabulary: Vec<String> = VOCABULARY.iter().map(|s| s.to_string()).collect();
        let index = vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut env = Self { tasks: Vec::new(), vocabulary, max_length, index };
        for (i, (description, source, tests)) in TASKS.iter().enumerate() {
            let reference = env.tokenize(source).expect("toy reference uses vocabulary tokens");
            let tests: Vec<TestCase> = tests.iter().map(|t| TestCase::seed(*t)).collect();
            let seed_tests: Vec<&str> = tests.iter().map(|t| t.assertion.as_str()).collect();
            let problem = Problem {
                id: i as u32 + 1,
                description: description.to_string(),
                prompt: render_prompt(DEFAULT_PROMPT_TEMPLATE, description, &seed_tests),
                reference_code: env.detokenize(&reference),
                tests,
                split: None,
            };
            env.tasks.push(ToyTask { problem, reference });
        }
        env
    }

    pub fn token_id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn newline(&self) -> usize {
        self.index[NEWLINE]
    }

    pub fn indent(&self) -> usize {
        self.index[INDENT]
    }

    pub fn problems(&self) -> Vec<Problem> {
        self.tasks.iter().map(|t| t.problem.clone()).collect()
    }

    /// Program text: tokens joined by single spaces, each indent token
    /// worth four columns at line start; stops at EOS. Always ends in a
    /// newline unless empty.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &t in tokens {
            let tok = self.vocabulary[t].as_str();
            match tok {
                EOS => break,
                NEWLINE => {
                    out.push('\n');
                    line_start = true;
                }
                INDENT if line_start => out.push_str(&" ".repeat(INDENT_WIDTH)),
                _ => {
                    if !line_start && !out.ends_with(' ') {
                        out.push(' ');
                    }
                    out.push_str(tok);
                    line_start = false;
                }
            }
        }
        if !out.is_empty() && !out.ends_with('\n') {
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Self::detokenize`] for text using vocabulary tokens,
    /// terminated by EOS. `None` when a token is outside the vocabulary or
    /// indentation is not a multiple of four.
    pub fn tokenize(&self, code: &str) -> Option<Vec<usize>> {
        let body = code.strip_suffix('\n').unwrap_or(code);
        let mut out = Vec::new();
        for (i, line) in body.split('\n').enumerate() {
            if i > 0 {
                out.push(self.newline());
            }
            let trimmed = line.trim_start_matches(' ');
            let width = line.len() - trimmed.len();
            if width % INDENT_WIDTH != 0 || trimmed.starts_with('\t') {
                return None;
            }
            out.extend(std::iter::repeat_n(self.indent(), width / INDENT_WIDTH));
            for piece in trimmed.split_whitespace() {
                if let Some(id) = self.token_id(piece) {
                    out.push(id);
                    continue;
                }
                for tok in lex_line(piece) {
                    out.push(self.token_id(tok.text(piece))?);
                }
            }
        }
        out.push(self.eos());
        Some(out)
    }
}

/// Decoding configuration shared by sampling and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    pub top_p: f64,
    /// Argmax decoding instead of sampling.
    pub greedy: bool,
}

impl Default for Decode {
    fn default() -> Self {
        Self { top_p: 0.95, greedy: false }
    }
}

/// Softmax policy over a hashed logit table; unseen states have zero logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub vocab_size: usize,
    pub context: usize,
    pub temperature: f64,
    pub table: BTreeMap<u64, Vec<f64>>,
}

const MIN_TEMPERATURE: f64 = 1e-3;
const BOS: u32 = u32::MAX;

impl Policy {
    pub fn new(vocab_size: usize, context: usize, temperature: f64) -> Self {
        Self { vocab_size, context, temperature, table: BTreeMap::new() }
    }

    pub fn state_key(&self, task: usize, history: &[usize]) -> u64 {
        let mut parts: Vec<u8> = (task as u32).to_le_bytes().to_vec();
        for i in 0..self.context {
            let tok = history.len().checked_sub(self.context - i).map_or(BOS, |j| history[j] as u32);
            parts.extend_from_slice(&tok.to_le_bytes());
        }
        mix64(hash_parts(&[b"state", &parts]))
    }

    pub fn logits(&self, key: u64) -> Vec<f64> {
        self.table.get(&key).cloned().unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    fn effective_temperature(&self) -> f64 {
        self.temperature.max(MIN_TEMPERATURE)
    }

    /// Action distribution `softmax(z / T)`.
    pub fn probs(&self, key: u64) -> Vec<f64> {
        softmax(&self.logits(key), self.effective_temperature())
    }

    pub fn log_prob(&self, key: u64, action: usize) -> f64 {
        let z = self.logits(key);
        let t = self.effective_temperature();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| ((v - m) / t).exp()).sum::<f64>().ln();
        (z[action] - m) / t - lse
    }

    pub fn greedy(&self, key: u64) -> usize {
        let z = self.logits(key);
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        best
    }

    /// Nucleus sample: the smallest set of most likely tokens whose mass
    /// reaches `top_p`, renormalized.
    pub fn sample<R: Rng>(&self, key: u64, top_p: f64, rng: &mut R) -> usize {
        let p = self.probs(key);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|a, b| p[*b].total_cmp(&p[*a]).then(a.cmp(b)));
        let mut kept = Vec::new();
        let mut mass = 0.0;
        for i in order {
            kept.push(i);
            mass += p[i];
            if mass >= top_p {
                break;
            }
        }
        let mut u = rng.gen::<f64>() * mass;
        for &i in &kept {
            u -= p[i];
            if u <= 0.0 {
                return i;
            }
        }
        *kept.last().expect("non-empty vocabulary")
    }

    fn entry(&mut self, key: u64) -> &mut Vec<f64> {
        let n = self.vocab_size;
        self.table.entry(key).or_insert_with(|| vec![0.0; n])
    }

    /// Raises the logit of each token of `tokens` in its state to at least `bias`.
    pub fn imprint(&mut self, task: usize, tokens: &[usize], bias: f64) {
        for t in 0..tokens.len() {
            let key = self.state_key(task, &tokens[..t]);
            let slot = &mut self.entry(key)[tokens[t]];
            *slot = slot.max(bias);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Warm-start settings: each task's reference and a failing distractor are
/// imprinted with high logits; for a fraction of tasks the distractor wins
/// the branch point by `margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStart {
    pub context: usize,
    pub temperature: f64,
    pub bias: f64,
    pub margin: f64,
    pub distractor_fraction: f64,
    /// Branch points per task.
    pub branches: usize,
    pub seed: u64,
}

impl Default for WarmStart {
    fn default() -> Self {
        Self { context: 3, temperature: 1.2, bias: 10.0, margin: 0.5, distractor_fraction: 0.7, branches: 2, seed: 0 }
    }
}

/// States where the two token sequences disagree on the next token.
fn branch_states(policy: &Policy, task: usize, paths: &[&[usize]]) -> usize {
    let mut next: HashMap<u64, HashSet<usize>> = HashMap::new();
    for path in paths {
        for t in 0..path.len() {
            next.entry(policy.state_key(task, &path[..t])).or_default().insert(path[t]);
        }
    }
    next.values().filter(|s| s.len() > 1).count()
}

/// Whether greedy decoding of the imprinted reference alone is unambiguous.
pub fn reference_unambiguous(env: &ToyEnvironment, context: usize) -> bool {
    let p = Policy::new(env.vocabulary.len(), context, 1.0);
    env.tasks.iter().enumerate().all(|(i, t)| branch_states(&p, i, &[&t.reference]) == 0)
}

/// Failing, vocabulary-expressible single-line mutations of each task's
/// reference, at most `per_task` of them and on distinct lines. Each one
/// branches from the reference at exactly one state, and all branch states
/// of a task are distinct. Chosen by seed.
pub fn select_distractors(
    env: &ToyEnvironment,
    sandbox: &Sandbox,
    context: usize,
    per_task: usize,
    limits: &ResourceLimits,
    seed: u64,
) -> Result<Vec<Vec<Vec<usize>>>, RlError> {
    let probe = Policy::new(env.vocabulary.len(), context, 1.0);
    let rules = MutationRuleSet::all(seed).uncapped();
    let mut out = Vec::with_capacity(env.tasks.len());
    for (i, task) in env.tasks.iter().enumerate() {
        let lines = task.problem.code_lines();
        let mut by_line: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
        for edit in edits_for_problem(&task.problem, &rules, &[EditMode::Mutate]) {
            let code = edit.apply(&lines);
            let Some(tokens) = env.tokenize(&code) else { continue };
            if tokens.len() > env.max_length || branch_states(&probe, i, &[&task.reference, &tokens]) != 1 {
                continue;
            }
            let slot = by_line.entry(edit.line_index).or_default();
            if !slot.contains(&tokens) && !sandbox.verify(&code, &task.problem.tests, limits)?.passed() {
                slot.push(tokens);
            }
        }
        let mut rng = seeded_rng(seed, 0x6469_7374 ^ i as u64);
        let mut line_order: Vec<usize> = by_line.keys().copied().collect();
        line_order.shuffle(&mut rng);
        let mut chosen: Vec<Vec<usize>> = Vec::new();
        for line in line_order {
            if chosen.len() == per_task {
                break;
            }
            let Some(candidate) = by_line[&line].choose(&mut rng) else { continue };
            let mut paths: Vec<&[usize]> = vec![&task.reference];
            paths.extend(chosen.iter().map(Vec::as_slice));
            paths.push(candidate);
            if branch_states(&probe, i, &paths) == chosen.len() + 1 {
                chosen.push(candidate.clone());
            }
        }
        out.push(chosen);
    }
    Ok(out)
}

/// Initial policy imprinted with each reference and its distractors. At
/// each branch point the distractor wins by `margin` with probability
/// `distractor_fraction`, otherwise the reference does.
pub fn warm_start(env: &ToyEnvironment, distractors: &[Vec<Vec<usize>>], cfg: &WarmStart) -> Policy {
    let mut policy = Policy::new(env.vocabulary.len(), cfg.context, cfg.temperature);
    let mut rng = seeded_rng(cfg.seed, 0x7761_726d);
    for (i, task) in env.tasks.iter().enumerate() {
        policy.imprint(i, &task.reference, cfg.bias);
        let none = Vec::new();
        for d in distractors.get(i).unwrap_or(&none) {
            policy.imprint(i, d, cfg.bias);
            let Some(k) = task.reference.iter().zip(d).position(|(a, b)| a != b) else { continue };
            let favored = if rng.gen::<f64>() < cfg.distractor_fraction { d[k] } else { task.reference[k] };
            let key = policy.state_key(i, &task.reference[..k]);
            policy.entry(key)[favored] = cfg.bias + cfg.margin;
        }
    }
    policy
}

pub const VALUE_DIM: usize = 1 << 12;

/// Linear value model over hashed state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl ValueModel {
    pub fn new(dim: usize) -> Self {
        Self { dim, weights: vec![0.0; dim] }
    }

    /// Indices of the active (unit-valued) features of a state.
    pub fn features(&self, task: usize, history: &[usize]) -> Vec<u32> {
        let task_b = (task as u32).to_le_bytes();
        let last = |k: usize| -> Vec<u8> {
            history[history.len().saturating_sub(k)..].iter().flat_map(|t| (*t as u32).to_le_bytes()).collect()
        };
        let pos = (history.len() as u32).to_le_bytes();
        let parts: [Vec<u8>; 6] =
            [b"bias".to_vec(), task_b.to_vec(), [&task_b[..], &pos].concat(), last(1), last(2), last(3)];
        parts
            .iter()
            .enumerate()
            .map(|(slot, p)| {
                let h = hash_parts(&[&(slot as u32).to_le_bytes(), &task_b, p]);
                (mix64(h) % self.dim as u64) as u32
            })
            .collect()
    }

    pub fn predict(&self, features: &[u32]) -> f64 {
        features.iter().map(|i| self.weights[*i as usize]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: usize,
    pub tokens: Vec<usize>,
    /// Policy state key before each token.
    pub states: Vec<u64>,
    pub features: Vec<Vec<u32>>,
    /// Log-probabilities under the sampling policy.
    pub log_probs: Vec<f64>,
    pub trace: Option<RewardTrace>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Samples one trajectory for `task`; ends at EOS or the length limit.
pub fn sample_trajectory<R: Rng>(
    policy: &Policy,
    value: &ValueModel,
    env: &ToyEnvironment,
    task: usize,
    decode: &Decode,
    rng: &mut R,
) -> Trajectory {
    let mut tr = Trajectory {
        task,
        tokens: Vec::new(),
        states: Vec::new(),
        features: Vec::new(),
        log_probs: Vec::new(),
        trace: None,
        rewards: Vec::new(),
        values: Vec::new(),
        advantages: Vec::new(),
        value_targets: Vec::new(),
    };
    let eos = env.eos();
    while tr.tokens.len() < env.max_length {
        let key = policy.state_key(task, &tr.tokens);
        let a = if decode.greedy { policy.greedy(key) } else { policy.sample(key, decode.top_p, rng) };
        tr.features.push(value.features(task, &tr.tokens));
        tr.states.push(key);
        tr.log_probs.push(policy.log_prob(key, a));
        tr.tokens.push(a);
        if a == eos {
            break;
        }
    }
    tr
}

/// `n` trajectories per task, tasks in parallel with per-task seeds.
pub fn rollout(
    policy: &Policy,
    value: &ValueModel,
    env: &ToyEnvironment,
    n: usize,
    seed: u64,
    decode: &Decode,
) -> Vec<Trajectory> {
    (0..env.tasks.len())
        .into_par_iter()
        .flat_map_iter(|task| {
            let mut rng = seeded_rng(seed, 0x726f_6c6c ^ task as u64);
            (0..n).map(move |_| sample_trajectory(policy, value, env, task, decode, &mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

/// Segments of a token sequence: each ends at a newline token or at the
/// final token. Returns (end position, line text) pairs.
pub fn token_segments(env: &ToyEnvironment, tokens: &[usize]) -> Vec<(usize, String)> {
    let nl = env.newline();
    let mut out = Vec::new();
    let mut start = 0;
    for (t, tok) in tokens.iter().enumerate() {
        let last = t + 1 == tokens.len();
        if *tok == nl || last {
            let text = env.detokenize(&tokens[start..=t]);
            out.push((t, text.strip_suffix('\n').unwrap_or(&text).to_string()));
            start = t + 1;
        }
    }
    out
}

/// Where rewards come from during RL.
#[derive(Debug, Clone, Copy)]
pub enum RewardSource<'a> {
    Prm(&'a RewardModel),
    Orm(&'a RewardModel),
    Compiler(&'a CompilerRewardMap),
}

impl RewardSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSource::Prm(_) => "prm",
            RewardSource::Orm(m) => m.kind.as_str(),
            RewardSource::Compiler(_) => "orm_compiler",
        }
    }
}

/// Token-level reward trace: a PRM reward at every segment end, or a
/// single terminal outcome reward.
pub fn reward_trace(
    source: RewardSource<'_>,
    env: &ToyEnvironment,
    traj: &Trajectory,
    verdict: &ExecutionVerdict,
) -> RewardTrace {
    let prompt = &env.tasks[traj.task].problem.prompt;
    let length = traj.len();
    match source {
        RewardSource::Prm(m) => {
            let segs = token_segments(env, &traj.tokens);
            let lines: Vec<String> = segs.iter().map(|(_, l)| l.clone()).collect();
            RewardTrace {
                positions: segs.iter().map(|(p, _)| *p).collect(),
                rewards: m.segment_rewards(prompt, &lines),
                length,
            }
        }
        RewardSource::Orm(m) => RewardTrace::terminal(length, m.reward(prompt, &env.detokenize(&traj.tokens))),
        RewardSource::Compiler(map) => RewardTrace::terminal(length, reward_orm_compiler(verdict, map)),
    }
}

/// `r_t = trace_t − β·(log π(a_t|s_t) − log π_old(a_t|s_t))`.
pub fn shape_rewards(traj: &mut Trajectory, trace: RewardTrace, policy: &Policy, old_policy: &Policy, beta: f64) {
    let dense = trace.dense();
    traj.rewards = (0..traj.len())
        .map(|t| {
            let (s, a) = (traj.states[t], traj.tokens[t]);
            let kl = if beta == 0.0 { 0.0 } else { policy.log_prob(s, a) - old_policy.log_prob(s, a) };
            dense[t] - beta * kl
        })
        .collect();
    traj.trace = Some(trace);
}

/// Generalized advantage estimation in one backward pass, with
/// `V(s_{T+1}) = 0`. Returns (advantages, value targets `A_t + V(s_t)`).
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

pub fn compute_advantages(traj: &mut Trajectory, value: &ValueModel, gamma: f64, lambda: f64) {
    traj.values = traj.features.iter().map(|f| value.predict(f)).collect();
    let (adv, targets) = gae(&traj.rewards, &traj.values, gamma, lambda);
    traj.advantages = adv;
    traj.value_targets = targets;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub epsilon: f64,
    pub mu: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    /// Weight of the value loss in the reported total loss.
    pub vf_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, mu: 4, policy_lr: 0.5, value_lr: 0.05, vf_coef: 0.5, normalize_advantages: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Surrogate objective at the start of each inner iteration.
    pub surrogate: Vec<f64>,
    pub final_surrogate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub total_loss: f64,
    pub clip_fraction: f64,
    /// Mean `log π_old − log π_new` over sampled tokens after the update.
    pub approx_kl: f64,
}

fn clipped_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// `1/|D| Σ_n 1/|w^n| Σ_t min(v_t A_t, clip(v_t, 1−ε, 1+ε) A_t)`.
pub fn surrogate_objective(policy: &Policy, trajs: &[Trajectory], eps: f64) -> f64 {
    let d = trajs.len().max(1) as f64;
    trajs
        .iter()
        .filter(|tr| !tr.is_empty())
        .map(|tr| {
            let s: f64 = (0..tr.len())
                .map(|t| {
                    let ratio = (policy.log_prob(tr.states[t], tr.tokens[t]) - tr.log_probs[t]).exp();
                    clipped_term(ratio, tr.advantages[t], eps)
                })
                .sum();
            s / tr.len() as f64
        })
        .sum::<f64>()
        / d
}

/// Gradient of [`surrogate_objective`] with respect to the logit table.
pub fn surrogate_grad(policy: &Policy, trajs: &[Trajectory], eps: f64) -> BTreeMap<u64, Vec<f64>> {
    let d = trajs.len().max(1) as f64;
    let inv_t = 1.0 / policy.effective_temperature();
    let mut grad: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for tr in trajs.iter().filter(|tr| !tr.is_empty()) {
        let w = 1.0 / (d * tr.len() as f64);
        for t in 0..tr.len() {
            let (s, a, adv) = (tr.states[t], tr.tokens[t], tr.advantages[t]);
            if adv == 0.0 {
                continue;
            }
            let ratio = (policy.log_prob(s, a) - tr.log_probs[t]).exp();
            let clipped = (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
            if clipped {
                continue;
            }
            let p = policy.probs(s);
            let g = grad.entry(s).or_insert_with(|| vec![0.0; policy.vocab_size]);
            let scale = w * adv * ratio * inv_t;
            for (j, pj) in p.iter().enumerate() {
                g[j] -= scale * pj;
            }
            g[a] += scale;
        }
    }
    grad
}

/// Mean squared error to the value targets over all tokens.
pub fn value_loss(value: &ValueModel, trajs: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for tr in trajs {
        for (f, tar) in tr.features.iter().zip(&tr.value_targets) {
            total += (value.predict(f) - tar).powi(2);
            n += 1;
        }
    }
    total / n.max(1) as f64
}

pub fn value_grad(value: &ValueModel, trajs: &[Trajectory]) -> Vec<f64> {
    let n: usize = trajs.iter().map(|t| t.features.len()).sum();
    let mut g = vec![0.0; value.dim];
    for tr in trajs {
        for (f, tar) in tr.features.iter().zip(&tr.value_targets) {
            let r = 2.0 * (value.predict(f) - tar) / n.max(1) as f64;
            for i in f {
                g[*i as usize] += r;
            }
        }
    }
    g
}

fn clip_fraction(policy: &Policy, trajs: &[Trajectory], eps: f64) -> f64 {
    let mut clipped = 0usize;
    let mut n = 0usize;
    for tr in trajs {
        for t in 0..tr.len() {
            let ratio = (policy.log_prob(tr.states[t], tr.tokens[t]) - tr.log_probs[t]).exp();
            clipped += usize::from((ratio - 1.0).abs() > eps);
            n += 1;
        }
    }
    clipped as f64 / n.max(1) as f64
}

/// Diagonal step scales: the surrogate weight each state carries in the
/// batch, and the fraction of tokens on which each value feature is active.
fn preconditioners(batch: &[Trajectory], dim: usize) -> (HashMap<u64, f64>, Vec<f64>) {
    let d = batch.len().max(1) as f64;
    let tokens: usize = batch.iter().map(Trajectory::len).sum();
    let mut states: HashMap<u64, f64> = HashMap::new();
    let mut features = vec![0.0; dim];
    for tr in batch.iter().filter(|t| !t.is_empty()) {
        let w = 1.0 / (d * tr.len() as f64);
        for (s, f) in tr.states.iter().zip(&tr.features) {
            *states.entry(*s).or_insert(0.0) += w;
            for i in f {
                features[*i as usize] += 1.0 / tokens as f64;
            }
        }
    }
    (states, features)
}

/// `μ` iterations of preconditioned gradient ascent on the clipped surrogate and descent
/// on the value MSE over one batch.
pub fn ppo_update(
    trajs: &[Trajectory],
    policy: &mut Policy,
    value: &mut ValueModel,
    cfg: &PpoConfig,
    step: usize,
) -> Result<UpdateStats, RlError> {
    let mut batch: Vec<Trajectory> = trajs.to_vec();
    if cfg.normalize_advantages {
        let all: Vec<f64> = batch.iter().flat_map(|t| t.advantages.iter().copied()).collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
        for t in &mut batch {
            t.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
        }
    }
    let (state_mass, feature_mass) = preconditioners(&batch, value.dim);
    let mut stats = UpdateStats::default();
    let mut policy_losses = Vec::with_capacity(cfg.mu);
    let mut value_losses = Vec::with_capacity(cfg.mu);
    for _ in 0..cfg.mu {
        let surrogate = surrogate_objective(policy, &batch, cfg.epsilon);
        let vloss = value_loss(value, &batch);
        if !surrogate.is_finite() || !vloss.is_finite() {
            return Err(RlError::NonFiniteLoss { step, policy_loss: -surrogate, value_loss: vloss });
        }
        stats.surrogate.push(surrogate);
        policy_losses.push(-surrogate);
        value_losses.push(vloss);
        let g = surrogate_grad(policy, &batch, cfg.epsilon);
        for (key, gk) in g {
            let scale = cfg.policy_lr / state_mass[&key];
            let row = policy.entry(key);
            for (z, d) in row.iter_mut().zip(gk) {
                *z += scale * d;
            }
        }
        let gv = value_grad(value, &batch);
        for ((w, d), m) in value.weights.iter_mut().zip(gv).zip(&feature_mass) {
            if *m > 0.0 {
                *w -= cfg.value_lr * d / m;
            }
        }
    }
    stats.final_surrogate = surrogate_objective(policy, &batch, cfg.epsilon);
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    stats.policy_loss = mean(&policy_losses);
    stats.value_loss = mean(&value_losses);
    stats.total_loss = stats.policy_loss + cfg.vf_coef * stats.value_loss;
    stats.clip_fraction = clip_fraction(policy, &batch, cfg.epsilon);
    let mut kl = 0.0;
    let mut n = 0usize;
    for tr in &batch {
        for t in 0..tr.len() {
            kl += tr.log_probs[t] - policy.log_prob(tr.states[t], tr.tokens[t]);
            n += 1;
        }
    }
    stats.approx_kl = kl / n.max(1) as f64;
    if !stats.total_loss.is_finite() {
        return Err(RlError::NonFiniteLoss { step, policy_loss: stats.policy_loss, value_loss: stats.value_loss });
    }
    Ok(stats)
}

/// Policy used as the anchor of the per-token divergence penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlAnchor {
    /// The rollout-time snapshot refreshed every outer step.
    #[default]
    Rollout,
    /// The initial policy, fixed for the whole run.
    Initial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub steps: usize,
    pub samples_per_task: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub kl_anchor: KlAnchor,
    pub top_p: f64,
    pub seed: u64,
    pub ppo: PpoConfig,
    /// Wall-clock limit per verification, in milliseconds.
    pub verify_ms: u64,
    pub checkpoint_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            samples_per_task: 4,
            gamma: 0.99,
            lambda: 0.95,
            beta: 0.05,
            kl_anchor: KlAnchor::Rollout,
            top_p: 0.95,
            seed: 0,
            ppo: PpoConfig::default(),
            verify_ms: 2000,
            checkpoint_every: 0,
        }
    }
}

impl RlConfig {
    pub fn limits(&self) -> ResourceLimits {
        ResourceLimits::default().with_wall_time(Duration::from_millis(self.verify_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean per-trajectory sum of the reward-model trace.
    pub mean_rm_reward: f64,
    pub mean_shaped_reward: f64,
    /// Mean compiler-feedback reward, comparable across arms.
    pub mean_compiler_reward: f64,
    pub pass_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub total_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub arm: String,
    pub seed: u64,
    pub initial_greedy_pass: f64,
    pub final_greedy_pass: f64,
    pub steps: Vec<StepMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub value: ValueModel,
    pub report: TrainReport,
}

/// Verdicts for every trajectory program, verified on the sandbox pool.
pub fn verify_trajectories(
    sandbox: &Sandbox,
    env: &ToyEnvironment,
    trajs: &[Trajectory],
    limits: &ResourceLimits,
) -> Result<Vec<ExecutionVerdict>, RlError> {
    let results = sandbox.par_map(trajs, |tr| {
        sandbox.verify(&env.detokenize(&tr.tokens), &env.tasks[tr.task].problem.tests, limits)
    });
    Ok(results.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// Fraction of tasks whose greedy decode passes all tests.
pub fn greedy_pass_rate(
    policy: &Policy,
    env: &ToyEnvironment,
    sandbox: &Sandbox,
    limits: &ResourceLimits,
) -> Result<f64, RlError> {
    let value = ValueModel::new(1);
    let decode = Decode { greedy: true, ..Decode::default() };
    let trajs = rollout(policy, &value, env, 1, 0, &decode);
    let verdicts = verify_trajectories(sandbox, env, &trajs, limits)?;
    Ok(verdicts.iter().filter(|v| v.passed()).count() as f64 / verdicts.len().max(1) as f64)
}

/// Sampled programs for one task.
pub fn sample_programs(policy: &Policy, env: &ToyEnvironment, task: usize, n: usize, seed: u64, top_p: f64) -> Vec<String> {
    let value = ValueModel::new(1);
    let mut rng = seeded_rng(seed, 0x7361_6d70 ^ task as u64);
    let decode = Decode { top_p, greedy: false };
    (0..n).map(|_| env.detokenize(&sample_trajectory(policy, &value, env, task, &decode, &mut rng).tokens)).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Rollout, reward shaping, advantage estimation and PPO update for
/// `cfg.steps` outer steps. When `out` is given, per-step metrics go to
/// `metrics.jsonl` and policy checkpoints next to it.
pub fn train_loop(
    env: &ToyEnvironment,
    policy: Policy,
    value: ValueModel,
    source: RewardSource<'_>,
    sandbox: &Sandbox,
    cfg: &RlConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome, RlError> {
    if cfg.samples_per_task == 0 {
        return Err(RlError::InvalidArgs("samples_per_task must be at least 1".into()));
    }
    let limits = cfg.limits();
    let mut policy = policy;
    let mut value = value;
    let initial = policy.clone();
    let mut report = TrainReport { arm: source.name().to_string(), seed: cfg.seed, ..Default::default() };
    report.initial_greedy_pass = greedy_pass_rate(&policy, env, sandbox, &limits)?;
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let decode = Decode { top_p: cfg.top_p, greedy: false };
    for step in 0..cfg.steps {
        let snapshot = policy.clone();
        let anchor = match cfg.kl_anchor {
            KlAnchor::Rollout => &snapshot,
            KlAnchor::Initial => &initial,
        };
        let seed = mix64(cfg.seed ^ mix64(step as u64 + 1));
        let mut trajs = rollout(&snapshot, &value, env, cfg.samples_per_task, seed, &decode);
        let verdicts = verify_trajectories(sandbox, env, &trajs, &limits)?;
        let compiler = CompilerRewardMap::default();
        let mut rm_total = 0.0;
        for (tr, v) in trajs.iter_mut().zip(&verdicts) {
            let trace = reward_trace(source, env, tr, v);
            rm_total += trace.total();
            shape_rewards(tr, trace, &snapshot, anchor, cfg.beta);
            compute_advantages(tr, &value, cfg.gamma, cfg.lambda);
        }
        let stats = ppo_update(&trajs, &mut policy, &mut value, &cfg.ppo, step)?;
        let m = StepMetrics {
            step,
            mean_rm_reward: rm_total / trajs.len() as f64,
            mean_shaped_reward: mean(trajs.iter().map(|t| t.rewards.iter().sum::<f64>())),
            mean_compiler_reward: mean(verdicts.iter().map(|v| reward_orm_compiler(v, &compiler))),
            pass_rate: mean(verdicts.iter().map(|v| f64::from(u8::from(v.passed())))),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            total_loss: stats.total_loss,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
        };
        log::debug!(
            "{} step {step}: pass {:.3} reward {:.3} loss {:.5}",
            report.arm,
            m.pass_rate,
            m.mean_rm_reward,
            m.total_loss
        );
        if let Some(w) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
        }
        report.steps.push(m);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                policy.save(&dir.join(format!("policy_step{}.json", step + 1)))?;
            }
        }
    }
    report.final_greedy_pass = greedy_pass_rate(&policy, env, sandbox, &limits)?;
    if let Some(mut w) = metrics_file {
        w.flush()?;
    }
    if let Some(dir) = out {
        policy.save(&dir.join("policy.json"))?;
        fs::write(dir.join("value.json"), serde_json::to_vec(&value)?)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(TrainOutcome { policy, value, report })
}

/// Reward models for the toy suite: a PRM on step samples of the task
/// references, an outcome classifier on the reconstructed programs, and a
/// preference model on ranked samples of `policy`.
#[derive(Debug, Clone)]
pub struct ToyRewardModels {
    pub prm: RewardModel,
    pub orm_original: RewardModel,
    pub orm_preference: RewardModel,
    pub samples: Vec<StepSample>,
}

pub fn toy_training_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 800, learning_rate: 5.0, weight_decay: 0.0, batch_size: 16, seed, dim: 1 << 16 }
}

pub fn toy_reward_models(
    env: &ToyEnvironment,
    sandbox: &Sandbox,
    policy: &Policy,
    cfg: &TrainConfig,
    limits: &ResourceLimits,
) -> Result<ToyRewardModels, RlError> {
    let problems = env.problems();
    let refs: Vec<&Problem> = problems.iter().collect();
    let opts = BuildOptions {
        rules: MutationRuleSet::all(cfg.seed).uncapped(),
        limits: *limits,
        ..BuildOptions::default()
    };
    let samples = build_samples(sandbox, &refs, &opts, None)?;
    let examples: Vec<_> = samples.iter().map(|s| example_from_sample(s, cfg.dim)).collect();
    let prm = train_logistic(RewardKind::Prm, &examples, &examples, cfg)?;

    let mut programs: Vec<LabeledProgram> = problems
        .iter()
        .map(|p| LabeledProgram { prompt: p.prompt.clone(), code: p.reference_code.clone(), passed: true })
        .collect();
    for s in samples.iter().filter(|s| s.source != SampleSource::Reference) {
        let p = &problems[(s.problem_id - 1) as usize];
        programs.push(LabeledProgram {
            prompt: p.prompt.clone(),
            code: reconstruct_program(p, s),
            passed: s.label.is_positive(),
        });
    }
    let orm_original = train_orm_original(&programs, &programs, cfg)?;

    let mut groups = Vec::new();
    for round in 0..4u64 {
        for (i, p) in problems.iter().enumerate() {
            let snippets = sample_programs(policy, env, i, 4, mix64(cfg.seed ^ round), 0.95);
            let mut group = PreferenceGroup { prompt: p.prompt.clone(), snippets: Vec::new() };
            for code in snippets {
                let v = sandbox.verify(&code, &p.tests, limits)?;
                group.snippets.push((code, v));
            }
            groups.push(group);
        }
    }
    let orm_preference = train_orm_preference(&groups, rank_by_verdict, cfg)?;
    Ok(ToyRewardModels { prm, orm_original, orm_preference, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn references_round_trip_and_stay_unambiguous() {
        let env = ToyEnvironment::standard();
        assert!(env.tasks.len() >= 10);
        assert!(env.vocabulary.len() >= 50);
        for t in &env.tasks {
            assert_eq!(env.tokenize(&t.problem.reference_code).unwrap(), t.reference);
            assert!(t.reference.len() <= env.max_length);
        }
        assert!(reference_unambiguous(&env, 3));
    }

    #[test]
    fn detokenize_layout() {
        let env = ToyEnvironment::standard();
        let toks = env.tokenize("def f ( x ) :\n    return x").unwrap();
        assert_eq!(env.detokenize(&toks), "def f ( x ) :\n    return x\n");
        assert_eq!(*toks.last().unwrap(), env.eos());
    }

    #[test]
    fn probabilities_normalized_and_positive() {
        let mut p = Policy::new(10, 3, 1.2);
        p.imprint(0, &[1, 2, 3], 10.0);
        for key in [p.state_key(0, &[]), p.state_key(0, &[1]), p.state_key(5, &[9, 9])] {
            let probs = p.probs(key);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn greedy_rollout_is_deterministic() {
        let env = ToyEnvironment::standard();
        let mut p = Policy::new(env.vocabulary.len(), 3, 1.2);
        for (i, t) in env.tasks.iter().enumerate() {
            p.imprint(i, &t.reference, 10.0);
        }
        let v = ValueModel::new(64);
        let greedy = Decode { greedy: true, ..Decode::default() };
        let a = rollout(&p, &v, &env, 2, 1, &greedy);
        let b = rollout(&p, &v, &env, 2, 9, &greedy);
        assert_eq!(a, b);
        for tr in &a {
            assert_eq!(tr.tokens, env.tasks[tr.task].reference);
        }
        let s1 = rollout(&p, &v, &env, 4, 3, &Decode::default());
        let s2 = rollout(&p, &v, &env, 4, 3, &Decode::default());
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 4 * env.tasks.len());
    }

    #[test]
    fn segments_follow_newlines_and_terminal() {
        let env = ToyEnvironment::standard();
        let toks = env.tasks[2].reference.clone();
        let segs = token_segments(&env, &toks);
        let nl = env.newline();
        let mut expect: Vec<usize> = toks.iter().enumerate().filter(|(_, t)| **t == nl).map(|(i, _)| i).collect();
        expect.push(toks.len() - 1);
        assert_eq!(segs.iter().map(|s| s.0).collect::<Vec<_>>(), expect);
        assert_eq!(segs[1].1, "    if a > b : return a");
    }

    #[test]
    fn shaping_with_identical_policies_is_raw_trace() {
        let env = ToyEnvironment::standard();
        let mut p = Policy::new(env.vocabulary.len(), 3, 1.2);
        p.imprint(0, &env.tasks[0].reference, 5.0);
        let v = ValueModel::new(64);
        let mut tr = rollout(&p, &v, &env, 1, 0, &Decode::default()).remove(0);
        let trace = RewardTrace { positions: vec![tr.len() - 1], rewards: vec![0.7], length: tr.len() };
        shape_rewards(&mut tr, trace.clone(), &p, &p, 0.05);
        assert_eq!(tr.rewards, trace.dense());
    }

    #[test]
    fn shaping_penalty_matches_log_ratio() {
        // Two logits: at T = 1, [ln 1, ln 1] gives 0.5, [ln 1, ln 3] gives 0.25.
        let mut new = Policy::new(2, 1, 1.0);
        let mut old = Policy::new(2, 1, 1.0);
        let key = new.state_key(0, &[]);
        new.table.insert(key, vec![0.0, 0.0]);
        old.table.insert(key, vec![0.0, 3f64.ln()]);
        let mut tr = Trajectory {
            task: 0,
            tokens: vec![0],
            states: vec![key],
            features: vec![vec![]],
            log_probs: vec![0.5f64.ln()],
            trace: None,
            rewards: vec![],
            values: vec![],
            advantages: vec![],
            value_targets: vec![],
        };
        shape_rewards(&mut tr, RewardTrace { positions: vec![], rewards: vec![], length: 1 }, &new, &old, 0.1);
        assert!((tr.rewards[0] + 0.1 * 2f64.ln()).abs() < 1e-12);
    }

    fn brute_force(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta = |t: usize| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t];
        (0..n).map(|t| (t..n).map(|j| (gamma * lambda).powi((j - t) as i32) * delta(j)).sum()).collect()
    }

    #[test]
    fn gae_small_cases() {
        let (a, tar) = gae(&[1.0], &[0.0], 0.9, 0.5);
        assert_eq!((a[0], tar[0]), (1.0, 1.0));
        let (a, _) = gae(&[0.0; 4], &[0.0; 4], 0.99, 0.95);
        assert!(a.iter().all(|x| *x == 0.0));
        let (r, v) = ([0.0, 0.0, 1.0], [0.1, 0.2, 0.3]);
        let (a, tar) = gae(&r, &v, 0.9, 0.95);
        for (x, y) in a.iter().zip(brute_force(&r, &v, 0.9, 0.95)) {
            assert!((x - y).abs() < 1e-12);
        }
        for t in 0..3 {
            assert!((tar[t] - a[t] - v[t]).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn gae_matches_double_sum(
            rv in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..10),
            gamma in 0.5f64..1.0,
            lambda in 0.0f64..1.0,
        ) {
            let r: Vec<f64> = rv.iter().map(|x| x.0).collect();
            let v: Vec<f64> = rv.iter().map(|x| x.1).collect();
            let (a, _) = gae(&r, &v, gamma, lambda);
            for (x, y) in a.iter().zip(brute_force(&r, &v, gamma, lambda)) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn clip_inactive_inside_band(ratio in 0.8f64..1.2, adv in -3.0f64..3.0) {
            prop_assert!((clipped_term(ratio, adv, 0.2) - ratio * adv).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_example() {
        assert!((clipped_term(2.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
    }

    fn tiny_batch(seed: u64) -> (Policy, ValueModel, Vec<Trajectory>) {
        let env = ToyEnvironment::standard();
        let mut p = Policy::new(env.vocabulary.len(), 3, 1.2);
        for (i, t) in env.tasks.iter().enumerate().take(3) {
            p.imprint(i, &t.reference, 2.0);
        }
        let mut v = ValueModel::new(256);
        let mut rng = seeded_rng(seed, 1);
        v.weights.iter_mut().for_each(|w| *w = rng.gen_range(-0.1..0.1));
        let mut trajs: Vec<Trajectory> =
            rollout(&p, &v, &env, 2, seed, &Decode::default()).into_iter().filter(|t| t.task < 3).collect();
        for tr in &mut trajs {
            tr.trace = None;
            tr.rewards = (0..tr.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            compute_advantages(tr, &v, 0.99, 0.95);
        }
        (p, v, trajs)
    }

    #[test]
    fn zero_advantage_leaves_policy_unchanged() {
        let (mut p, mut v, mut trajs) = tiny_batch(3);
        for tr in &mut trajs {
            tr.advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        let before = p.clone();
        ppo_update(&trajs, &mut p, &mut v, &PpoConfig::default(), 0).unwrap();
        for (k, row) in &p.table {
            assert_eq!(row, &before.logits(*k));
        }
    }

    #[test]
    fn surrogate_non_decreasing_over_inner_iterations() {
        let (mut p, mut v, trajs) = tiny_batch(5);
        let cfg = PpoConfig { policy_lr: 0.1, ..PpoConfig::default() };
        let stats = ppo_update(&trajs, &mut p, &mut v, &cfg, 0).unwrap();
        let mut seq = stats.surrogate.clone();
        seq.push(stats.final_surrogate);
        for w in seq.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{seq:?}");
        }
        for row in p.table.values() {
            let probs = softmax(row, p.temperature);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (mut p, v, trajs) = tiny_batch(7);
        let g = surrogate_grad(&p, &trajs, 0.2);
        let h = 1e-6;
        let (&key, row) = g.iter().next().unwrap();
        for j in 0..row.len() {
            let base = p.logits(key);
            let mut up = base.clone();
            up[j] += h;
            p.table.insert(key, up);
            let fp = surrogate_objective(&p, &trajs, 0.2);
            let mut dn = base.clone();
            dn[j] -= h;
            p.table.insert(key, dn);
            let fm = surrogate_objective(&p, &trajs, 0.2);
            p.table.insert(key, base);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - row[j]).abs() <= 1e-4 * fd.abs().max(row[j].abs()).max(1e-6), "{fd} vs {}", row[j]);
        }
        let gv = value_grad(&v, &trajs);
        let i = trajs[0].features[0][0] as usize;
        let mut vp = v.clone();
        vp.weights[i] += h;
        let mut vm = v.clone();
        vm.weights[i] -= h;
        let fd = (value_loss(&vp, &trajs) - value_loss(&vm, &trajs)) / (2.0 * h);
        assert!((fd - gv[i]).abs() <= 1e-4 * fd.abs().max(1e-6));
    }
}

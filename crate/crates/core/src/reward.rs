//! Hashed character n-gram features and four reward models: a process
//! reward model over code prefixes, an outcome model over full programs, a
//! preference-trained outcome model, and a fixed map from compiler verdicts.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, StepSample};
use crate::sandbox::{ExecutionVerdict, VerdictStatus};
use crate::util::{fnv1a_extend, seeded_rng, sha256_hex};

pub const DEFAULT_DIM: usize = 1 << 16;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model kind {found:?} cannot be used as {expected:?}")]
    WrongKind { expected: RewardKind, found: RewardKind },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature blocks; each owns a disjoint slice of the hash space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Prompt,
    Prefix,
    LastLine,
    Scalar,
}

const SCALAR_SLOTS: usize = 8;
const NGRAMS: [usize; 3] = [2, 3, 4];
const BLOCK_WEIGHTS: [(Block, f64); 3] = [(Block::Prompt, 0.5), (Block::Prefix, 1.0), (Block::LastLine, 1.0)];

/// Block boundaries for dimension `dim`: prompt, prefix, last line, scalars.
pub fn block_range(dim: usize, block: Block) -> std::ops::Range<usize> {
    let hashed = dim - SCALAR_SLOTS;
    let third = hashed / 3;
    match block {
        Block::Prompt => 0..third,
        Block::Prefix => third..2 * third,
        Block::LastLine => 2 * third..hashed,
        Block::Scalar => hashed..dim,
    }
}

/// A sparse feature vector of fixed dimension. Indices are sorted and
/// unique; absent indices are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dim: usize,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self { dim: dense.len(), indices, values }
    }

    fn from_counts(dim: usize, mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_unstable_by_key(|e| e.0);
        let mut indices: Vec<u32> = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            if indices.last() == Some(&i) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(i);
                values.push(v);
            }
        }
        Self { dim, indices, values }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().zip(&self.values).map(|(i, v)| (*i as usize, *v))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.iter().map(|(i, v)| w[i] * v).sum()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().map(|i| *i as usize)
    }

    fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }
}

fn ngram_entries(text: &str, tag: u8, range: &std::ops::Range<usize>, out: &mut Vec<(u32, f64)>) -> usize {
    if text.is_empty() {
        return 0;
    }
    let mut chars: Vec<char> = Vec::with_capacity(text.len() + 2);
    chars.push('\u{2}');
    chars.extend(text.chars());
    chars.push('\u{3}');
    let width = (range.end - range.start) as u64;
    let start = out.len();
    let mut buf = [0u8; 4];
    for n in NGRAMS {
        for win in chars.windows(n) {
            let mut h = fnv1a_extend(0xcbf2_9ce4_8422_2325, &[tag, n as u8]);
            for c in win {
                h = fnv1a_extend(h, c.encode_utf8(&mut buf).as_bytes());
            }
            let idx = range.start + (crate::util::mix64(h) % width) as usize;
            out.push((idx as u32, 1.0));
        }
    }
    out.len() - start
}

/// Hashed character 2/3/4-gram counts of the prompt, the whole prefix and
/// the prefix's last line in disjoint ranges, plus last-line length and
/// indent depth. Each block is normalized and weighted, then the whole
/// vector is L2-normalized.
pub fn featurize(prompt: &str, prefix: &str) -> FeatureVector {
    featurize_dim(prompt, prefix, DEFAULT_DIM)
}

pub fn featurize_dim(prompt: &str, prefix: &str, dim: usize) -> FeatureVector {
    assert!(dim >= 64, "feature dimension too small");
    let prefix = prefix.strip_suffix('\n').unwrap_or(prefix);
    let last = prefix.rsplit('\n').next().unwrap_or("");
    let mut blocks = Vec::new();
    for (block, weight) in BLOCK_WEIGHTS {
        let text = match block {
            Block::Prompt => prompt,
            Block::Prefix => prefix,
            _ => last,
        };
        let mut entries = Vec::new();
        ngram_entries(text, block as u8, &block_range(dim, block), &mut entries);
        let mut fv = FeatureVector::from_counts(dim, entries);
        let n = fv.norm();
        if n > 0.0 {
            fv.scale(weight / n);
        }
        blocks.push(fv);
    }
    let scalars = block_range(dim, Block::Scalar);
    let mut entries: Vec<(u32, f64)> = blocks
        .into_iter()
        .flat_map(|b| b.indices.into_iter().zip(b.values))
        .collect();
    if !last.trim().is_empty() {
        let indent = last.len() - last.trim_start().len();
        entries.push((scalars.start as u32, (last.trim().len() as f64 / 80.0).min(2.0)));
        entries.push((scalars.start as u32 + 1, indent as f64 / 16.0));
    }
    let mut fv = FeatureVector::from_counts(dim, entries);
    let n = fv.norm();
    if n > 0.0 {
        fv.scale(1.0 / n);
    }
    fv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Prm,
    OrmOriginal,
    OrmPreference,
    OrmCompiler,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Prm => "prm",
            RewardKind::OrmOriginal => "orm_original",
            RewardKind::OrmPreference => "orm_preference",
            RewardKind::OrmCompiler => "orm_compiler",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Prm, Self::OrmOriginal, Self::OrmPreference, Self::OrmCompiler]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Rewards at segment ends; every other position carries zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    /// Strictly increasing positions, each a newline or the terminal.
    pub positions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Number of positions in the scored sequence.
    pub length: usize,
}

impl RewardTrace {
    pub fn terminal(length: usize, reward: f64) -> Self {
        Self { positions: vec![length - 1], rewards: vec![reward], length }
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.length];
        for (p, r) in self.positions.iter().zip(&self.rewards) {
            out[*p] = *r;
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn min(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Character positions that end each line: every `\n`, plus the last
/// character when the text does not end with a newline.
pub fn segment_ends(code: &str) -> Vec<usize> {
    let chars: Vec<char> = code.chars().collect();
    let mut ends: Vec<usize> = chars.iter().enumerate().filter(|(_, c)| **c == '\n').map(|(i, _)| i).collect();
    if chars.last().is_some_and(|c| *c != '\n') {
        ends.push(chars.len() - 1);
    }
    ends
}

/// Verdict to terminal reward for the compiler-feedback outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompilerRewardMap {
    pub all_passed: f64,
    pub test_failed: f64,
    pub runtime_error: f64,
    pub compile_error: f64,
    pub timeout: f64,
}

impl Default for CompilerRewardMap {
    fn default() -> Self {
        Self { all_passed: 1.0, test_failed: -0.3, runtime_error: -0.6, compile_error: -1.0, timeout: -1.0 }
    }
}

impl CompilerRewardMap {
    pub fn reward(&self, status: VerdictStatus) -> f64 {
        match status {
            VerdictStatus::AllPassed => self.all_passed,
            VerdictStatus::TestFailed => self.test_failed,
            VerdictStatus::RuntimeError => self.runtime_error,
            VerdictStatus::CompileError => self.compile_error,
            VerdictStatus::Timeout => self.timeout,
        }
    }
}

pub fn reward_orm_compiler(verdict: &ExecutionVerdict, map: &CompilerRewardMap) -> f64 {
    map.reward(verdict.status)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, learning_rate: 0.5, weight_decay: 0.0, batch_size: 32, seed: 0, dim: DEFAULT_DIM }
    }
}

impl TrainConfig {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Binary classification metrics; class accuracy is `[negative, positive]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub class_accuracy: [f64; 2],
}

impl Metrics {
    pub fn compute(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = [[0usize; 2]; 2];
        for (p, a) in predicted.iter().zip(actual) {
            c[*a as usize][*p as usize] += 1;
        }
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let (tn, fp, fn_, tp) = (c[0][0], c[0][1], c[1][0], c[1][1]);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self {
            count: predicted.len(),
            accuracy: ratio(tp + tn, predicted.len()),
            precision,
            recall,
            f1,
            class_accuracy: [ratio(tn, tn + fp), recall],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub per_epoch: Vec<EpochMetrics>,
    pub test: Option<Metrics>,
    pub config_hash: String,
}

/// A linear scorer `s(x) = w·x + b`; classifiers read `σ(s)` as the
/// probability of a positive label. The compiler kind has no weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub compiler_map: CompilerRewardMap,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: RewardKind,
    dim: usize,
    bias: f64,
    weights: Vec<(u32, f64)>,
    compiler_map: CompilerRewardMap,
    meta: TrainingMeta,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(z)`, stable for large |z|.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl RewardModel {
    pub fn zeros(kind: RewardKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            weights: vec![0.0; dim],
            bias: 0.0,
            compiler_map: CompilerRewardMap::default(),
            meta: TrainingMeta::default(),
        }
    }

    pub fn compiler(map: CompilerRewardMap) -> Self {
        Self { compiler_map: map, ..Self::zeros(RewardKind::OrmCompiler, 0) }
    }

    pub fn logit(&self, x: &FeatureVector) -> f64 {
        x.dot(&self.weights) + self.bias
    }

    pub fn probability(&self, prompt: &str, text: &str) -> f64 {
        sigmoid(self.logit(&featurize_dim(prompt, text, self.dim)))
    }

    /// Reward in [-1, 1] for a prompt and a prefix or program.
    pub fn reward(&self, prompt: &str, text: &str) -> f64 {
        2.0 * self.probability(prompt, text) - 1.0
    }

    fn expect_kind(&self, ok: &[RewardKind], expected: RewardKind) -> Result<(), RewardError> {
        if ok.contains(&self.kind) {
            Ok(())
        } else {
            Err(RewardError::WrongKind { expected, found: self.kind })
        }
    }

    /// Rewards for cumulative line prefixes `lines[..1]`, `lines[..2]`, ...
    pub fn segment_rewards(&self, prompt: &str, lines: &[String]) -> Vec<f64> {
        let mut prefix = String::new();
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if i > 0 {
                    prefix.push('\n');
                }
                prefix.push_str(l);
                self.reward(prompt, &prefix)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: self.kind,
            dim: self.dim,
            bias: self.bias,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
            compiler_map: self.compiler_map,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| RewardError::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let text = fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| RewardError::Format(e.to_string()))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(RewardError::Format(format!("unsupported format version {}", file.format_version)));
        }
        let mut weights = vec![0.0; file.dim];
        for (i, w) in file.weights {
            let slot = weights
                .get_mut(i as usize)
                .ok_or_else(|| RewardError::Format(format!("weight index {i} out of range")))?;
            *slot = w;
        }
        Ok(Self {
            kind: file.kind,
            dim: file.dim,
            weights,
            bias: file.bias,
            compiler_map: file.compiler_map,
            meta: file.meta,
        })
    }
}

/// Per-segment rewards at newline/terminal character positions.
pub fn score_prm(model: &RewardModel, prompt: &str, code: &str) -> Result<RewardTrace, RewardError> {
    model.expect_kind(&[RewardKind::Prm], RewardKind::Prm)?;
    let positions = segment_ends(code);
    let body = code.strip_suffix('\n').unwrap_or(code);
    let lines: Vec<String> = if positions.is_empty() { Vec::new() } else { body.split('\n').map(str::to_owned).collect() };
    let rewards = model.segment_rewards(prompt, &lines);
    debug_assert_eq!(rewards.len(), positions.len());
    Ok(RewardTrace { positions, rewards, length: code.chars().count() })
}

/// A single terminal reward from a learned outcome model.
pub fn reward_orm_original(model: &RewardModel, prompt: &str, code: &str) -> Result<RewardTrace, RewardError> {
    model.expect_kind(&[RewardKind::OrmOriginal, RewardKind::OrmPreference], RewardKind::OrmOriginal)?;
    if code.is_empty() {
        return Err(RewardError::InvalidInput("empty code".into()));
    }
    Ok(RewardTrace::terminal(code.chars().count(), model.reward(prompt, code)))
}

/// Compiler-feedback terminal trace for a program of `length` positions.
pub fn compiler_trace(verdict: &ExecutionVerdict, map: &CompilerRewardMap, length: usize) -> Result<RewardTrace, RewardError> {
    if length == 0 {
        return Err(RewardError::InvalidInput("empty code".into()));
    }
    Ok(RewardTrace::terminal(length, reward_orm_compiler(verdict, map)))
}

/// Mean binary cross-entropy plus `(wd / 2)·‖w‖²`.
pub fn logistic_loss(w: &[f64], b: f64, xs: &[FeatureVector], ys: &[bool], wd: f64) -> f64 {
    let n = xs.len().max(1) as f64;
    let data: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let z = x.dot(w) + b;
            if *y {
                neg_log_sigmoid(z)
            } else {
                neg_log_sigmoid(-z)
            }
        })
        .sum();
    data / n + 0.5 * wd * w.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`logistic_loss`] with respect to `(w, b)`.
pub fn logistic_grad(w: &[f64], b: f64, xs: &[FeatureVector], ys: &[bool], wd: f64) -> (Vec<f64>, f64) {
    let n = xs.len().max(1) as f64;
    let mut gw: Vec<f64> = w.iter().map(|v| wd * v).collect();
    let mut gb = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = (sigmoid(x.dot(w) + b) - f64::from(u8::from(*y))) / n;
        for (i, v) in x.iter() {
            gw[i] += r * v;
        }
        gb += r;
    }
    (gw, gb)
}

/// Mean Bradley–Terry loss `-log σ(s(better) - s(worse))` plus
/// `(wd / 2)·‖w‖²`. The bias cancels.
pub fn pairwise_loss(w: &[f64], pairs: &[(FeatureVector, FeatureVector)], wd: f64) -> f64 {
    let n = pairs.len().max(1) as f64;
    let data: f64 = pairs.iter().map(|(a, b)| neg_log_sigmoid(a.dot(w) - b.dot(w))).sum();
    data / n + 0.5 * wd * w.iter().map(|v| v * v).sum::<f64>()
}

pub fn pairwise_grad(w: &[f64], pairs: &[(FeatureVector, FeatureVector)], wd: f64) -> Vec<f64> {
    let n = pairs.len().max(1) as f64;
    let mut g: Vec<f64> = w.iter().map(|v| wd * v).collect();
    for (a, b) in pairs {
        let r = -(1.0 - sigmoid(a.dot(w) - b.dot(w))) / n;
        for (i, v) in a.iter() {
            g[i] += r * v;
        }
        for (i, v) in b.iter() {
            g[i] -= r * v;
        }
    }
    g
}

/// A featurized, labeled example.
#[derive(Debug, Clone)]
pub struct Example {
    pub x: FeatureVector,
    pub y: bool,
}

pub fn examples_from_split(split: &DatasetSplit, dim: usize) -> Vec<Example> {
    split.samples.iter().map(|s| example_from_sample(s, dim)).collect()
}

pub fn example_from_sample(s: &StepSample, dim: usize) -> Example {
    Example { x: featurize_dim(&s.prompt, &s.prefix(), dim), y: s.label.is_positive() }
}

pub fn evaluate(model: &RewardModel, data: &[Example]) -> Metrics {
    let pred: Vec<bool> = data.iter().map(|e| model.logit(&e.x) > 0.0).collect();
    let actual: Vec<bool> = data.iter().map(|e| e.y).collect();
    Metrics::compute(&pred, &actual)
}

fn sgd_step(w: &mut [f64], b: &mut f64, batch: &[&Example], lr: f64, wd: f64) -> f64 {
    let n = batch.len() as f64;
    let shrink = 1.0 - lr * wd;
    let mut grads: Vec<(f64, &FeatureVector)> = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let mut gb = 0.0;
    for e in batch {
        let z = e.x.dot(w) + *b;
        loss += if e.y { neg_log_sigmoid(z) } else { neg_log_sigmoid(-z) };
        let r = (sigmoid(z) - f64::from(u8::from(e.y))) / n;
        grads.push((r, &e.x));
        gb += r;
    }
    w.iter_mut().for_each(|v| *v *= shrink);
    for (r, x) in grads {
        for (i, v) in x.iter() {
            w[i] -= lr * r * v;
        }
    }
    *b -= lr * gb;
    loss / n
}

/// Minibatch SGD on [`logistic_loss`] with a seeded shuffle per epoch.
pub fn train_logistic(
    kind: RewardKind,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
) -> Result<RewardModel, RewardError> {
    let pos = train.iter().filter(|e| e.y).count();
    if train.is_empty() || pos == 0 || pos == train.len() {
        return Err(RewardError::DegenerateData(format!("{pos} positives among {} examples", train.len())));
    }
    let mut model = RewardModel::zeros(kind, cfg.dim);
    let mut rng = seeded_rng(cfg.seed, 0x7261_696e);
    let mut order: Vec<&Example> = train.iter().collect();
    let mut meta = TrainingMeta { epochs: cfg.epochs, seed: cfg.seed, config_hash: cfg.hash(), ..Default::default() };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            total += sgd_step(&mut model.weights, &mut model.bias, batch, cfg.learning_rate, cfg.weight_decay)
                * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let m = evaluate(&model, validation);
        log::debug!("{} epoch {epoch}: loss {train_loss:.4} val acc {:.3}", kind.as_str(), m.accuracy);
        meta.loss_curve.push(train_loss);
        meta.per_epoch.push(EpochMetrics { epoch, train_loss, validation: m });
    }
    model.meta = meta;
    Ok(model)
}

/// Trains the process reward model on featurized (prompt, prefix) samples.
/// Test-split metrics are recorded in the model's metadata.
pub fn train_prm(splits: &[DatasetSplit; 3], cfg: &TrainConfig) -> Result<RewardModel, RewardError> {
    let [train, validation, test] = splits;
    let train = examples_from_split(train, cfg.dim);
    let validation = examples_from_split(validation, cfg.dim);
    let mut model = train_logistic(RewardKind::Prm, &train, &validation, cfg)?;
    if !test.is_empty() {
        model.meta.test = Some(evaluate(&model, &examples_from_split(test, cfg.dim)));
    }
    Ok(model)
}

/// A full program with its verdict-derived label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledProgram {
    pub prompt: String,
    pub code: String,
    pub passed: bool,
}

fn program_examples(data: &[LabeledProgram], dim: usize) -> Vec<Example> {
    data.iter().map(|p| Example { x: featurize_dim(&p.prompt, &p.code, dim), y: p.passed }).collect()
}

/// Outcome model: a classifier over complete programs.
pub fn train_orm_original(
    train: &[LabeledProgram],
    validation: &[LabeledProgram],
    cfg: &TrainConfig,
) -> Result<RewardModel, RewardError> {
    train_logistic(RewardKind::OrmOriginal, &program_examples(train, cfg.dim), &program_examples(validation, cfg.dim), cfg)
}

/// Snippets sampled for one prompt with their verdicts.
#[derive(Debug, Clone)]
pub struct PreferenceGroup {
    pub prompt: String,
    pub snippets: Vec<(String, ExecutionVerdict)>,
}

/// Default ranker: more tests passed is better, then a less severe status.
/// Returns `Greater` when `a` is better.
pub fn rank_by_verdict(a: &ExecutionVerdict, b: &ExecutionVerdict) -> Ordering {
    a.passed_count
        .cmp(&b.passed_count)
        .then_with(|| b.status.severity().cmp(&a.status.severity()))
}

/// All strictly ordered (better, worse) pairs within each group.
pub fn preference_pairs(
    groups: &[PreferenceGroup],
    ranker: impl Fn(&ExecutionVerdict, &ExecutionVerdict) -> Ordering,
    dim: usize,
) -> Vec<(FeatureVector, FeatureVector)> {
    let mut pairs = Vec::new();
    for g in groups {
        let feats: Vec<FeatureVector> = g.snippets.iter().map(|(c, _)| featurize_dim(&g.prompt, c, dim)).collect();
        for i in 0..g.snippets.len() {
            for j in i + 1..g.snippets.len() {
                match ranker(&g.snippets[i].1, &g.snippets[j].1) {
                    Ordering::Greater => pairs.push((feats[i].clone(), feats[j].clone())),
                    Ordering::Less => pairs.push((feats[j].clone(), feats[i].clone())),
                    Ordering::Equal => {}
                }
            }
        }
    }
    pairs
}

/// Outcome model trained with a pairwise ranking loss over ranked snippets.
pub fn train_orm_preference(
    groups: &[PreferenceGroup],
    ranker: impl Fn(&ExecutionVerdict, &ExecutionVerdict) -> Ordering,
    cfg: &TrainConfig,
) -> Result<RewardModel, RewardError> {
    let pairs = preference_pairs(groups, ranker, cfg.dim);
    if pairs.is_empty() {
        return Err(RewardError::DegenerateData("no strictly ranked snippet pairs".into()));
    }
    let mut model = RewardModel::zeros(RewardKind::OrmPreference, cfg.dim);
    let mut rng = seeded_rng(cfg.seed, 0x7072_6566);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut meta = TrainingMeta { epochs: cfg.epochs, seed: cfg.seed, config_hash: cfg.hash(), ..Default::default() };
    let shrink = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let n = batch.len() as f64;
            let mut steps = Vec::with_capacity(batch.len());
            for &k in batch {
                let (a, b) = &pairs[k];
                let d = a.dot(&model.weights) - b.dot(&model.weights);
                total += neg_log_sigmoid(d);
                steps.push((k, (1.0 - sigmoid(d)) / n));
            }
            model.weights.iter_mut().for_each(|v| *v *= shrink);
            for (k, r) in steps {
                let (a, b) = &pairs[k];
                for (i, v) in a.iter() {
                    model.weights[i] += cfg.learning_rate * r * v;
                }
                for (i, v) in b.iter() {
                    model.weights[i] -= cfg.learning_rate * r * v;
                }
            }
        }
        let loss = total / pairs.len() as f64;
        meta.loss_curve.push(loss);
        meta.per_epoch.push(EpochMetrics { epoch, train_loss: loss, validation: Metrics::default() });
    }
    model.meta = meta;
    Ok(model)
}

/// Fraction of pairs where the first element scores strictly higher.
pub fn pair_accuracy(model: &RewardModel, pairs: &[(FeatureVector, FeatureVector)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let ok = pairs.iter().filter(|(a, b)| model.logit(a) > model.logit(b)).count();
    ok as f64 / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(status: VerdictStatus, passed: usize) -> ExecutionVerdict {
        ExecutionVerdict { status, passed_count: passed, total_count: 3, first_failure: None, wall_time_ms: 0 }
    }

    #[test]
    fn featurize_is_deterministic_and_normalized() {
        let a = featurize("write f", "def f(x):\n    return x");
        assert_eq!(a, featurize("write f", "def f(x):\n    return x"));
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim, DEFAULT_DIM);
    }

    #[test]
    fn empty_prefix_only_touches_prompt_block() {
        let fv = featurize("write a function", "");
        let r = block_range(DEFAULT_DIM, Block::Prompt);
        assert!(fv.support().count() > 0);
        assert!(fv.support().all(|i| r.contains(&i)));
    }

    #[test]
    fn last_line_change_shows_in_last_line_block() {
        let a = featurize("p", "def f(x):\n    return x + 1");
        let b = featurize("p", "def f(x):\n    return x - 1");
        let r = block_range(DEFAULT_DIM, Block::LastLine);
        let da = a.to_dense();
        let db = b.to_dense();
        assert!(r.clone().any(|i| da[i] != db[i]));
    }

    #[test]
    fn segment_ends_cover_newlines_and_terminal() {
        assert_eq!(segment_ends("a\nb\nc\n"), vec![1, 3, 5]);
        assert_eq!(segment_ends("a\nbc"), vec![1, 3]);
        assert!(segment_ends("").is_empty());
    }

    #[test]
    fn compiler_map_values() {
        let m = CompilerRewardMap::default();
        assert_eq!(reward_orm_compiler(&verdict(VerdictStatus::AllPassed, 3), &m), 1.0);
        assert_eq!(reward_orm_compiler(&verdict(VerdictStatus::CompileError, 0), &m), -1.0);
        assert_eq!(reward_orm_compiler(&verdict(VerdictStatus::TestFailed, 2), &m), -0.3);
    }

    #[test]
    fn ranker_prefers_passing() {
        let a = verdict(VerdictStatus::AllPassed, 3);
        let b = verdict(VerdictStatus::CompileError, 0);
        assert_eq!(rank_by_verdict(&a, &b), Ordering::Greater);
        let rt = verdict(VerdictStatus::RuntimeError, 1);
        let tf = verdict(VerdictStatus::TestFailed, 1);
        assert_eq!(rank_by_verdict(&tf, &rt), Ordering::Greater);
    }

    #[test]
    fn separable_set_is_learned() {
        let dim = 64;
        let mut train = Vec::new();
        for i in 0..200 {
            let y = i % 2 == 0;
            let mut v = vec![0.0; dim];
            v[if y { 3 } else { 5 }] = 1.0;
            v[10 + i % 7] = 0.3;
            train.push(Example { x: FeatureVector::from_dense(&v), y });
        }
        let cfg = TrainConfig { dim, epochs: 20, ..TrainConfig::default() };
        let m = train_logistic(RewardKind::Prm, &train, &train, &cfg).unwrap();
        assert!(evaluate(&m, &train).accuracy >= 0.99);
    }

    #[test]
    fn single_class_is_degenerate() {
        let train = vec![Example { x: FeatureVector::from_dense(&[1.0; 64]), y: true }];
        let cfg = TrainConfig { dim: 64, ..TrainConfig::default() };
        assert!(matches!(train_logistic(RewardKind::Prm, &train, &[], &cfg), Err(RewardError::DegenerateData(_))));
    }

    #[test]
    fn one_snippet_per_group_is_degenerate() {
        let groups = vec![PreferenceGroup { prompt: "p".into(), snippets: vec![("x".into(), verdict(VerdictStatus::AllPassed, 3))] }];
        let cfg = TrainConfig { dim: 64, ..TrainConfig::default() };
        assert!(matches!(train_orm_preference(&groups, rank_by_verdict, &cfg), Err(RewardError::DegenerateData(_))));
    }

    #[test]
    fn orm_trace_is_terminal_only() {
        let m = RewardModel::zeros(RewardKind::OrmOriginal, 128);
        let t = reward_orm_original(&m, "p", "a = 1\nb = 2\n").unwrap();
        assert_eq!(t.positions, vec![11]);
        assert!(matches!(reward_orm_original(&m, "p", ""), Err(RewardError::InvalidInput(_))));
    }

    #[test]
    fn prm_trace_has_one_reward_per_line() {
        let m = RewardModel::zeros(RewardKind::Prm, 128);
        let t = score_prm(&m, "p", "a = 1\nb = 2\nc = 3\n").unwrap();
        assert_eq!(t.positions, vec![5, 11, 17]);
        let t2 = score_prm(&m, "p", "a = 1\nb = 2\nc = 3\n# note\n").unwrap();
        assert_eq!(t2.positions.len(), 4);
        assert!(score_prm(&RewardModel::zeros(RewardKind::OrmOriginal, 128), "p", "a").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = RewardModel::zeros(RewardKind::Prm, 128);
        m.weights[3] = 0.25;
        m.bias = -0.5;
        m.meta.config_hash = "abc".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(RewardModel::load(&path).unwrap(), m);
    }

    #[test]
    fn metrics_by_hand() {
        let m = Metrics::compute(&[true, true, false, false], &[true, false, false, true]);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.class_accuracy, [0.5, 0.5]);
    }
}

//! Command-line entry point for the step-reward pipeline.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use stepreward::corpus::{self, assign_splits, CorpusRecord, Split, SplitRanges};
use stepreward::dataset::{self, emit_splits, read_splits, BuildOptions, EmitOptions, SampleSource};
use stepreward::eval::{self, error_distribution, evaluate_policy, rejection_sample};
use stepreward::mutator::{EditMode, MutationRuleSet};
use stepreward::reward::{self, LabeledProgram, PreferenceGroup, RewardKind, RewardModel};
use stepreward::rl::{self, Policy, RewardSource, ToyEnvironment, ValueModel};
use stepreward::sandbox::{ExecutionVerdict, ResourceLimits, Sandbox, SandboxConfig, VerdictStatus};
use stepreward::teacher::TeacherClient;
use stepreward::testgen::{self, TestgenConfig};
use stepreward::{synth, Corpus, Problem};

use config::Config;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "stepreward", version, about = "Line-level process supervision for code generation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// TOML file with hyperparameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving all artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Sandbox worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// HTTP endpoint of the teacher model.
    #[arg(long, global = true)]
    teacher_endpoint: Option<String>,
    /// Python interpreter for the sandbox (overrides SANDBOX_INTERPRETER).
    #[arg(long, global = true)]
    interpreter: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a line-delimited corpus (or synthesize one) and assign splits.
    Ingest {
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        input: Option<PathBuf>,
        /// Generate this many synthetic problems instead of reading a file.
        #[arg(long)]
        synthetic: Option<u32>,
        /// Prompt template file with {description} and {tests} placeholders.
        #[arg(long)]
        template: Option<PathBuf>,
    },
    /// Add tests that kill surviving mutants.
    AugmentTests {
        #[arg(long)]
        corpus: String,
        #[arg(long, default_value = "sft_seed")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Mutate, verify and emit step-level train/validation/test splits.
    BuildDataset {
        /// Corpus name under data/, a path, or `toy`.
        #[arg(long)]
        corpus: String,
        #[arg(long, default_value = "sft_seed")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train a reward model from a dataset directory.
    TrainRm {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Corpus the dataset was built from; required by outcome kinds.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// PPO on the toy environment.
    TrainPpo {
        #[arg(long, value_enum, default_value = "prm")]
        reward: KindArg,
        /// Persisted reward model; trained on the toy suite when omitted.
        #[arg(long)]
        rm: Option<PathBuf>,
    },
    /// pass@k, best-of-n selection and error distribution on the toy suite.
    Evaluate {
        /// Policy checkpoint; the warm-started initial policy when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Process reward model used for best-of-n selection.
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Dataset directory to compare error distributions against.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Summarize artifacts of earlier runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Prm,
    OrmOriginal,
    OrmPreference,
    OrmCompiler,
}

impl KindArg {
    fn kind(self) -> RewardKind {
        match self {
            KindArg::Prm => RewardKind::Prm,
            KindArg::OrmOriginal => RewardKind::OrmOriginal,
            KindArg::OrmPreference => RewardKind::OrmPreference,
            KindArg::OrmCompiler => RewardKind::OrmCompiler,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct Ctx {
    global: Global,
    config: Config,
    manifest: Manifest,
}

impl Ctx {
    fn sandbox(&self) -> Result<Sandbox> {
        let mut cfg = SandboxConfig::default();
        if let Some(i) = &self.global.interpreter {
            cfg.interpreter = i.clone();
        }
        if let Some(j) = self.global.jobs {
            cfg.jobs = j.max(1);
        }
        Ok(Sandbox::new(cfg)?)
    }

    fn teacher(&self) -> Option<TeacherClient> {
        self.global.teacher_endpoint.as_ref().map(TeacherClient::new)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.global.out.join(name)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_input(path)
    }

    fn output(&mut self, name: &str) -> Result<()> {
        let path = self.out(name);
        self.manifest.add_output(name, &path)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    config.apply_seed(cli.global.seed);
    let manifest = Manifest::new(subcommand_name(&cli.command), cli.global.seed, &config)?;
    let mut ctx = Ctx { global: cli.global.clone(), config, manifest };
    if let Some(p) = &cli.global.config {
        ctx.input(p)?;
    }
    fs::create_dir_all(&ctx.global.out).with_context(|| format!("creating {}", ctx.global.out.display()))?;
    match &cli.command {
        Command::Ingest { input, synthetic, template } => ingest(&mut ctx, input.as_deref(), *synthetic, template.as_deref()),
        Command::AugmentTests { corpus, split, limit } => augment(&mut ctx, corpus, split, *limit),
        Command::BuildDataset { corpus, split, limit } => build_dataset(&mut ctx, corpus, split, *limit),
        Command::TrainRm { kind, dataset, corpus } => train_rm(&mut ctx, *kind, dataset.as_deref(), corpus.as_deref()),
        Command::TrainPpo { reward, rm } => train_ppo(&mut ctx, *reward, rm.as_deref()),
        Command::Evaluate { policy, rm, n, k, dataset } => {
            evaluate(&mut ctx, policy.as_deref(), rm.as_deref(), *n, k, dataset.as_deref())
        }
        Command::Report { runs } => report(&mut ctx, runs),
    }?;
    ctx.manifest.write(&ctx.out("manifest.json"))
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest { .. } => "ingest",
        Command::AugmentTests { .. } => "augment-tests",
        Command::BuildDataset { .. } => "build-dataset",
        Command::TrainRm { .. } => "train-rm",
        Command::TrainPpo { .. } => "train-ppo",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
    }
}

/// Where a corpus comes from.
enum CorpusSource {
    Toy,
    File(PathBuf),
}

fn data_dir_candidates() -> Vec<PathBuf> {
    vec![PathBuf::from("data"), Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")]
}

fn resolve_corpus(name: &str) -> Result<CorpusSource> {
    if name == "toy" {
        return Ok(CorpusSource::Toy);
    }
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Ok(CorpusSource::File(direct));
    }
    for dir in data_dir_candidates() {
        let p = dir.join(format!("{name}.jsonl"));
        if p.is_file() {
            return Ok(CorpusSource::File(p));
        }
    }
    bail!("corpus {name:?} not found as a path or under data/")
}

fn load_corpus(ctx: &mut Ctx, name: &str) -> Result<Corpus> {
    match resolve_corpus(name)? {
        CorpusSource::Toy => Ok(Corpus::new(ToyEnvironment::standard().problems())?),
        CorpusSource::File(p) => {
            ctx.input(&p)?;
            let corpus = corpus::ingest(&p, &ctx.config.corpus.prompt_template)?;
            info!("loaded {} problems from {}", corpus.len(), p.display());
            Ok(corpus)
        }
    }
}

fn select<'a>(corpus: &'a Corpus, split: &str, limit: Option<usize>) -> Result<Vec<&'a Problem>> {
    let mut chosen: Vec<&Problem> = match split {
        "all" => corpus.problems.iter().collect(),
        s => {
            let want = parse_split(s)?;
            corpus.problems.iter().filter(|p| p.split.is_none_or(|x| x == want)).collect()
        }
    };
    if let Some(n) = limit {
        chosen.truncate(n);
    }
    if chosen.is_empty() {
        bail!("no problems in split {split}");
    }
    Ok(chosen)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "sft_seed" => Split::SftSeed,
        "rl_train" => Split::RlTrain,
        "validation" => Split::Validation,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    })
}

fn ingest(ctx: &mut Ctx, input: Option<&Path>, synthetic: Option<u32>, template: Option<&Path>) -> Result<()> {
    let template = match template {
        Some(p) => {
            ctx.input(p)?;
            fs::read_to_string(p)?
        }
        None => ctx.config.corpus.prompt_template.clone(),
    };
    let source = match (input, synthetic) {
        (Some(p), _) => {
            ctx.input(p)?;
            p.to_path_buf()
        }
        (None, Some(count)) => {
            let sandbox = ctx.sandbox()?;
            let records = synth::generate(&sandbox, count, ctx.global.seed)?;
            let raw = ctx.out("raw.jsonl");
            write_records(&raw, &records)?;
            ctx.output("raw.jsonl")?;
            raw
        }
        (None, None) => bail!("either --input or --synthetic is required"),
    };
    let mut corpus = corpus::ingest(&source, &template)?;
    if corpus.problems.iter().all(|p| p.split.is_none()) {
        corpus = assign_splits(corpus, &SplitRanges::default())?;
    }
    corpus.write_jsonl(&ctx.out("corpus.jsonl"))?;
    ctx.output("corpus.jsonl")?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in &corpus.problems {
        *counts.entry(p.split.map_or("none".into(), |s| s.to_string())).or_default() += 1;
    }
    println!("ingested {} problems: {counts:?}", corpus.len());
    Ok(())
}

fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn augment(ctx: &mut Ctx, corpus_name: &str, split: &str, limit: Option<usize>) -> Result<()> {
    let corpus = load_corpus(ctx, corpus_name)?;
    let sandbox = ctx.sandbox()?;
    let teacher = ctx.teacher();
    let cfg = TestgenConfig {
        rules: MutationRuleSet::all(ctx.global.seed),
        limits: ResourceLimits::default().with_wall_time(Duration::from_millis(ctx.config.augment.wall_time_ms)),
        max_new_tests: ctx.config.augment.max_new_tests,
        ..TestgenConfig::default()
    };
    let targets: Vec<u32> = select(&corpus, split, limit)?.iter().map(|p| p.id).collect();
    let outcomes = sandbox.par_map(&targets, |id| {
        let p = corpus.get(*id).expect("selected from corpus");
        testgen::augment_problem(&sandbox, p, teacher.as_ref(), &cfg)
    });
    let mut by_id: BTreeMap<u32, Problem> = BTreeMap::new();
    let mut log_lines = String::new();
    let (mut before, mut after, mut with_survivors, mut flipped, mut survivors) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (id, o) in targets.iter().zip(outcomes) {
        let o = o.with_context(|| format!("augmenting problem {id}"))?;
        if o.survivors_before > 0 {
            with_survivors += 1;
            before += o.adequacy_before;
            after += o.adequacy_after;
            survivors += o.survivors_before;
            flipped += o.survivors_before - o.survivors_after;
        }
        log_lines.push_str(&serde_json::to_string(&serde_json::json!({
            "problem_id": id,
            "adequacy_before": o.adequacy_before,
            "adequacy_after": o.adequacy_after,
            "survivors_before": o.survivors_before,
            "survivors_after": o.survivors_after,
            "accepted": o.accepted.iter().map(|t| &t.assertion).collect::<Vec<_>>(),
        }))?);
        log_lines.push('\n');
        by_id.insert(*id, o.problem);
    }
    let problems: Vec<Problem> =
        corpus.problems.iter().map(|p| by_id.remove(&p.id).unwrap_or_else(|| p.clone())).collect();
    Corpus::new(problems)?.write_jsonl(&ctx.out("corpus.jsonl"))?;
    ctx.output("corpus.jsonl")?;
    fs::write(ctx.out("augment.jsonl"), log_lines)?;
    ctx.output("augment.jsonl")?;
    if with_survivors > 0 {
        println!(
            "problems with survivors: {with_survivors}; mean adequacy {:.3} -> {:.3}; survivors killed {flipped}/{survivors}",
            before / with_survivors as f64,
            after / with_survivors as f64
        );
    } else {
        println!("no problem had surviving mutants");
    }
    Ok(())
}

fn build_dataset(ctx: &mut Ctx, corpus_name: &str, split: &str, limit: Option<usize>) -> Result<()> {
    let corpus = load_corpus(ctx, corpus_name)?;
    let problems = select(&corpus, if corpus_name == "toy" { "all" } else { split }, limit)?;
    let sandbox = ctx.sandbox()?;
    let teacher = ctx.teacher();
    let dc = &ctx.config.dataset;
    let mut rules = MutationRuleSet::all(ctx.global.seed);
    rules.max_edits_per_line = dc.max_edits_per_line;
    let opts = BuildOptions {
        rules,
        modes: vec![EditMode::Mutate, EditMode::Refactor],
        limits: ResourceLimits::default().with_wall_time(Duration::from_millis(dc.wall_time_ms)),
    };
    let samples = dataset::build_samples(&sandbox, &problems, &opts, teacher.as_ref())?;
    let map = dc.split_map.clone();
    let emit = EmitOptions { seed: ctx.global.seed, max_class_ratio: dc.max_class_ratio };
    let splits = emit_splits(samples, &map, &emit, &ctx.global.out)?;
    for name in ["train.jsonl", "validation.jsonl", "test.jsonl", "stats.json"] {
        ctx.output(name)?;
    }
    for s in &splits {
        println!("{:<11}{:>7} samples {:>7} positive {:>7} negative", s.name.as_str(), s.len(), s.positive_count, s.negative_count);
    }
    Ok(())
}

fn programs_from_split(split: &dataset::DatasetSplit, corpus: &Corpus) -> Result<Vec<LabeledProgram>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for s in &split.samples {
        let p = corpus.get(s.problem_id).with_context(|| format!("problem {} not in corpus", s.problem_id))?;
        let (code, passed) = if s.source == SampleSource::Reference {
            (p.reference_code.clone(), true)
        } else {
            (dataset::reconstruct_program(p, s), s.label.is_positive())
        };
        if seen.insert((p.id, code.clone())) {
            out.push(LabeledProgram { prompt: p.prompt.clone(), code, passed });
        }
    }
    Ok(out)
}

fn status_verdict(status: VerdictStatus) -> ExecutionVerdict {
    let passed = status == VerdictStatus::AllPassed;
    ExecutionVerdict {
        status,
        passed_count: usize::from(passed),
        total_count: 1,
        first_failure: None,
        wall_time_ms: 0,
    }
}

fn train_rm(ctx: &mut Ctx, kind: KindArg, dataset_dir: Option<&Path>, corpus_name: Option<&str>) -> Result<()> {
    let cfg = ctx.config.reward.clone();
    let model = if kind == KindArg::OrmCompiler {
        RewardModel::compiler(ctx.config.compiler)
    } else {
        let dir = dataset_dir.context("--dataset is required for learned reward models")?;
        for name in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
            ctx.input(&dir.join(name))?;
        }
        let splits = read_splits(dir)?;
        match kind {
            KindArg::Prm => reward::train_prm(&splits, &cfg)?,
            _ => {
                let corpus = load_corpus(ctx, corpus_name.context("--corpus is required for outcome models")?)?;
                let train = programs_from_split(&splits[0], &corpus)?;
                let val = programs_from_split(&splits[1], &corpus)?;
                if kind == KindArg::OrmOriginal {
                    reward::train_orm_original(&train, &val, &cfg)?
                } else {
                    let mut groups: BTreeMap<String, PreferenceGroup> = BTreeMap::new();
                    for s in &splits[0].samples {
                        let p = corpus.get(s.problem_id).context("problem not in corpus")?;
                        let (code, status) = if s.source == SampleSource::Reference {
                            (p.reference_code.clone(), VerdictStatus::AllPassed)
                        } else {
                            (dataset::reconstruct_program(p, s), s.verdict_status.unwrap_or(VerdictStatus::TestFailed))
                        };
                        let g = groups
                            .entry(p.prompt.clone())
                            .or_insert_with(|| PreferenceGroup { prompt: p.prompt.clone(), snippets: Vec::new() });
                        if !g.snippets.iter().any(|(c, _)| *c == code) {
                            g.snippets.push((code, status_verdict(status)));
                        }
                    }
                    let groups: Vec<PreferenceGroup> = groups.into_values().collect();
                    reward::train_orm_preference(&groups, reward::rank_by_verdict, &cfg)?
                }
            }
        }
    };
    debug_assert_eq!(model.kind, kind.kind());
    model.save(&ctx.out("model.json"))?;
    ctx.output("model.json")?;
    fs::write(ctx.out("metrics.json"), serde_json::to_string_pretty(&model.meta)? + "\n")?;
    ctx.output("metrics.json")?;
    if let Some(m) = &model.meta.test {
        println!(
            "{}: test accuracy {:.3} f1 {:.3} class accuracy neg {:.3} pos {:.3}",
            model.kind.as_str(),
            m.accuracy,
            m.f1,
            m.class_accuracy[0],
            m.class_accuracy[1]
        );
    } else if let Some(l) = model.meta.loss_curve.last() {
        println!("{}: final training loss {l:.4}", model.kind.as_str());
    } else {
        println!("{}: written", model.kind.as_str());
    }
    Ok(())
}

/// Distractors, warm-started policy and environment shared by the RL commands.
fn toy_setup(ctx: &Ctx, sandbox: &Sandbox) -> Result<(ToyEnvironment, Policy)> {
    let env = ToyEnvironment::with_max_length(ctx.config.toy.max_length);
    let ws = ctx.config.warm_start;
    let distractors =
        rl::select_distractors(&env, sandbox, ws.context, ws.branches, &ctx.config.rl.limits(), ctx.global.seed)?;
    let policy = rl::warm_start(&env, &distractors, &ws);
    Ok((env, policy))
}

fn load_model(ctx: &mut Ctx, path: &Path, ok: &[RewardKind]) -> Result<RewardModel> {
    ctx.input(path)?;
    let m = RewardModel::load(path)?;
    if !ok.contains(&m.kind) {
        bail!("{} holds a {} model", path.display(), m.kind.as_str());
    }
    Ok(m)
}

fn train_ppo(ctx: &mut Ctx, arm: KindArg, rm_path: Option<&Path>) -> Result<()> {
    let sandbox = ctx.sandbox()?;
    let (env, policy) = toy_setup(ctx, &sandbox)?;
    let limits = ctx.config.rl.limits();
    let model = match (arm, rm_path) {
        (KindArg::OrmCompiler, _) => None,
        (_, Some(p)) => Some(load_model(ctx, p, &[arm.kind()])?),
        (_, None) => {
            let tc = rl::toy_training_config(ctx.global.seed);
            let rms = rl::toy_reward_models(&env, &sandbox, &policy, &tc, &limits)?;
            Some(match arm {
                KindArg::Prm => rms.prm,
                KindArg::OrmOriginal => rms.orm_original,
                _ => rms.orm_preference,
            })
        }
    };
    let source = match (&model, arm) {
        (None, _) => RewardSource::Compiler(&ctx.config.compiler),
        (Some(m), KindArg::Prm) => RewardSource::Prm(m),
        (Some(m), _) => RewardSource::Orm(m),
    };
    let out = ctx.global.out.clone();
    let outcome =
        rl::train_loop(&env, policy, ValueModel::new(rl::VALUE_DIM), source, &sandbox, &ctx.config.rl, Some(&out))?;
    for name in ["metrics.jsonl", "policy.json", "value.json", "report.json"] {
        ctx.output(name)?;
    }
    let r = &outcome.report;
    println!(
        "{}: {} steps, greedy pass@1 {:.3} -> {:.3}",
        r.arm,
        r.steps.len(),
        r.initial_greedy_pass,
        r.final_greedy_pass
    );
    Ok(())
}

fn evaluate(
    ctx: &mut Ctx,
    policy_path: Option<&Path>,
    rm_path: Option<&Path>,
    n: Option<usize>,
    ks: &[usize],
    dataset_dir: Option<&Path>,
) -> Result<()> {
    let sandbox = ctx.sandbox()?;
    let (env, initial) = toy_setup(ctx, &sandbox)?;
    let policy = match policy_path {
        Some(p) => {
            ctx.input(p)?;
            Policy::load(p)?
        }
        None => initial,
    };
    let ec = ctx.config.eval.clone();
    let n = n.unwrap_or(ec.n);
    let ks: Vec<usize> = if ks.is_empty() { ec.ks.iter().copied().filter(|k| *k <= n).collect() } else { ks.to_vec() };
    let problems = env.problems();
    let refs: Vec<&Problem> = problems.iter().collect();
    let seed = ctx.global.seed;
    let top_p = ctx.config.rl.top_p;
    let limits = ctx.config.rl.limits();
    let report = evaluate_policy(&sandbox, &refs, n, &ks, &limits, |p, n| {
        rl::sample_programs(&policy, &env, (p.id - 1) as usize, n, seed, top_p)
    })?;
    report.write_jsonl(&ctx.out("eval.jsonl"))?;
    ctx.output("eval.jsonl")?;
    let table = report.table();
    fs::write(ctx.out("eval_table.txt"), &table)?;
    ctx.output("eval_table.txt")?;
    println!("{table}");

    if let Some(path) = rm_path {
        let prm = load_model(ctx, path, &[RewardKind::Prm])?;
        let rounds = ec.rejection_trials.div_ceil(problems.len());
        let (mut selected, mut uniform, mut trials) = (0.0, 0.0, 0usize);
        for round in 0..rounds as u64 {
            for (i, p) in problems.iter().enumerate() {
                let draws = rl::sample_programs(&policy, &env, i, ec.best_of, seed ^ (round + 1) << 32, top_p);
                let passed: Vec<bool> = draws
                    .iter()
                    .map(|c| sandbox.verify(c, &p.tests, &limits).map(|v| v.passed()))
                    .collect::<Result<_, _>>()?;
                let (idx, _) = rejection_sample(&prm, p, ec.best_of, ec.selection, |_, _| draws.clone())?;
                selected += f64::from(u8::from(passed[idx]));
                uniform += passed.iter().filter(|b| **b).count() as f64 / passed.len() as f64;
                trials += 1;
            }
        }
        let summary = serde_json::json!({
            "trials": trials,
            "best_of": ec.best_of,
            "selection": ec.selection,
            "selected_pass_rate": selected / trials as f64,
            "uniform_pass_rate": uniform / trials as f64,
        });
        fs::write(ctx.out("rejection.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
        ctx.output("rejection.json")?;
        println!(
            "best-of-{} over {trials} trials: selected {:.3} vs uniform {:.3}",
            ec.best_of,
            selected / trials as f64,
            uniform / trials as f64
        );
    }

    let policy_hist = error_distribution(report.per_problem.iter().flat_map(|r| r.statuses.iter()));
    let mut errors = serde_json::json!({ "policy": policy_hist });
    if let Some(dir) = dataset_dir {
        let mut statuses = Vec::new();
        for name in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
            ctx.input(&dir.join(name))?;
        }
        for s in read_splits(dir)? {
            statuses.extend(s.samples.iter().filter_map(|x| x.verdict_status));
        }
        let data_hist = error_distribution(&statuses);
        println!("{}", eval::compare_distributions(("dataset", &data_hist), ("policy", &policy_hist)));
        errors["dataset"] = serde_json::to_value(&data_hist)?;
        errors["tv_distance"] = data_hist.tv_distance(&policy_hist).into();
    }
    fs::write(ctx.out("errors.json"), serde_json::to_string_pretty(&errors)? + "\n")?;
    ctx.output("errors.json")?;
    Ok(())
}

fn report(ctx: &mut Ctx, runs: &[PathBuf]) -> Result<()> {
    let mut text = String::new();
    for dir in runs {
        if !dir.is_dir() {
            bail!("{} is not a run directory", dir.display());
        }
        text.push_str(&format!("== {}\n", dir.display()));
        let mut found = false;
        if let Some(m) = read_json::<Manifest>(ctx, &dir.join("manifest.json"))? {
            text.push_str(&format!("subcommand {} seed {} config {}\n", m.subcommand, m.seed, &m.config_hash[..12]));
            found = true;
        }
        if let Some(stats) = read_json::<Vec<dataset::SplitStats>>(ctx, &dir.join("stats.json"))? {
            for s in stats {
                text.push_str(&format!(
                    "{:<11}{:>7} samples {:>7} positive {:>7} negative\n",
                    s.split.as_str(),
                    s.samples,
                    s.positive,
                    s.negative
                ));
            }
            found = true;
        }
        if let Some(meta) = read_json::<reward::TrainingMeta>(ctx, &dir.join("metrics.json"))? {
            if let Some(t) = meta.test {
                text.push_str(&format!(
                    "reward model test accuracy {:.3} precision {:.3} recall {:.3} f1 {:.3}\n",
                    t.accuracy, t.precision, t.recall, t.f1
                ));
            }
            if let Some(l) = meta.loss_curve.last() {
                text.push_str(&format!("reward model epochs {} final loss {l:.4}\n", meta.epochs));
            }
            found = true;
        }
        if let Some(r) = read_json::<rl::TrainReport>(ctx, &dir.join("report.json"))? {
            text.push_str(&format!(
                "ppo arm {} steps {} greedy pass@1 {:.3} -> {:.3}\n",
                r.arm,
                r.steps.len(),
                r.initial_greedy_pass,
                r.final_greedy_pass
            ));
            if let Some(last) = r.steps.last() {
                text.push_str(&format!(
                    "last step: pass rate {:.3} reward {:.3} loss {:.5}\n",
                    last.pass_rate, last.mean_rm_reward, last.total_loss
                ));
            }
            found = true;
        }
        let table = dir.join("eval_table.txt");
        if table.is_file() {
            ctx.input(&table)?;
            text.push_str(&fs::read_to_string(&table)?);
            found = true;
        }
        if let Some(v) = read_json::<serde_json::Value>(ctx, &dir.join("rejection.json"))? {
            text.push_str(&format!(
                "best-of-{}: selected {:.3} uniform {:.3} over {} trials\n",
                v["best_of"], v["selected_pass_rate"].as_f64().unwrap_or(0.0), v["uniform_pass_rate"].as_f64().unwrap_or(0.0), v["trials"]
            ));
            found = true;
        }
        if !found {
            text.push_str("no recognized artifacts\n");
        }
    }
    fs::write(ctx.out("report.txt"), &text)?;
    ctx.output("report.txt")?;
    print!("{text}");
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(ctx: &mut Ctx, path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    ctx.input(path)?;
    let v = serde_json::from_slice(&fs::read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(v))
}

//! Compile-and-execute verification of candidate programs.
//!
//! A program is first syntax-checked with the interpreter's compile-only
//! entry point. Each assertion then runs in its own fresh interpreter
//! process and temp directory, using a script assembled from a small
//! prologue, the program text and an exit-code epilogue:
//!
//! * `0` the assertion held
//! * `1` the assertion failed
//! * `2` any other exception (including one raised while loading the program)
//! * `124` reserved for wall-clock kills
//!
//! The wall-clock limit is a budget for the whole verification; once it is
//! exhausted the remaining tests are not started and the verdict is `timeout`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::corpus::{Problem, TestCase};
use crate::mutator::LineEdit;
use crate::util::sha256_hex;

pub const INTERPRETER_ENV: &str = "SANDBOX_INTERPRETER";
pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_TIMEOUT: i32 = 124;
const FAILURE_EXCERPT_BYTES: usize = 2048;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox setup failed: {0}")]
    SetupFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub wall_time: Duration,
    pub memory_bytes: u64,
}

impl Default for ResourceLimits {
    fn default() -> Self {
        Self { wall_time: Duration::from_secs(5), memory_bytes: 256 << 20 }
    }
}

impl ResourceLimits {
    pub fn with_wall_time(mut self, wall_time: Duration) -> Self {
        self.wall_time = wall_time;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    AllPassed,
    TestFailed,
    RuntimeError,
    CompileError,
    Timeout,
}

impl VerdictStatus {
    /// Priority used to combine per-test outcomes; higher wins.
    pub fn severity(self) -> u8 {
        match self {
            VerdictStatus::AllPassed => 0,
            VerdictStatus::TestFailed => 1,
            VerdictStatus::RuntimeError => 2,
            VerdictStatus::Timeout => 3,
            VerdictStatus::CompileError => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::AllPassed => "all_passed",
            VerdictStatus::TestFailed => "test_failed",
            VerdictStatus::RuntimeError => "runtime_error",
            VerdictStatus::CompileError => "compile_error",
            VerdictStatus::Timeout => "timeout",
        }
    }

    pub const ERRORS: [VerdictStatus; 4] = [
        VerdictStatus::CompileError,
        VerdictStatus::RuntimeError,
        VerdictStatus::TestFailed,
        VerdictStatus::Timeout,
    ];
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionVerdict {
    pub status: VerdictStatus,
    pub passed_count: usize,
    pub total_count: usize,
    pub first_failure: Option<String>,
    pub wall_time_ms: u64,
}

impl ExecutionVerdict {
    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::AllPassed
    }
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub interpreter: PathBuf,
    pub interpreter_args: Vec<String>,
    /// Worker threads for batch verification.
    pub jobs: usize,
    /// Memoize verdicts by (program, tests, limits).
    pub cache: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        let interpreter = std::env::var_os(INTERPRETER_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("python3"));
        Self {
            interpreter,
            interpreter_args: vec!["-I".into(), "-S".into()],
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cache: true,
        }
    }
}

/// Raw result of one interpreter process.
#[derive(Debug, Clone)]
pub struct ProcessRun {
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

impl ProcessRun {
    pub fn code(&self) -> i32 {
        if self.timed_out {
            EXIT_TIMEOUT
        } else {
            self.exit_code.unwrap_or(-1)
        }
    }
}

pub struct Sandbox {
    config: SandboxConfig,
    pool: rayon::ThreadPool,
    cache: Option<Mutex<HashMap<String, ExecutionVerdict>>>,
    /// Compile-check outcome by program digest: `None` compiled cleanly,
    /// `Some(stderr)` did not.
    compiled: Option<Mutex<HashMap<String, Option<String>>>>,
}

impl fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).finish()
    }
}

const PROLOGUE: &str = "import atexit as _sbx_atexit, os as _sbx_os, sys as _sbx_sys\n\
_sbx_atexit.register(_sbx_os._exit, 2)\n";

const COMPILE_CHECK: &str =
    "import sys\nwith open(sys.argv[1], encoding='utf-8') as fh:\n    compile(fh.read(), 'program.py', 'exec')\n";

/// The per-test script: prologue, program, then the assertion wrapped in
/// the exit-code epilogue. Exits through `os._exit` so the prologue's exit
/// hook only fires when the program leaves early.
pub fn harness_script(program: &str, assertion: &str) -> String {
    let mut s = String::with_capacity(program.len() + assertion.len() + 512);
    s.push_str(PROLOGUE);
    s.push_str(program);
    if !program.ends_with('\n') {
        s.push('\n');
    }
    s.push_str("try:\n");
    for line in assertion.lines() {
        s.push_str("    ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(
        "except AssertionError:\n    _sbx_sys.stderr.flush()\n    _sbx_os._exit(1)\n\
except BaseException:\n    import traceback as _sbx_tb\n    _sbx_tb.print_exc()\n    _sbx_sys.stderr.flush()\n    _sbx_os._exit(2)\n\
_sbx_sys.stdout.flush()\n_sbx_sys.stderr.flush()\n_sbx_os._exit(0)\n",
    );
    s
}

fn excerpt(text: &str) -> String {
    let t = text.trim();
    if t.len() <= FAILURE_EXCERPT_BYTES {
        return t.to_string();
    }
    let mut start = t.len() - FAILURE_EXCERPT_BYTES;
    while !t.is_char_boundary(start) {
        start += 1;
    }
    t[start..].to_string()
}

fn read_capped(path: &Path) -> String {
    let mut buf = Vec::new();
    if let Ok(f) = fs::File::open(path) {
        let _ = f.take(64 * 1024).read_to_end(&mut buf);
    }
    String::from_utf8_lossy(&buf).into_owned()
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs.max(1))
            .thread_name(|i| format!("sandbox-{i}"))
            .build()
            .map_err(|e| SandboxError::SetupFailure(e.to_string()))?;
        let cache = config.cache.then(|| Mutex::new(HashMap::new()));
        let compiled = config.cache.then(|| Mutex::new(HashMap::new()));
        let sb = Self { config, pool, cache, compiled };
        let probe = sb.run_script("pass\n", &ResourceLimits::default())?;
        if probe.code() != 0 {
            return Err(SandboxError::SetupFailure(format!(
                "interpreter {} failed to start: {}",
                sb.config.interpreter.display(),
                excerpt(&probe.stderr)
            )));
        }
        Ok(sb)
    }

    pub fn from_env() -> Result<Self, SandboxError> {
        Self::new(SandboxConfig::default())
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn jobs(&self) -> usize {
        self.config.jobs.max(1)
    }

    fn spawn(&self, dir: &Path, args: &[OsString], budget: Duration, limits: &ResourceLimits) -> Result<ProcessRun, SandboxError> {
        let out_path = dir.join("stdout.txt");
        let err_path = dir.join("stderr.txt");
        let setup = |e: std::io::Error| SandboxError::SetupFailure(e.to_string());
        let stdout = fs::File::create(&out_path).map_err(setup)?;
        let stderr = fs::File::create(&err_path).map_err(setup)?;
        let mut cmd = Command::new(&self.config.interpreter);
        cmd.args(&self.config.interpreter_args)
            .args(args)
            .current_dir(dir)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("LANG", "C.UTF-8")
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8")
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);
        let mem = limits.memory_bytes;
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                let as_limit = libc::rlimit { rlim_cur: mem as libc::rlim_t, rlim_max: mem as libc::rlim_t };
                libc::setrlimit(libc::RLIMIT_AS, &as_limit);
                let fsize = libc::rlimit { rlim_cur: 16 << 20, rlim_max: 16 << 20 };
                libc::setrlimit(libc::RLIMIT_FSIZE, &fsize);
                Ok(())
            });
        }
        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| {
            SandboxError::SetupFailure(format!("cannot start {}: {e}", self.config.interpreter.display()))
        })?;
        let status = child.wait_timeout(budget).map_err(setup)?;
        let (exit_code, timed_out) = match status {
            Some(s) => (s.code(), false),
            None => {
                // SAFETY: plain kill(2) on the child's process group.
                unsafe {
                    libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                }
                let _ = child.kill();
                let _ = child.wait();
                (None, true)
            }
        };
        Ok(ProcessRun {
            exit_code,
            timed_out,
            stdout: read_capped(&out_path),
            stderr: read_capped(&err_path),
            elapsed: start.elapsed(),
        })
    }

    fn scratch(&self) -> Result<tempfile::TempDir, SandboxError> {
        tempfile::Builder::new()
            .prefix("sbx")
            .tempdir()
            .map_err(|e| SandboxError::SetupFailure(format!("temp dir not writable: {e}")))
    }

    /// Runs an arbitrary script in a fresh process and temp directory.
    pub fn run_script(&self, script: &str, limits: &ResourceLimits) -> Result<ProcessRun, SandboxError> {
        let dir = self.scratch()?;
        let path = dir.path().join("script.py");
        fs::write(&path, script).map_err(|e| SandboxError::SetupFailure(e.to_string()))?;
        self.spawn(dir.path(), &[path.into_os_string()], limits.wall_time, limits)
    }

    fn cache_key(program: &str, tests: &[TestCase], limits: &ResourceLimits) -> String {
        let mut buf = Vec::with_capacity(program.len() + 64 * tests.len());
        buf.extend_from_slice(program.as_bytes());
        for t in tests {
            buf.push(0);
            buf.extend_from_slice(t.assertion.as_bytes());
        }
        buf.extend_from_slice(format!("\0{:?}", limits).as_bytes());
        sha256_hex(&buf)
    }

    pub fn verify(&self, program: &str, tests: &[TestCase], limits: &ResourceLimits) -> Result<ExecutionVerdict, SandboxError> {
        let key = self.cache.as_ref().map(|_| Self::cache_key(program, tests, limits));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(v) = cache.lock().unwrap().get(key) {
                return Ok(v.clone());
            }
        }
        let verdict = self.verify_uncached(program, tests, limits)?;
        if let (Some(cache), Some(key)) = (&self.cache, key) {
            cache.lock().unwrap().insert(key, verdict.clone());
        }
        Ok(verdict)
    }

    fn verify_uncached(&self, program: &str, tests: &[TestCase], limits: &ResourceLimits) -> Result<ExecutionVerdict, SandboxError> {
        let start = Instant::now();
        let deadline = start + limits.wall_time;
        let total = tests.len();
        let done = |status, passed, failure: Option<String>| ExecutionVerdict {
            status,
            passed_count: passed,
            total_count: total,
            first_failure: failure,
            wall_time_ms: start.elapsed().as_millis() as u64,
        };

        let compile_key = self.compiled.as_ref().map(|_| sha256_hex(program.as_bytes()));
        let known = match (&self.compiled, &compile_key) {
            (Some(c), Some(k)) => c.lock().unwrap().get(k).cloned(),
            _ => None,
        };
        let compile_error = match known {
            Some(outcome) => outcome,
            None => {
                let dir = self.scratch()?;
                let prog_path = dir.path().join("program.py");
                let check_path = dir.path().join("check.py");
                let io = |e: std::io::Error| SandboxError::SetupFailure(e.to_string());
                fs::write(&prog_path, program).map_err(io)?;
                fs::write(&check_path, COMPILE_CHECK).map_err(io)?;
                let check = self.spawn(
                    dir.path(),
                    &[check_path.into_os_string(), prog_path.into_os_string()],
                    limits.wall_time,
                    limits,
                )?;
                if check.timed_out {
                    return Ok(done(VerdictStatus::Timeout, 0, Some("compile check timed out".into())));
                }
                let outcome = (check.code() != 0).then(|| excerpt(&check.stderr));
                if let (Some(c), Some(k)) = (&self.compiled, compile_key) {
                    c.lock().unwrap().insert(k, outcome.clone());
                }
                outcome
            }
        };
        if let Some(err) = compile_error {
            return Ok(done(VerdictStatus::CompileError, 0, Some(err)));
        }
        let io = |e: std::io::Error| SandboxError::SetupFailure(e.to_string());

        let mut status = VerdictStatus::AllPassed;
        let mut passed = 0;
        let mut failure: Option<String> = None;
        for test in tests {
            let now = Instant::now();
            if now >= deadline {
                status = VerdictStatus::Timeout;
                failure.get_or_insert_with(|| "wall-clock budget exhausted".into());
                break;
            }
            let dir = self.scratch()?;
            let script = dir.path().join("test.py");
            fs::write(&script, harness_script(program, &test.assertion)).map_err(io)?;
            let run = self.spawn(dir.path(), &[script.into_os_string()], deadline - now, limits)?;
            let outcome = match run.code() {
                EXIT_PASS => VerdictStatus::AllPassed,
                EXIT_ASSERTION => VerdictStatus::TestFailed,
                EXIT_TIMEOUT => VerdictStatus::Timeout,
                _ => VerdictStatus::RuntimeError,
            };
            match outcome {
                VerdictStatus::AllPassed => passed += 1,
                VerdictStatus::TestFailed => {
                    failure.get_or_insert_with(|| excerpt(&format!("AssertionError: {}", test.assertion)));
                }
                VerdictStatus::Timeout => {
                    failure.get_or_insert_with(|| format!("timed out: {}", test.assertion));
                }
                _ => {
                    failure.get_or_insert_with(|| excerpt(&run.stderr));
                }
            }
            if outcome.severity() > status.severity() {
                status = outcome;
            }
            if outcome == VerdictStatus::Timeout {
                break;
            }
        }
        Ok(done(status, passed, failure))
    }

    /// Verifies the reference solution with one line replaced by the edit.
    pub fn verify_edit(&self, problem: &Problem, edit: &LineEdit, limits: &ResourceLimits) -> Result<ExecutionVerdict, SandboxError> {
        let lines = problem.code_lines();
        if edit.line_index >= lines.line_count() {
            return Err(SandboxError::SetupFailure(format!(
                "edit line {} outside program of {} lines",
                edit.line_index,
                lines.line_count()
            )));
        }
        self.verify(&edit.apply(&lines), &problem.tests, limits)
    }

    /// Verifies many programs on the worker pool; output order follows input.
    pub fn verify_many(
        &self,
        jobs: &[(&str, &[TestCase])],
        limits: &ResourceLimits,
    ) -> Vec<Result<ExecutionVerdict, SandboxError>> {
        self.pool.install(|| jobs.par_iter().map(|(p, t)| self.verify(p, t, limits)).collect())
    }

    /// Runs `f` over `items` on the sandbox worker pool.
    pub fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

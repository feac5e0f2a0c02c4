//! Per-line mutations (behavior-changing) and refactorings (intended to be
//! behavior-preserving) of reference solutions.
//!
//! Every rule is a pure function of the line, its surrounding program and a
//! seeded RNG. A rule fires at most once per line; when more rules fire than
//! the per-line cap allows, a seeded subset is kept in rule order.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeLines, Problem};
use crate::pylex::{depths, ends_operand, is_keyword, lex_line, Tok, TokKind};
use crate::teacher::{TeacherClient, TeacherError, TeacherRequest};
use crate::util::{fnv1a, hash_parts, seeded_rng};

#[derive(Debug, Error)]
pub enum MutatorError {
    #[error("no enabled rule applies to the line")]
    NoApplicableRule,
    #[error("line index {index} out of range for {count} lines")]
    LineOutOfRange { index: usize, count: usize },
    #[error("unknown rule `{0}`")]
    UnknownRule(String),
    #[error("rule set enables no rules")]
    EmptyRuleSet,
    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(String),
    #[error("malformed teacher response: {0}")]
    MalformedTeacherResponse(String),
    #[error("teacher returned the original line")]
    EditIdenticalToOriginal,
}

impl From<TeacherError> for MutatorError {
    fn from(e: TeacherError) -> Self {
        match e {
            TeacherError::Unavailable(m) => MutatorError::TeacherUnavailable(m),
            TeacherError::MalformedResponse(m) => MutatorError::MalformedTeacherResponse(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Mutate,
    Refactor,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::Mutate => "mutate",
            EditMode::Refactor => "refactor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Rule(String),
    ExternalTeacher,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Rule(name) => write!(f, "rule:{name}"),
            Provenance::ExternalTeacher => f.write_str("external_teacher"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineEdit {
    pub problem_id: u32,
    pub line_index: usize,
    pub original_line: String,
    pub edited_line: String,
    pub mode: EditMode,
    pub provenance: Provenance,
}

impl LineEdit {
    /// The full program with `line_index` replaced by the edit.
    pub fn apply(&self, lines: &CodeLines) -> String {
        let mut out = lines.lines.clone();
        out[self.line_index] = self.edited_line.clone();
        let mut s = out.join("\n");
        s.push('\n');
        s
    }
}

pub const MUTATION_RULES: &[&str] = &[
    "arith_swap",
    "cmp_flip",
    "bool_negation",
    "boundary_const",
    "ident_swap",
    "early_return",
    "stmt_deletion",
];

pub const REFACTOR_RULES: &[&str] = &[
    "commutative_swap",
    "negated_comparison",
    "aug_expansion",
    "redundant_paren",
    "equivalent_literal",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationRuleSet {
    pub enabled_rules: Vec<String>,
    pub rng_seed: u64,
    /// Cap on edits kept per (line, mode).
    pub max_edits_per_line: usize,
}

impl Default for MutationRuleSet {
    fn default() -> Self {
        Self::all(0)
    }
}

impl MutationRuleSet {
    pub fn all(seed: u64) -> Self {
        Self {
            enabled_rules: MUTATION_RULES.iter().chain(REFACTOR_RULES).map(|s| s.to_string()).collect(),
            rng_seed: seed,
            max_edits_per_line: 3,
        }
    }

    pub fn new(rules: &[&str], seed: u64, max_edits_per_line: usize) -> Result<Self, MutatorError> {
        if rules.is_empty() {
            return Err(MutatorError::EmptyRuleSet);
        }
        for r in rules {
            if !MUTATION_RULES.contains(r) && !REFACTOR_RULES.contains(r) {
                return Err(MutatorError::UnknownRule(r.to_string()));
            }
        }
        Ok(Self {
            enabled_rules: rules.iter().map(|s| s.to_string()).collect(),
            rng_seed: seed,
            max_edits_per_line,
        })
    }

    pub fn uncapped(mut self) -> Self {
        self.max_edits_per_line = usize::MAX;
        self
    }

    fn enabled<'a>(&'a self, table: &'a [&'static str]) -> impl Iterator<Item = &'static str> + 'a {
        table.iter().copied().filter(|r| self.enabled_rules.iter().any(|e| e == r))
    }
}

/// Structural view of one source line.
struct LineView<'a> {
    line: &'a str,
    indent: &'a str,
    toks: Vec<Tok>,
    depth: Vec<i32>,
}

impl<'a> LineView<'a> {
    fn new(line: &'a str) -> Self {
        let body = line.trim_start_matches([' ', '\t']);
        let indent = &line[..line.len() - body.len()];
        let mut toks = lex_line(line);
        if toks.last().is_some_and(|t| t.kind == TokKind::Comment) {
            toks.pop();
        }
        let depth = depths(line, &toks);
        Self { line, indent, toks, depth }
    }

    fn text(&self, i: usize) -> &'a str {
        self.toks[i].text(self.line)
    }

    fn first(&self) -> Option<&'a str> {
        (!self.toks.is_empty()).then(|| self.text(0))
    }

    fn is_skippable(&self) -> bool {
        matches!(self.first(), None | Some("import") | Some("from"))
    }

    fn is_block_opener(&self) -> bool {
        !self.toks.is_empty() && self.text(self.toks.len() - 1) == ":"
    }

    fn index_of_top(&self, pred: impl Fn(&str) -> bool) -> Option<usize> {
        (0..self.toks.len()).find(|&i| self.depth[i] == 0 && self.toks[i].kind == TokKind::Op && pred(self.text(i)))
    }

    /// Token index range of the line's main expression.
    fn region(&self) -> Option<(usize, usize)> {
        let n = self.toks.len();
        let first = self.first()?;
        let (lo, hi) = match first {
            "return" => (1, n),
            "if" | "elif" | "while" if self.is_block_opener() => (1, n - 1),
            "for" if self.is_block_opener() => {
                let in_at = (1..n).find(|&i| self.depth[i] == 0 && self.text(i) == "in")?;
                (in_at + 1, n - 1)
            }
            f if is_keyword(f) => return None,
            _ => {
                let eq = self.index_of_top(|t| t == "=" || is_aug_op(t))?;
                (eq + 1, n)
            }
        };
        (lo < hi).then_some((lo, hi))
    }

    fn span(&self, lo: usize, hi: usize) -> (usize, usize) {
        (self.toks[lo].start, self.toks[hi - 1].end)
    }

    fn replace_span(&self, start: usize, end: usize, with: &str) -> String {
        format!("{}{}{}", &self.line[..start], with, &self.line[end..])
    }

    fn is_binary_at(&self, i: usize) -> bool {
        i > 0 && ends_operand(self.line, &self.toks[i - 1])
    }

    /// Binary operators (and operator keywords or commas) at bracket depth
    /// zero inside `[lo, hi)`.
    fn top_binary_ops(&self, lo: usize, hi: usize) -> Vec<usize> {
        (lo..hi)
            .filter(|&i| {
                if self.depth[i] != 0 {
                    return false;
                }
                let t = self.text(i);
                match self.toks[i].kind {
                    TokKind::Op => t == "," || is_binary_op(t) && self.is_binary_at(i),
                    TokKind::Name => {
                        matches!(t, "and" | "or" | "in" | "is" | "not" | "if" | "else" | "for" | "lambda")
                    }
                    _ => false,
                }
            })
            .collect()
    }

    /// Names that the line assigns to (plain, augmented, `for` and `as` targets).
    fn bound_names(&self) -> Vec<&'a str> {
        let n = self.toks.len();
        let mut out = Vec::new();
        let first = match self.first() {
            Some(f) => f,
            None => return out,
        };
        if first == "def" {
            if let Some(open) = (0..n).find(|&i| self.text(i) == "(") {
                let mut after_eq = false;
                for i in open + 1..n {
                    let t = self.text(i);
                    if self.depth[i] == 1 && t == "," {
                        after_eq = false;
                    } else if self.depth[i] == 1 && t == "=" {
                        after_eq = true;
                    } else if self.depth[i] == 1
                        && !after_eq
                        && self.toks[i].kind == TokKind::Name
                        && !is_keyword(t)
                    {
                        out.push(t);
                    }
                }
            }
            return out;
        }
        if first == "for" {
            let end = (1..n).find(|&i| self.depth[i] == 0 && self.text(i) == "in").unwrap_or(n);
            for i in 1..end {
                if self.toks[i].kind == TokKind::Name && !is_keyword(self.text(i)) {
                    out.push(self.text(i));
                }
            }
            return out;
        }
        for i in 1..n {
            if self.text(i) == "as" && i + 1 < n && self.toks[i + 1].kind == TokKind::Name {
                out.push(self.text(i + 1));
            }
        }
        if !is_keyword(first) {
            if let Some(eq) = self.index_of_top(|t| t == "=" || is_aug_op(t)) {
                for i in 0..eq {
                    let after_dot = i > 0 && self.text(i - 1) == ".";
                    if self.depth[i] == 0
                        && self.toks[i].kind == TokKind::Name
                        && !after_dot
                        && !is_keyword(self.text(i))
                    {
                        out.push(self.text(i));
                    }
                }
            }
        }
        out
    }
}

fn is_aug_op(t: &str) -> bool {
    matches!(t, "+=" | "-=" | "*=" | "/=" | "//=" | "%=" | "**=" | "&=" | "|=" | "^=" | ">>=" | "<<=")
}

fn is_binary_op(t: &str) -> bool {
    matches!(
        t,
        "+" | "-" | "*" | "/" | "//" | "%" | "**" | "<" | "<=" | ">" | ">=" | "==" | "!=" | "&" | "|" | "^" | "<<" | ">>" | "@"
    )
}

fn is_cmp_op(t: &str) -> bool {
    matches!(t, "<" | "<=" | ">" | ">=" | "==" | "!=")
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

fn choose<R: Rng>(rng: &mut R, candidates: &[usize]) -> Option<usize> {
    (!candidates.is_empty()).then(|| candidates[rng.gen_range(0..candidates.len())])
}

/// Names bound anywhere in the program (parameters, assignment and loop targets).
pub fn names_in_scope(context: &CodeLines) -> BTreeSet<String> {
    context
        .lines
        .iter()
        .flat_map(|l| LineView::new(l).bound_names().into_iter().map(str::to_owned).collect::<Vec<_>>())
        .collect()
}

type RuleFn = fn(&LineView<'_>, &BTreeSet<String>, &mut rand_chacha::ChaCha8Rng) -> Option<String>;

fn rule_fn(name: &str) -> RuleFn {
    match name {
        "arith_swap" => arith_swap,
        "cmp_flip" => cmp_flip,
        "bool_negation" => bool_negation,
        "boundary_const" => boundary_const,
        "ident_swap" => ident_swap,
        "early_return" => early_return,
        "stmt_deletion" => stmt_deletion,
        "commutative_swap" => commutative_swap,
        "negated_comparison" => negated_comparison,
        "aug_expansion" => aug_expansion,
        "redundant_paren" => redundant_paren,
        "equivalent_literal" => equivalent_literal,
        other => unreachable!("rule table out of sync: {other}"),
    }
}

fn arith_swap(v: &LineView<'_>, _: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let cands: Vec<usize> = (0..v.toks.len())
        .filter(|&i| {
            let t = v.text(i);
            v.toks[i].kind == TokKind::Op
                && (matches!(t, "+" | "-" | "*" | "//") && v.is_binary_at(i)
                    || matches!(t, "+=" | "-=" | "*=" | "//="))
        })
        .collect();
    let i = choose(rng, &cands)?;
    let swapped = match v.text(i) {
        "+" => "-",
        "-" => "+",
        "*" => "//",
        "//" => "*",
        "+=" => "-=",
        "-=" => "+=",
        "*=" => "//=",
        _ => "*=",
    };
    Some(v.replace_span(v.toks[i].start, v.toks[i].end, swapped))
}

fn cmp_flip(v: &LineView<'_>, _: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let cands: Vec<usize> =
        (0..v.toks.len()).filter(|&i| v.toks[i].kind == TokKind::Op && is_cmp_op(v.text(i))).collect();
    let i = choose(rng, &cands)?;
    let flipped = match v.text(i) {
        "<" => "<=",
        "<=" => "<",
        ">" => ">=",
        ">=" => ">",
        "==" => "!=",
        _ => "==",
    };
    Some(v.replace_span(v.toks[i].start, v.toks[i].end, flipped))
}

fn bool_negation(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let n = v.toks.len();
    // removal of a standalone `not` (not part of `not in` / `is not`)
    if let Some(i) = (0..n).find(|&i| {
        v.text(i) == "not" && !(i > 0 && v.text(i - 1) == "is") && !(i + 1 < n && v.text(i + 1) == "in")
    }) {
        let end = if i + 1 < n { v.toks[i + 1].start } else { v.toks[i].end };
        return Some(v.replace_span(v.toks[i].start, end, ""));
    }
    let first = v.first()?;
    let (lo, hi) = v.region()?;
    let boolish = (lo..hi).any(|i| {
        let t = v.text(i);
        is_cmp_op(t) || matches!(t, "and" | "or" | "in" | "is" | "True" | "False")
    });
    let applies = matches!(first, "if" | "elif" | "while") || (first == "return" && boolish);
    if !applies {
        return None;
    }
    let (s, e) = v.span(lo, hi);
    Some(v.replace_span(s, e, &format!("not ({})", &v.line[s..e])))
}

fn boundary_const(v: &LineView<'_>, _: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let cands: Vec<usize> = (0..v.toks.len())
        .filter(|&i| v.toks[i].kind == TokKind::Number && v.text(i).bytes().all(|b| b.is_ascii_digit()))
        .collect();
    let i = choose(rng, &cands)?;
    let value: i128 = v.text(i).parse().ok()?;
    let delta = if rng.gen_bool(0.5) { 1 } else { -1 };
    Some(v.replace_span(v.toks[i].start, v.toks[i].end, &(value + delta).to_string()))
}

fn ident_swap(v: &LineView<'_>, scope: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let n = v.toks.len();
    let is_ref = |i: usize| {
        let t = v.text(i);
        v.toks[i].kind == TokKind::Name
            && !is_keyword(t)
            && scope.contains(t)
            && !(i > 0 && v.text(i - 1) == ".")
            && !(i + 1 < n && v.text(i + 1) == "(")
            && !(i + 1 < n && v.text(i + 1) == "=" && v.depth[i] > 0)
    };
    let mut names: Vec<&str> = Vec::new();
    for i in 0..n {
        if is_ref(i) && !names.contains(&v.text(i)) {
            names.push(v.text(i));
        }
    }
    if names.len() < 2 {
        return None;
    }
    let picked = sample(rng, names.len(), 2);
    let (a, b) = (names[picked.index(0)], names[picked.index(1)]);
    let mut out = String::with_capacity(v.line.len());
    let mut last = 0;
    for i in 0..n {
        if is_ref(i) && (v.text(i) == a || v.text(i) == b) {
            out.push_str(&v.line[last..v.toks[i].start]);
            out.push_str(if v.text(i) == a { b } else { a });
            last = v.toks[i].end;
        }
    }
    out.push_str(&v.line[last..]);
    Some(out)
}

fn early_return(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let first = v.first()?;
    if v.indent.is_empty() || v.is_block_opener() || is_keyword(first) {
        return None;
    }
    let eq = v.index_of_top(|t| t == "=" || is_aug_op(t));
    let value = match eq {
        Some(1) if v.toks[0].kind == TokKind::Name => format!(" {first}"),
        _ => String::new(),
    };
    Some(format!("{}return{}", v.indent, value))
}

fn stmt_deletion(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    match v.first() {
        None | Some("pass") => None,
        Some(_) => Some(format!("{}pass", v.indent)),
    }
}

fn commutative_swap(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let (lo, hi) = v.region()?;
    let ops = v.top_binary_ops(lo, hi);
    if ops.len() != 1 {
        return None;
    }
    let op = ops[0];
    if !matches!(v.text(op), "+" | "*" | "==" | "!=" | "and" | "or" | "&" | "|" | "^") {
        return None;
    }
    let (ls, le) = v.span(lo, op);
    let (rs, re) = v.span(op + 1, hi);
    let swapped = format!(
        "{}{}{}",
        &v.line[rs..re],
        &v.line[le..rs],
        &v.line[ls..le]
    );
    Some(v.replace_span(ls, re, &swapped))
}

fn negated_comparison(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let (lo, hi) = v.region()?;
    let ops = v.top_binary_ops(lo, hi);
    if ops.len() != 1 || !is_cmp_op(v.text(ops[0])) {
        return None;
    }
    let op = ops[0];
    let flipped = match v.text(op) {
        "<" => ">=",
        "<=" => ">",
        ">" => "<=",
        ">=" => "<",
        "==" => "!=",
        _ => "==",
    };
    let (ls, le) = v.span(lo, op);
    let (rs, re) = v.span(op + 1, hi);
    let rewritten = format!("not {} {} {}", &v.line[ls..le], flipped, &v.line[rs..re]);
    Some(v.replace_span(ls, re, &rewritten))
}

fn aug_expansion(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    if v.first().is_some_and(is_keyword) {
        return None;
    }
    let op_at = v.index_of_top(is_aug_op)?;
    if op_at == 0 || op_at + 1 >= v.toks.len() {
        return None;
    }
    let (ts, te) = v.span(0, op_at);
    let (es, ee) = v.span(op_at + 1, v.toks.len());
    let target = &v.line[ts..te];
    let expr = &v.line[es..ee];
    let op = v.text(op_at).trim_end_matches('=');
    let rhs = if op_at + 2 == v.toks.len() { expr.to_string() } else { format!("({expr})") };
    Some(format!("{}{} = {} {} {}{}", v.indent, target, target, op, rhs, &v.line[ee..]))
}

fn redundant_paren(v: &LineView<'_>, _: &BTreeSet<String>, _: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let first = v.first()?;
    if first == "for" {
        return None;
    }
    let (lo, hi) = v.region()?;
    if hi - lo < 2 {
        return None;
    }
    let wrapped = v.text(lo) == "(" && v.text(hi - 1) == ")" && (lo + 1..hi - 1).all(|i| v.depth[i] >= 1);
    if wrapped || (lo..hi).any(|i| v.text(i) == "yield" || v.text(i) == "*" && !v.is_binary_at(i)) {
        return None;
    }
    let (s, e) = v.span(lo, hi);
    Some(v.replace_span(s, e, &format!("({})", &v.line[s..e])))
}

fn equivalent_literal(v: &LineView<'_>, _: &BTreeSet<String>, rng: &mut rand_chacha::ChaCha8Rng) -> Option<String> {
    let cands: Vec<usize> = (0..v.toks.len())
        .filter(|&i| {
            let t = v.text(i);
            matches!(t, "True" | "False")
                || v.toks[i].kind == TokKind::Number
                    && t.bytes().all(|b| b.is_ascii_digit())
                    && (t == "0" || !t.starts_with('0'))
        })
        .collect();
    let i = choose(rng, &cands)?;
    let replacement = match v.text(i) {
        "True" => "(1==1)".to_string(),
        "False" => "(1==0)".to_string(),
        digits => format!("0x{:x}", digits.parse::<u128>().ok()?),
    };
    Some(v.replace_span(v.toks[i].start, v.toks[i].end, &replacement))
}

fn line_rng(rules: &MutationRuleSet, line_index: usize, context: &CodeLines, mode: EditMode) -> rand_chacha::ChaCha8Rng {
    let ctx = context.join();
    let salt = hash_parts(&[
        context.lines[line_index].as_bytes(),
        &(line_index as u64).to_le_bytes(),
        &fnv1a(ctx.as_bytes()).to_le_bytes(),
        mode.as_str().as_bytes(),
    ]);
    seeded_rng(rules.rng_seed, salt)
}

fn apply_rules(
    problem_id: u32,
    context: &CodeLines,
    line_index: usize,
    rules: &MutationRuleSet,
    mode: EditMode,
) -> Result<Vec<LineEdit>, MutatorError> {
    let count = context.line_count();
    let line = context
        .lines
        .get(line_index)
        .ok_or(MutatorError::LineOutOfRange { index: line_index, count })?;
    let view = LineView::new(line);
    if view.is_skippable() {
        return Err(MutatorError::NoApplicableRule);
    }
    let table = match mode {
        EditMode::Mutate => MUTATION_RULES,
        EditMode::Refactor => REFACTOR_RULES,
    };
    let scope = names_in_scope(context);
    let mut rng = line_rng(rules, line_index, context, mode);
    let original = squash(line);
    let mut edits: Vec<LineEdit> = Vec::new();
    for name in rules.enabled(table) {
        let Some(edited) = rule_fn(name)(&view, &scope, &mut rng) else { continue };
        let edited = edited.trim_end().to_string();
        if squash(&edited) == original || edits.iter().any(|e| e.edited_line == edited) {
            continue;
        }
        debug_assert!(edited.starts_with(view.indent));
        edits.push(LineEdit {
            problem_id,
            line_index,
            original_line: line.clone(),
            edited_line: edited,
            mode,
            provenance: Provenance::Rule(name.to_string()),
        });
    }
    if edits.is_empty() {
        return Err(MutatorError::NoApplicableRule);
    }
    if edits.len() > rules.max_edits_per_line {
        let mut keep: Vec<usize> = sample(&mut rng, edits.len(), rules.max_edits_per_line).into_vec();
        keep.sort_unstable();
        edits = keep.into_iter().map(|i| edits[i].clone()).collect();
    }
    Ok(edits)
}

/// Behavior-changing edits of `context.lines[line_index]`.
pub fn mutate_line(
    problem_id: u32,
    context: &CodeLines,
    line_index: usize,
    rules: &MutationRuleSet,
) -> Result<Vec<LineEdit>, MutatorError> {
    apply_rules(problem_id, context, line_index, rules, EditMode::Mutate)
}

/// Edits of `context.lines[line_index]` intended to preserve behavior.
pub fn refactor_line(
    problem_id: u32,
    context: &CodeLines,
    line_index: usize,
    rules: &MutationRuleSet,
) -> Result<Vec<LineEdit>, MutatorError> {
    apply_rules(problem_id, context, line_index, rules, EditMode::Refactor)
}

/// All rule edits of a problem's reference solution for the given modes,
/// in line order. Lines where no rule fires are skipped.
pub fn edits_for_problem(problem: &Problem, rules: &MutationRuleSet, modes: &[EditMode]) -> Vec<LineEdit> {
    let lines = problem.code_lines();
    let mut out = Vec::new();
    for idx in 0..lines.line_count() {
        for &mode in modes {
            if let Ok(edits) = apply_rules(problem.id, &lines, idx, rules, mode) {
                out.extend(edits);
            }
        }
    }
    out
}

/// Asks an external teacher for a single-line rewrite. Multi-line replies
/// keep their first non-empty line; the original indentation is restored.
pub fn teacher_rewrite(
    client: &TeacherClient,
    problem: &Problem,
    context: &CodeLines,
    line_index: usize,
    mode: EditMode,
) -> Result<LineEdit, MutatorError> {
    let count = context.line_count();
    let line = context
        .lines
        .get(line_index)
        .ok_or(MutatorError::LineOutOfRange { index: line_index, count })?;
    let req = TeacherRequest {
        mode: mode.as_str().to_string(),
        line: line.clone(),
        context: context.join(),
        problem: problem.prompt.clone(),
    };
    let reply = client.request_field(&req, "rewritten_line")?;
    let first = reply
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| MutatorError::MalformedTeacherResponse("empty rewrite".into()))?;
    let indent = &line[..line.len() - line.trim_start().len()];
    let edited = format!("{indent}{first}");
    if squash(&edited) == squash(line) {
        return Err(MutatorError::EditIdenticalToOriginal);
    }
    Ok(LineEdit {
        problem_id: problem.id,
        line_index,
        original_line: line.clone(),
        edited_line: edited,
        mode,
        provenance: Provenance::ExternalTeacher,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_lines;
    use crate::teacher::testserver;
    use proptest::prelude::*;

    fn ctx(src: &str) -> CodeLines {
        split_lines(src)
    }

    fn edits_of(src: &str, idx: usize, mode: EditMode) -> Vec<String> {
        let rules = MutationRuleSet::all(7).uncapped();
        apply_rules(1, &ctx(src), idx, &rules, mode)
            .map(|v| v.into_iter().map(|e| e.edited_line).collect())
            .unwrap_or_default()
    }

    const ADD: &str = "def add(a, b):\n    return a + b\n";

    #[test]
    fn operator_swap() {
        assert!(edits_of(ADD, 1, EditMode::Mutate).contains(&"    return a - b".to_string()));
    }

    #[test]
    fn comparison_flip() {
        let src = "def f(x):\n    if x < 0:\n        return -x\n    return x\n";
        assert!(edits_of(src, 1, EditMode::Mutate).contains(&"    if x <= 0:".to_string()));
    }

    #[test]
    fn pass_has_no_applicable_rule() {
        let src = "def f():\n    pass\n";
        let c = ctx(src);
        let rules = MutationRuleSet::all(0).uncapped();
        // every mutation rule individually rejects it
        for rule in MUTATION_RULES {
            let only = MutationRuleSet::new(&[rule], 0, 3).unwrap();
            assert!(matches!(mutate_line(1, &c, 1, &only), Err(MutatorError::NoApplicableRule)), "{rule}");
        }
        assert!(matches!(mutate_line(1, &c, 1, &rules), Err(MutatorError::NoApplicableRule)));
    }

    #[test]
    fn blank_comment_import_skipped() {
        let src = "import math\n# note\n\nx = 1\n";
        for i in 0..3 {
            assert!(edits_of(src, i, EditMode::Mutate).is_empty());
            assert!(edits_of(src, i, EditMode::Refactor).is_empty());
        }
        assert!(!edits_of(src, 3, EditMode::Mutate).is_empty());
    }

    #[test]
    fn aug_expansion_rule() {
        let src = "def f(x):\n    x += 1\n    return x\n";
        assert!(edits_of(src, 1, EditMode::Refactor).contains(&"    x = x + 1".to_string()));
        let src2 = "def f(x, y):\n    x *= y + 1\n    return x\n";
        assert!(edits_of(src2, 1, EditMode::Refactor).contains(&"    x = x * (y + 1)".to_string()));
    }

    #[test]
    fn commutative_rule() {
        assert!(edits_of(ADD, 1, EditMode::Refactor).contains(&"    return b + a".to_string()));
    }

    #[test]
    fn paren_rule() {
        let src = "def f(s):\n    s = s * 2\n    return s\n";
        assert!(edits_of(src, 1, EditMode::Refactor).contains(&"    s = (s * 2)".to_string()));
    }

    #[test]
    fn negated_comparison_rule() {
        let src = "def f(x, y):\n    if x < y:\n        return 1\n    return 0\n";
        assert!(edits_of(src, 1, EditMode::Refactor).contains(&"    if not x >= y:".to_string()));
    }

    #[test]
    fn literal_rule() {
        let src = "def f():\n    return True\n";
        assert!(edits_of(src, 1, EditMode::Refactor).contains(&"    return (1==1)".to_string()));
        let src2 = "def f(x):\n    return x % 10\n";
        assert!(edits_of(src2, 1, EditMode::Refactor).contains(&"    return x % 0xa".to_string()));
    }

    #[test]
    fn ident_swap_rule() {
        assert!(edits_of(ADD, 1, EditMode::Mutate).contains(&"    return b + a".to_string()));
        // call names and attributes are left alone
        let src = "def f(a, b):\n    return max(a, b).real\n";
        for e in edits_of(src, 1, EditMode::Mutate).iter().filter(|e| e.contains("return")) {
            assert!(e.contains("max("), "{e}");
        }
    }

    #[test]
    fn deletion_and_early_return() {
        let src = "def f(a):\n    t = a * 2\n    return t\n";
        let m = edits_of(src, 1, EditMode::Mutate);
        assert!(m.contains(&"    pass".to_string()));
        assert!(m.contains(&"    return t".to_string()));
    }

    #[test]
    fn strings_untouched() {
        let src = "def f():\n    return 'a+b<c'\n";
        for e in edits_of(src, 1, EditMode::Mutate) {
            assert!(e.contains("'a+b<c'") || e.trim() == "pass", "{e}");
        }
    }

    #[test]
    fn cap_limits_edits() {
        let src = "def f(a, b):\n    return a + b < 3\n";
        let rules = MutationRuleSet::all(1);
        let edits = mutate_line(1, &ctx(src), 1, &rules).unwrap();
        assert!(edits.len() <= 3);
        let all = mutate_line(1, &ctx(src), 1, &rules.clone().uncapped()).unwrap();
        assert!(all.len() > 3);
    }

    #[test]
    fn unknown_rule_rejected() {
        assert!(matches!(MutationRuleSet::new(&["nope"], 0, 3), Err(MutatorError::UnknownRule(_))));
        assert!(matches!(MutationRuleSet::new(&[], 0, 3), Err(MutatorError::EmptyRuleSet)));
    }

    fn problem(src: &str) -> Problem {
        Problem {
            id: 5,
            description: "d".into(),
            prompt: "p".into(),
            reference_code: src.into(),
            tests: vec![],
            split: None,
        }
    }

    #[test]
    fn teacher_identical_rejected() {
        let srv = testserver::serve(vec![(200, r#"{"rewritten_line": "return a + b"}"#.into())]);
        let client = TeacherClient::new(&srv.url);
        let p = problem(ADD);
        let err = teacher_rewrite(&client, &p, &p.code_lines(), 1, EditMode::Mutate).unwrap_err();
        assert!(matches!(err, MutatorError::EditIdenticalToOriginal));
    }

    #[test]
    fn teacher_two_lines_first_kept_and_reindented() {
        let srv = testserver::serve(vec![(
            200,
            r#"{"rewritten_line": "\n  return max(l) - 1\nprint(1)"}"#.into(),
        )]);
        let client = TeacherClient::new(&srv.url);
        let p = problem("def f(l):\n    return max(l)\n");
        let e = teacher_rewrite(&client, &p, &p.code_lines(), 1, EditMode::Mutate).unwrap();
        assert_eq!(e.edited_line, "    return max(l) - 1");
        assert_eq!(e.provenance, Provenance::ExternalTeacher);
        let sent: serde_json::Value = serde_json::from_str(&srv.requests.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["mode"], "mutate");
        assert_eq!(sent["context"], "def f(l):\n    return max(l)");
    }

    #[test]
    fn teacher_missing_field_is_malformed() {
        let srv = testserver::serve(vec![(200, r#"{"other": 1}"#.into())]);
        let client = TeacherClient::new(&srv.url);
        let p = problem(ADD);
        let err = teacher_rewrite(&client, &p, &p.code_lines(), 1, EditMode::Refactor).unwrap_err();
        assert!(matches!(err, MutatorError::MalformedTeacherResponse(_)));
    }

    fn line_strategy() -> impl Strategy<Value = String> {
        let atoms = prop::sample::select(vec!["a", "b", "x", "s", "1", "0", "True", "n[i]", "len(s)"]);
        let ops = prop::sample::select(vec!["+", "-", "*", "//", "<", "<=", "==", "!=", "and"]);
        let shapes = prop::sample::select(vec!["return {e}", "x = {e}", "x += {e}", "if {e}:", "while {e}:", "{e}"]);
        (0usize..3, shapes, prop::collection::vec((atoms.clone(), ops), 0..3), atoms).prop_map(
            |(depth, shape, pairs, last)| {
                let mut e = String::new();
                for (a, o) in pairs {
                    e.push_str(&format!("{a} {o} "));
                }
                e.push_str(last);
                format!("{}{}", "    ".repeat(depth), shape.replace("{e}", &e))
            },
        )
    }

    proptest! {
        #[test]
        fn edits_deterministic_and_indent_preserving(line in line_strategy(), seed in 0u64..50) {
            let src = format!("def f(a, b, s, n, x):\n{line}\n");
            let c = ctx(&src);
            let rules = MutationRuleSet::all(seed);
            for mode in [EditMode::Mutate, EditMode::Refactor] {
                let first = apply_rules(1, &c, 1, &rules, mode).ok();
                let second = apply_rules(1, &c, 1, &rules, mode).ok();
                prop_assert_eq!(&first, &second);
                for e in first.unwrap_or_default() {
                    let indent = &line[..line.len() - line.trim_start().len()];
                    let e_indent = &e.edited_line[..e.edited_line.len() - e.edited_line.trim_start().len()];
                    prop_assert_eq!(indent, e_indent);
                    prop_assert_ne!(squash(&e.edited_line), squash(&line));
                    prop_assert!(e.line_index < c.line_count());
                }
            }
        }
    }
}

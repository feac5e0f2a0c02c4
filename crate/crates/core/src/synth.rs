//! A seeded generator of MBPP-style problems: short Python functions drawn
//! from parametric families, each with a description and assertion tests.
//!
//! Expected outputs are computed by running the reference solution, so every
//! reference passes its own tests. Seed tests are few and typical-case, which
//! leaves some mutants alive for test augmentation to catch.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;
use crate::sandbox::{ResourceLimits, Sandbox, SandboxError};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("output probe failed: {0}")]
    Probe(String),
}

/// One generated problem before its expected outputs are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draft {
    pub task_id: u32,
    pub text: String,
    pub fname: String,
    /// Source as it would appear in a raw corpus (may use tabs or CRLF).
    pub code: String,
    /// Python argument lists, e.g. `"[1, 2], 3"`.
    pub inputs: Vec<String>,
}

pub const SEED_TESTS: usize = 3;
const MAX_RESHUFFLES: usize = 64;

struct Ctx<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Ctx<'_> {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        *xs.choose(self.rng).expect("non-empty pool")
    }

    fn int(&mut self, lo: i64, hi: i64) -> i64 {
        self.rng.gen_range(lo..=hi)
    }

    fn name(&mut self, pool: &[&str]) -> String {
        self.pick(pool).to_string()
    }
}

const LIST_NAMES: &[&str] = &["nums", "arr", "lst", "items", "values", "xs"];
const ACC_NAMES: &[&str] = &["total", "acc", "result", "res", "count"];
const ELEM_NAMES: &[&str] = &["x", "n", "v", "item", "num"];
const STR_NAMES: &[&str] = &["s", "text", "string", "word", "st"];
const INT_NAMES: &[&str] = &["n", "num", "k", "m"];

type Family = fn(&mut Ctx<'_>) -> (String, String, String, Vec<String>);

fn fam_sum_greater(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, acc, x) = (c.pick(&["sum_greater", "sum_above", "big_sum"]), c.name(LIST_NAMES), c.name(ACC_NAMES), c.name(ELEM_NAMES));
    let k = c.int(0, 5);
    let code = format!(
        "def {f}({xs}):\n    {acc} = 0\n    for {x} in {xs}:\n        if {x} > {k}:\n            {acc} += {x}\n    return {acc}\n"
    );
    let text = format!("Write a function to find the sum of the elements of a list that are greater than {k}.");
    let ins = vec![
        format!("[{}, 1, {}]", k + 3, k + 7),
        format!("[{}, {}, 2]", k + 10, k - 4),
        "[]".into(),
        format!("[{k}, {}]", k + 1),
        format!("[{}, {}]", -2, k),
    ];
    (f.into(), text, code, ins)
}

fn fam_count_char(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s, acc) = (c.pick(&["count_char", "char_count", "occurrences"]), c.name(STR_NAMES), c.name(ACC_NAMES));
    let ch = c.pick(&['a', 'e', 'o', 's', 't']);
    let code = format!(
        "def {f}({s}):\n    {acc} = 0\n    for ch in {s}:\n        if ch == '{ch}':\n            {acc} = {acc} + 1\n    return {acc}\n"
    );
    let text = format!("Write a python function to count the occurrences of the character '{ch}' in a given string.");
    let ins = vec![
        format!("'{ch}b{ch}c'"),
        "'xyz'".into(),
        format!("'{ch}{ch}{ch}'"),
        "''".into(),
        format!("'q{ch}'"),
    ];
    (f.into(), text, code, ins)
}

fn fam_max_loop(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, best, x) = (c.pick(&["find_max", "largest", "max_of"]), c.name(LIST_NAMES), c.pick(&["best", "m", "biggest"]), c.name(ELEM_NAMES));
    let code = format!(
        "def {f}({xs}):\n    {best} = {xs}[0]\n    for {x} in {xs}[1:]:\n        if {x} > {best}:\n            {best} = {x}\n    return {best}\n"
    );
    let text = "Write a function to find the largest number in a non-empty list.".to_string();
    let ins = vec!["[1, 5, 3]".into(), "[2, 9, 4, 1]".into(), "[0, 7]".into(), "[5, 1]".into(), "[-3, -1, -2]".into()];
    (f.into(), text, code, ins)
}

fn fam_product_range(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n, acc) = (c.pick(&["factorial", "fact", "product_upto"]), c.name(INT_NAMES), c.name(ACC_NAMES));
    let i = c.pick(&["i", "j"]);
    let code = format!("def {f}({n}):\n    {acc} = 1\n    for {i} in range(2, {n} + 1):\n        {acc} *= {i}\n    return {acc}\n");
    let text = "Write a function to compute the factorial of a non-negative integer.".to_string();
    let ins = vec!["4".into(), "5".into(), "6".into(), "0".into(), "1".into(), "2".into()];
    (f.into(), text, code, ins)
}

fn fam_reverse_words(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s) = (c.pick(&["reverse_words", "flip_words", "words_backwards"]), c.name(STR_NAMES));
    let w = c.pick(&["words", "parts", "tokens"]);
    let code = format!("def {f}({s}):\n    {w} = {s}.split()\n    {w}.reverse()\n    return ' '.join({w})\n");
    let text = "Write a function to reverse the order of words in a given string.".to_string();
    let ins = vec!["'hello big world'".into(), "'a b c'".into(), "'python program'".into(), "'one'".into(), "''".into()];
    (f.into(), text, code, ins)
}

fn fam_is_prime(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["is_prime", "prime_num", "check_prime"]), c.name(INT_NAMES));
    let d = c.pick(&["d", "i", "p"]);
    let code = format!(
        "def {f}({n}):\n    if {n} < 2:\n        return False\n    {d} = 2\n    while {d} * {d} <= {n}:\n        if {n} % {d} == 0:\n            return False\n        {d} += 1\n    return True\n"
    );
    let text = "Write a function to check if the given integer is a prime number.".to_string();
    let ins = vec!["13".into(), "10".into(), "7".into(), "1".into(), "4".into(), "9".into(), "2".into()];
    (f.into(), text, code, ins)
}

fn fam_fib(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["fibonacci", "fib", "nth_fib"]), c.name(INT_NAMES));
    let (a, b) = c.pick(&[("a", "b"), ("p", "q"), ("x", "y")]);
    let code = format!(
        "def {f}({n}):\n    {a}, {b} = 0, 1\n    for _ in range({n}):\n        {a}, {b} = {b}, {a} + {b}\n    return {a}\n"
    );
    let text = "Write a function to find the n-th fibonacci number.".to_string();
    let ins = vec!["7".into(), "10".into(), "8".into(), "0".into(), "1".into(), "2".into()];
    (f.into(), text, code, ins)
}

fn fam_digit_sum(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n, acc) = (c.pick(&["sum_digits", "digit_sum", "add_digits"]), c.name(INT_NAMES), c.name(ACC_NAMES));
    let code = format!(
        "def {f}({n}):\n    {n} = abs({n})\n    {acc} = 0\n    while {n} > 0:\n        {acc} += {n} % 10\n        {n} = {n} // 10\n    return {acc}\n"
    );
    let text = "Write a function to get the sum of the digits of an integer.".to_string();
    let ins = vec!["345".into(), "12".into(), "9876".into(), "0".into(), "-25".into(), "7".into()];
    (f.into(), text, code, ins)
}

fn fam_even_squares(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, x) = (c.pick(&["even_squares", "square_evens", "squares_of_even"]), c.name(LIST_NAMES), c.name(ELEM_NAMES));
    let code = format!("def {f}({xs}):\n    return [{x} * {x} for {x} in {xs} if {x} % 2 == 0]\n");
    let text = "Write a function to return the squares of the even numbers in a list.".to_string();
    let ins = vec!["[1, 2, 3, 4]".into(), "[6, 7]".into(), "[10, 12, 5]".into(), "[]".into(), "[-2, 3]".into(), "[1, 3]".into()];
    (f.into(), text, code, ins)
}

fn fam_dedupe(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, out, x) = (c.pick(&["remove_duplicates", "unique_items", "dedup"]), c.name(LIST_NAMES), c.pick(&["out", "seen", "uniq"]), c.name(ELEM_NAMES));
    let code = format!(
        "def {f}({xs}):\n    {out} = []\n    for {x} in {xs}:\n        if {x} not in {out}:\n            {out}.append({x})\n    return {out}\n"
    );
    let text = "Write a function to remove duplicate elements from a list while keeping the first occurrences in order.".to_string();
    let ins = vec!["[1, 2, 2, 3]".into(), "[4, 4, 4]".into(), "[5, 6, 5, 7]".into(), "[]".into(), "[1]".into()];
    (f.into(), text, code, ins)
}

fn fam_vowels(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s, acc) = (c.pick(&["count_vowels", "vowel_count", "num_vowels"]), c.name(STR_NAMES), c.name(ACC_NAMES));
    let code = format!(
        "def {f}({s}):\n    {acc} = 0\n    for ch in {s}.lower():\n        if ch in 'aeiou':\n            {acc} += 1\n    return {acc}\n"
    );
    let text = "Write a python function to count the number of vowels in a string.".to_string();
    let ins = vec!["'hello'".into(), "'programming'".into(), "'sky'".into(), "'AEIOU'".into(), "''".into()];
    (f.into(), text, code, ins)
}

fn fam_gcd(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let f = c.pick(&["gcd", "greatest_common_divisor", "find_gcd"]);
    let (a, b) = c.pick(&[("a", "b"), ("x", "y"), ("m", "n")]);
    let code = format!("def {f}({a}, {b}):\n    while {b} != 0:\n        {a}, {b} = {b}, {a} % {b}\n    return {a}\n");
    let text = "Write a function to find the greatest common divisor of two positive integers.".to_string();
    let ins = vec!["12, 18".into(), "7, 3".into(), "20, 8".into(), "5, 0".into(), "9, 9".into()];
    (f.into(), text, code, ins)
}

fn fam_palindrome(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s) = (c.pick(&["is_palindrome", "palindrome", "check_palindrome"]), c.name(STR_NAMES));
    let (i, j) = c.pick(&[("i", "j"), ("lo", "hi"), ("left", "right")]);
    let code = format!(
        "def {f}({s}):\n    {i} = 0\n    {j} = len({s}) - 1\n    while {i} < {j}:\n        if {s}[{i}] != {s}[{j}]:\n            return False\n        {i} += 1\n        {j} -= 1\n    return True\n"
    );
    let text = "Write a function to check whether a given string is a palindrome.".to_string();
    let ins = vec!["'racecar'".into(), "'python'".into(), "'abba'".into(), "'ab'".into(), "''".into(), "'abca'".into()];
    (f.into(), text, code, ins)
}

fn fam_second_largest(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs) = (c.pick(&["second_largest", "runner_up", "second_max"]), c.name(LIST_NAMES));
    let u = c.pick(&["uniq", "distinct", "vals"]);
    let code = format!("def {f}({xs}):\n    {u} = sorted(set({xs}))\n    if len({u}) < 2:\n        return None\n    return {u}[-2]\n");
    let text = "Write a function to find the second largest distinct number in a list, or None if it does not exist.".to_string();
    let ins = vec!["[1, 3, 2]".into(), "[10, 20, 20, 5]".into(), "[7, 8]".into(), "[4, 4]".into(), "[]".into()];
    (f.into(), text, code, ins)
}

fn fam_affine(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let f = c.pick(&["compute", "formula", "evaluate"]);
    let (a, b) = c.pick(&[("a", "b"), ("x", "y"), ("l", "w")]);
    let k = c.int(1, 9);
    let m = c.int(2, 4);
    let code = format!("def {f}({a}, {b}):\n    return {m} * {a} + {b} - {k}\n");
    let text = format!("Write a function that returns {m} times the first argument plus the second argument minus {k}.");
    let ins = vec!["3, 4".into(), "10, 2".into(), "5, 5".into(), "0, 0".into(), "-1, 2".into()];
    (f.into(), text, code, ins)
}

fn fam_clamp(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, x) = (c.pick(&["clamp", "bound", "limit"]), c.name(ELEM_NAMES));
    let (lo, hi) = c.pick(&[("lo", "hi"), ("low", "high"), ("a", "b")]);
    let code = format!(
        "def {f}({x}, {lo}, {hi}):\n    if {x} < {lo}:\n        return {lo}\n    if {x} > {hi}:\n        return {hi}\n    return {x}\n"
    );
    let text = "Write a function to clamp a number into the closed range [low, high].".to_string();
    let ins = vec!["5, 0, 10".into(), "-4, 0, 10".into(), "15, 0, 10".into(), "0, 0, 10".into(), "10, 0, 10".into()];
    (f.into(), text, code, ins)
}

fn fam_index_of(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, t) = (c.pick(&["index_of", "find_index", "linear_search"]), c.name(LIST_NAMES), c.pick(&["target", "key", "t"]));
    let i = c.pick(&["i", "idx", "pos"]);
    let code = format!(
        "def {f}({xs}, {t}):\n    for {i} in range(len({xs})):\n        if {xs}[{i}] == {t}:\n            return {i}\n    return -1\n"
    );
    let text = "Write a function to find the index of the first occurrence of a value in a list, or -1 if absent.".to_string();
    let ins = vec!["[4, 5, 6], 5".into(), "[1, 2, 3], 3".into(), "[7, 8], 9".into(), "[2, 2], 2".into(), "[], 1".into()];
    (f.into(), text, code, ins)
}

fn fam_interleave(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let f = c.pick(&["interleave", "merge_alternate", "zip_lists"]);
    let out = c.pick(&["out", "merged", "result"]);
    let code = format!(
        "def {f}(a, b):\n    {out} = []\n    for x, y in zip(a, b):\n        {out}.append(x)\n        {out}.append(y)\n    return {out}\n"
    );
    let text = "Write a function to interleave the elements of two lists of equal length.".to_string();
    let ins = vec!["[1, 2], [3, 4]".into(), "[5], [6]".into(), "[1, 3, 5], [2, 4, 6]".into(), "[], []".into()];
    (f.into(), text, code, ins)
}

fn fam_long_words(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s, acc) = (c.pick(&["count_long_words", "long_words", "words_longer"]), c.name(STR_NAMES), c.name(ACC_NAMES));
    let k = c.int(2, 4);
    let w = c.pick(&["w", "word", "tok"]);
    let code = format!(
        "def {f}({s}):\n    {acc} = 0\n    for {w} in {s}.split():\n        if len({w}) > {k}:\n            {acc} += 1\n    return {acc}\n"
    );
    let text = format!("Write a function to count the words in a sentence that are longer than {k} characters.");
    let ins = vec![
        "'the quick brown fox jumps'".into(),
        "'a bb ccccc dddddd'".into(),
        "'hello world'".into(),
        "''".into(),
        "'abcd abc ab'".into(),
    ];
    (f.into(), text, code, ins)
}

fn fam_running_min(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, x) = (c.pick(&["running_min", "prefix_min", "cumulative_min"]), c.name(LIST_NAMES), c.name(ELEM_NAMES));
    let (out, cur) = c.pick(&[("out", "cur"), ("mins", "low"), ("res", "m")]);
    let code = format!(
        "def {f}({xs}):\n    {out} = []\n    {cur} = None\n    for {x} in {xs}:\n        if {cur} is None or {x} < {cur}:\n            {cur} = {x}\n        {out}.append({cur})\n    return {out}\n"
    );
    let text = "Write a function to return the running minimum of a list.".to_string();
    let ins = vec!["[3, 1, 2]".into(), "[5, 4, 6, 2]".into(), "[9, 8]".into(), "[]".into(), "[1, 1]".into()];
    (f.into(), text, code, ins)
}

fn fam_power_sum(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["power_sum", "sum_of_powers", "series_sum"]), c.name(INT_NAMES));
    let p = c.int(2, 4);
    let i = c.pick(&["i", "j", "t"]);
    let code = format!("def {f}({n}):\n    return sum({i} ** {p} for {i} in range(1, {n} + 1))\n");
    let text = format!("Write a python function to find the sum of the {p}-th powers of the first n natural numbers.");
    let ins = vec!["3".into(), "4".into(), "5".into(), "0".into(), "1".into()];
    (f.into(), text, code, ins)
}

fn fam_binary(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["to_binary", "binary_string", "decimal_to_binary"]), c.name(INT_NAMES));
    let bits = c.pick(&["bits", "digits", "out"]);
    let code = format!(
        "def {f}({n}):\n    if {n} == 0:\n        return '0'\n    {bits} = ''\n    while {n} > 0:\n        {bits} = str({n} % 2) + {bits}\n        {n} //= 2\n    return {bits}\n"
    );
    let text = "Write a function to convert a non-negative integer to its binary representation as a string.".to_string();
    let ins = vec!["5".into(), "8".into(), "13".into(), "0".into(), "1".into(), "2".into()];
    (f.into(), text, code, ins)
}

fn fam_is_sorted(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs) = (c.pick(&["is_sorted", "check_sorted", "non_decreasing"]), c.name(LIST_NAMES));
    let i = c.pick(&["i", "k", "idx"]);
    let code = format!(
        "def {f}({xs}):\n    for {i} in range(1, len({xs})):\n        if {xs}[{i}] < {xs}[{i} - 1]:\n            return False\n    return True\n"
    );
    let text = "Write a function to check whether a list is sorted in non-decreasing order.".to_string();
    let ins = vec!["[1, 2, 3]".into(), "[3, 1, 2]".into(), "[1, 5, 9, 12]".into(), "[2, 2]".into(), "[2, 1]".into(), "[]".into()];
    (f.into(), text, code, ins)
}

fn fam_most_common(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, x) = (c.pick(&["most_frequent", "mode_of", "most_common"]), c.name(LIST_NAMES), c.name(ELEM_NAMES));
    let counts = c.pick(&["counts", "freq", "tally"]);
    let code = format!(
        "def {f}({xs}):\n    {counts} = {{}}\n    for {x} in {xs}:\n        {counts}[{x}] = {counts}.get({x}, 0) + 1\n    return max({counts}, key={counts}.get)\n"
    );
    let text = "Write a function to find the most frequent element of a non-empty list.".to_string();
    let ins = vec!["[1, 2, 2, 3]".into(), "[4, 4, 5, 5, 5]".into(), "[7, 8, 8]".into(), "[1]".into(), "[3, 3, 1]".into()];
    (f.into(), text, code, ins)
}

fn fam_triangle(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["triangle_number", "tri_num", "nth_triangle"]), c.name(INT_NAMES));
    let code = format!("def {f}({n}):\n    return {n} * ({n} + 1) // 2\n");
    let text = "Write a function to find the n-th triangular number.".to_string();
    let ins = vec!["4".into(), "10".into(), "7".into(), "0".into(), "1".into()];
    (f.into(), text, code, ins)
}

fn fam_divisible(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, x) = (c.pick(&["divisible_by", "filter_multiples", "multiples"]), c.name(LIST_NAMES), c.name(ELEM_NAMES));
    let k = c.int(2, 5);
    let code = format!("def {f}({xs}):\n    return list(filter(lambda {x}: {x} % {k} == 0, {xs}))\n");
    let text = format!("Write a function to filter the numbers of a list that are divisible by {k} using a lambda.");
    let ins = vec![
        format!("[{}, {}, {}]", k, k + 1, 3 * k),
        format!("[{}, 1, {}]", 2 * k, 4 * k),
        "[1, 11, 13]".into(),
        "[]".into(),
        "[0, -1]".into(),
    ];
    (f.into(), text, code, ins)
}

fn fam_alt_diff(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs) = (c.pick(&["alternate_diff", "even_odd_diff", "position_diff"]), c.name(LIST_NAMES));
    let (e, o) = c.pick(&[("even", "odd"), ("evens", "odds"), ("a", "b")]);
    let code = format!(
        "def {f}({xs}):\n    {e} = sum({xs}[0::2])\n    {o} = sum({xs}[1::2])\n    return abs({e} - {o})\n"
    );
    let text = "Write a python function to find the absolute difference between the sums of elements at even and odd positions.".to_string();
    let ins = vec!["[1, 2, 3, 4]".into(), "[10, 1, 10]".into(), "[5, 9, 2, 8, 1]".into(), "[]".into(), "[3]".into()];
    (f.into(), text, code, ins)
}

fn fam_collatz(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, n) = (c.pick(&["collatz_steps", "steps_to_one", "hailstone_len"]), c.name(INT_NAMES));
    let steps = c.pick(&["steps", "count", "c"]);
    let code = format!(
        "def {f}({n}):\n    {steps} = 0\n    while {n} > 1:\n        if {n} % 2 == 0:\n            {n} = {n} // 2\n        else:\n            {n} = 3 * {n} + 1\n        {steps} += 1\n    return {steps}\n"
    );
    let text = "Write a function to count the steps of the Collatz sequence needed to reach 1.".to_string();
    let ins = vec!["6".into(), "7".into(), "12".into(), "1".into(), "2".into(), "3".into()];
    (f.into(), text, code, ins)
}

fn fam_capitalize(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s) = (c.pick(&["capitalize_words", "title_case", "cap_first"]), c.name(STR_NAMES));
    let w = c.pick(&["w", "word", "part"]);
    let code = format!("def {f}({s}):\n    return ' '.join({w}[:1].upper() + {w}[1:] for {w} in {s}.split(' '))\n");
    let text = "Write a function to capitalize the first letter of every word in a string.".to_string();
    let ins = vec!["'hello world'".into(), "'python is fun'".into(), "'a b'".into(), "''".into(), "'x'".into()];
    (f.into(), text, code, ins)
}

fn fam_count_neg(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, x) = (c.pick(&["count_negatives", "neg_count", "num_negative"]), c.name(LIST_NAMES), c.name(ELEM_NAMES));
    let code = format!("def {f}({xs}):\n    return len([{x} for {x} in {xs} if {x} < 0])\n");
    let text = "Write a python function to count the negative numbers in a list.".to_string();
    let ins = vec!["[-1, 2, -3]".into(), "[4, 5]".into(), "[-7, -8, 9, -10]".into(), "[0]".into(), "[]".into()];
    (f.into(), text, code, ins)
}

fn fam_min_max_diff(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs) = (c.pick(&["range_of", "spread", "max_min_diff"]), c.name(LIST_NAMES));
    let (lo, hi) = c.pick(&[("lo", "hi"), ("low", "high"), ("small", "big")]);
    let code = format!("def {f}({xs}):\n    {lo} = min({xs})\n    {hi} = max({xs})\n    return {hi} - {lo}\n");
    let text = "Write a python function to find the difference between the largest and smallest value in a list.".to_string();
    let ins = vec!["[1, 5, 3]".into(), "[10, 2, 8]".into(), "[4, 9, 6, 1]".into(), "[7]".into(), "[-2, 2]".into()];
    (f.into(), text, code, ins)
}

fn fam_sign(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, x) = (c.pick(&["sign", "signum", "sign_of"]), c.name(ELEM_NAMES));
    let code = format!(
        "def {f}({x}):\n    if {x} > 0:\n        return 1\n    elif {x} < 0:\n        return -1\n    return 0\n"
    );
    let text = "Write a function to return the sign of a number: 1, -1 or 0.".to_string();
    let ins = vec!["5".into(), "12".into(), "3".into(), "0".into(), "-4".into()];
    (f.into(), text, code, ins)
}

fn fam_abs_sum(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, xs, acc, x) = (c.pick(&["abs_sum", "sum_abs", "magnitude_sum"]), c.name(LIST_NAMES), c.name(ACC_NAMES), c.name(ELEM_NAMES));
    let code = format!(
        "def {f}({xs}):\n    {acc} = 0\n    for {x} in {xs}:\n        if {x} < 0:\n            {x} = -{x}\n        {acc} += {x}\n    return {acc}\n"
    );
    let text = "Write a function to find the sum of the absolute values of a list of numbers.".to_string();
    let ins = vec!["[1, 2, 3]".into(), "[4, 5]".into(), "[10, 0, 6]".into(), "[-1, 2]".into(), "[-3, -4]".into()];
    (f.into(), text, code, ins)
}

fn fam_replace_char(c: &mut Ctx<'_>) -> (String, String, String, Vec<String>) {
    let (f, s) = (c.pick(&["replace_spaces", "fill_blanks", "swap_spaces"]), c.name(STR_NAMES));
    let ch = c.pick(&['-', '_', '*']);
    let out = c.pick(&["out", "chars", "res"]);
    let code = format!(
        "def {f}({s}):\n    {out} = ''\n    for ch in {s}:\n        if ch == ' ':\n            {out} += '{ch}'\n        else:\n            {out} += ch\n    return {out}\n"
    );
    let text = format!("Write a function to replace every space in a string with the character '{ch}'.");
    let ins = vec!["'a b c'".into(), "'hello world'".into(), "'no spaces'".into(), "'xyz'".into(), "''".into()];
    (f.into(), text, code, ins)
}

const FAMILIES: &[Family] = &[
    fam_sum_greater,
    fam_count_char,
    fam_max_loop,
    fam_product_range,
    fam_reverse_words,
    fam_is_prime,
    fam_fib,
    fam_digit_sum,
    fam_even_squares,
    fam_dedupe,
    fam_vowels,
    fam_gcd,
    fam_palindrome,
    fam_second_largest,
    fam_affine,
    fam_clamp,
    fam_index_of,
    fam_interleave,
    fam_long_words,
    fam_running_min,
    fam_power_sum,
    fam_binary,
    fam_is_sorted,
    fam_most_common,
    fam_triangle,
    fam_divisible,
    fam_alt_diff,
    fam_collatz,
    fam_capitalize,
    fam_count_neg,
    fam_min_max_diff,
    fam_sign,
    fam_abs_sum,
    fam_replace_char,
];

pub fn family_count() -> usize {
    FAMILIES.len()
}

/// Re-indents with tabs or two spaces, or switches to CRLF, for a small
/// fraction of problems, as raw corpora do.
fn restyle(code: String, rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..20) {
        0 => code
            .lines()
            .map(|l| {
                let body = l.trim_start_matches(' ');
                "\t".repeat((l.len() - body.len()) / 4) + body
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
        1 => code
            .lines()
            .map(|l| {
                let body = l.trim_start_matches(' ');
                " ".repeat((l.len() - body.len()) / 2) + body
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
        2 => code.replace('\n', "\r\n"),
        _ => code,
    }
}

/// Drafts for ids `1..=count`, family chosen round-robin with a seeded
/// offset so every split sees every family.
pub fn drafts(count: u32, seed: u64) -> Vec<Draft> {
    (1..=count)
        .map(|id| {
            let mut rng = seeded_rng(seed, u64::from(id));
            let fam = FAMILIES[(id as usize * 7 + (seed as usize % FAMILIES.len())) % FAMILIES.len()];
            let (fname, text, code, inputs) = fam(&mut Ctx { rng: &mut rng });
            let code = restyle(code, &mut rng);
            Draft { task_id: id, text, fname, code, inputs }
        })
        .collect()
}

const PROBE: &str = r#"
import json
data = json.loads(DATA)
out = []
for d in data:
    ns = {}
    exec(d["code"].replace("\r\n", "\n"), ns)
    fn = ns[d["fname"]]
    row = []
    for args in d["inputs"]:
        try:
            v = eval("fn(" + args + ")", {"fn": fn})
            r = repr(v)
            row.append(r if eval(r) == v else None)
        except Exception:
            row.append(None)
    out.append(row)
print(json.dumps(out))
"#;

/// Runs each reference on its inputs and returns `repr` of every output,
/// `None` where the call raised or the repr does not round-trip.
pub fn probe_outputs(sandbox: &Sandbox, drafts: &[Draft]) -> Result<Vec<Vec<Option<String>>>, SynthError> {
    let payload = serde_json::to_string(drafts).expect("drafts serialize");
    let script = format!("DATA = {}\n{}", serde_json::to_string(&payload).expect("string serializes"), PROBE);
    let limits = ResourceLimits::default().with_wall_time(std::time::Duration::from_secs(60));
    let run = sandbox.run_script(&script, &limits)?;
    if run.code() != 0 {
        return Err(SynthError::Probe(run.stderr));
    }
    serde_json::from_str(run.stdout.trim()).map_err(|e| SynthError::Probe(e.to_string()))
}

/// Generates `count` corpus records. Tests are the first [`SEED_TESTS`]
/// inputs with a defined output, taken from a seeded shuffle of the draft's
/// inputs; the shuffle is redrawn while (description, tests) repeats an
/// earlier record, so every prompt is distinct whenever the pool allows.
pub fn generate(sandbox: &Sandbox, count: u32, seed: u64) -> Result<Vec<CorpusRecord>, SynthError> {
    let drafts = drafts(count, seed);
    let outputs = probe_outputs(sandbox, &drafts)?;
    let mut seen: HashSet<(String, Vec<String>)> = HashSet::new();
    Ok(drafts
        .into_iter()
        .zip(outputs)
        .map(|(d, outs)| {
            let defined: Vec<String> = d
                .inputs
                .iter()
                .zip(outs)
                .filter_map(|(args, out)| out.map(|o| format!("assert {}({args}) == {o}", d.fname)))
                .collect();
            let mut rng = seeded_rng(seed, 0x7465_7374 ^ u64::from(d.task_id));
            let mut test_list: Vec<String> = defined.iter().take(SEED_TESTS).cloned().collect();
            for _ in 0..MAX_RESHUFFLES {
                if !seen.contains(&(d.text.clone(), test_list.clone())) {
                    break;
                }
                test_list = defined.choose_multiple(&mut rng, SEED_TESTS.min(defined.len())).cloned().collect();
            }
            seen.insert((d.text.clone(), test_list.clone()));
            CorpusRecord { task_id: d.task_id, text: d.text, code: d.code, test_list, split: None, test_origin: None }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::normalize;

    #[test]
    fn drafts_are_deterministic() {
        assert_eq!(drafts(40, 3), drafts(40, 3));
        assert_ne!(drafts(40, 3), drafts(40, 4));
    }

    #[test]
    fn every_family_normalizes() {
        for d in drafts(200, 0) {
            let n = normalize(&d.code).unwrap();
            assert!(n.starts_with("def "), "{n}");
            assert!(d.inputs.len() > SEED_TESTS);
        }
    }

    #[test]
    fn references_pass_generated_tests() {
        let sb = Sandbox::from_env().unwrap();
        let recs = generate(&sb, family_count() as u32, 1).unwrap();
        for r in &recs {
            assert_eq!(r.test_list.len(), SEED_TESTS, "{}", r.code);
            let tests: Vec<_> = r.test_list.iter().map(crate::corpus::TestCase::seed).collect();
            let v = sb.verify(&normalize(&r.code).unwrap(), &tests, &ResourceLimits::default()).unwrap();
            assert!(v.passed(), "{} {:?}", r.code, v);
        }
    }

    #[test]
    fn prompts_are_distinct() {
        let sb = Sandbox::from_env().unwrap();
        let recs = generate(&sb, 974, 0).unwrap();
        let keys: HashSet<(String, Vec<String>)> = recs.iter().map(|r| (r.text.clone(), r.test_list.clone())).collect();
        assert_eq!(keys.len(), recs.len());
    }
}

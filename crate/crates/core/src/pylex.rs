//! A single-line Python lexer, sufficient for locating operators, names,
//! literals and bracket depth without touching string contents.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokKind {
    Name,
    Number,
    Str,
    Op,
    Comment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tok {
    pub kind: TokKind,
    pub start: usize,
    pub end: usize,
}

impl Tok {
    pub fn text<'a>(&self, line: &'a str) -> &'a str {
        &line[self.start..self.end]
    }
}

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

pub fn is_keyword(s: &str) -> bool {
    KEYWORDS.contains(&s)
}

const OPS3: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const OPS2: &[&str] = &[
    "->", "**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
    ":=", "<<", ">>", "@=",
];

const STRING_PREFIXES: &[&str] =
    &["r", "u", "b", "f", "br", "rb", "fr", "rf", "R", "U", "B", "F", "Br", "bR", "BR", "Rb", "rB", "RB"];

pub fn lex_line(line: &str) -> Vec<Tok> {
    let bytes = line.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b' ' || c == b'\t' {
            i += 1;
            continue;
        }
        if c == b'#' {
            toks.push(Tok { kind: TokKind::Comment, start: i, end: bytes.len() });
            break;
        }
        if c == b'\'' || c == b'"' {
            let end = scan_string(bytes, i);
            toks.push(Tok { kind: TokKind::Str, start: i, end });
            i = end;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 {
            let mut j = i;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_' || bytes[j] >= 0x80)
            {
                j += 1;
            }
            if j < bytes.len()
                && (bytes[j] == b'\'' || bytes[j] == b'"')
                && STRING_PREFIXES.contains(&&line[i..j])
            {
                let end = scan_string(bytes, j);
                toks.push(Tok { kind: TokKind::Str, start: i, end });
                i = end;
                continue;
            }
            toks.push(Tok { kind: TokKind::Name, start: i, end: j });
            i = j;
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let mut j = i + 1;
            while j < bytes.len() {
                let d = bytes[j];
                let exp_sign = (d == b'+' || d == b'-') && matches!(bytes[j - 1], b'e' | b'E')
                    && !line[i..j].starts_with("0x");
                if d.is_ascii_alphanumeric() || d == b'_' || d == b'.' || exp_sign {
                    j += 1;
                } else {
                    break;
                }
            }
            toks.push(Tok { kind: TokKind::Number, start: i, end: j });
            i = j;
            continue;
        }
        let rest = &line[i..];
        let len = OPS3
            .iter()
            .find(|op| rest.starts_with(**op))
            .or_else(|| OPS2.iter().find(|op| rest.starts_with(**op)))
            .map(|op| op.len())
            .unwrap_or_else(|| rest.chars().next().map_or(1, char::len_utf8));
        toks.push(Tok { kind: TokKind::Op, start: i, end: i + len });
        i += len;
    }
    toks
}

fn scan_string(bytes: &[u8], open: usize) -> usize {
    let quote = bytes[open];
    let triple = bytes.len() >= open + 3 && bytes[open + 1] == quote && bytes[open + 2] == quote;
    let mut j = if triple { open + 3 } else { open + 1 };
    while j < bytes.len() {
        if bytes[j] == b'\\' {
            j += 2;
            continue;
        }
        if bytes[j] == quote {
            if !triple {
                return j + 1;
            }
            if bytes.len() >= j + 3 && bytes[j + 1] == quote && bytes[j + 2] == quote {
                return j + 3;
            }
        }
        j += 1;
    }
    bytes.len()
}

/// Bracket depth *before* each token.
pub fn depths(line: &str, toks: &[Tok]) -> Vec<i32> {
    let mut d = 0;
    toks.iter()
        .map(|t| {
            let before = d;
            if t.kind == TokKind::Op {
                match t.text(line) {
                    "(" | "[" | "{" => d += 1,
                    ")" | "]" | "}" => d -= 1,
                    _ => {}
                }
            }
            before
        })
        .collect()
}

/// Whether the token ends an operand, so that a following `+`/`-` is binary.
pub fn ends_operand(line: &str, tok: &Tok) -> bool {
    match tok.kind {
        TokKind::Number | TokKind::Str => true,
        TokKind::Name => {
            let t = tok.text(line);
            !is_keyword(t) || matches!(t, "True" | "False" | "None")
        }
        TokKind::Op => matches!(tok.text(line), ")" | "]" | "}"),
        TokKind::Comment => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(line: &str) -> Vec<&str> {
        lex_line(line).iter().map(|t| t.text(line)).collect()
    }

    #[test]
    fn basic_tokens() {
        assert_eq!(texts("x += a//2 # hi"), vec!["x", "+=", "a", "//", "2", "# hi"]);
        assert_eq!(texts("if s[i] <= 'a+b':"), vec!["if", "s", "[", "i", "]", "<=", "'a+b'", ":"]);
    }

    #[test]
    fn string_prefixes_and_escapes() {
        assert_eq!(texts(r#"r"\d+" + f'{x}\'y'"#), vec![r#"r"\d+""#, "+", r"f'{x}\'y'"]);
        assert_eq!(texts("'''a'b''' + 1"), vec!["'''a'b'''", "+", "1"]);
    }

    #[test]
    fn numbers() {
        assert_eq!(texts("1e-5+0x1f-3.5"), vec!["1e-5", "+", "0x1f", "-", "3.5"]);
    }

    #[test]
    fn depth_tracking() {
        let line = "f(a, (b + c)) + d";
        let toks = lex_line(line);
        let d = depths(line, &toks);
        let plus: Vec<i32> = toks
            .iter()
            .zip(&d)
            .filter(|(t, _)| t.text(line) == "+")
            .map(|(_, d)| *d)
            .collect();
        assert_eq!(plus, vec![2, 0]);
    }
}

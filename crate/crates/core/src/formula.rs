//! Parser for the hierarchical model formula mini-language.
//!
//! ```text
//! formula  := ident '~' terms
//! terms    := term (('+' term) | ('-' '1'))*
//! term     := '1' | '0' | '-' '1' | ident | 'v_fe' '(' ident ')' | '(' slot '|' group ')'
//! slot     := ('1' | '0' | '-' '1') ('+' ident)* | ident ('+' ident)*
//! group    := ident (':' ident)*
//! ```
//!
//! Whitespace is insignificant. `:` binds tighter than `|`, and top-level terms are
//! separated by `+` outside parentheses.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("formula error at byte {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

impl ParseError {
    fn new(offset: usize, message: impl Into<String>) -> Self {
        ParseError { offset, message: message.into() }
    }
}

/// How the global intercept of the unregularized block was requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Intercept {
    /// Nothing written: an intercept is added whenever the model has any
    /// unregularized or `v_fe` term.
    #[default]
    Default,
    /// `1` written at top level.
    Explicit,
    /// `0` or `-1` written at top level.
    Suppressed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomEffectTerm {
    pub inner_terms: Vec<String>,
    pub include_intercept: bool,
    pub group_expr: Vec<String>,
}

impl RandomEffectTerm {
    /// Per-level dimension `d_j`.
    pub fn dim(&self) -> usize {
        self.inner_terms.len() + usize::from(self.include_intercept)
    }

    /// Key used to canonicalize solve order: group names, then inner terms.
    pub fn canonical_key(&self) -> (Vec<String>, bool, Vec<String>) {
        (self.group_expr.clone(), !self.include_intercept, self.inner_terms.clone())
    }

    pub fn group_label(&self) -> String {
        self.group_expr.join(":")
    }
}

impl fmt::Display for RandomEffectTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut slot = vec![if self.include_intercept { "1" } else { "0" }.to_string()];
        slot.extend(self.inner_terms.iter().cloned());
        write!(f, "({} | {})", slot.join(" + "), self.group_expr.join(" : "))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormulaAst {
    pub response: String,
    pub intercept: Intercept,
    pub fixed_terms: Vec<String>,
    pub re_terms: Vec<RandomEffectTerm>,
    pub fe_terms: Vec<String>,
}

impl PartialEq for FormulaAst {
    fn eq(&self, other: &Self) -> bool {
        fn set<T: Ord + Clone>(v: &[T]) -> BTreeSet<T> {
            v.iter().cloned().collect()
        }
        let re = |a: &FormulaAst| {
            a.re_terms.iter().map(|t| (t.group_expr.clone(), t.include_intercept, t.inner_terms.clone())).collect::<BTreeSet<_>>()
        };
        self.response == other.response
            && self.intercept == other.intercept
            && set(&self.fixed_terms) == set(&other.fixed_terms)
            && set(&self.fe_terms) == set(&other.fe_terms)
            && re(self) == re(other)
    }
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        match self.intercept {
            Intercept::Default => {}
            Intercept::Explicit => parts.push("1".into()),
            Intercept::Suppressed => parts.push("0".into()),
        }
        parts.extend(self.fe_terms.iter().map(|v| format!("v_fe({v})")));
        parts.extend(self.fixed_terms.iter().cloned());
        parts.extend(self.re_terms.iter().map(|t| t.to_string()));
        write!(f, "{} ~ {}", self.response, parts.join(" + "))
    }
}

impl FormulaAst {
    /// Every variable name the formula references on the right-hand side.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.fixed_terms.iter().cloned().collect();
        out.extend(self.fe_terms.iter().cloned());
        for t in &self.re_terms {
            out.extend(t.inner_terms.iter().cloned());
            out.extend(t.group_expr.iter().cloned());
        }
        out
    }

    /// Whether the unregularized block carries a global intercept column.
    pub fn has_intercept(&self) -> bool {
        match self.intercept {
            Intercept::Explicit => true,
            Intercept::Suppressed => false,
            Intercept::Default => !self.fixed_terms.is_empty() || !self.fe_terms.is_empty(),
        }
    }

    /// Same model with random-effect terms sorted on their canonical key.
    pub fn canonicalized(&self) -> FormulaAst {
        let mut out = self.clone();
        out.re_terms.sort_by_key(|t| t.canonical_key());
        out
    }

    fn validate(&self, src_len: usize) -> Result<(), ParseError> {
        if self.fixed_terms.is_empty()
            && self.re_terms.is_empty()
            && self.fe_terms.is_empty()
            && self.intercept != Intercept::Explicit
        {
            return Err(ParseError::new(src_len, "formula has no terms"));
        }
        let fixed: BTreeSet<&String> = self.fixed_terms.iter().collect();
        if fixed.len() != self.fixed_terms.len() {
            return Err(ParseError::new(src_len, "duplicate unregularized term"));
        }
        if let Some(v) = self.fe_terms.iter().find(|v| fixed.contains(v)) {
            return Err(ParseError::new(src_len, format!("`{v}` appears both as a term and inside v_fe(...)")));
        }
        let fe: BTreeSet<&String> = self.fe_terms.iter().collect();
        if fe.len() != self.fe_terms.len() {
            return Err(ParseError::new(src_len, "duplicate v_fe(...) term"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    Minus,
    Colon,
    Bar,
    LParen,
    RParen,
    Comma,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Number(s) => format!("number `{s}`"),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Bar => "`|`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let mut chars = src.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let single = match c {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            ':' => Some(Tok::Colon),
            '|' => Some(Tok::Bar),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = single {
            chars.next();
            out.push((pos, t));
            continue;
        }
        if is_ident_start(c) {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if !is_ident_char(c) {
                    break;
                }
                s.push(c);
                chars.next();
            }
            out.push((pos, Tok::Ident(s)));
        } else if c.is_ascii_digit() {
            let mut s = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if !c.is_ascii_digit() {
                    break;
                }
                s.push(c);
                chars.next();
            }
            out.push((pos, Tok::Number(s)));
        } else {
            return Err(ParseError::new(pos, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        match self.peek() {
            Some(t) => ParseError::new(self.offset(), format!("expected {expected}, found {}", t.describe())),
            None => ParseError::new(self.end, format!("expected {expected}, found end of input")),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(expected))
        }
    }

    fn ident(&mut self, expected: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(expected)),
        }
    }

    /// Parses `1`, `0`, or `-1`; returns `Some(true)` for an intercept request.
    fn intercept_literal(&mut self) -> Result<Option<bool>, ParseError> {
        match self.peek() {
            Some(Tok::Number(n)) if n == "1" => {
                self.pos += 1;
                Ok(Some(true))
            }
            Some(Tok::Number(n)) if n == "0" => {
                self.pos += 1;
                Ok(Some(false))
            }
            Some(Tok::Number(_)) => Err(ParseError::new(self.offset(), "only `0` and `1` are valid numeric terms")),
            Some(Tok::Minus) => {
                self.pos += 1;
                match self.next() {
                    Some(Tok::Number(n)) if n == "1" => Ok(Some(false)),
                    _ => {
                        self.pos -= 1;
                        Err(self.unexpected("`1` after `-`"))
                    }
                }
            }
            _ => Ok(None),
        }
    }

    fn group(&mut self) -> Result<Vec<String>, ParseError> {
        if matches!(self.peek(), Some(Tok::RParen) | None) {
            return Err(ParseError::new(self.offset(), "empty group expression after `|`"));
        }
        let mut out = vec![self.ident("grouping variable")?];
        while self.peek() == Some(&Tok::Colon) {
            self.pos += 1;
            out.push(self.ident("grouping variable after `:`")?);
        }
        Ok(out)
    }

    fn random_effect(&mut self) -> Result<RandomEffectTerm, ParseError> {
        let open = self.offset();
        self.expect(Tok::LParen, "`(`")?;
        let mut include_intercept = true;
        let mut inner_terms = Vec::new();
        match self.intercept_literal()? {
            Some(flag) => include_intercept = flag,
            None => inner_terms.push(self.ident("`1`, `0`, or a covariate name")?),
        }
        while self.peek() == Some(&Tok::Plus) {
            self.pos += 1;
            if matches!(self.peek(), Some(Tok::Number(_)) | Some(Tok::Minus)) {
                return Err(ParseError::new(self.offset(), "intercept literal must open the random-effect slot"));
            }
            inner_terms.push(self.ident("covariate name")?);
        }
        self.expect(Tok::Bar, "`|` or `+`")?;
        let group_expr = self.group()?;
        self.expect(Tok::RParen, "`)` or `:`")?;
        if !include_intercept && inner_terms.is_empty() {
            return Err(ParseError::new(open, "random-effect term without intercept needs at least one covariate"));
        }
        Ok(RandomEffectTerm { inner_terms, include_intercept, group_expr })
    }

    fn fixed_effect(&mut self) -> Result<String, ParseError> {
        let at = self.offset();
        self.expect(Tok::LParen, "`(` after v_fe")?;
        let mut args = Vec::new();
        if self.peek() != Some(&Tok::RParen) {
            args.push(self.ident("variable name inside v_fe(...)")?);
            while self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
                args.push(self.ident("variable name inside v_fe(...)")?);
            }
        }
        self.expect(Tok::RParen, "`)` closing v_fe(...)")?;
        if args.len() != 1 {
            return Err(ParseError::new(at, format!("v_fe(...) takes exactly one argument, got {}", args.len())));
        }
        Ok(args.pop().unwrap_or_default())
    }

    fn formula(&mut self) -> Result<FormulaAst, ParseError> {
        let response = self.ident("response variable")?;
        if let Some(Tok::Ident(_)) = self.peek() {
            return Err(ParseError::new(self.offset(), "duplicate response: only one variable may precede `~`"));
        }
        self.expect(Tok::Tilde, "`~`")?;
        let mut ast = FormulaAst {
            response,
            intercept: Intercept::Default,
            fixed_terms: Vec::new(),
            re_terms: Vec::new(),
            fe_terms: Vec::new(),
        };
        let mut first = true;
        loop {
            let negated = if first {
                false
            } else {
                match self.peek() {
                    Some(Tok::Plus) => {
                        self.pos += 1;
                        false
                    }
                    Some(Tok::Minus) => true,
                    None => break,
                    Some(Tok::Tilde) => {
                        return Err(ParseError::new(self.offset(), "duplicate response: second `~` in formula"))
                    }
                    _ => return Err(self.unexpected("`+` or end of formula")),
                }
            };
            first = false;
            if negated {
                // `- 1`
                match self.intercept_literal()? {
                    Some(false) => ast.intercept = Intercept::Suppressed,
                    _ => return Err(ParseError::new(self.offset(), "only `- 1` is supported for term removal")),
                }
                continue;
            }
            match self.peek() {
                Some(Tok::LParen) => ast.re_terms.push(self.random_effect()?),
                Some(Tok::Ident(name)) if name == "v_fe" => {
                    self.pos += 1;
                    ast.fe_terms.push(self.fixed_effect()?);
                }
                Some(Tok::Ident(_)) => {
                    let name = self.ident("term")?;
                    if self.peek() == Some(&Tok::LParen) {
                        return Err(ParseError::new(self.offset(), format!("unknown function `{name}`")));
                    }
                    if self.peek() == Some(&Tok::Colon) {
                        return Err(ParseError::new(self.offset(), "interactions are only supported in grouping expressions"));
                    }
                    ast.fixed_terms.push(name);
                }
                Some(Tok::Number(_)) | Some(Tok::Minus) => match self.intercept_literal()? {
                    Some(true) => ast.intercept = Intercept::Explicit,
                    Some(false) => ast.intercept = Intercept::Suppressed,
                    None => return Err(self.unexpected("term")),
                },
                Some(Tok::Tilde) => {
                    return Err(ParseError::new(self.offset(), "duplicate response: second `~` in formula"))
                }
                _ => return Err(self.unexpected("term")),
            }
        }
        ast.validate(self.end)?;
        Ok(ast)
    }
}

/// Parse a model formula such as `response ~ v_fe(case_id) + choice + (1 | race : choice)`.
pub fn parse_formula(src: &str) -> Result<FormulaAst, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, end: src.len() };
    p.formula()
}

/// Byte-level entry point; invalid UTF-8 is reported as a parse error.
pub fn parse_formula_bytes(src: &[u8]) -> Result<FormulaAst, ParseError> {
    match std::str::from_utf8(src) {
        Ok(s) => parse_formula(s),
        Err(e) => Err(ParseError::new(e.valid_up_to(), "formula is not valid UTF-8")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn re(inner: &[&str], intercept: bool, group: &[&str]) -> RandomEffectTerm {
        RandomEffectTerm {
            inner_terms: inner.iter().map(|s| s.to_string()).collect(),
            include_intercept: intercept,
            group_expr: group.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn parses_reference_model() {
        let ast = parse_formula(
            "response ~ v_fe(case_id) + choice + lag_copart + (0 + demvote | policy) + (1 | race : choice)",
        )
        .unwrap();
        assert_eq!(ast.response, "response");
        assert_eq!(ast.fe_terms, vec!["case_id"]);
        assert_eq!(ast.fixed_terms, vec!["choice", "lag_copart"]);
        assert_eq!(ast.re_terms, vec![re(&["demvote"], false, &["policy"]), re(&[], true, &["race", "choice"])]);
    }

    #[test]
    fn minimal_random_intercept() {
        let ast = parse_formula("y ~ (1 | g)").unwrap();
        assert_eq!(ast.re_terms, vec![re(&[], true, &["g"])]);
        assert_eq!(ast.re_terms[0].dim(), 1);
        assert!(!ast.has_intercept());
    }

    #[test]
    fn random_slope() {
        let ast = parse_formula("y ~ (1 + x | g)").unwrap();
        assert_eq!(ast.re_terms, vec![re(&["x"], true, &["g"])]);
        assert_eq!(ast.re_terms[0].dim(), 2);
    }

    #[test]
    fn minus_one_suppresses_intercept() {
        let a = parse_formula("y ~ (-1 + x | g)").unwrap();
        let b = parse_formula("y ~ (0 + x | g)").unwrap();
        assert_eq!(a, b);
        let c = parse_formula("y ~ x - 1").unwrap();
        assert_eq!(c.intercept, Intercept::Suppressed);
        assert!(!c.has_intercept());
        let d = parse_formula("y ~ 0 + x").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn whitespace_insensitive() {
        let a = parse_formula("y~x+(1|a:b)+v_fe(id)").unwrap();
        let b = parse_formula("  y  ~ x +  ( 1 |  a : b ) + v_fe( id )  ").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn implicit_slot_intercept() {
        let ast = parse_formula("y ~ (x | g)").unwrap();
        assert_eq!(ast.re_terms, vec![re(&["x"], true, &["g"])]);
    }

    #[test]
    fn multiple_fe_terms() {
        let ast = parse_formula("y ~ v_fe(a) + v_fe(b)").unwrap();
        assert_eq!(ast.fe_terms, vec!["a", "b"]);
        assert!(ast.has_intercept());
    }

    #[test]
    fn error_cases() {
        let e = parse_formula("y ~ (1 | )").unwrap_err();
        assert!(e.message.contains("empty group"), "{e}");
        assert_eq!(e.offset, 9);

        let e = parse_formula("y ~ v_fe(a, b)").unwrap_err();
        assert!(e.message.contains("exactly one"), "{e}");
        let e = parse_formula("y ~ v_fe()").unwrap_err();
        assert!(e.message.contains("exactly one"), "{e}");

        let e = parse_formula("y ~ x ~ z").unwrap_err();
        assert!(e.message.contains("duplicate response"), "{e}");
        let e = parse_formula("y z ~ x").unwrap_err();
        assert!(e.message.contains("duplicate response"), "{e}");

        let e = parse_formula("y ~ x + ").unwrap_err();
        assert_eq!(e.offset, 8);
        assert!(e.message.contains("expected term"), "{e}");

        assert!(parse_formula("y ~ x + v_fe(x)").is_err());
        assert!(parse_formula("y ~ (0 | g)").is_err());
        assert!(parse_formula("y ~ (1 | a : )").is_err());
        assert!(parse_formula("y ~ a:b").is_err());
        assert!(parse_formula("y ~ (1 + (x) | g)").is_err());
        assert!(parse_formula("y ~ 0").is_err());
        assert!(parse_formula("").is_err());
        assert!(parse_formula("y ~ x * z").is_err());
    }

    #[test]
    fn equality_ignores_term_order() {
        let a = parse_formula("y ~ a + b + (1 | g) + (0 + x | h)").unwrap();
        let b = parse_formula("y ~ (0 + x | h) + b + (1 | g) + a").unwrap();
        assert_eq!(a, b);
        assert_ne!(a.fixed_terms, b.fixed_terms);
    }

    #[test]
    fn canonical_order_is_stable() {
        let a = parse_formula("y ~ (1 | b) + (1 | a : c) + (0 + x | a)").unwrap().canonicalized();
        let groups: Vec<String> = a.re_terms.iter().map(|t| t.group_label()).collect();
        assert_eq!(groups, vec!["a", "a:c", "b"]);
    }

    fn ident() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,5}".prop_filter("reserved", |s| s != "v_fe")
    }

    prop_compose! {
        fn arb_re()(inner in proptest::collection::vec(ident(), 0..3),
                    intercept in any::<bool>(),
                    group in proptest::collection::vec(ident(), 1..4)) -> RandomEffectTerm {
            let include_intercept = intercept || inner.is_empty();
            RandomEffectTerm { inner_terms: inner, include_intercept, group_expr: group }
        }
    }

    prop_compose! {
        fn arb_ast()(fixed in proptest::collection::btree_set(ident(), 0..4),
                     re in proptest::collection::vec(arb_re(), 1..4),
                     fe in proptest::collection::btree_set("[A-Z][a-z]{0,4}", 0..2),
                     icpt in 0u8..3) -> FormulaAst {
            let intercept = match icpt { 0 => Intercept::Default, 1 => Intercept::Explicit, _ => Intercept::Suppressed };
            FormulaAst {
                response: "resp".into(),
                intercept,
                fixed_terms: fixed.into_iter().collect(),
                re_terms: re,
                fe_terms: fe.into_iter().collect(),
            }
        }
    }

    proptest! {
        #[test]
        fn pretty_print_round_trips(ast in arb_ast()) {
            let printed = ast.to_string();
            let back = parse_formula(&printed).unwrap();
            prop_assert_eq!(back, ast);
        }

        #[test]
        fn never_panics_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_formula_bytes(&bytes);
        }

        #[test]
        fn never_panics_on_formula_like_text(s in "[ a-z01~+:|()_,-]{0,40}") {
            let _ = parse_formula(&s);
        }
    }
}

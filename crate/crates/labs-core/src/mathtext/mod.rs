//! Tokenization of mixed Chinese/LaTeX problem text.
//!
//! Problem statements interleave natural-language text with `$...$` formula
//! spans. Three preprocessing modes are supported: `Embed` keeps each
//! formula as a single token backed by its parsed layout tree, `AsText`
//! splits formulas into command/character word tokens, and `Drop` removes
//! them entirely.

mod formula;

pub use formula::{
    extract_tuples, fnv1a64, parse_formula, EdgeLabel, FormulaError, FormulaNode, FormulaTree,
    FormulaTuple, ROOT_PARENT,
};

use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MathTextError {
    #[error("unbalanced '$' delimiter opened at byte offset {0}")]
    UnbalancedDollar(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormulaMode {
    /// Formula-E: one token per formula, embedded via its layout tree.
    Embed,
    /// Formula-T: formulas split into command/character word tokens.
    AsText,
    /// Formula-D: formulas removed from the sequence.
    Drop,
}

impl FormulaMode {
    pub const ALL: [FormulaMode; 3] = [FormulaMode::Embed, FormulaMode::AsText, FormulaMode::Drop];

    pub fn name(self) -> &'static str {
        match self {
            FormulaMode::Embed => "embed",
            FormulaMode::AsText => "text",
            FormulaMode::Drop => "drop",
        }
    }
}

impl std::str::FromStr for FormulaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "embed" | "formula-e" | "e" => Ok(FormulaMode::Embed),
            "text" | "astext" | "formula-t" | "t" => Ok(FormulaMode::AsText),
            "drop" | "formula-d" | "d" => Ok(FormulaMode::Drop),
            other => Err(format!("unknown formula mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    Formula,
    /// A formula span whose interior failed to parse in `Embed` mode; kept
    /// as a marker so the surface text survives.
    DroppedFormula,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub formula: Option<FormulaTree>,
}

impl Token {
    fn word(text: impl Into<String>) -> Self {
        Token {
            kind: TokenKind::Word,
            text: text.into(),
            formula: None,
        }
    }

    /// Surface form; formulas are re-wrapped in their `$` delimiters.
    pub fn surface(&self) -> String {
        match self.kind {
            TokenKind::Word => self.text.clone(),
            TokenKind::Formula | TokenKind::DroppedFormula => format!("${}$", self.text),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

/// Greedy longest-match word segmenter over a lexicon of multi-character
/// CJK words, with single-character fallback. ASCII alphanumeric runs are
/// one word each; any other non-whitespace character is its own token.
#[derive(Debug, Clone, Default)]
pub struct Segmenter {
    lexicon: BTreeSet<String>,
    max_word_len: usize,
}

impl Segmenter {
    /// Segmenter with no lexicon: CJK text falls back to single characters.
    pub fn char_level() -> Self {
        Segmenter::default()
    }

    pub fn with_lexicon<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let lexicon: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        let max_word_len = lexicon.iter().map(|w| w.chars().count()).max().unwrap_or(0);
        Segmenter {
            lexicon,
            max_word_len,
        }
    }

    /// Mine the lexicon from raw corpus text: multi-character CJK
    /// substrings (lengths 2..=6) occurring at least `min_count` times.
    pub fn from_texts<'a, I>(texts: I, min_count: u32) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        const MAX_MINE_LEN: usize = 6;
        let mut counts: HashMap<String, u32> = HashMap::new();
        for text in texts {
            for run in cjk_runs(text) {
                let chars: Vec<char> = run.chars().collect();
                for start in 0..chars.len() {
                    for len in 2..=MAX_MINE_LEN.min(chars.len() - start) {
                        let gram: String = chars[start..start + len].iter().collect();
                        *counts.entry(gram).or_insert(0) += 1;
                    }
                }
            }
        }
        Segmenter::with_lexicon(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_count)
                .map(|(g, _)| g),
        )
    }

    pub fn lexicon(&self) -> impl Iterator<Item = &str> {
        self.lexicon.iter().map(|s| s.as_str())
    }

    pub fn segment(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut words = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphanumeric() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                words.push(chars[start..i].iter().collect());
            } else if is_cjk(c) {
                let run_end = {
                    let mut j = i;
                    while j < chars.len() && is_cjk(chars[j]) {
                        j += 1;
                    }
                    j
                };
                let mut matched = 1;
                let cap = self.max_word_len.min(run_end - i);
                for len in (2..=cap).rev() {
                    let cand: String = chars[i..i + len].iter().collect();
                    if self.lexicon.contains(&cand) {
                        matched = len;
                        break;
                    }
                }
                words.push(chars[i..i + matched].iter().collect());
                i += matched;
            } else {
                words.push(c.to_string());
                i += 1;
            }
        }
        words
    }
}

fn cjk_runs(text: &str) -> Vec<String> {
    let mut runs = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            current.push(c);
        } else if !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// Split a formula interior the way plain text would be: `\command` names
/// stay whole, every other non-whitespace character is one token.
fn split_formula_as_text(latex: &str) -> Vec<String> {
    let chars: Vec<char> = latex.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\\' && i + 1 < chars.len() && chars[i + 1].is_ascii_alphabetic() {
            let start = i;
            i += 1;
            while i < chars.len() && chars[i].is_ascii_alphabetic() {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Tokenize problem text under a formula preprocessing mode. Formulas are
/// `$...$` spans; everything else goes through the segmenter.
pub fn tokenize(
    text: &str,
    mode: FormulaMode,
    segmenter: &Segmenter,
) -> Result<Vec<Token>, MathTextError> {
    let mut tokens = Vec::new();
    let mut rest = text;
    let mut consumed = 0usize;
    loop {
        match rest.find('$') {
            None => {
                push_words(rest, segmenter, &mut tokens);
                break;
            }
            Some(open) => {
                push_words(&rest[..open], segmenter, &mut tokens);
                let after_open = &rest[open + 1..];
                let close = after_open
                    .find('$')
                    .ok_or(MathTextError::UnbalancedDollar(consumed + open))?;
                let interior = &after_open[..close];
                match mode {
                    FormulaMode::Embed => match parse_formula(interior) {
                        Ok(tree) => tokens.push(Token {
                            kind: TokenKind::Formula,
                            text: interior.to_string(),
                            formula: Some(tree),
                        }),
                        Err(err) => {
                            log::debug!("unparseable formula {interior:?}: {err}");
                            tokens.push(Token {
                                kind: TokenKind::DroppedFormula,
                                text: interior.to_string(),
                                formula: None,
                            });
                        }
                    },
                    FormulaMode::AsText => {
                        for piece in split_formula_as_text(interior) {
                            tokens.push(Token::word(piece));
                        }
                    }
                    FormulaMode::Drop => {}
                }
                let advance = open + 1 + close + 1;
                consumed += advance;
                rest = &rest[advance..];
            }
        }
    }
    Ok(tokens)
}

fn push_words(text: &str, segmenter: &Segmenter, tokens: &mut Vec<Token>) {
    for word in segmenter.segment(text) {
        tokens.push(Token::word(word));
    }
}

/// Embed a formula as the mean of its tuples' hashed table rows. The
/// table is [rows × dim]; gradients flow back to exactly the touched rows.
pub fn embed_formula(
    tape: &mut Tape,
    table: Var,
    tuples: &[FormulaTuple],
) -> Result<Var, TensorError> {
    if tuples.is_empty() {
        return Err(TensorError::EmptyInput { op: "embed_formula" });
    }
    let n_rows = tape.value(table).shape()[0];
    let indices: Vec<usize> = tuples.iter().map(|t| t.hash_row(n_rows)).collect();
    let gathered = tape.gather_rows(table, &indices)?;
    tape.mean_over_rows(gathered)
}

/// Hashed table rows for a formula's tuples, for use outside a tape.
pub fn formula_rows(tree: &FormulaTree, n_rows: usize) -> Vec<usize> {
    extract_tuples(tree)
        .iter()
        .map(|t| t.hash_row(n_rows))
        .collect()
}

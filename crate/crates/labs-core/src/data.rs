//! Corpus loading, vocabulary construction, example encoding, splits, and
//! the synthetic desk-scale dataset generator.
//!
//! Datasets are JSONL: one object per line with a string `text` field
//! (formulas in `$...$` spans) and a non-empty string array `labels`.

use crate::mathtext::{
    self, fnv1a64, FormulaMode, MathTextError, Segmenter, Token, TokenKind,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: invalid JSON: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {reason}")]
    Validation { line: usize, reason: String },
    #[error("need at least {min} examples to split, got {got}")]
    TooFewExamples { min: usize, got: usize },
    #[error("synthetic generator supports 1..=26 labels, got {0}")]
    BadLabelCount(usize),
    #[error("example has no label known to the label map")]
    NoKnownLabels,
    #[error(transparent)]
    MathText(#[from] MathTextError),
    #[error("vocabulary file {path} line {line} is malformed")]
    BadVocabLine { path: String, line: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub labels: Vec<String>,
}

/// Order-preserving JSONL load; malformed or invalid lines are reported
/// with their 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|source| DataError::Json {
            line: line_no,
            source,
        })?;
        validate_example(&ex, line_no)?;
        examples.push(ex);
    }
    Ok(examples)
}

fn validate_example(ex: &Example, line: usize) -> Result<(), DataError> {
    if ex.text.trim().is_empty() {
        return Err(DataError::Validation {
            line,
            reason: "empty text".into(),
        });
    }
    if ex.labels.is_empty() {
        return Err(DataError::Validation {
            line,
            reason: "empty labels".into(),
        });
    }
    if ex.labels.iter().any(|l| l.trim().is_empty()) {
        return Err(DataError::Validation {
            line,
            reason: "blank label string".into(),
        });
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, examples: &[Example]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = fs::File::create(path).map_err(io_err)?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("examples serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    Ok(())
}

// ── vocabulary ───────────────────────────────────────────────────────

/// Token ids: 0 = PAD, 1 = UNK, then tokens ordered by descending
/// frequency with lexicographic tie-break, so rebuilds are stable.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<(String, u64)>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    pub fn build(counts: &HashMap<String, u64>) -> Self {
        let mut ordered: Vec<(String, u64)> =
            counts.iter().map(|(t, c)| (t.clone(), *c)).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![
            (Self::PAD_TOKEN.to_string(), 0),
            (Self::UNK_TOKEN.to_string(), 0),
        ];
        tokens.extend(ordered);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Word vocabulary counted over the training split only.
    pub fn from_examples(
        examples: &[Example],
        mode: FormulaMode,
        segmenter: &Segmenter,
    ) -> Result<Self, DataError> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for ex in examples {
            for tok in mathtext::tokenize(&ex.text, mode, segmenter)? {
                if tok.kind == TokenKind::Word {
                    *counts.entry(tok.text).or_insert(0) += 1;
                }
            }
        }
        Ok(Self::build(&counts))
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), DataError> {
        let body: String = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, (t, c))| format!("{t}\t{i}\t{c}\n"))
            .collect();
        fs::write(path, body).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_tsv(path: &Path) -> Result<Self, DataError> {
        let body = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut tokens = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let bad = || DataError::BadVocabLine {
                path: path.display().to_string(),
                line: i + 1,
            };
            let token = parts.next().ok_or_else(bad)?;
            let _id = parts.next().ok_or_else(bad)?;
            let freq: u64 = parts
                .next()
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            tokens.push((token.to_string(), freq));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

/// Label names in a fixed order; index is the position in the multi-hot
/// target. Built over the whole corpus: the label space is the output
/// contract, not a training-split artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub fn from_examples(examples: &[Example]) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for ex in examples {
            for l in &ex.labels {
                *counts.entry(l.clone()).or_insert(0) += 1;
            }
        }
        let mut ordered: Vec<(String, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let index = ordered
            .iter()
            .enumerate()
            .map(|(i, (l, _))| (l.clone(), i))
            .collect();
        LabelMap {
            labels: ordered,
            index,
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index].0
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), DataError> {
        let body: String = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, (l, c))| format!("{l}\t{i}\t{c}\n"))
            .collect();
        fs::write(path, body).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_tsv(path: &Path) -> Result<Self, DataError> {
        let body = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut labels = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let bad = || DataError::BadVocabLine {
                path: path.display().to_string(),
                line: i + 1,
            };
            let label = parts.next().ok_or_else(bad)?;
            let _id = parts.next().ok_or_else(bad)?;
            let freq: u64 = parts
                .next()
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            labels.push((label.to_string(), freq));
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, (l, _))| (l.clone(), i))
            .collect();
        Ok(LabelMap { labels, index })
    }
}

// ── encoding ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenSlot {
    Word,
    Formula,
    Pad,
}

/// One example encoded for the model: ids padded to `max_len` (prefix
/// kept on truncation), parallel slot kinds, per-formula hashed embedding
/// rows, and the multi-hot target.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub token_ids: Vec<u32>,
    pub token_kinds: Vec<TokenSlot>,
    /// Hashed table rows for each Formula slot, in sequence order.
    pub formula_rows: Vec<Vec<u32>>,
    pub target: Vec<f64>,
    /// Surface strings of the kept (non-pad) tokens, for exports.
    pub surfaces: Vec<String>,
}

impl EncodedExample {
    pub fn seq_len(&self) -> usize {
        self.token_kinds
            .iter()
            .take_while(|k| **k != TokenSlot::Pad)
            .count()
    }

    pub fn true_indices(&self) -> Vec<usize> {
        self.target
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

pub struct Encoder<'a> {
    pub vocab: &'a Vocabulary,
    pub labels: &'a LabelMap,
    pub segmenter: &'a Segmenter,
    pub mode: FormulaMode,
    pub max_len: usize,
    pub formula_table_rows: usize,
}

impl<'a> Encoder<'a> {
    pub fn encode(&self, ex: &Example) -> Result<EncodedExample, DataError> {
        let tokens = mathtext::tokenize(&ex.text, self.mode, self.segmenter)?;
        let mut target = vec![0.0; self.labels.len()];
        let mut any = false;
        for l in &ex.labels {
            if let Some(i) = self.labels.index_of(l) {
                target[i] = 1.0;
                any = true;
            }
        }
        if !any {
            return Err(DataError::NoKnownLabels);
        }
        Ok(self.encode_tokens(&tokens, target))
    }

    pub fn encode_tokens(&self, tokens: &[Token], target: Vec<f64>) -> EncodedExample {
        let kept = &tokens[..tokens.len().min(self.max_len)];
        let mut token_ids = Vec::with_capacity(self.max_len);
        let mut token_kinds = Vec::with_capacity(self.max_len);
        let mut formula_rows = Vec::new();
        let mut surfaces = Vec::new();
        for tok in kept {
            surfaces.push(tok.surface());
            match tok.kind {
                TokenKind::Word | TokenKind::DroppedFormula => {
                    let id = if tok.kind == TokenKind::Word {
                        self.vocab.id(&tok.text)
                    } else {
                        UNK_ID
                    };
                    token_ids.push(id);
                    token_kinds.push(TokenSlot::Word);
                }
                TokenKind::Formula => {
                    let tree = tok.formula.as_ref().expect("formula token carries a tree");
                    let rows: Vec<u32> = mathtext::formula_rows(tree, self.formula_table_rows)
                        .into_iter()
                        .map(|r| r as u32)
                        .collect();
                    formula_rows.push(rows);
                    token_ids.push(UNK_ID);
                    token_kinds.push(TokenSlot::Formula);
                }
            }
        }
        while token_ids.len() < self.max_len {
            token_ids.push(PAD_ID);
            token_kinds.push(TokenSlot::Pad);
        }
        EncodedExample {
            token_ids,
            token_kinds,
            formula_rows,
            target,
            surfaces,
        }
    }
}

// ── splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    /// FNV hash of the shuffled index order; identifies the split.
    pub permutation_hash: u64,
}

impl Splits {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Seeded 80/10/10 shuffle split.
pub fn split(examples: &[Example], seed: u64) -> Result<Splits, DataError> {
    if examples.len() < 10 {
        return Err(DataError::TooFewExamples {
            min: 10,
            got: examples.len(),
        });
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let mut hash_bytes = Vec::with_capacity(idx.len() * 8);
    for &i in &idx {
        hash_bytes.extend_from_slice(&(i as u64).to_le_bytes());
    }
    let permutation_hash = fnv1a64(&hash_bytes);

    let n = examples.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let pick = |range: &[usize]| -> Vec<Example> {
        range.iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(Splits {
        train: pick(&idx[..n_train]),
        validation: pick(&idx[n_train..n_train + n_val]),
        test: pick(&idx[n_train + n_val..]),
        permutation_hash,
    })
}

// ── synthetic data ───────────────────────────────────────────────────

const FILLER_WORDS: &[&str] = &[
    "given", "that", "the", "value", "term", "then", "find", "where", "common", "holds",
];

pub fn synth_label_name(j: usize) -> String {
    char::from(b'A' + j as u8).to_string()
}

pub fn synth_keyword(j: usize) -> String {
    format!("kw{j}")
}

fn synth_formula(j: usize) -> String {
    format!("x^{{{j}}}")
}

/// Separable synthetic corpus: each label owns a keyword and a formula
/// template; every example emits the keyword and formula of each of its
/// 1–3 labels between filler words, so labels are recoverable from text.
pub fn synth_generate(
    n_examples: usize,
    n_labels: usize,
    seed: u64,
) -> Result<Vec<Example>, DataError> {
    if n_labels == 0 || n_labels > 26 {
        return Err(DataError::BadLabelCount(n_labels));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let k = rng.gen_range(1..=3.min(n_labels));
        let mut pool: Vec<usize> = (0..n_labels).collect();
        pool.shuffle(&mut rng);
        let mut chosen: Vec<usize> = pool[..k].to_vec();
        chosen.sort_unstable();

        let mut words: Vec<String> = Vec::new();
        words.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());
        for &j in &chosen {
            words.push(synth_keyword(j));
            words.push(format!("${}$", synth_formula(j)));
            words.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());
        }
        words.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());

        out.push(Example {
            text: words.join(" "),
            labels: chosen.iter().map(|&j| synth_label_name(j)).collect(),
        });
    }
    Ok(out)
}

/// Scores labels by exact keyword presence; the trivial oracle for
/// synthetic data.
pub fn keyword_oracle_scores(text: &str, n_labels: usize) -> Vec<f64> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    (0..n_labels)
        .map(|j| {
            let kw = synth_keyword(j);
            if tokens.iter().any(|t| *t == kw) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

// ── corpus statistics ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode: String,
    pub mean_words: f64,
    pub mean_formulas: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub questions: usize,
    pub labels: usize,
    pub mean_labels_per_question: f64,
    pub mean_chars: f64,
    /// Distinct word tokens (Embed mode) + PAD/UNK.
    pub vocab_words_only: usize,
    /// The same counting with each distinct formula (by canonical form)
    /// taken as one additional token.
    pub vocab_with_formulas: usize,
    pub modes: Vec<ModeStats>,
}

pub fn corpus_stats(
    examples: &[Example],
    segmenter: &Segmenter,
) -> Result<CorpusStats, DataError> {
    let n = examples.len().max(1) as f64;
    let labels = LabelMap::from_examples(examples);
    let total_labels: usize = examples.iter().map(|e| e.labels.len()).sum();
    let total_chars: usize = examples
        .iter()
        .map(|e| e.text.chars().filter(|c| !c.is_whitespace()).count())
        .sum();

    let mut modes = Vec::new();
    let mut distinct_words: HashMap<String, ()> = HashMap::new();
    let mut distinct_formulas: BTreeMap<String, ()> = BTreeMap::new();
    for mode in FormulaMode::ALL {
        let mut words = 0usize;
        let mut formulas = 0usize;
        let mut length = 0usize;
        for ex in examples {
            let toks = mathtext::tokenize(&ex.text, mode, segmenter)?;
            length += toks.len();
            for t in &toks {
                match t.kind {
                    TokenKind::Word => {
                        words += 1;
                        if mode == FormulaMode::Embed {
                            distinct_words.entry(t.text.clone()).or_insert(());
                        }
                    }
                    TokenKind::Formula | TokenKind::DroppedFormula => {
                        formulas += 1;
                        if mode == FormulaMode::Embed {
                            let key = t
                                .formula
                                .as_ref()
                                .map(|f| f.canonical())
                                .unwrap_or_else(|| t.text.clone());
                            distinct_formulas.entry(key).or_insert(());
                        }
                    }
                }
            }
        }
        modes.push(ModeStats {
            mode: mode.name().to_string(),
            mean_words: words as f64 / n,
            mean_formulas: formulas as f64 / n,
            mean_length: length as f64 / n,
        });
    }

    Ok(CorpusStats {
        questions: examples.len(),
        labels: labels.len(),
        mean_labels_per_question: total_labels as f64 / n,
        mean_chars: total_chars as f64 / n,
        vocab_words_only: distinct_words.len() + 2,
        vocab_with_formulas: distinct_words.len() + distinct_formulas.len() + 2,
        modes,
    })
}

// ── run manifest ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub split_sizes: (usize, usize, usize),
    pub permutation_hash: String,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(seed: u64, splits: &Splits, config_text: &str) -> Self {
        RunManifest {
            seed,
            split_sizes: splits.sizes(),
            permutation_hash: format!("{:016x}", splits.permutation_hash),
            config_hash: format!("{:016x}", fnv1a64(config_text.as_bytes())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_minimal_record() {
        let f = write_jsonl(&[r#"{"text":"已知 $x^2=4$ 求 x","labels":["一元二次方程"]}"#]);
        let examples = load_jsonl(f.path()).unwrap();
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].labels, vec!["一元二次方程"]);
    }

    #[test]
    fn empty_labels_is_validation_error_with_line() {
        let f = write_jsonl(&[
            r#"{"text":"ok","labels":["a"]}"#,
            r#"{"text":"bad","labels":[]}"#,
        ]);
        match load_jsonl(f.path()) {
            Err(DataError::Validation { line: 2, .. }) => {}
            other => panic!("expected validation error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let f = write_jsonl(&[r#"{"text":"ok","labels":["a"]}"#, "{nope"]);
        match load_jsonl(f.path()) {
            Err(DataError::Json { line: 2, .. }) => {}
            other => panic!("expected JSON error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let examples: Vec<Example> = (0..100)
            .map(|i| Example {
                text: format!("t{i}"),
                labels: vec!["l".into()],
            })
            .collect();
        let s1 = split(&examples, 42).unwrap();
        assert_eq!(s1.sizes(), (80, 10, 10));
        let s2 = split(&examples, 42).unwrap();
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.permutation_hash, s2.permutation_hash);

        let mut all: Vec<&Example> = s1
            .train
            .iter()
            .chain(&s1.validation)
            .chain(&s1.test)
            .collect();
        all.sort_by(|a, b| a.text.cmp(&b.text));
        assert_eq!(all.len(), 100);

        let mut distinct = 0;
        for seed in [1u64, 2, 3] {
            if split(&examples, seed).unwrap().train != s1.train {
                distinct += 1;
            }
        }
        assert!(distinct >= 2, "different seeds should permute differently");
    }

    #[test]
    fn split_requires_ten_examples() {
        let examples: Vec<Example> = (0..9)
            .map(|i| Example {
                text: format!("t{i}"),
                labels: vec!["l".into()],
            })
            .collect();
        assert!(matches!(
            split(&examples, 1),
            Err(DataError::TooFewExamples { min: 10, got: 9 })
        ));
    }

    #[test]
    fn synth_is_reproducible_and_label_recoverable() {
        let a = synth_generate(50, 10, 7).unwrap();
        let b = synth_generate(50, 10, 7).unwrap();
        assert_eq!(a, b);
        for ex in &a {
            for label in &ex.labels {
                let j = (label.as_bytes()[0] - b'A') as usize;
                let kw = synth_keyword(j);
                assert!(
                    ex.text.split_whitespace().any(|t| t == kw),
                    "{label} keyword missing from {:?}",
                    ex.text
                );
            }
        }
    }

    #[test]
    fn keyword_oracle_has_perfect_precision_at_one() {
        let examples = synth_generate(200, 10, 99).unwrap();
        let labels = LabelMap::from_examples(&examples);
        let mut preds = Vec::new();
        for ex in &examples {
            let scores_by_j = keyword_oracle_scores(&ex.text, 10);
            // reorder into label-map space
            let mut scores = vec![0.0; labels.len()];
            for (j, s) in scores_by_j.iter().enumerate() {
                if let Some(i) = labels.index_of(&synth_label_name(j)) {
                    scores[i] = *s;
                }
            }
            let truth = ex
                .labels
                .iter()
                .filter_map(|l| labels.index_of(l))
                .collect();
            preds.push(crate::metrics::RankedPrediction::new(scores, truth));
        }
        let p1 = crate::metrics::precision_at_k(&preds, 1).unwrap();
        assert_eq!(p1, 1.0);
    }

    #[test]
    fn vocabulary_is_a_pure_function_of_the_training_split() {
        let examples = synth_generate(100, 8, 3).unwrap();
        let splits = split(&examples, 11).unwrap();
        let seg = Segmenter::char_level();
        let v1 = Vocabulary::from_examples(&splits.train, FormulaMode::Embed, &seg).unwrap();
        let v2 = Vocabulary::from_examples(&splits.train, FormulaMode::Embed, &seg).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1.id(Vocabulary::PAD_TOKEN), PAD_ID);
        assert_eq!(v1.id(Vocabulary::UNK_TOKEN), UNK_ID);
        assert_eq!(v1.id("never-seen-token-xyz"), UNK_ID);
    }

    #[test]
    fn encoding_pads_with_prefix_rule() {
        let examples = vec![Example {
            text: "kw0 $x^{0}$ kw1 extra words beyond limit".into(),
            labels: vec!["A".into(), "B".into()],
        }];
        let labels = LabelMap::from_examples(&examples);
        let seg = Segmenter::char_level();
        let vocab = Vocabulary::from_examples(&examples, FormulaMode::Embed, &seg).unwrap();
        let enc = Encoder {
            vocab: &vocab,
            labels: &labels,
            segmenter: &seg,
            mode: FormulaMode::Embed,
            max_len: 4,
            formula_table_rows: 64,
        };
        let e = enc.encode(&examples[0]).unwrap();
        assert_eq!(e.token_ids.len(), 4);
        assert_eq!(e.seq_len(), 4);
        assert_eq!(e.token_kinds[1], TokenSlot::Formula);
        assert_eq!(e.formula_rows.len(), 1);
        assert_eq!(e.target.iter().sum::<f64>(), 2.0);
        // no PAD before a real token
        let mut seen_pad = false;
        for k in &e.token_kinds {
            if *k == TokenSlot::Pad {
                seen_pad = true;
            } else {
                assert!(!seen_pad);
            }
        }

        let short = Example {
            text: "kw0".into(),
            labels: vec!["A".into()],
        };
        let e = enc.encode(&short).unwrap();
        assert_eq!(e.seq_len(), 1);
        assert_eq!(&e.token_ids[1..], &[PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn vocab_round_trips_through_tsv() {
        let mut counts = HashMap::new();
        counts.insert("alpha".to_string(), 5u64);
        counts.insert("beta".to_string(), 9);
        counts.insert("gamma".to_string(), 5);
        let v = Vocabulary::build(&counts);
        assert_eq!(v.id("beta"), 2);
        assert_eq!(v.id("alpha"), 3);
        assert_eq!(v.id("gamma"), 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save_tsv(&path).unwrap();
        let loaded = Vocabulary::load_tsv(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn stats_mode_lengths_are_monotone() {
        let examples = synth_generate(60, 6, 5).unwrap();
        let stats = corpus_stats(&examples, &Segmenter::char_level()).unwrap();
        let by_mode: HashMap<&str, &ModeStats> =
            stats.modes.iter().map(|m| (m.mode.as_str(), m)).collect();
        let drop = by_mode["drop"].mean_length;
        let embed = by_mode["embed"].mean_length;
        let text = by_mode["text"].mean_length;
        assert!(drop <= embed && embed <= text);
        assert!(stats.mean_labels_per_question >= 1.0);
        assert!(stats.vocab_with_formulas >= stats.vocab_words_only);
    }
}

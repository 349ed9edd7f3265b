//! LaTeX formula parsing into symbol layout trees.
//!
//! The parser covers the structural core used by the corpus: `_` and `^`
//! scripts, `\frac{}{}`, `\sqrt{}`, `{}` grouping, a small set of unary
//! commands whose braced argument stays attached (`\vec{v}`), and
//! operator/operand sibling chains. Unknown commands become leaf symbols
//! verbatim. Trees serialize to a canonical form that re-parses to an
//! identical tree.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel parent symbol of the root tuple.
pub const ROOT_PARENT: &str = "⊥";

#[derive(Debug, Error, PartialEq)]
pub enum FormulaError {
    #[error("empty formula")]
    Empty,
    #[error("unbalanced brace at position {0}")]
    UnbalancedBrace(usize),
    #[error("script '{script}' at position {pos} has no base")]
    ScriptWithoutBase { script: char, pos: usize },
    #[error("script at position {0} is missing its argument")]
    MissingScriptArgument(usize),
    #[error("\\{command} at position {pos} is missing an argument")]
    MissingCommandArgument { command: String, pos: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeLabel {
    Subscript,
    Superscript,
    FracNumerator,
    FracDenominator,
    Radicand,
    Argument,
    NextSibling,
}

impl EdgeLabel {
    pub fn name(self) -> &'static str {
        match self {
            EdgeLabel::Subscript => "subscript",
            EdgeLabel::Superscript => "superscript",
            EdgeLabel::FracNumerator => "fraction-numerator",
            EdgeLabel::FracDenominator => "fraction-denominator",
            EdgeLabel::Radicand => "radicand",
            EdgeLabel::Argument => "argument",
            EdgeLabel::NextSibling => "next-sibling",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaNode {
    pub symbol: String,
    pub children: Vec<(EdgeLabel, FormulaNode)>,
}

impl FormulaNode {
    fn leaf(symbol: impl Into<String>) -> Self {
        FormulaNode {
            symbol: symbol.into(),
            children: Vec::new(),
        }
    }

    fn node_count(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(|(_, c)| c.node_count())
            .sum::<usize>()
    }

    /// Follow next-sibling edges to the end of this node's chain.
    fn chain_tail(&mut self) -> &mut FormulaNode {
        if self
            .children
            .iter()
            .any(|(e, _)| *e == EdgeLabel::NextSibling)
        {
            let idx = self
                .children
                .iter()
                .position(|(e, _)| *e == EdgeLabel::NextSibling)
                .unwrap();
            self.children[idx].1.chain_tail()
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaTree {
    pub root: FormulaNode,
}

impl FormulaTree {
    pub fn node_count(&self) -> usize {
        self.root.node_count()
    }

    /// Canonical serialization; re-parsing it yields an identical tree.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        write_node(&self.root, &mut out);
        out
    }
}

/// One tree edge flattened for embedding. The root gets a sentinel tuple
/// with parent `⊥` and edge label `root`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FormulaTuple {
    pub parent: String,
    pub child: String,
    pub edge: String,
    pub depth: usize,
}

impl FormulaTuple {
    /// Stable string form hashed for the embedding table.
    pub fn canonical_string(&self) -> String {
        format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}",
            self.parent, self.child, self.edge, self.depth
        )
    }

    pub fn hash_row(&self, n_rows: usize) -> usize {
        (fnv1a64(self.canonical_string().as_bytes()) % n_rows as u64) as usize
    }
}

/// FNV-1a over bytes; fixed so hashed formula rows are identical across
/// platforms and runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Depth-first edge enumeration, one tuple per edge plus the root tuple.
/// Depth counts edges from the root, including next-sibling hops.
pub fn extract_tuples(tree: &FormulaTree) -> Vec<FormulaTuple> {
    let mut out = vec![FormulaTuple {
        parent: ROOT_PARENT.to_string(),
        child: tree.root.symbol.clone(),
        edge: "root".to_string(),
        depth: 0,
    }];
    walk(&tree.root, 0, &mut out);
    out
}

fn walk(node: &FormulaNode, depth: usize, out: &mut Vec<FormulaTuple>) {
    for (edge, child) in &node.children {
        out.push(FormulaTuple {
            parent: node.symbol.clone(),
            child: child.symbol.clone(),
            edge: edge.name().to_string(),
            depth: depth + 1,
        });
        walk(child, depth + 1, out);
    }
}

// ── lexer ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    /// `\name` for alphabetic name
    Command(String),
    /// `\c` escaped single character
    Escaped(char),
    Char(char),
    Number(String),
    Sub,
    Sup,
    LBrace,
    RBrace,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn lex(input: &str) -> Vec<Spanned> {
    let chars: Vec<char> = input.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i;
        match c {
            c if c.is_whitespace() => {
                i += 1;
            }
            '\\' => {
                if i + 1 < chars.len() && chars[i + 1].is_ascii_alphabetic() {
                    let mut name = String::new();
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_alphabetic() {
                        name.push(chars[i]);
                        i += 1;
                    }
                    toks.push(Spanned {
                        tok: Tok::Command(name),
                        pos,
                    });
                } else if i + 1 < chars.len() {
                    toks.push(Spanned {
                        tok: Tok::Escaped(chars[i + 1]),
                        pos,
                    });
                    i += 2;
                } else {
                    // trailing backslash: keep it as an ordinary symbol
                    toks.push(Spanned {
                        tok: Tok::Char('\\'),
                        pos,
                    });
                    i += 1;
                }
            }
            '_' => {
                toks.push(Spanned { tok: Tok::Sub, pos });
                i += 1;
            }
            '^' => {
                toks.push(Spanned { tok: Tok::Sup, pos });
                i += 1;
            }
            '{' => {
                toks.push(Spanned {
                    tok: Tok::LBrace,
                    pos,
                });
                i += 1;
            }
            '}' => {
                toks.push(Spanned {
                    tok: Tok::RBrace,
                    pos,
                });
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let mut num = String::new();
                while i < chars.len() && chars[i].is_ascii_digit() {
                    num.push(chars[i]);
                    i += 1;
                }
                if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                    num.push('.');
                    i += 1;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        num.push(chars[i]);
                        i += 1;
                    }
                }
                toks.push(Spanned {
                    tok: Tok::Number(num),
                    pos,
                });
            }
            _ => {
                toks.push(Spanned {
                    tok: Tok::Char(c),
                    pos,
                });
                i += 1;
            }
        }
    }
    toks
}

// Commands whose single braced argument stays attached as an `argument`
// edge rather than becoming a sibling group.
const UNARY_ARG_COMMANDS: &[&str] = &[
    "text", "mathrm", "mathbf", "mathbb", "mathcal", "boldsymbol", "vec", "bar", "hat", "dot",
    "ddot", "tilde", "overline", "underline", "widehat", "widetilde", "overrightarrow",
];

// ── parser ───────────────────────────────────────────────────────────

struct Parser {
    toks: Vec<Spanned>,
    i: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|s| &s.tok)
    }

    fn pos(&self) -> usize {
        self.toks
            .get(self.i)
            .map(|s| s.pos)
            .unwrap_or_else(|| self.toks.last().map(|s| s.pos + 1).unwrap_or(0))
    }

    fn bump(&mut self) -> Option<Spanned> {
        let s = self.toks.get(self.i).cloned();
        if s.is_some() {
            self.i += 1;
        }
        s
    }

    /// Parse items until end of input or a closing brace, linking them
    /// into one next-sibling chain.
    fn parse_chain(&mut self) -> Result<Option<FormulaNode>, FormulaError> {
        let mut items: Vec<FormulaNode> = Vec::new();
        loop {
            match self.peek() {
                None | Some(Tok::RBrace) => break,
                _ => {
                    if let Some(item) = self.parse_item()? {
                        items.push(item);
                    }
                }
            }
        }
        let mut acc: Option<FormulaNode> = None;
        for mut item in items.into_iter().rev() {
            if let Some(next) = acc.take() {
                item.chain_tail()
                    .children
                    .push((EdgeLabel::NextSibling, next));
            }
            acc = Some(item);
        }
        Ok(acc)
    }

    /// One atom plus any trailing `_`/`^` scripts. Scripts attach to the
    /// tail of the atom's sibling chain. Empty-group atoms yield None.
    fn parse_item(&mut self) -> Result<Option<FormulaNode>, FormulaError> {
        let pos = self.pos();
        if matches!(self.peek(), Some(Tok::Sub) | Some(Tok::Sup)) {
            let script = if matches!(self.peek(), Some(Tok::Sub)) {
                '_'
            } else {
                '^'
            };
            return Err(FormulaError::ScriptWithoutBase { script, pos });
        }
        let Some(mut node) = self.parse_atom()? else {
            return Ok(None);
        };
        while let Some(tok) = self.peek() {
            let edge = match tok {
                Tok::Sub => EdgeLabel::Subscript,
                Tok::Sup => EdgeLabel::Superscript,
                _ => break,
            };
            let script_pos = self.pos();
            self.bump();
            if self.peek().is_none() || matches!(self.peek(), Some(Tok::RBrace)) {
                return Err(FormulaError::MissingScriptArgument(script_pos));
            }
            // An empty group argument drops the script.
            if let Some(arg) = self.parse_atom()? {
                node.chain_tail().children.push((edge, arg));
            }
        }
        Ok(Some(node))
    }

    fn parse_atom(&mut self) -> Result<Option<FormulaNode>, FormulaError> {
        let Some(spanned) = self.bump() else {
            return Ok(None);
        };
        match spanned.tok {
            Tok::Char(c) => Ok(Some(FormulaNode::leaf(c.to_string()))),
            Tok::Escaped(c) => Ok(Some(FormulaNode::leaf(c.to_string()))),
            Tok::Number(n) => Ok(Some(FormulaNode::leaf(n))),
            Tok::LBrace => {
                let inner = self.parse_chain()?;
                match self.peek() {
                    Some(Tok::RBrace) => {
                        self.bump();
                        Ok(inner)
                    }
                    _ => Err(FormulaError::UnbalancedBrace(spanned.pos)),
                }
            }
            Tok::RBrace => Err(FormulaError::UnbalancedBrace(spanned.pos)),
            Tok::Sub | Tok::Sup => unreachable!("scripts handled by parse_item"),
            Tok::Command(name) => self.parse_command(name, spanned.pos),
        }
    }

    fn parse_command(
        &mut self,
        name: String,
        pos: usize,
    ) -> Result<Option<FormulaNode>, FormulaError> {
        match name.as_str() {
            "frac" => {
                let num = self.required_arg(&name, pos)?;
                let den = self.required_arg(&name, pos)?;
                Ok(Some(FormulaNode {
                    symbol: "frac".to_string(),
                    children: vec![
                        (EdgeLabel::FracNumerator, num),
                        (EdgeLabel::FracDenominator, den),
                    ],
                }))
            }
            "sqrt" => {
                let rad = self.required_arg(&name, pos)?;
                Ok(Some(FormulaNode {
                    symbol: "sqrt".to_string(),
                    children: vec![(EdgeLabel::Radicand, rad)],
                }))
            }
            _ if UNARY_ARG_COMMANDS.contains(&name.as_str()) => {
                if matches!(self.peek(), Some(Tok::LBrace)) {
                    let arg = self.required_arg(&name, pos)?;
                    Ok(Some(FormulaNode {
                        symbol: name,
                        children: vec![(EdgeLabel::Argument, arg)],
                    }))
                } else {
                    Ok(Some(FormulaNode::leaf(name)))
                }
            }
            _ => Ok(Some(FormulaNode::leaf(name))),
        }
    }

    fn required_arg(&mut self, command: &str, pos: usize) -> Result<FormulaNode, FormulaError> {
        match self.peek() {
            None | Some(Tok::RBrace) => Err(FormulaError::MissingCommandArgument {
                command: command.to_string(),
                pos,
            }),
            Some(Tok::Sub) | Some(Tok::Sup) => Err(FormulaError::MissingCommandArgument {
                command: command.to_string(),
                pos,
            }),
            _ => match self.parse_atom()? {
                Some(node) => Ok(node),
                None => Err(FormulaError::MissingCommandArgument {
                    command: command.to_string(),
                    pos,
                }),
            },
        }
    }
}

/// Parse the interior of a `$...$` span into a symbol layout tree.
pub fn parse_formula(latex: &str) -> Result<FormulaTree, FormulaError> {
    if latex.trim().is_empty() {
        return Err(FormulaError::Empty);
    }
    let mut parser = Parser {
        toks: lex(latex),
        i: 0,
    };
    let chain = parser.parse_chain()?;
    if let Some(Tok::RBrace) = parser.peek() {
        return Err(FormulaError::UnbalancedBrace(parser.pos()));
    }
    match chain {
        Some(root) => Ok(FormulaTree { root }),
        None => Err(FormulaError::Empty),
    }
}

// ── canonical serialization ──────────────────────────────────────────

const ESCAPE_CHARS: &[char] = &['{', '}', '_', '^', '\\', '%', '$', '&', '#', '~'];

fn write_symbol(symbol: &str, out: &mut String) {
    let mut chars = symbol.chars();
    let first = chars.next();
    let single = first.is_some() && chars.next().is_none();
    match first {
        Some(c) if single && ESCAPE_CHARS.contains(&c) => {
            out.push('\\');
            out.push(c);
        }
        Some(c) if !single && c.is_ascii_alphabetic() => {
            // multi-letter symbols come from commands
            out.push('\\');
            out.push_str(symbol);
        }
        _ => out.push_str(symbol),
    }
}

fn write_group(node: &FormulaNode, out: &mut String) {
    out.push('{');
    write_node(node, out);
    out.push('}');
}

fn write_node(node: &FormulaNode, out: &mut String) {
    let is_frac = node.symbol == "frac"
        && node
            .children
            .iter()
            .any(|(e, _)| *e == EdgeLabel::FracNumerator);
    let is_sqrt = node.symbol == "sqrt"
        && node.children.iter().any(|(e, _)| *e == EdgeLabel::Radicand);
    if is_frac {
        out.push_str("\\frac");
    } else if is_sqrt {
        out.push_str("\\sqrt");
    } else {
        write_symbol(&node.symbol, out);
    }

    let mut sibling: Option<&FormulaNode> = None;
    for (edge, child) in &node.children {
        match edge {
            EdgeLabel::Subscript => {
                out.push('_');
                write_group(child, out);
            }
            EdgeLabel::Superscript => {
                out.push('^');
                write_group(child, out);
            }
            EdgeLabel::FracNumerator
            | EdgeLabel::FracDenominator
            | EdgeLabel::Radicand
            | EdgeLabel::Argument => {
                write_group(child, out);
            }
            EdgeLabel::NextSibling => sibling = Some(child),
        }
    }
    if let Some(next) = sibling {
        out.push(' ');
        write_node(next, out);
    }
}

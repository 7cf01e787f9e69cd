//! Token sequences, edit-operation sets, edit distance and edit-distance balls.
//!
//! Edit distance here is directional: `edit_distance(x, y, ops)` counts the
//! operations applied to `x` to reach `y`. With an asymmetric op set (say,
//! deletions only) the distance from `y` back to `x` may be infeasible.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Default element cap for [`enumerate_ball`].
pub const DEFAULT_BALL_CAP: usize = 1_000_000;

/// A finite sequence of token identifiers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSequence(tokens)
    }

    pub fn empty() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.0
    }

    /// Checks every token against the vocabulary size.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab.size()) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                size: vocab.size(),
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(tokens: Vec<Token>) -> Self {
        TokenSequence(tokens)
    }
}

impl From<&[Token]> for TokenSequence {
    fn from(tokens: &[Token]) -> Self {
        TokenSequence(tokens.to_vec())
    }
}

impl FromIterator<Token> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        TokenSequence(iter.into_iter().collect())
    }
}

impl AsRef<[Token]> for TokenSequence {
    fn as_ref(&self) -> &[Token] {
        &self.0
    }
}

/// Vocabulary size, with an optional token-string table for text I/O.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
    table: Option<TokenTable>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("vocabulary size must be at least 1"));
        }
        Ok(Vocabulary { size, table: None })
    }

    pub fn with_table(table: TokenTable) -> Result<Self> {
        let mut vocab = Vocabulary::new(table.len().max(1))?;
        vocab.table = Some(table);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn table(&self) -> Option<&TokenTable> {
        self.table.as_ref()
    }
}

/// Bidirectional token <-> string table built by whitespace tokenization.
///
/// Serializes as a JSON array of strings, the index being the token id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenTable {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl TokenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Splits on Unicode whitespace, assigning fresh ids to unseen words.
    pub fn tokenize(&mut self, text: &str) -> TokenSequence {
        text.split_whitespace().map(|w| self.intern(w)).collect()
    }

    /// Tokenizes without growing the table; unknown words yield `None`.
    pub fn lookup_text(&self, text: &str) -> Option<TokenSequence> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    pub fn intern(&mut self, word: &str) -> Token {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as Token;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn lookup(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    pub fn word(&self, token: Token) -> Option<&str> {
        self.words.get(token as usize).map(String::as_str)
    }

    pub fn detokenize(&self, seq: &TokenSequence) -> Option<String> {
        let words: Option<Vec<&str>> = seq.tokens().iter().map(|&t| self.word(t)).collect();
        words.map(|w| w.join(" "))
    }
}

impl From<Vec<String>> for TokenTable {
    fn from(words: Vec<String>) -> Self {
        let mut table = TokenTable::new();
        for w in &words {
            table.intern(w);
        }
        table
    }
}

impl From<TokenTable> for Vec<String> {
    fn from(table: TokenTable) -> Self {
        table.words
    }
}

/// The subset of edit operations {del, ins, sub} a distance or certificate covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EditOps {
    del: bool,
    ins: bool,
    sub: bool,
}

impl EditOps {
    pub const ALL: EditOps = EditOps {
        del: true,
        ins: true,
        sub: true,
    };

    pub fn new(del: bool, ins: bool, sub: bool) -> Result<Self> {
        if !(del || ins || sub) {
            return Err(Error::invalid("at least one edit operation must be enabled"));
        }
        Ok(EditOps { del, ins, sub })
    }

    pub fn allows_del(&self) -> bool {
        self.del
    }

    pub fn allows_ins(&self) -> bool {
        self.ins
    }

    pub fn allows_sub(&self) -> bool {
        self.sub
    }
}

impl Default for EditOps {
    fn default() -> Self {
        EditOps::ALL
    }
}

impl fmt::Display for EditOps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.del, "del"), (self.ins, "ins"), (self.sub, "sub")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for EditOps {
    type Err = Error;

    /// Parses a comma-separated list such as `del,ins,sub`.
    fn from_str(s: &str) -> Result<Self> {
        let (mut del, mut ins, mut sub) = (false, false, false);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "del" => del = true,
                "ins" => ins = true,
                "sub" => sub = true,
                other => return Err(Error::invalid(format!("unknown edit operation `{other}`"))),
            }
        }
        EditOps::new(del, ins, sub)
    }
}

impl TryFrom<String> for EditOps {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EditOps> for String {
    fn from(ops: EditOps) -> Self {
        ops.to_string()
    }
}

/// Minimum number of enabled edits transforming `x` into `y`, or `None` when
/// no sequence of enabled edits gets there.
pub fn edit_distance(x: &TokenSequence, y: &TokenSequence, ops: EditOps) -> Option<usize> {
    const INF: usize = usize::MAX;
    let (a, b) = (x.tokens(), y.tokens());
    let step = |v: usize| if v == INF { INF } else { v + 1 };

    // prev[j]: cost of turning a[..i-1] into b[..j]
    let mut prev: Vec<usize> = (0..=b.len())
        .map(|j| if j == 0 || ops.ins { j } else { INF })
        .collect();
    let mut cur = vec![INF; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = if ops.del { i } else { INF };
        for j in 1..=b.len() {
            let mut best = INF;
            if a[i - 1] == b[j - 1] {
                best = prev[j - 1];
            } else if ops.sub {
                best = step(prev[j - 1]);
            }
            if ops.del {
                best = best.min(step(prev[j]));
            }
            if ops.ins {
                best = best.min(step(cur[j - 1]));
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    match prev[b.len()] {
        INF => None,
        d => Some(d),
    }
}

/// Length of a longest common subsequence of `x` and `y`.
pub fn lcs_length(x: &TokenSequence, y: &TokenSequence) -> usize {
    let (a, b) = (x.tokens(), y.tokens());
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &ai in a {
        for (j, &bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// All sequences within directional edit distance `r` of `x`, sorted.
pub fn enumerate_ball(
    x: &TokenSequence,
    r: usize,
    ops: EditOps,
    vocab: &Vocabulary,
) -> Result<Vec<TokenSequence>> {
    enumerate_ball_capped(x, r, ops, vocab, DEFAULT_BALL_CAP)
}

pub fn enumerate_ball_capped(
    x: &TokenSequence,
    r: usize,
    ops: EditOps,
    vocab: &Vocabulary,
    cap: usize,
) -> Result<Vec<TokenSequence>> {
    let mut all: Vec<TokenSequence> = enumerate_ball_levels(x, r, ops, vocab, cap)?
        .into_iter()
        .flatten()
        .collect();
    all.sort();
    Ok(all)
}

/// Breadth-first ball enumeration; `levels[d]` holds the sequences at exact
/// distance `d`, each level sorted.
pub fn enumerate_ball_levels(
    x: &TokenSequence,
    r: usize,
    ops: EditOps,
    vocab: &Vocabulary,
    cap: usize,
) -> Result<Vec<Vec<TokenSequence>>> {
    x.check_vocabulary(vocab)?;
    let mut seen: HashSet<TokenSequence> = HashSet::new();
    seen.insert(x.clone());
    let mut levels = vec![vec![x.clone()]];
    let v = vocab.size() as Token;

    for _ in 0..r {
        let mut next = Vec::new();
        for seq in levels.last().expect("levels never empty") {
            let t = seq.tokens();
            let mut visit = |cand: Vec<Token>| -> Result<()> {
                let cand = TokenSequence(cand);
                if !seen.contains(&cand) {
                    if seen.len() >= cap {
                        return Err(Error::BudgetExceeded {
                            what: "edit-distance ball size".into(),
                            limit: cap,
                        });
                    }
                    seen.insert(cand.clone());
                    next.push(cand);
                }
                Ok(())
            };
            if ops.del {
                for i in 0..t.len() {
                    let mut c = t.to_vec();
                    c.remove(i);
                    visit(c)?;
                }
            }
            if ops.ins {
                for i in 0..=t.len() {
                    for tok in 0..v {
                        let mut c = t.to_vec();
                        c.insert(i, tok);
                        visit(c)?;
                    }
                }
            }
            if ops.sub {
                for i in 0..t.len() {
                    for tok in (0..v).filter(|&tok| tok != t[i]) {
                        let mut c = t.to_vec();
                        c[i] = tok;
                        visit(c)?;
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort();
        levels.push(next);
    }
    Ok(levels)
}

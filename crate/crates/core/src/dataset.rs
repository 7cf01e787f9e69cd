//! Labelled datasets in JSON Lines form.
//!
//! Each line is `{"tokens": [..], "label": n}` or `{"text": "..", "label": n}`.
//! Text is split on Unicode whitespace and interned into a token table so
//! the certified perturbations act on whole words.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifiers::Label;
use crate::error::{Error, Result};
use crate::sequence::{TokenSequence, TokenTable};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub x: TokenSequence,
    pub label: Label,
}

/// How lines are interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Decide per line from the fields present.
    #[default]
    Auto,
    Tokens,
    Text,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" | "jsonl" => Ok(DatasetFormat::Auto),
            "tokens" => Ok(DatasetFormat::Tokens),
            "text" => Ok(DatasetFormat::Text),
            _ => Err(Error::invalid(format!("unknown dataset format `{s}` (auto, tokens, text)"))),
        }
    }
}

#[derive(Deserialize)]
struct Line {
    tokens: Option<Vec<u32>>,
    text: Option<String>,
    label: Label,
}

/// Examples plus the table built while tokenizing text lines.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub table: TokenTable,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Smallest vocabulary covering every token seen: the table size for
    /// text data, one past the largest id otherwise.
    pub fn inferred_vocab_size(&self) -> usize {
        let max_id = self
            .examples
            .iter()
            .flat_map(|e| e.x.tokens().iter().copied())
            .max()
            .map_or(0, |m| m as usize + 1);
        max_id.max(self.table.len()).max(1)
    }

    pub fn mean_length(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().map(|e| e.x.len()).sum::<usize>() as f64 / self.examples.len() as f64
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.x.len()).collect()
    }
}

/// Parses a dataset, extending `table` with any new words.
pub fn parse_dataset<R: Read>(reader: R, format: DatasetFormat, table: TokenTable) -> Result<Dataset> {
    let mut ds = Dataset {
        examples: Vec::new(),
        table,
    };
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("dataset line {}: {e}", i + 1)))?;
        let x = match (format, parsed.tokens, parsed.text) {
            (DatasetFormat::Tokens | DatasetFormat::Auto, Some(t), _) => TokenSequence::new(t),
            (DatasetFormat::Text | DatasetFormat::Auto, _, Some(text)) => ds.table.tokenize(&text),
            _ => {
                return Err(Error::invalid(format!(
                    "dataset line {}: no field matching format {format:?}",
                    i + 1
                )))
            }
        };
        ds.examples.push(Example { x, label: parsed.label });
    }
    Ok(ds)
}

pub fn load_dataset(path: &Path, format: DatasetFormat, table: TokenTable) -> Result<Dataset> {
    parse_dataset(File::open(path)?, format, table)
}

/// Reads a token table stored as a JSON array of words.
pub fn load_token_table(path: &Path) -> Result<TokenTable> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

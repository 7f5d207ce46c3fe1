//! Tokenization shared by every stage of the pipeline.
//!
//! A text is split on whitespace. Each piece keeps its original spelling for
//! display, and gets a canonical form (leading and trailing punctuation
//! stripped, lowercased) that all set operations use. Pieces that are pure
//! punctuation have no canonical form and are not words.

use std::collections::BTreeSet;
use std::io::BufRead;

const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub raw: String,
    pub canon: String,
}

/// Canonical form of a single whitespace-delimited word, or `None` when
/// nothing alphanumeric remains after trimming.
pub fn canonical(word: &str) -> Option<String> {
    let trimmed = word.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

pub fn tokenize(text: &str) -> Vec<Token> {
    text.split_whitespace()
        .filter_map(|w| {
            canonical(w).map(|canon| Token {
                raw: w.to_string(),
                canon,
            })
        })
        .collect()
}

pub fn word_set<'a, I>(tokens: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = &'a Token>,
{
    tokens.into_iter().map(|t| t.canon.clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopWords {
    words: BTreeSet<String>,
}

impl StopWords {
    /// The bundled English list.
    pub fn english() -> Self {
        let mut sw = Self::default();
        sw.extend_from_str(ENGLISH_STOPWORDS);
        sw
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Adds one word per line; `#` starts a comment line.
    pub fn extend_from_str(&mut self, list: &str) {
        for line in list.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(c) = canonical(line) {
                self.words.insert(c);
            }
        }
    }

    pub fn extend_from_reader<R: BufRead>(&mut self, reader: R) -> std::io::Result<()> {
        for line in reader.lines() {
            self.extend_from_str(&line?);
        }
        Ok(())
    }

    pub fn contains(&self, canon: &str) -> bool {
        self.words.contains(canon)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// A numeric token in canonical decimal form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Number {
    /// Digits without grouping commas or redundant zeros, e.g. `4350000`, `12.5`.
    pub value: String,
    /// Set when the token was written with grouping commas (`2,022`).
    pub grouped: bool,
    /// Integer value, when the number has no fractional part and fits.
    pub integer: Option<u64>,
}

/// Parses a canonical token as a number. Accepts plain digit runs and
/// correctly grouped thousands (`4,350,000`), each with an optional
/// decimal part.
pub fn parse_number(canon: &str) -> Option<Number> {
    let (int_part, frac_part) = match canon.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (canon, None),
    };
    if int_part.is_empty() {
        return None;
    }
    if let Some(f) = frac_part {
        if f.is_empty() || !f.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
    }
    let grouped = int_part.contains(',');
    let digits: String = if grouped {
        let mut groups = int_part.split(',');
        let head = groups.next()?;
        if head.is_empty() || head.len() > 3 || !head.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let mut out = head.to_string();
        for g in groups {
            if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            out.push_str(g);
        }
        out
    } else {
        if !int_part.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        int_part.to_string()
    };

    let int_norm = {
        let t = digits.trim_start_matches('0');
        if t.is_empty() {
            "0".to_string()
        } else {
            t.to_string()
        }
    };
    let frac_norm = frac_part.map(|f| f.trim_end_matches('0')).unwrap_or("");
    let value = if frac_norm.is_empty() {
        int_norm.clone()
    } else {
        format!("{int_norm}.{frac_norm}")
    };
    let integer = if frac_norm.is_empty() {
        int_norm.parse::<u64>().ok()
    } else {
        None
    };
    Some(Number {
        value,
        grouped,
        integer,
    })
}

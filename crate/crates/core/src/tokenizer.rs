//! Instruction tokenization and the frequency-capped vocabulary.
//!
//! Three granularities are supported:
//!
//! * `FullI`: one token per instruction, separators joined with `_`
//!   (`mov rax, NUM` -> `mov_rax_NUM`).
//! * `HalfI`: opcode and operand list as two tokens.
//! * `PieceI`: every opcode/operand word as its own token.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TokenizerMode {
    #[default]
    FullI,
    HalfI,
    PieceI,
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerMode::FullI => "FullI",
            TokenizerMode::HalfI => "HalfI",
            TokenizerMode::PieceI => "PieceI",
        })
    }
}

impl FromStr for TokenizerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "fulli" | "full" => Ok(TokenizerMode::FullI),
            "halfi" | "half" => Ok(TokenizerMode::HalfI),
            "piecei" | "piece" => Ok(TokenizerMode::PieceI),
            _ => Err(format!("unknown tokenizer mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub vocab_cap: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            mode: TokenizerMode::FullI,
            vocab_cap: 21_000,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_cap < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Config(format!(
                "vocab_cap must be at least {}, got {}",
                SPECIAL_TOKENS.len() + 1,
                self.vocab_cap
            )));
        }
        Ok(())
    }
}

fn join_separators(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Tokens of a single normalized instruction.
pub fn tokenize_instruction(instr: &str, mode: TokenizerMode) -> Vec<String> {
    let instr = instr.trim();
    match mode {
        TokenizerMode::FullI => {
            let t = join_separators(instr);
            if t.is_empty() {
                Vec::new()
            } else {
                vec![t]
            }
        }
        TokenizerMode::HalfI => match instr.split_once(char::is_whitespace) {
            Some((op, rest)) if !join_separators(rest).is_empty() => {
                vec![op.to_string(), join_separators(rest)]
            }
            _ if instr.is_empty() => Vec::new(),
            _ => vec![join_separators(instr)],
        },
        TokenizerMode::PieceI => instr
            .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '.'))
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect(),
    }
}

pub fn tokenize<S: AsRef<str>>(instrs: &[S], mode: TokenizerMode) -> Vec<String> {
    instrs
        .iter()
        .flat_map(|i| tokenize_instruction(i.as_ref(), mode))
        .collect()
}

/// Frequency counts that can be filled per shard and merged.
#[derive(Debug, Clone, Default)]
pub struct TokenCounts(HashMap<String, u64>);

impl TokenCounts {
    pub fn add<S: AsRef<str>>(&mut self, token: S) {
        let token = token.as_ref();
        if let Some(c) = self.0.get_mut(token) {
            *c += 1;
        } else {
            self.0.insert(token.to_string(), 1);
        }
    }

    pub fn merge(&mut self, other: TokenCounts) {
        for (t, c) in other.0 {
            *self.0.entry(t).or_insert(0) += c;
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Specials first, then tokens by descending frequency with ties broken
    /// lexicographically, truncated at `config.vocab_cap`.
    pub fn finish(self, config: TokenizerConfig) -> Vocabulary {
        let mut ranked: Vec<(String, u64)> = self
            .0
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        if ranked.is_empty() {
            log::warn!("building a vocabulary from an empty token stream");
        }
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(config.vocab_cap.saturating_sub(SPECIAL_TOKENS.len()));
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Vocabulary::from_tokens(tokens, config).expect("ranked tokens are unique")
    }
}

pub fn build_vocab<I, S>(stream: I, config: TokenizerConfig) -> Vocabulary
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts = TokenCounts::default();
    for t in stream {
        counts.add(t);
    }
    counts.finish(config)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    config: TokenizerConfig,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, config: TokenizerConfig) -> Result<Self> {
        if tokens.len() > config.vocab_cap {
            return Err(Error::Validation(format!(
                "vocabulary has {} tokens, cap is {}",
                tokens.len(),
                config.vocab_cap
            )));
        }
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS.map(String::from)
        {
            return Err(Error::Validation(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn config(&self) -> TokenizerConfig {
        self.config
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Maps tokens to ids; unknown tokens become [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect()
    }

    /// Text form: a header comment, then one token per line where the
    /// line's index (header excluded) is the token id.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# uniasm-vocab mode={} cap={}\n",
            self.config.mode, self.config.vocab_cap
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let bad_header = |message: String| Error::Parse {
            line: 1,
            field: "header".into(),
            message,
        };
        let rest = header
            .strip_prefix("# uniasm-vocab")
            .ok_or_else(|| bad_header(format!("unexpected header {header:?}")))?;
        let mut mode = None;
        let mut cap = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("mode", v)) => mode = Some(v.parse().map_err(bad_header)?),
                Some(("cap", v)) => {
                    cap = Some(v.parse::<usize>().map_err(|e| bad_header(e.to_string()))?)
                }
                _ => {}
            }
        }
        let config = TokenizerConfig {
            mode: mode.ok_or_else(|| bad_header("missing mode".into()))?,
            vocab_cap: cap.ok_or_else(|| bad_header("missing cap".into()))?,
        };
        let tokens = lines.map(str::to_string).collect();
        Vocabulary::from_tokens(tokens, config)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_text();
        crate::io::write_atomic(path, |w| w.write_all(text.as_bytes()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cap: usize) -> TokenizerConfig {
        TokenizerConfig {
            mode: TokenizerMode::FullI,
            vocab_cap: cap,
        }
    }

    #[test]
    fn full_instruction_tokens() {
        assert_eq!(
            tokenize(&["mov rax, NUM"], TokenizerMode::FullI),
            vec!["mov_rax_NUM"]
        );
        assert_eq!(tokenize(&["ret"], TokenizerMode::FullI), vec!["ret"]);
        assert_eq!(
            tokenize(&["mov dword SBP, edi"], TokenizerMode::FullI),
            vec!["mov_dword_SBP_edi"]
        );
    }

    #[test]
    fn half_instruction_tokens() {
        assert_eq!(
            tokenize(&["mov rax, [rbx+NUM]"], TokenizerMode::HalfI),
            vec!["mov", "rax_[rbx+NUM]"]
        );
        assert_eq!(tokenize(&["ret"], TokenizerMode::HalfI), vec!["ret"]);
    }

    #[test]
    fn piece_instruction_tokens() {
        assert_eq!(
            tokenize(&["mov rax, [rbx+NUM]"], TokenizerMode::PieceI),
            vec!["mov", "rax", "rbx", "NUM"]
        );
        assert_eq!(
            tokenize(&["call sym.imp.puts"], TokenizerMode::PieceI),
            vec!["call", "sym.imp.puts"]
        );
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab(["a", "b", "a", "a"], cfg(7));
        assert_eq!(
            v.tokens(),
            &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "b"]
        );
    }

    #[test]
    fn ties_and_cap() {
        let v = build_vocab(["b", "a"], cfg(6));
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(5), Some("a"));
    }

    #[test]
    fn empty_stream_gives_specials() {
        let v = build_vocab(Vec::<String>::new(), cfg(10));
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("[MASK]"), Some(MASK));
    }

    #[test]
    fn encode_and_decode() {
        let v = build_vocab(["x", "y"], cfg(10));
        assert_eq!(v.encode(&["x"]), vec![5]);
        assert_eq!(v.encode(&["never"]), vec![UNK]);
        assert!(v.encode::<&str>(&[]).is_empty());
        let toks = ["y", "x", "y"];
        assert_eq!(v.decode(&v.encode(&toks)), toks);
    }

    #[test]
    fn text_roundtrip() {
        let v = build_vocab(["mov_rax_NUM", "ret", "ret"], cfg(100));
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("garbage\n").is_err());
    }

    #[test]
    fn rejects_small_cap() {
        assert!(cfg(5).validate().is_err());
        assert!(cfg(6).validate().is_ok());
    }

    #[test]
    fn shard_merge_matches_single_pass() {
        let all = ["a", "b", "c", "a", "c", "c"];
        let mut left = TokenCounts::default();
        let mut right = TokenCounts::default();
        all[..3].iter().for_each(|t| left.add(t));
        all[3..].iter().for_each(|t| right.add(t));
        left.merge(right);
        assert_eq!(left.finish(cfg(20)), build_vocab(all, cfg(20)));
    }
}

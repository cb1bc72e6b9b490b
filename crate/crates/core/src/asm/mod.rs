//! Disassembled-function ingestion, instruction normalization and
//! serialization into instruction sequences.
//!
//! The corpus is line-delimited JSON, one function per line:
//!
//! ```text
//! {"project":"coreutils","binary":"ls","compiler":"gcc","opt":"O2","obf":"none",
//!  "func_name":"main",
//!  "instructions":[{"addr":"0x401000","text":"push rbp"}, ...],
//!  "blocks":[[0,4],[4,9]],          // optional, half-open instruction ranges
//!  "edges":[[0,1]]}                 // optional, block index pairs
//! ```

mod normalize;
mod serialize;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Compiler, Obfuscation, OptLevel, VariantKey};
use crate::error::{Error, Result};

pub use normalize::{is_conditional_jump, normalize_instruction, PLACEHOLDERS};
pub use serialize::{
    longest_walk_blocks, path_instructions, random_walk_blocks, serialize_linear,
    serialize_longest_walk, serialize_random_walk, Serialization,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub text: String,
}

/// Basic blocks as half-open instruction ranges plus directed block edges.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cfg {
    pub blocks: Vec<(usize, usize)>,
    pub edges: Vec<(usize, usize)>,
}

impl Cfg {
    /// Checks that the blocks partition `[0, n)` and that edges reference
    /// existing blocks.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Validation("CFG has no blocks".into()));
        }
        let mut sorted = self.blocks.clone();
        sorted.sort_unstable();
        let mut cursor = 0;
        for &(start, end) in &sorted {
            if start >= end {
                return Err(Error::Validation(format!("empty block [{start},{end})")));
            }
            if start < cursor {
                return Err(Error::Validation(format!(
                    "block [{start},{end}) overlaps a previous block"
                )));
            }
            if start > cursor {
                return Err(Error::Validation(format!(
                    "instructions [{cursor},{start}) are not covered by any block"
                )));
            }
            cursor = end;
        }
        if cursor != n {
            return Err(Error::Validation(format!(
                "blocks cover [0,{cursor}) but the function has {n} instructions"
            )));
        }
        let nb = self.blocks.len();
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= nb || b >= nb) {
            return Err(Error::Validation(format!(
                "edge {a}->{b} references a block outside 0..{nb}"
            )));
        }
        Ok(())
    }

    /// Block containing the lowest instruction index.
    pub fn entry(&self) -> usize {
        self.blocks
            .iter()
            .enumerate()
            .min_by_key(|(_, &(start, _))| start)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn block_len(&self, block: usize) -> usize {
        let (s, e) = self.blocks[block];
        e - s
    }

    /// Deduplicated successor lists, in first-seen edge order.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.blocks.len()];
        for &(a, b) in &self.edges {
            if !succ[a].contains(&b) {
                succ[a].push(b);
            }
        }
        succ
    }
}

/// Provenance of a function: where it came from and how it was built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionMeta {
    pub project: String,
    pub binary: String,
    pub key: VariantKey,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFunction {
    pub meta: FunctionMeta,
    pub instructions: Vec<Instruction>,
    pub cfg: Option<Cfg>,
}

/// A function whose instruction texts have been normalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedFunction {
    pub meta: FunctionMeta,
    pub instructions: Vec<Instruction>,
    pub cfg: Option<Cfg>,
}

impl RawFunction {
    pub fn normalize(&self) -> NormalizedFunction {
        NormalizedFunction {
            meta: self.meta.clone(),
            instructions: self
                .instructions
                .iter()
                .map(|i| Instruction {
                    address: i.address,
                    text: normalize_instruction(&i.text),
                })
                .collect(),
            cfg: self.cfg.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.instructions.iter().position(|i| i.text.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "{}: instruction {i} has empty text",
                self.meta.name
            )));
        }
        if let Some(w) = self
            .instructions
            .windows(2)
            .find(|w| w[1].address <= w[0].address)
        {
            return Err(Error::Validation(format!(
                "{}: addresses not strictly increasing ({:#x} then {:#x})",
                self.meta.name, w[0].address, w[1].address
            )));
        }
        if let Some(cfg) = &self.cfg {
            cfg.validate(self.instructions.len())
                .map_err(|e| Error::Validation(format!("{}: {e}", self.meta.name)))?;
        }
        Ok(())
    }
}

impl NormalizedFunction {
    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.instructions.iter().map(|i| i.text.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InstructionRecord {
    addr: String,
    text: String,
}

/// One corpus line as stored on disk.
#[derive(Debug, Serialize, Deserialize)]
struct FunctionRecord {
    project: String,
    binary: String,
    compiler: String,
    opt: String,
    obf: String,
    func_name: String,
    instructions: Vec<InstructionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blocks: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<(usize, usize)>>,
}

fn parse_address(s: &str) -> Option<u64> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => u64::from_str_radix(s, 16).ok(),
    }
}

/// Parses one corpus record. `line` is 1-based and only used in diagnostics.
pub fn parse_function(record: &str, line: usize) -> Result<RawFunction> {
    let rec: FunctionRecord = serde_json::from_str(record).map_err(|e| Error::Parse {
        line,
        field: "record".into(),
        message: e.to_string(),
    })?;
    let field_err = |field: &str, message: String| Error::Parse {
        line,
        field: field.to_string(),
        message,
    };

    let compiler: Compiler = rec.compiler.parse().map_err(|e| field_err("compiler", e))?;
    let opt: OptLevel = rec.opt.parse().map_err(|e| field_err("opt", e))?;
    let obf: Obfuscation = rec.obf.parse().map_err(|e| field_err("obf", e))?;
    let key = VariantKey::new(compiler, opt, obf).map_err(|e| field_err("obf", e))?;

    let instructions = rec
        .instructions
        .into_iter()
        .enumerate()
        .map(|(i, ins)| {
            let address = parse_address(&ins.addr).ok_or_else(|| {
                field_err(
                    &format!("instructions[{i}].addr"),
                    format!("not a hex address: {:?}", ins.addr),
                )
            })?;
            Ok(Instruction {
                address,
                text: ins.text,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cfg = match (rec.blocks, rec.edges) {
        (None, None) => None,
        (Some(blocks), edges) => Some(Cfg {
            blocks,
            edges: edges.unwrap_or_default(),
        }),
        (None, Some(_)) => {
            return Err(field_err("edges", "edges given without blocks".into()));
        }
    };

    let f = RawFunction {
        meta: FunctionMeta {
            project: rec.project,
            binary: rec.binary,
            key,
            name: rec.func_name,
        },
        instructions,
        cfg,
    };
    f.validate().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
        other => other,
    })?;
    Ok(f)
}

/// Serializes a function back into a corpus record line.
pub fn format_record(f: &RawFunction) -> String {
    let rec = FunctionRecord {
        project: f.meta.project.clone(),
        binary: f.meta.binary.clone(),
        compiler: f.meta.key.compiler.to_string(),
        opt: f.meta.key.opt.to_string(),
        obf: f.meta.key.obf.to_string(),
        func_name: f.meta.name.clone(),
        instructions: f
            .instructions
            .iter()
            .map(|i| InstructionRecord {
                addr: format!("{:#x}", i.address),
                text: i.text.clone(),
            })
            .collect(),
        blocks: f.cfg.as_ref().map(|c| c.blocks.clone()),
        edges: f.cfg.as_ref().map(|c| c.edges.clone()),
    };
    serde_json::to_string(&rec).expect("corpus record serializes")
}

/// Parses every non-blank line of a corpus text.
pub fn parse_corpus(text: &str) -> Result<Vec<RawFunction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_function(l, i + 1))
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawFunction>> {
    parse_corpus(&crate::io::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(blocks: &str) -> String {
        format!(
            r#"{{"project":"p","binary":"b","compiler":"gcc","opt":"O0","obf":"none","func_name":"f",
            "instructions":[{{"addr":"0x10","text":"push rbp"}},{{"addr":"0x11","text":"mov rbp, rsp"}},{{"addr":"0x14","text":"ret"}}]{blocks}}}"#
        )
        .replace('\n', "")
    }

    #[test]
    fn parses_plain_record() {
        let f = parse_function(&record(""), 1).unwrap();
        assert_eq!(f.instructions.len(), 3);
        assert_eq!(f.instructions[1].address, 0x11);
        assert!(f.cfg.is_none());
        assert_eq!(f.meta.key.to_string(), "gcc-O0");
    }

    #[test]
    fn parses_cfg() {
        let f = parse_function(&record(r#","blocks":[[0,2],[2,3]],"edges":[[0,1]]"#), 1).unwrap();
        let cfg = f.cfg.unwrap();
        assert_eq!(cfg.blocks, vec![(0, 2), (2, 3)]);
        assert_eq!(cfg.edges, vec![(0, 1)]);
    }

    #[test]
    fn rejects_overlapping_blocks() {
        let err = parse_function(&record(r#","blocks":[[0,2],[1,3]]"#), 4).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("overlap")), "{err}");
    }

    #[test]
    fn rejects_dangling_edge() {
        let err = parse_function(&record(r#","blocks":[[0,3]],"edges":[[0,1]]"#), 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_non_monotonic_addresses() {
        let rec = record("").replace("0x14", "0x11");
        let err = parse_function(&rec, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("strictly increasing")));
    }

    #[test]
    fn parse_error_names_line_and_field() {
        let rec = record("").replace("\"gcc\"", "\"msvc\"");
        match parse_function(&rec, 7).unwrap_err() {
            Error::Parse { line, field, .. } => {
                assert_eq!(line, 7);
                assert_eq!(field, "compiler");
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            parse_function("{not json", 2).unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
    }

    #[test]
    fn obfuscation_requires_ollvm() {
        let rec = record("").replace("\"none\"", "\"bcf\"");
        assert!(matches!(
            parse_function(&rec, 1).unwrap_err(),
            Error::Parse { ref field, .. } if field == "obf"
        ));
    }

    #[test]
    fn record_roundtrip() {
        let f = parse_function(&record(r#","blocks":[[0,2],[2,3]],"edges":[[0,1]]"#), 1).unwrap();
        assert_eq!(parse_function(&format_record(&f), 1).unwrap(), f);
    }

    #[test]
    fn normalization_preserves_count() {
        let f = parse_function(&record(""), 1).unwrap();
        let n = f.normalize();
        assert_eq!(n.len(), f.instructions.len());
        assert_eq!(n.instructions[2].text, "ret");
    }
}

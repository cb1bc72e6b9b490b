//! Training-sample construction: similar-function pairs across compilation
//! variants, small-function filtering, swap augmentation, sequence packing
//! and the train/validation split.

use std::collections::BTreeMap;
use std::fmt;

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asm::{NormalizedFunction, Serialization};
use crate::error::{Error, Result};
use crate::tokenizer::{self, TokenizerMode, Vocabulary, CLS, SEP};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                $(if s.eq_ignore_ascii_case($text) { return Ok($name::$variant); })+
                Err(format!(concat!("unknown ", stringify!($name), " {:?}"), s))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Compiler {
    #[default]
    Gcc,
    Clang,
    Ollvm,
}
string_enum!(Compiler { Gcc => "gcc", Clang => "clang", Ollvm => "ollvm" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum OptLevel {
    #[default]
    O0,
    O1,
    O2,
    O3,
}
string_enum!(OptLevel { O0 => "O0", O1 => "O1", O2 => "O2", O3 => "O3" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Obfuscation {
    #[default]
    None,
    Sub,
    Fla,
    Bcf,
}
string_enum!(Obfuscation { None => "none", Sub => "sub", Fla => "fla", Bcf => "bcf" });

/// How a function binary was produced. Obfuscation only exists for Ollvm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VariantKey {
    pub compiler: Compiler,
    pub opt: OptLevel,
    pub obf: Obfuscation,
}

impl VariantKey {
    pub fn new(compiler: Compiler, opt: OptLevel, obf: Obfuscation) -> Result<Self, String> {
        if obf != Obfuscation::None && compiler != Compiler::Ollvm {
            return Err(format!("obfuscation {obf} requires compiler ollvm, got {compiler}"));
        }
        Ok(VariantKey { compiler, opt, obf })
    }

    /// Every valid key: gcc and clang at four levels, ollvm at four levels
    /// with and without each obfuscation.
    pub fn all() -> Vec<VariantKey> {
        let mut out = Vec::new();
        for &compiler in Compiler::ALL {
            for &opt in OptLevel::ALL {
                for &obf in Obfuscation::ALL {
                    if let Ok(k) = VariantKey::new(compiler, opt, obf) {
                        out.push(k);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.compiler, self.opt)?;
        if self.compiler == Compiler::Ollvm {
            write!(f, "-{}", self.obf)?;
        }
        Ok(())
    }
}

impl FromStr for VariantKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('-').collect();
        let (c, o, obf) = match parts.as_slice() {
            [c, o] => (c, o, Obfuscation::None),
            [c, o, b] => (c, o, b.parse()?),
            _ => return Err(format!("malformed variant key {s:?}")),
        };
        VariantKey::new(c.parse()?, o.parse()?, obf)
    }
}

impl Serialize for VariantKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariantKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Cell of the pairing table a variant pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairCell {
    GccGcc,
    GccClang,
    ClangClang,
    Obfuscated(Obfuscation),
}

impl PairCell {
    pub fn of(a: VariantKey, b: VariantKey) -> Option<PairCell> {
        use Compiler::*;
        let plain = |k: VariantKey| k.obf == Obfuscation::None;
        match (a.compiler, b.compiler) {
            (Gcc, Gcc) if a.opt != b.opt => Some(PairCell::GccGcc),
            (Clang, Clang) if a.opt != b.opt => Some(PairCell::ClangClang),
            (Gcc, Clang) | (Clang, Gcc) => Some(PairCell::GccClang),
            (Ollvm, Ollvm) if a.opt == b.opt && plain(a) != plain(b) => {
                Some(PairCell::Obfuscated(if plain(a) { b.obf } else { a.obf }))
            }
            _ => None,
        }
    }
}

/// Variant pairs to build for one function given the variants it has:
/// same-compiler optimization pairs for gcc and clang, every gcc/clang
/// level combination, and each ollvm obfuscation against the plain ollvm
/// build at the same level.
pub fn enumerate_pairs(available: &[VariantKey]) -> Vec<(VariantKey, VariantKey)> {
    let has = |k: &VariantKey| available.contains(k);
    let key = |c, o, b| VariantKey { compiler: c, opt: o, obf: b };
    let mut out = Vec::new();
    let levels = OptLevel::ALL;
    for compiler in [Compiler::Gcc, Compiler::Clang] {
        for (i, &lo) in levels.iter().enumerate() {
            for &hi in &levels[i + 1..] {
                let (a, b) = (key(compiler, lo, Obfuscation::None), key(compiler, hi, Obfuscation::None));
                if has(&a) && has(&b) {
                    out.push((a, b));
                }
            }
        }
        if compiler == Compiler::Gcc {
            for &g in levels {
                for &c in levels {
                    let (a, b) = (key(Compiler::Gcc, g, Obfuscation::None), key(Compiler::Clang, c, Obfuscation::None));
                    if has(&a) && has(&b) {
                        out.push((a, b));
                    }
                }
            }
        }
    }
    for &obf in &Obfuscation::ALL[1..] {
        for &opt in levels {
            let (a, b) = (key(Compiler::Ollvm, opt, Obfuscation::None), key(Compiler::Ollvm, opt, obf));
            if has(&a) && has(&b) {
                out.push((a, b));
            }
        }
    }
    out
}

pub const MIN_INSTRUCTIONS: usize = 10;

pub fn filter_small(f: &NormalizedFunction, min_instructions: usize) -> bool {
    f.len() >= min_instructions
}

/// Function identity shared by every variant of one source function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub project: String,
    pub func_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub first: Vec<String>,
    pub second: Vec<String>,
    pub identity: Identity,
    pub variants: (VariantKey, VariantKey),
}

impl PairSample {
    pub fn swapped(&self) -> PairSample {
        PairSample {
            first: self.second.clone(),
            second: self.first.clone(),
            identity: self.identity.clone(),
            variants: (self.variants.1, self.variants.0),
        }
    }
}

/// Each pair followed immediately by its swapped copy.
pub fn augment_swap(pairs: Vec<PairSample>) -> Vec<PairSample> {
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        let s = p.swapped();
        out.push(p);
        out.push(s);
    }
    out
}

/// Groups functions by identity and builds token pairs for every enumerated
/// variant pair. Functions under `min_instructions` are dropped first.
pub fn build_pairs(
    functions: &[NormalizedFunction],
    serialization: Serialization,
    mode: TokenizerMode,
    min_instructions: usize,
) -> Result<Vec<PairSample>> {
    let mut groups: BTreeMap<Identity, BTreeMap<VariantKey, &NormalizedFunction>> = BTreeMap::new();
    for f in functions.iter().filter(|f| filter_small(f, min_instructions)) {
        let id = Identity {
            project: f.meta.project.clone(),
            func_name: f.meta.name.clone(),
        };
        let slot = groups.entry(id).or_default();
        if slot.contains_key(&f.meta.key) {
            log::debug!(
                "duplicate {}/{} for {}; keeping the first",
                f.meta.project,
                f.meta.name,
                f.meta.key
            );
            continue;
        }
        slot.insert(f.meta.key, f);
    }

    let mut out = Vec::new();
    for (identity, variants) in groups {
        let keys: Vec<VariantKey> = variants.keys().copied().collect();
        let mut tokens: BTreeMap<VariantKey, Vec<String>> = BTreeMap::new();
        for (a, b) in enumerate_pairs(&keys) {
            for k in [a, b] {
                if !tokens.contains_key(&k) {
                    let instrs = serialization.apply(variants[&k])?;
                    tokens.insert(k, tokenizer::tokenize(&instrs, mode));
                }
            }
            out.push(PairSample {
                first: tokens[&a].clone(),
                second: tokens[&b].clone(),
                identity: identity.clone(),
                variants: (a, b),
            });
        }
    }
    Ok(out)
}

/// Model-ready sequence `[CLS] first [SEP] (second [SEP])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub len_first: usize,
    /// `None` for single-function packing.
    pub len_second: Option<usize>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.len_second.is_some()
    }

    /// Length of `[CLS] first [SEP]`.
    pub fn prefix_len(&self) -> usize {
        self.len_first + 2
    }

    /// Length of `second [SEP]`, zero for single sequences.
    pub fn target_len(&self) -> usize {
        self.len_second.map_or(0, |n| n + 1)
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> {
        0..self.ids.len()
    }

    pub fn validate(&self, max_len: usize) -> Result<()> {
        let expected = self.prefix_len() + self.target_len();
        let ok = self.ids.len() == expected
            && self.segments.len() == expected
            && expected <= max_len
            && self.ids[0] == CLS
            && self.ids[self.prefix_len() - 1] == SEP
            && (!self.is_pair() || self.ids[expected - 1] == SEP)
            && self
                .segments
                .iter()
                .enumerate()
                .all(|(i, &s)| s == u8::from(i >= self.prefix_len()));
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "malformed packed sequence (len {}, first {}, second {:?}, max {max_len})",
                self.ids.len(),
                self.len_first,
                self.len_second
            )))
        }
    }
}

/// Token budgets for a pair that has to fit in `max_len`: equal halves of
/// the free space (the odd leftover goes to the first function), with any
/// unused half handed to the other side.
pub fn pair_budgets(first: usize, second: usize, max_len: usize) -> (usize, usize) {
    let room = max_len - 3;
    if first + second <= room {
        return (first, second);
    }
    let half_second = room / 2;
    let half_first = room - half_second;
    if first < half_first {
        (first, room - first)
    } else if second < half_second {
        (room - second, second)
    } else {
        (half_first, half_second)
    }
}

pub fn pack_pair_ids(first: &[u32], second: &[u32], max_len: usize) -> Result<PackedSequence> {
    if max_len < 8 {
        return Err(Error::Contract(format!("max sequence length {max_len} < 8")));
    }
    let (nf, ns) = pair_budgets(first.len(), second.len(), max_len);
    let mut ids = Vec::with_capacity(nf + ns + 3);
    ids.push(CLS);
    ids.extend_from_slice(&first[..nf]);
    ids.push(SEP);
    let prefix = ids.len();
    ids.extend_from_slice(&second[..ns]);
    ids.push(SEP);
    let segments = (0..ids.len()).map(|i| u8::from(i >= prefix)).collect();
    Ok(PackedSequence {
        ids,
        segments,
        len_first: nf,
        len_second: Some(ns),
    })
}

pub fn pack_pair<S: AsRef<str>>(
    first: &[S],
    second: &[S],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PackedSequence> {
    pack_pair_ids(&vocab.encode(first), &vocab.encode(second), max_len)
}

/// `[CLS] f [SEP]` with `f` truncated to `max_len - 2`, all in segment 0.
pub fn pack_single_ids(ids: &[u32], max_len: usize) -> Result<PackedSequence> {
    if max_len < 8 {
        return Err(Error::Contract(format!("max sequence length {max_len} < 8")));
    }
    let n = ids.len().min(max_len - 2);
    let mut out = Vec::with_capacity(n + 2);
    out.push(CLS);
    out.extend_from_slice(&ids[..n]);
    out.push(SEP);
    Ok(PackedSequence {
        segments: vec![0; out.len()],
        ids: out,
        len_first: n,
        len_second: None,
    })
}

/// Shuffles swap units (a pair and its swapped copy) and splits them so
/// that `round(ratio * units)` land in the training part.
pub fn split_shuffle<T>(samples: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if samples.len() % 2 != 0 {
        return Err(Error::Contract(
            "swap-augmented samples must come in adjacent pairs".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Contract(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut units: Vec<[T; 2]> = Vec::with_capacity(samples.len() / 2);
    let mut it = samples.into_iter();
    while let (Some(a), Some(b)) = (it.next(), it.next()) {
        units.push([a, b]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let n_train = (ratio * units.len() as f64).round() as usize;
    let valid: Vec<T> = units.split_off(n_train).into_iter().flatten().collect();
    let train: Vec<T> = units.into_iter().flatten().collect();
    Ok((train, valid))
}

/// One packed training sequence plus where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(flatten)]
    pub identity: Identity,
    pub variants: (VariantKey, VariantKey),
    #[serde(flatten)]
    pub sequence: PackedSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub vocab_sha256: String,
    pub max_seq_len: usize,
    pub tokenizer_mode: TokenizerMode,
    pub records: usize,
}

impl DatasetHeader {
    pub const FORMAT: &'static str = "uniasm-dataset";

    pub fn new(vocab_sha256: String, max_seq_len: usize, mode: TokenizerMode, records: usize) -> Self {
        DatasetHeader {
            format: Self::FORMAT.into(),
            version: 1,
            vocab_sha256,
            max_seq_len,
            tokenizer_mode: mode,
            records,
        }
    }
}

/// Packs swap-augmented samples into dataset records.
pub fn pack_samples(
    samples: &[PairSample],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<DatasetRecord>> {
    samples
        .iter()
        .map(|s| {
            Ok(DatasetRecord {
                identity: s.identity.clone(),
                variants: s.variants,
                sequence: pack_pair(&s.first, &s.second, vocab, max_len)?,
            })
        })
        .collect()
}

/// Line-delimited JSON: a header line followed by one record per line.
pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    crate::io::write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, header)?;
        w.write_all(b"\n")?;
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let text = crate::io::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, field: &str, e: serde_json::Error| Error::Parse {
        line: line + 1,
        field: field.into(),
        message: e.to_string(),
    };
    let (i, first) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        field: "header".into(),
        message: "empty dataset file".into(),
    })?;
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| parse_err(i, "header", e))?;
    if header.format != DatasetHeader::FORMAT {
        return Err(Error::Parse {
            line: 1,
            field: "format".into(),
            message: format!("expected {:?}, got {:?}", DatasetHeader::FORMAT, header.format),
        });
    }
    let records = lines
        .map(|(i, l)| {
            let r: DatasetRecord = serde_json::from_str(l).map_err(|e| parse_err(i, "record", e))?;
            r.sequence
                .validate(header.max_seq_len)
                .map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))?;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    if records.len() != header.records {
        return Err(Error::Validation(format!(
            "header announces {} records, file has {}",
            header.records,
            records.len()
        )));
    }
    Ok((header, records))
}

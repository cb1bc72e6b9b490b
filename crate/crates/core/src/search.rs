//! Function embedding at inference time, cosine search, Recall@k and the
//! cross-variant evaluation pools.
//!
//! Scores are computed in double precision from the stored `f32` vectors.
//! Rankings sort by descending score and break ties by ascending pool
//! index, so every rank is deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asm::{NormalizedFunction, Serialization};
use crate::dataset::{pack_single_ids, Compiler, Identity, Obfuscation, OptLevel, VariantKey};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, ByteReader};
use crate::model::{function_embedding, MaskMode, Model, ModelInput};
use crate::numeric::Float;
use crate::tokenizer::{tokenize, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionLabel {
    pub project: String,
    pub func_name: String,
    pub variant: VariantKey,
}

impl FunctionLabel {
    pub fn identity(&self) -> Identity {
        Identity {
            project: self.project.clone(),
            func_name: self.func_name.clone(),
        }
    }
}

impl fmt::Display for FunctionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}@{}", self.project, self.func_name, self.variant)
    }
}

/// Embeddings with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    matrix: Array2<f32>,
    labels: Vec<FunctionLabel>,
}

impl EmbeddingPool {
    pub fn new(matrix: Array2<f32>, labels: Vec<FunctionLabel>) -> Result<Self> {
        if matrix.nrows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} embedding rows but {} labels",
                matrix.nrows(),
                labels.len()
            )));
        }
        if let Some(i) = matrix
            .outer_iter()
            .position(|r| r.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!("embedding of {} is not finite", labels[i])));
        }
        Ok(EmbeddingPool { matrix, labels })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingPool {
            matrix: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn labels(&self) -> &[FunctionLabel] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.matrix.row(i)
    }

    /// The rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingPool {
        EmbeddingPool {
            matrix: self.matrix.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Raw function embedding of an already-encoded function body.
pub fn embed_ids<T: Float>(model: &Model<T>, ids: &[u32]) -> Result<Array1<T>> {
    if ids.is_empty() {
        return Err(Error::Validation("cannot embed an empty function".into()));
    }
    let seq = pack_single_ids(ids, model.config.max_seq_len)?;
    let input = ModelInput::from_packed(&seq, MaskMode::Bidirectional)?;
    let f = model.forward(&input, false)?;
    Ok(function_embedding(f.cls(), &model.params))
}

/// Serializes, tokenizes, packs and embeds one function.
pub fn embed_function(
    f: &NormalizedFunction,
    model: &Model<f32>,
    vocab: &Vocabulary,
    serialization: Serialization,
) -> Result<Array1<f32>> {
    if f.is_empty() {
        return Err(Error::Validation(format!(
            "{}/{}: function has no instructions",
            f.meta.project, f.meta.name
        )));
    }
    let instrs = serialization.apply(f)?;
    let tokens = tokenize(&instrs, vocab.config().mode);
    embed_ids(model, &vocab.encode(&tokens))
}

/// Embeds every function, in parallel, keeping input order.
pub fn embed_pool(
    functions: &[NormalizedFunction],
    model: &Model<f32>,
    vocab: &Vocabulary,
    serialization: Serialization,
) -> Result<EmbeddingPool> {
    let rows = functions
        .par_iter()
        .map(|f| embed_function(f, model, vocab, serialization))
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = Array2::zeros((rows.len(), model.config.hidden));
    for (mut dst, src) in matrix.outer_iter_mut().zip(&rows) {
        dst.assign(src);
    }
    let labels = functions
        .iter()
        .map(|f| FunctionLabel {
            project: f.meta.project.clone(),
            func_name: f.meta.name.clone(),
            variant: f.meta.key,
        })
        .collect();
    EmbeddingPool::new(matrix, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

fn norm(v: ArrayView1<'_, f32>) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity in double precision; `-1` when either side is zero.
pub fn cosine(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (na * nb)
}

/// Every pool row ranked against `query`.
pub fn rank_all(query: ArrayView1<'_, f32>, pool: &EmbeddingPool) -> Result<Vec<Hit>> {
    if query.len() != pool.dim() {
        return Err(Error::Contract(format!(
            "query dimension {} != pool dimension {}",
            query.len(),
            pool.dim()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        log::warn!("zero-norm query; every score is -1");
    }
    let mut hits: Vec<Hit> = pool
        .matrix
        .outer_iter()
        .enumerate()
        .map(|(index, row)| {
            let rn = norm(row);
            let score = if qn == 0.0 || rn == 0.0 {
                if rn == 0.0 && qn != 0.0 {
                    log::warn!("zero-norm pool row {} scored -1", pool.labels[index]);
                }
                -1.0
            } else {
                let dot: f64 = query.iter().zip(row).map(|(&x, &y)| x as f64 * y as f64).sum();
                dot / (qn * rn)
            };
            Hit { index, score }
        })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    Ok(hits)
}

/// The `min(k, n)` best pool rows for `query`.
pub fn cosine_topk(query: ArrayView1<'_, f32>, pool: &EmbeddingPool, k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Contract("search pool is empty".into()));
    }
    let mut hits = rank_all(query, pool)?;
    hits.truncate(k);
    Ok(hits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub task: String,
    pub k: usize,
    pub n: usize,
    pub recall: f64,
    /// 1-based rank of each query's ground truth in the full target ranking.
    pub ranks: Vec<usize>,
}

impl RecallReport {
    /// Recall at a different cutoff from the same ranks.
    pub fn at(&self, k: usize) -> f64 {
        recall_from_ranks(&self.ranks, k)
    }
}

fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Recall@k where query `i`'s single correct target is `ground_truth[i]`.
pub fn recall_at_k(
    task: &str,
    queries: &EmbeddingPool,
    targets: &EmbeddingPool,
    ground_truth: &[Option<usize>],
    k: usize,
) -> Result<RecallReport> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if ground_truth.len() != queries.len() {
        return Err(Error::Contract(format!(
            "{} ground-truth entries for {} queries",
            ground_truth.len(),
            queries.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Contract("target pool is empty".into()));
    }
    let gt = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| match g {
            Some(t) if *t < targets.len() => Ok(*t),
            _ => Err(Error::Validation(format!(
                "query {i} ({}) has no ground-truth target",
                queries.labels[i]
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let hits = rank_all(queries.row(i), targets)?;
            Ok(hits.iter().position(|h| h.index == gt[i]).expect("target in ranking") + 1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallReport {
        task: task.to_string(),
        k,
        n: queries.len(),
        recall: recall_from_ranks(&ranks, k),
        ranks,
    })
}

/// A cross-variant search task: which variant supplies the queries and which
/// the targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSpec {
    /// GCC at `opt` against Clang at the same level.
    XCom { opt: OptLevel },
    /// One compiler, two optimization levels.
    XOpt {
        compiler: Compiler,
        source: OptLevel,
        target: OptLevel,
    },
    /// Plain Ollvm against one obfuscation at the same level.
    XObf { opt: OptLevel, obf: Obfuscation },
}

impl TaskSpec {
    pub fn variants(&self) -> Result<(VariantKey, VariantKey)> {
        let key = |c, o, b| VariantKey::new(c, o, b).map_err(Error::Config);
        match *self {
            TaskSpec::XCom { opt } => Ok((
                key(Compiler::Gcc, opt, Obfuscation::None)?,
                key(Compiler::Clang, opt, Obfuscation::None)?,
            )),
            TaskSpec::XOpt { compiler, source, target } => {
                if source == target {
                    return Err(Error::Config(format!("x-opt needs two different levels, got {source} twice")));
                }
                Ok((
                    key(compiler, source, Obfuscation::None)?,
                    key(compiler, target, Obfuscation::None)?,
                ))
            }
            TaskSpec::XObf { opt, obf } => {
                if obf == Obfuscation::None {
                    return Err(Error::Config("x-obf needs an obfuscation (sub, fla or bcf)".into()));
                }
                Ok((
                    key(Compiler::Ollvm, opt, Obfuscation::None)?,
                    key(Compiler::Ollvm, opt, obf)?,
                ))
            }
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskSpec::XCom { opt } => write!(f, "xcom:{opt}"),
            TaskSpec::XOpt { compiler, source, target } => write!(f, "xopt:{compiler}:{source}:{target}"),
            TaskSpec::XObf { opt, obf } => write!(f, "xobf:{opt}:{obf}"),
        }
    }
}

/// Parses `xcom:O0`, `xopt:gcc:O0:O3` or `xobf:O2:bcf`.
impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("task {s:?}: {m}"));
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            [t, o] if t.eq_ignore_ascii_case("xcom") => TaskSpec::XCom { opt: o.parse().map_err(bad)? },
            [t, c, a, b] if t.eq_ignore_ascii_case("xopt") => TaskSpec::XOpt {
                compiler: c.parse().map_err(bad)?,
                source: a.parse().map_err(bad)?,
                target: b.parse().map_err(bad)?,
            },
            [t, o, b] if t.eq_ignore_ascii_case("xobf") => TaskSpec::XObf {
                opt: o.parse().map_err(bad)?,
                obf: b.parse().map_err(bad)?,
            },
            _ => return Err(bad("expected xcom:<opt>, xopt:<compiler>:<opt>:<opt> or xobf:<opt>:<obf>".into())),
        };
        spec.variants()?;
        Ok(spec)
    }
}

impl Serialize for TaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPools {
    pub source: EmbeddingPool,
    pub target: EmbeddingPool,
    /// `ground_truth[i]` is the target row of source row `i`.
    pub ground_truth: Vec<usize>,
}

/// Splits an embedded corpus into the source and target pools of `spec`.
/// Functions present on only one side are dropped from both; rows come out
/// sorted by identity, so the ground truth is the identity pairing.
pub fn build_task_pools(corpus: &EmbeddingPool, spec: TaskSpec) -> Result<TaskPools> {
    let (src_key, tgt_key) = spec.variants()?;
    let index_of = |key: VariantKey| {
        let mut m: BTreeMap<Identity, usize> = BTreeMap::new();
        for (i, l) in corpus.labels.iter().enumerate() {
            if l.variant == key {
                m.entry(l.identity()).or_insert(i);
            }
        }
        m
    };
    let src = index_of(src_key);
    let tgt = index_of(tgt_key);
    let (s_rows, t_rows): (Vec<usize>, Vec<usize>) = src
        .iter()
        .filter_map(|(id, &s)| tgt.get(id).map(|&t| (s, t)))
        .unzip();
    if s_rows.is_empty() {
        return Err(Error::Validation(format!(
            "task {spec}: no function appears in both {src_key} and {tgt_key}"
        )));
    }
    let dropped = src.len() + tgt.len() - 2 * s_rows.len();
    if dropped > 0 {
        log::info!("task {spec}: dropped {dropped} functions without a counterpart");
    }
    Ok(TaskPools {
        ground_truth: (0..s_rows.len()).collect(),
        source: corpus.select(&s_rows),
        target: corpus.select(&t_rows),
    })
}

/// Runs `spec` on an embedded corpus.
pub fn evaluate_task(corpus: &EmbeddingPool, spec: TaskSpec, k: usize) -> Result<RecallReport> {
    let pools = build_task_pools(corpus, spec)?;
    let gt: Vec<Option<usize>> = pools.ground_truth.iter().copied().map(Some).collect();
    recall_at_k(&spec.to_string(), &pools.source, &pools.target, &gt, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnReport {
    pub task: String,
    pub k: usize,
    pub queries: usize,
    /// Per query: fraction of its ground-truth variants found in the top k.
    pub per_query: Vec<f64>,
    pub mean_recall: f64,
}

/// Each query's ground truth is every target row sharing its identity;
/// recall is the share of those rows inside the query's top `k`.
pub fn vuln_search(queries: &EmbeddingPool, targets: &EmbeddingPool, k: usize) -> Result<VulnReport> {
    if queries.is_empty() {
        return Err(Error::Validation("vulnerability search needs at least one query".into()));
    }
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let id = queries.labels[i].identity();
            let truth: Vec<usize> = (0..targets.len())
                .filter(|&t| targets.labels[t].identity() == id)
                .collect();
            if truth.is_empty() {
                return Err(Error::Validation(format!(
                    "query {i} ({}) has no ground-truth variant in the target pool",
                    queries.labels[i]
                )));
            }
            let top = cosine_topk(queries.row(i), targets, k)?;
            let found = top.iter().filter(|h| truth.contains(&h.index)).count();
            Ok(found as f64 / truth.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_recall = per_query.iter().sum::<f64>() / per_query.len() as f64;
    Ok(VulnReport {
        task: "vuln".into(),
        k,
        queries: queries.len(),
        per_query,
        mean_recall,
    })
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"UNIASMEM";
pub const EMBEDDING_VERSION: u32 = 1;
/// The only label encoding: one JSON object per row after the matrix.
pub const LABELS_JSONL: u32 = 1;

/// Embedding file layout (little-endian):
///
/// ```text
/// magic "UNIASMEM" | u32 version | u64 count | u64 dim | u32 label encoding
/// count * dim f32 values, row-major
/// count lines of JSON {"project", "func_name", "variant"}
/// ```
pub fn encode_embeddings(pool: &EmbeddingPool) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + pool.matrix.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(pool.len() as u64).to_le_bytes());
    out.extend_from_slice(&(pool.dim() as u64).to_le_bytes());
    out.extend_from_slice(&LABELS_JSONL.to_le_bytes());
    for x in pool.matrix.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for l in &pool.labels {
        out.extend_from_slice(serde_json::to_string(l).expect("label serializes").as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingPool> {
    let mut r = ByteReader::new(bytes, "embeddings");
    if r.take(8)? != EMBEDDING_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(r.bad(&format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let dim = r.u64()? as usize;
    if r.u32()? != LABELS_JSONL {
        return Err(r.bad("unknown label encoding"));
    }
    let n = count.checked_mul(dim).ok_or_else(|| r.bad("size overflow"))?;
    let matrix = Array2::from_shape_vec((count, dim), r.f32s(n)?).expect("shape matches");
    let rest = r.take(bytes.len() - (32 + n * 4))?;
    let text = std::str::from_utf8(rest).map_err(|_| r.bad("label table is not UTF-8"))?;
    let labels = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                field: "label".into(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<FunctionLabel>>>()?;
    if labels.len() != count {
        return Err(Error::Validation(format!(
            "embedding file has {count} rows but {} labels",
            labels.len()
        )));
    }
    EmbeddingPool::new(matrix, labels)
}

pub fn write_embeddings(path: &Path, pool: &EmbeddingPool) -> Result<()> {
    let bytes = encode_embeddings(pool);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingPool> {
    decode_embeddings(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn label(name: &str, variant: &str) -> FunctionLabel {
        FunctionLabel {
            project: "p".into(),
            func_name: name.into(),
            variant: variant.parse().unwrap(),
        }
    }

    fn pool(rows: Array2<f32>, names: &[(&str, &str)]) -> EmbeddingPool {
        let labels = names.iter().map(|(n, v)| label(n, v)).collect();
        EmbeddingPool::new(rows, labels).unwrap()
    }

    #[test]
    fn exact_match_ranks_first() {
        let p = pool(array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]], &[("a", "gcc-O0"), ("b", "gcc-O0"), ("c", "gcc-O0")]);
        let hits = cosine_topk(array![2.0, 0.0].view(), &p, 2).unwrap();
        assert_eq!(hits[0].index, 1);
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits.len(), 2);
        assert_eq!(cosine(array![1.0, 0.0].view(), array![0.0, 3.0].view()), 0.0);
    }

    #[test]
    fn ties_break_by_index_and_zero_rows_score_worst() {
        let p = pool(array![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]], &[("a", "gcc-O0"), ("b", "gcc-O0"), ("c", "gcc-O0")]);
        let hits = cosine_topk(array![1.0, 0.0].view(), &p, 5).unwrap();
        assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), [1, 2, 0]);
        assert_eq!(hits[2].score, -1.0);
    }

    #[test]
    fn recall_from_given_ranks() {
        assert!((recall_from_ranks(&[1, 3, 5], 3) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_from_ranks(&[1, 1], 1), 1.0);
    }

    #[test]
    fn missing_ground_truth_names_the_query() {
        let q = pool(array![[1.0, 0.0]], &[("lonely", "gcc-O0")]);
        let err = recall_at_k("t", &q, &q, &[None], 1).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn task_pools_drop_unmatched_symmetrically() {
        let names = [
            ("a", "gcc-O0"),
            ("b", "gcc-O0"),
            ("only_src", "gcc-O0"),
            ("b", "clang-O0"),
            ("a", "clang-O0"),
            ("only_tgt", "clang-O0"),
            ("a", "clang-O1"),
        ];
        let rows = Array2::from_shape_fn((7, 3), |(i, j)| (i * 3 + j) as f32 + 1.0);
        let p = pool(rows, &names);
        let t = build_task_pools(&p, "xcom:O0".parse().unwrap()).unwrap();
        let n = |pl: &EmbeddingPool| pl.labels().iter().map(|l| l.func_name.clone()).collect::<Vec<_>>();
        assert_eq!(n(&t.source), ["a", "b"]);
        assert_eq!(n(&t.target), ["a", "b"]);
        assert_eq!(t.ground_truth, [0, 1]);
        assert!(build_task_pools(&p, "xobf:O0:bcf".parse().unwrap()).is_err());
    }

    #[test]
    fn task_spec_strings() {
        for s in ["xcom:O1", "xopt:clang:O0:O3", "xobf:O2:fla"] {
            assert_eq!(s.parse::<TaskSpec>().unwrap().to_string(), s);
        }
        for s in ["xcom", "xopt:gcc:O1:O1", "xobf:O2:none", "xobf:O2:zzz", "xopt:ollvm:O0"] {
            assert!(s.parse::<TaskSpec>().is_err(), "{s}");
        }
        let (a, b) = "xobf:O2:bcf".parse::<TaskSpec>().unwrap().variants().unwrap();
        assert_eq!((a.to_string(), b.to_string()), ("ollvm-O2-none".into(), "ollvm-O2-bcf".into()));
    }

    #[test]
    fn vuln_recall_counts_variants_in_top_k() {
        let q = pool(array![[1.0, 0.0]], &[("bug", "gcc-O0")]);
        let t = pool(
            array![[1.0, 0.1], [0.0, 1.0], [1.0, 0.2], [1.0, 0.0]],
            &[("bug", "clang-O0"), ("bug", "gcc-O3"), ("x", "gcc-O0"), ("y", "gcc-O0")],
        );
        let r = vuln_search(&q, &t, 2).unwrap();
        assert!((r.mean_recall - 0.5).abs() < 1e-15);
        assert!(vuln_search(&EmbeddingPool::empty(2), &t, 2).is_err());
    }

    #[test]
    fn embedding_file_roundtrip() {
        let p = pool(array![[1.5, -0.0], [f32::MIN_POSITIVE, 3.0]], &[("a", "ollvm-O3-sub"), ("b", "gcc-O1")]);
        let back = decode_embeddings(&encode_embeddings(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_embeddings(&back), encode_embeddings(&p));
        let empty = EmbeddingPool::empty(4);
        assert_eq!(decode_embeddings(&encode_embeddings(&empty)).unwrap(), empty);
        let mut bytes = encode_embeddings(&p);
        bytes.truncate(40);
        assert!(decode_embeddings(&bytes).is_err());
    }

    #[test]
    fn zero_model_embeds_to_zero() {
        let config = crate::model::ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 4,
            intermediate: 4,
            max_seq_len: 8,
            vocab_size: 10,
        };
        let m = Model::<f32>::zeros(config);
        let long: Vec<u32> = (5..10).cycle().take(40).collect();
        assert!(embed_ids(&m, &long).unwrap().iter().all(|&x| x == 0.0));
        assert!(embed_ids(&m, &[]).is_err());
    }
}

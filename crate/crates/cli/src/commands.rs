//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use uniasm::asm::{read_corpus, NormalizedFunction};
use uniasm::dataset::{
    augment_swap, build_pairs, filter_small, pack_samples, read_dataset, split_shuffle, write_dataset,
    DatasetHeader,
};
use uniasm::io::{file_sha256, write_atomic};
use uniasm::model::{read_checkpoint, Model, ModelConfig};
use uniasm::search::{
    cosine_topk, embed_pool, read_embeddings, vuln_search, write_embeddings, build_task_pools, recall_at_k,
    EmbeddingPool, TaskSpec,
};
use uniasm::tokenizer::{build_vocab, tokenize, Vocabulary};
use uniasm::train::{TaskSet, Trainer, TrainingRun};
use uniasm::{Error, Result};

use crate::config::{require, require_input, RunConfig};
use crate::{
    Cli, Command, DatasetArgs, EmbedArgs, EvalArgs, ExportArgs, InspectArgs, SearchArgs, TrainArgs, VocabArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(p) = &cli.config {
        if !p.exists() {
            return Err(Error::Validation(format!("config {} does not exist", p.display())));
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Inspect(a) => inspect(&cfg, a),
        Command::Vocab(a) => vocab(cfg, a),
        Command::Dataset(a) => dataset(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Embed(a) => embed(&cfg, a),
        Command::Search(a) => search(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Export(a) => export(&cfg, a),
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes")
}

/// Writes report lines atomically.
fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    write_atomic(path, |w| lines.iter().try_for_each(|l| writeln!(w, "{l}")))
}

fn load_corpus(path: &Path) -> Result<Vec<NormalizedFunction>> {
    Ok(read_corpus(path)?.iter().map(|f| f.normalize()).collect())
}

/// Functions long enough to enter datasets and evaluation pools.
fn usable(cfg: &RunConfig, functions: Vec<NormalizedFunction>) -> Vec<NormalizedFunction> {
    let before = functions.len();
    let kept: Vec<_> = functions
        .into_iter()
        .filter(|f| filter_small(f, cfg.dataset.min_instructions))
        .collect();
    if kept.len() < before {
        log::info!(
            "dropped {} functions under {} instructions",
            before - kept.len(),
            cfg.dataset.min_instructions
        );
    }
    kept
}

pub const BUCKETS: [(&str, usize); 5] = [
    ("[0-128]", 128),
    ("[129-256]", 256),
    ("[257-512]", 512),
    ("[513-1024]", 1024),
    ("[>1024]", usize::MAX),
];

#[derive(Debug, Serialize)]
struct Bucket {
    bucket: &'static str,
    functions: usize,
}

#[derive(Debug, Serialize)]
struct InspectReport {
    command: &'static str,
    corpus: PathBuf,
    functions: usize,
    instructions: usize,
    with_cfg: usize,
    below_min_instructions: usize,
    variants: BTreeMap<String, usize>,
    length_buckets: Vec<Bucket>,
}

fn inspect(cfg: &RunConfig, a: InspectArgs) -> Result<()> {
    let path = require_input(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let functions = load_corpus(&path)?;
    let mut buckets: Vec<Bucket> = BUCKETS.iter().map(|&(bucket, _)| Bucket { bucket, functions: 0 }).collect();
    let mut variants = BTreeMap::new();
    for f in &functions {
        let slot = BUCKETS.iter().position(|&(_, hi)| f.len() <= hi).expect("last bucket is open");
        buckets[slot].functions += 1;
        *variants.entry(f.meta.key.to_string()).or_insert(0) += 1;
    }
    let report = InspectReport {
        command: "inspect",
        corpus: path,
        functions: functions.len(),
        instructions: functions.iter().map(|f| f.len()).sum(),
        with_cfg: functions.iter().filter(|f| f.cfg.is_some()).count(),
        below_min_instructions: functions
            .iter()
            .filter(|f| !filter_small(f, cfg.dataset.min_instructions))
            .count(),
        variants,
        length_buckets: buckets,
    };
    let line = json_line(&report);
    if let Some(out) = a.out {
        write_lines(&out, std::slice::from_ref(&line))?;
    }
    println!("{line}");
    Ok(())
}

fn vocab(mut cfg: RunConfig, a: VocabArgs) -> Result<()> {
    let corpus = require_input(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let out = require(&a.out, &cfg.paths.vocab, "vocabulary output")?;
    if let Some(m) = a.mode {
        cfg.tokenizer.mode = m.parse().map_err(Error::Config)?;
    }
    if let Some(c) = a.vocab_cap {
        cfg.tokenizer.vocab_cap = c;
    }
    cfg.tokenizer.validate()?;
    let functions = usable(&cfg, load_corpus(&corpus)?);
    let mut streams = Vec::with_capacity(functions.len());
    for f in &functions {
        streams.push(tokenize(&cfg.dataset.serialization.apply(f)?, cfg.tokenizer.mode));
    }
    let vocab = build_vocab(streams.into_iter().flatten(), cfg.tokenizer);
    vocab.write(&out)?;
    println!(
        "{}",
        json_line(&serde_json::json!({
            "command": "vocab",
            "out": out,
            "mode": cfg.tokenizer.mode.to_string(),
            "size": vocab.len(),
            "functions": functions.len(),
        }))
    );
    Ok(())
}

fn dataset(mut cfg: RunConfig, a: DatasetArgs) -> Result<()> {
    let corpus = require_input(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let vocab_path = require_input(&a.vocab, &cfg.paths.vocab, "vocabulary")?;
    let out = require(&a.out, &cfg.paths.dataset_dir, "dataset directory")?;
    let mut model = cfg.model.unwrap_or_default();
    if let Some(n) = a.max_seq_len {
        model.max_seq_len = n;
    }
    if let Some(s) = a.split_seed {
        cfg.dataset.split_seed = s;
    }
    let vocab = Vocabulary::read(&vocab_path)?;
    let functions = load_corpus(&corpus)?;
    let mode = vocab.config().mode;
    let pairs = build_pairs(&functions, cfg.dataset.serialization, mode, cfg.dataset.min_instructions)?;
    if pairs.is_empty() {
        return Err(Error::Validation(
            "corpus yields no variant pairs (each function needs two compatible variants)".into(),
        ));
    }
    let samples = augment_swap(pairs);
    let (train, valid) = split_shuffle(samples, cfg.dataset.split_ratio, cfg.dataset.split_seed)?;
    let sha = file_sha256(&vocab_path)?;
    let mut summary = serde_json::Map::new();
    summary.insert("command".into(), "dataset".into());
    let mut outputs = Vec::new();
    for (name, part) in [("train", &train), ("valid", &valid)] {
        let records = pack_samples(part, &vocab, model.max_seq_len)?;
        let header = DatasetHeader::new(sha.clone(), model.max_seq_len, mode, records.len());
        summary.insert(name.into(), records.len().into());
        outputs.push((out.join(format!("{name}.jsonl")), header, records));
    }
    for (path, header, records) in &outputs {
        write_dataset(path, header, records)?;
    }
    println!("{}", json_line(&summary));
    Ok(())
}

fn check_model(cfg: &RunConfig, model: &ModelConfig, vocab: &Vocabulary, source: &Path) -> Result<()> {
    if model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "{} has vocabulary size {} but the vocabulary file has {} tokens",
            source.display(),
            model.vocab_size,
            vocab.len()
        )));
    }
    if let Some(section) = &cfg.model {
        let expected = section.with_vocab(vocab.len());
        if &expected != model {
            return Err(Error::Config(format!(
                "{} was built with {model:?}, but the configuration asks for {expected:?}",
                source.display()
            )));
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path, vocab: &Vocabulary) -> Result<Model<f32>> {
    let model = read_checkpoint(path)?;
    check_model(cfg, &model.config, vocab, path)?;
    Ok(model)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let data_path = match (&a.dataset, &cfg.paths.dataset_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("train.jsonl"),
        (None, None) => return Err(Error::Config("no training dataset given".into())),
    };
    if !data_path.exists() {
        return Err(Error::Validation(format!("dataset {} does not exist", data_path.display())));
    }
    let vocab_path = require_input(&a.vocab, &cfg.paths.vocab, "vocabulary")?;
    let run_dir = require(&a.run_dir, &cfg.paths.run_dir, "run directory")?;
    if run_dir.exists() {
        return Err(Error::Validation(format!("run directory {} already exists", run_dir.display())));
    }
    let t = &mut cfg.train;
    if let Some(v) = a.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = &a.tasks {
        t.tasks = TaskSet::parse_list(v)?;
    }
    cfg.train.validate()?;

    let vocab = Vocabulary::read(&vocab_path)?;
    let (header, records) = read_dataset(&data_path)?;
    let sha = file_sha256(&vocab_path)?;
    if header.vocab_sha256 != sha {
        return Err(Error::Validation(format!(
            "dataset {} was built with a different vocabulary than {}",
            data_path.display(),
            vocab_path.display()
        )));
    }
    let model_config = cfg.model.unwrap_or_default().with_vocab(vocab.len());
    model_config.validate()?;
    if header.max_seq_len > model_config.max_seq_len {
        return Err(Error::Config(format!(
            "dataset sequences reach {} tokens but the model allows {}",
            header.max_seq_len, model_config.max_seq_len
        )));
    }
    let data: Vec<_> = records.into_iter().map(|r| r.sequence).collect();

    // Train into a hidden sibling directory and rename it into place at the
    // end, so a failed run leaves nothing at `run_dir`.
    let parent = match run_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::Io { path: parent.clone(), source: e })?;
    let staging = tempfile::Builder::new()
        .prefix(".uniasm-run-")
        .tempdir_in(&parent)
        .map_err(|e| Error::Io { path: parent.clone(), source: e })?;
    let mut snapshot = cfg.clone();
    snapshot.model = Some(cfg.model.unwrap_or_default());
    let mut run = TrainingRun::create(staging.path(), &snapshot)?;
    let model = Model::init(model_config, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let history = trainer.fit(&data, Some(&mut run))?;
    drop(run);
    let staged = staging.keep();
    std::fs::rename(&staged, &run_dir).map_err(|e| Error::Io { path: run_dir.clone(), source: e })?;

    let last = history.last();
    println!(
        "{}",
        json_line(&serde_json::json!({
            "command": "train",
            "run_dir": run_dir,
            "steps": trainer.optimizer.step(),
            "final": last,
        }))
    );
    Ok(())
}

fn embed(cfg: &RunConfig, a: EmbedArgs) -> Result<()> {
    let corpus = require_input(&a.corpus, &cfg.paths.corpus, "corpus")?;
    let vocab_path = require_input(&a.vocab, &cfg.paths.vocab, "vocabulary")?;
    let checkpoint = match (&a.checkpoint, &cfg.paths.checkpoint, &cfg.paths.run_dir) {
        (Some(p), _, _) | (None, Some(p), _) => p.clone(),
        (None, None, Some(dir)) => dir.join("model.bin"),
        (None, None, None) => return Err(Error::Config("no checkpoint given".into())),
    };
    if !checkpoint.exists() {
        return Err(Error::Validation(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let out = require(&a.out, &cfg.paths.embeddings, "embedding output")?;
    let vocab = Vocabulary::read(&vocab_path)?;
    let model = load_model(cfg, &checkpoint, &vocab)?;
    let functions = usable(cfg, load_corpus(&corpus)?);
    let pool = embed_pool(&functions, &model, &vocab, cfg.dataset.serialization)?;
    write_embeddings(&out, &pool)?;
    println!(
        "{}",
        json_line(&serde_json::json!({
            "command": "embed",
            "out": out,
            "functions": pool.len(),
            "dim": pool.dim(),
        }))
    );
    Ok(())
}

fn load_pool(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<EmbeddingPool> {
    read_embeddings(&require_input(flag, &cfg.paths.embeddings, "embeddings")?)
}

fn search(cfg: &RunConfig, a: SearchArgs) -> Result<()> {
    let queries = load_pool(&a.embeddings, cfg)?;
    let targets = match &a.targets {
        Some(p) => read_embeddings(p)?,
        None => queries.clone(),
    };
    let q = queries
        .labels()
        .iter()
        .position(|l| l.to_string() == a.query)
        .ok_or_else(|| Error::Validation(format!("no function labelled {:?} in the pool", a.query)))?;
    let hits = cosine_topk(queries.row(q), &targets, a.k)?;
    for (rank, h) in hits.iter().enumerate() {
        println!(
            "{}",
            json_line(&serde_json::json!({
                "rank": rank + 1,
                "label": targets.labels()[h.index],
                "score": h.score,
            }))
        );
    }
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let pool = load_pool(&a.embeddings, cfg)?;
    let tasks: Vec<TaskSpec> = if a.tasks.is_empty() {
        cfg.eval.tasks.clone()
    } else {
        a.tasks.iter().map(|t| t.parse()).collect::<Result<_>>()?
    };
    let mut ks = if a.k.is_empty() { cfg.eval.k.clone() } else { a.k.clone() };
    if tasks.is_empty() && a.vuln.is_none() {
        return Err(Error::Config("nothing to evaluate: give --task or --vuln".into()));
    }
    if a.vuln.is_some() && a.k.is_empty() {
        ks = vec![11];
    }
    if ks.contains(&0) || ks.is_empty() {
        return Err(Error::Config("every k must be at least 1".into()));
    }

    let mut lines = Vec::new();
    for spec in tasks {
        let pools = build_task_pools(&pool, spec)?;
        let gt: Vec<Option<usize>> = pools.ground_truth.iter().copied().map(Some).collect();
        let base = recall_at_k(&spec.to_string(), &pools.source, &pools.target, &gt, ks[0])?;
        for &k in &ks {
            let mut report = base.clone();
            report.k = k;
            report.recall = base.at(k);
            lines.push(json_line(&report));
        }
    }
    if let Some(name) = &a.vuln {
        let (project, func) = name
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("--vuln expects project/func_name, got {name:?}")))?;
        let rows: Vec<usize> = (0..pool.len())
            .filter(|&i| pool.labels()[i].project == project && pool.labels()[i].func_name == func)
            .collect();
        let queries = pool.select(&rows);
        let targets = match &a.targets {
            Some(p) => read_embeddings(p)?,
            None => pool.clone(),
        };
        for &k in &ks {
            lines.push(json_line(&vuln_search(&queries, &targets, k)?));
        }
    }
    if let Some(out) = a.out.as_ref().or(cfg.paths.reports.as_ref()) {
        write_lines(out, &lines)?;
    }
    for l in &lines {
        println!("{l}");
    }
    Ok(())
}

fn export(cfg: &RunConfig, a: ExportArgs) -> Result<()> {
    let pool = load_pool(&a.embeddings, cfg)?;
    write_atomic(&a.out, |w| {
        write!(w, "project\tfunc_name\tvariant")?;
        for j in 0..pool.dim() {
            write!(w, "\tv{j}")?;
        }
        writeln!(w)?;
        for (i, l) in pool.labels().iter().enumerate() {
            write!(w, "{}\t{}\t{}", l.project, l.func_name, l.variant)?;
            for x in pool.row(i) {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    })?;
    println!(
        "{}",
        json_line(&serde_json::json!({ "command": "export", "out": a.out, "rows": pool.len() }))
    );
    Ok(())
}

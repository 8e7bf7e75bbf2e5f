//! The `ccse` command line. Every subcommand reads a [`RunConfig`] (file
//! values overridden by flags), echoes the effective config into its report,
//! and keeps the wall-clock time under a single `timestamp` key.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::corpus::{build_vocab, load_corpus, Corpus};
use crate::encoder::load_external_embeddings;
use crate::error::{Error, Result};
use crate::format;
use crate::head::PoolerType;
use crate::linalg;
use crate::loss::{LossType, PositiveMode};
use crate::metrics::{alignment_report, mean_reciprocal_rank, EvalReport, LanguageEval};
use crate::sampler::{draw_batches, oversample_weights, plan_epoch};
use crate::search::{build_index, Index};
use crate::synthetic::{self, SyntheticConfig};
use crate::trainer::{
    grad_check, load_checkpoint, mrr_by_language, run_ablation, save_checkpoint, train, Model, OptimizerKind,
};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
/// `gradcheck` found a relative error at or above [`GRADCHECK_LIMIT`].
pub const EXIT_GRADCHECK: i32 = 3;
pub const GRADCHECK_LIMIT: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "ccse", version, about = "Contrastive code/comment sentence embeddings", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-language counts, fractions, oversampling weights and ratios
    Stats(Flags),
    /// Train the tiny encoder and head; writes a checkpoint and history
    Train(Flags),
    /// Train the pooler x MLP x loss grid and report alignment on held-out data
    Ablate(Flags),
    /// Compare analytic gradients with finite differences
    Gradcheck(Flags),
    /// Write code and document embeddings of a corpus
    Embed(Flags),
    /// Alignment of paired embeddings
    Align(Flags),
    /// Per-language mean reciprocal rank of documents against code
    Mrr(Flags),
    /// Rank candidates for each query line; prints JSON lines
    Search(Flags),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct Flags {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    valid: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    code_embeddings: Option<String>,
    #[arg(long)]
    doc_embeddings: Option<String>,
    #[arg(long)]
    index: Option<String>,
    #[arg(long)]
    queries: Option<String>,
    /// Comma-separated language filter
    #[arg(long, value_delimiter = ',')]
    languages: Option<Vec<String>>,
    /// Comma-separated base batch order
    #[arg(long, value_delimiter = ',')]
    language_order: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_enum::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_enum::<PoolerType>)]
    pooler: Option<PoolerType>,
    #[arg(long)]
    mlp_layers: Option<usize>,
    #[arg(long, value_parser = parse_enum::<LossType>)]
    loss_type: Option<LossType>,
    #[arg(long, value_parser = parse_enum::<PositiveMode>)]
    positive_mode: Option<PositiveMode>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    n_random: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    gradcheck_params: Option<usize>,
    #[arg(long)]
    gradcheck_batch: Option<usize>,
}

macro_rules! override_fields {
    ($flags:expr, $cfg:expr, opt: [$($o:ident),*], val: [$($v:ident),*]) => {
        $(if let Some(x) = $flags.$o { $cfg.$o = Some(x); })*
        $(if let Some(x) = $flags.$v { $cfg.$v = x; })*
    };
}

impl Flags {
    fn resolve(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        override_fields!(self, cfg,
            opt: [data, valid, checkpoint, code_embeddings, doc_embeddings, index, queries],
            val: [output, languages, language_order, seed, epochs, learning_rate, optimizer, batch_size, alpha,
                  pooler, mlp_layers, loss_type, positive_mode, temperature, hidden, max_len, vocab_size,
                  init_scale, n_random, k, epsilon, gradcheck_params, gradcheck_batch]);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("CCSE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CCSE_THREADS must be a positive integer, got {value:?}"))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Stats(f) => stats(&f.resolve()?),
        Command::Train(f) => train_cmd(&f.resolve()?),
        Command::Ablate(f) => ablate(&f.resolve()?),
        Command::Gradcheck(f) => gradcheck(&f.resolve()?),
        Command::Embed(f) => embed(&f.resolve()?),
        Command::Align(f) => align(&f.resolve()?),
        Command::Mrr(f) => mrr(&f.resolve()?),
        Command::Search(f) => search(&f.resolve()?),
    }
}

fn required<'a>(value: &'a Option<String>, key: &str) -> Result<&'a str> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing --{}", key.replace('_', "-"))))
}

fn load_data(cfg: &RunConfig) -> Result<Corpus> {
    load_corpus(required(&cfg.data, "data")?, &cfg.languages)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

/// Report object: the given fields plus `config` and `timestamp`.
fn report(cfg: &RunConfig, fields: Value) -> Value {
    let mut map = match fields {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("result".into(), other);
            m
        }
    };
    map.insert("config".into(), to_value(cfg));
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    map.insert("timestamp".into(), now.into());
    Value::Object(map)
}

fn write_report(dir: &Path, name: &str, value: &Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string_pretty(value)? + "\n";
    let path = dir.join(name);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(())
}

fn stats(cfg: &RunConfig) -> Result<i32> {
    let corpus = load_data(cfg)?;
    let sampler = cfg.sampler();
    let weights: BTreeMap<String, f64> = oversample_weights(&corpus.stats, cfg.alpha)?.into_iter().collect();
    let plan = plan_epoch(&corpus.stats, &sampler, 0)?;
    let languages: Vec<Value> = corpus
        .stats
        .counts()
        .iter()
        .map(|(lang, n)| {
            let p = plan.get(lang).expect("planned language");
            json!({
                "language": lang,
                "count": n,
                "fraction": corpus.stats.fraction(lang),
                "weight": weights[lang],
                "sampled": p.sampled,
                "ratio": p.ratio(),
                "batches": p.batches,
            })
        })
        .collect();
    let body = report(
        cfg,
        json!({
            "total": corpus.stats.total(),
            "skipped_unknown_language": corpus.skipped_unknown_language,
            "languages": languages,
        }),
    );
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(0)
}

fn train_cmd(cfg: &RunConfig) -> Result<i32> {
    let corpus = load_data(cfg)?;
    let outcome = train(&corpus, &cfg.train_config())?;
    let mut checkpoint = outcome.checkpoint;
    checkpoint.manifest.run_config = Some(to_value(cfg));
    let out = Path::new(&cfg.output);
    save_checkpoint(&checkpoint, out.join("checkpoint"))?;
    let body = report(
        cfg,
        json!({
            "checkpoint": out.join("checkpoint"),
            "final_loss": checkpoint.manifest.final_loss,
            "history": outcome.history,
        }),
    );
    write_report(out, "history.json", &body)?;
    Ok(0)
}

fn ablate(cfg: &RunConfig) -> Result<i32> {
    let train_corpus = load_data(cfg)?;
    let valid = match &cfg.valid {
        Some(path) => load_corpus(path, &cfg.languages)?,
        None => train_corpus.clone(),
    };
    let out = Path::new(&cfg.output);
    let entries = run_ablation(&train_corpus, &valid, &cfg.train_config(), cfg.n_random, |entry, outcome| {
        let name = format!("{}_mlp{}_{}", entry.pooler, entry.mlp_layers, entry.loss_type);
        eprintln!(
            "{name}: positive {:.4} negative {:.4} diff {:.4}",
            entry.alignment.positive, entry.alignment.negative, entry.alignment.diff
        );
        let mut ckpt = outcome.checkpoint.clone();
        ckpt.manifest.run_config = Some(to_value(cfg));
        save_checkpoint(&ckpt, out.join("ablation").join(name))
    })?;

    let mut table: BTreeMap<String, BTreeMap<String, BTreeMap<String, Value>>> = BTreeMap::new();
    for e in &entries {
        table
            .entry(e.pooler.to_string())
            .or_default()
            .entry(format!("mlp{}", e.mlp_layers))
            .or_default()
            .insert(
                e.loss_type.to_string(),
                json!({"align_positive": e.alignment.positive, "align_negative": e.alignment.negative, "align_diff": e.alignment.diff}),
            );
    }
    let body = report(cfg, json!({"entries": entries, "table": table}));
    write_report(out, "ablation.json", &body)?;
    Ok(0)
}

fn gradcheck(cfg: &RunConfig) -> Result<i32> {
    let corpus = match &cfg.data {
        Some(path) => load_corpus(path, &cfg.languages)?,
        None => {
            synthetic::generate(&SyntheticConfig {
                train_pairs: 4 * cfg.gradcheck_batch,
                heldout_pairs: 1,
                seed: cfg.seed,
                ..Default::default()
            })?
            .train
        }
    };
    let mut train_cfg = cfg.train_config();
    train_cfg.sampler.batch_size = cfg.gradcheck_batch;
    let model = Model::new(build_vocab(&corpus, cfg.vocab_size)?, &train_cfg)?;
    let plan = plan_epoch(&corpus.stats, &train_cfg.sampler, 0)?;
    let batch = draw_batches(&corpus, &plan, &train_cfg.sampler)
        .into_iter()
        .next()
        .ok_or_else(|| Error::NoInBatchNegatives(corpus.len()))?;
    let code: Vec<_> = batch.indices.iter().map(|&i| model.encode(&corpus.examples[i].code_tokens)).collect();
    let doc: Vec<_> = batch.indices.iter().map(|&i| model.encode(&corpus.examples[i].doc_tokens)).collect();
    let subset = (cfg.gradcheck_params > 0).then_some(cfg.gradcheck_params);
    let r = grad_check(&model, &code, &doc, &cfg.loss(), cfg.epsilon, subset, cfg.seed)?;
    let passed = r.max_rel_error < GRADCHECK_LIMIT;
    let body = report(
        cfg,
        json!({
            "max_rel_error": r.max_rel_error,
            "checked": r.checked,
            "num_params": model.params.num_params(),
            "batch_language": batch.language,
            "batch_size": batch.indices.len(),
            "worst_param": r.worst_param,
            "analytic": r.analytic,
            "numeric": r.numeric,
            "passed": passed,
        }),
    );
    write_report(Path::new(&cfg.output), "gradcheck.json", &body)?;
    Ok(if passed { 0 } else { EXIT_GRADCHECK })
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    Ok(load_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?.model)
}

fn embed(cfg: &RunConfig) -> Result<i32> {
    let model = load_model(cfg)?;
    let corpus = load_data(cfg)?;
    let (codes, docs) = model.embed_corpus(&corpus)?;
    let ids: Vec<String> = corpus.examples.iter().map(|e| e.id.clone()).collect();
    let out = Path::new(&cfg.output);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (code_path, doc_path) = (out.join("code.ccse"), out.join("doc.ccse"));
    format::write_embeddings(&code_path, &linalg::to_f32(&codes), &ids)?;
    format::write_embeddings(&doc_path, &linalg::to_f32(&docs), &ids)?;
    let body = report(
        cfg,
        json!({"count": ids.len(), "dim": codes.ncols(), "code": code_path, "doc": doc_path}),
    );
    write_report(out, "embed.json", &body)?;
    Ok(0)
}

/// Paired embeddings with their ids, from files or from a checkpoint applied
/// to `data`.
fn paired_embeddings(cfg: &RunConfig) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>, Vec<String>)> {
    if let (Some(c), Some(d)) = (&cfg.code_embeddings, &cfg.doc_embeddings) {
        let ext = load_external_embeddings(c, d)?;
        return Ok((ext.code, ext.doc, ext.ids));
    }
    if cfg.checkpoint.is_none() {
        return Err(Error::InvalidConfig(
            "need --code-embeddings and --doc-embeddings, or --checkpoint with --data".into(),
        ));
    }
    let model = load_model(cfg)?;
    let corpus = load_data(cfg)?;
    let (c, d) = model.embed_corpus(&corpus)?;
    Ok((c, d, corpus.examples.into_iter().map(|e| e.id).collect()))
}

fn align(cfg: &RunConfig) -> Result<i32> {
    let (c, d, _) = paired_embeddings(cfg)?;
    let a = alignment_report(c.view(), d.view(), cfg.n_random, cfg.seed)?;
    let body = report(cfg, json!({"count": c.nrows(), "alignment": a}));
    write_report(Path::new(&cfg.output), "align.json", &body)?;
    Ok(0)
}

fn mrr(cfg: &RunConfig) -> Result<i32> {
    let external = cfg.code_embeddings.is_some() && cfg.doc_embeddings.is_some();
    let eval = if external {
        let (c, d, ids) = paired_embeddings(cfg)?;
        match &cfg.data {
            Some(path) => {
                let corpus = load_corpus(path, &cfg.languages)?;
                let language: BTreeMap<&str, &str> =
                    corpus.examples.iter().map(|e| (e.id.as_str(), e.language.as_str())).collect();
                let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (row, id) in ids.iter().enumerate() {
                    if let Some(lang) = language.get(id.as_str()) {
                        groups.entry(lang.to_string()).or_default().push(row);
                    }
                }
                grouped_mrr(&c, &d, groups)?
            }
            None => grouped_mrr(&c, &d, BTreeMap::from([("all".to_string(), (0..ids.len()).collect())]))?,
        }
    } else {
        let model = load_model(cfg)?;
        let corpus = load_data(cfg)?;
        let (c, d) = model.embed_corpus(&corpus)?;
        mrr_by_language(&corpus, &c, &d)?
    };
    let body = report(cfg, to_value(&eval));
    write_report(Path::new(&cfg.output), "mrr.json", &body)?;
    Ok(0)
}

fn grouped_mrr(
    codes: &ndarray::Array2<f64>,
    docs: &ndarray::Array2<f64>,
    groups: BTreeMap<String, Vec<usize>>,
) -> Result<EvalReport> {
    let mut languages = BTreeMap::new();
    for (lang, rows) in groups {
        let c = codes.select(ndarray::Axis(0), &rows);
        let d = docs.select(ndarray::Axis(0), &rows);
        let truth: Vec<usize> = (0..rows.len()).collect();
        let r = mean_reciprocal_rank(d.view(), c.view(), &truth)?;
        languages.insert(
            lang,
            LanguageEval {
                mrr: r.mrr,
                n_queries: rows.len(),
                n_candidates: rows.len(),
            },
        );
    }
    if languages.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(EvalReport::from_languages(languages))
}

fn search(cfg: &RunConfig) -> Result<i32> {
    let model = load_model(cfg)?;
    let index = match (&cfg.index, &cfg.data) {
        (Some(path), _) => Index::load(path)?,
        (None, Some(_)) => {
            let corpus = load_data(cfg)?;
            let (codes, _) = model.embed_corpus(&corpus)?;
            build_index(codes, corpus.examples.into_iter().map(|e| e.id).collect())?
        }
        (None, None) => return Err(Error::InvalidConfig("need --index or --data for candidates".into())),
    };
    let path = required(&cfg.queries, "queries")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let queries: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if queries.is_empty() {
        return Ok(0);
    }
    let tokens: Vec<Vec<&str>> = queries.iter().map(|q| q.split_whitespace().collect()).collect();
    let embedded = model.embed_tokens(&tokens)?;
    let results = index.search_batch(embedded.view(), cfg.k)?;

    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for (query, hits) in queries.iter().zip(results) {
        for hit in hits {
            let line = json!({"query": query, "rank": hit.rank, "id": hit.id, "score": hit.score});
            writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    out.flush().map_err(|e| Error::io("<stdout>", e))?;
    Ok(0)
}

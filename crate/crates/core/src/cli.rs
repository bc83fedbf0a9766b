//! Command-line entry point.
//!
//! Every subcommand writes its outputs plus a `manifest.json` (resolved
//! settings, seed, format versions, input checksums) into `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::{benchmark_lbkl, language_histogram, LogBase};
use crate::corpus::{
    build_translation_pairs, generate_synthetic_corpus, load_occupation_dataset, load_postings, load_synonym_benchmark,
    sample_match_pairs, LangTag, ScriptRanges, Split, SyntheticConfig, TitlePair,
};
use crate::encoder::{
    load_checkpoint, write_embedding_dump, Embedding, EncoderModel, CHECKPOINT_VERSION, DUMP_VERSION,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_synonym, load_embedding_dump, run_probe, DumpSource, EmbeddingSource, EncoderSource, EvalOptions, Metric,
    PoolMode, ProbeConfig,
};
use crate::jsonl::{read_records, write_atomic, write_jsonl};
use crate::trainer::{derive_seed, loss_log_csv, train, TrainConfig, TrainData};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "bilingua",
    version,
    about = "Bilingual sentence encoder training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bilingual corpus, synonym benchmark and occupation set.
    GenSynthetic(GenArgs),
    /// Derive title translation pairs and IoU-certified match pairs from postings.
    BuildPairs(PairsArgs),
    /// Train the multi-task encoder.
    Train(TrainArgs),
    /// Write an embedding dump for a JSON-lines file of texts.
    Encode(EncodeArgs),
    /// Synonym retrieval metrics on one candidate pool.
    EvalSynonym(EvalArgs),
    /// Linear-probe occupation classification on frozen embeddings.
    Probe(ProbeArgs),
    /// Language-bias KL divergence of a ranker.
    BiasLbkl(LbklArgs),
    /// Top-k language frequency histogram.
    BiasHistogram(HistogramArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SourceArgs {
    /// Model checkpoint to encode texts with.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub model: Option<PathBuf>,
    /// Precomputed embedding dump keyed by item id.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::corpus::DEFAULT_FIELD_COUNT)]
    pub fields: usize,
    #[arg(long, default_value_t = 600)]
    pub vocab: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PairsArgs {
    #[arg(long)]
    pub postings: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub postings: PathBuf,
    /// Title pairs from `build-pairs`; derived from the postings when absent.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Match pairs from `build-pairs`; sampled from the postings when absent.
    #[arg(long)]
    pub match_pairs: Option<PathBuf>,
    /// Flat JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines records with `text` and optional `id` / `lang`.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value = "combined")]
    pub pool: PoolMode,
    /// Recall cutoffs; repeat the flag for several.
    #[arg(long = "top-k", default_values_t = [5usize, 10])]
    pub top_k: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    pub map_k: usize,
    /// Divide recall by min(|relevant|, k) instead of |relevant|.
    #[arg(long)]
    pub capped_recall: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub occupation: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long = "top-k", default_values_t = [1usize, 3, 5])]
    pub top_k: Vec<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LbklArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Fixed prediction length; defaults to each query's ground-truth size.
    #[arg(long)]
    pub pred_k: Option<usize>,
    #[arg(long, default_value = "e")]
    pub log_base: LogBase,
    /// Benchmark name written into the report.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct HistogramArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Serialize)]
struct FormatVersions {
    manifest: u32,
    checkpoint: u32,
    embedding_dump: u32,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    settings: serde_json::Value,
    format_versions: FormatVersions,
    /// SHA-256 of every input file, keyed by the path as given.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ));
    }
    Ok(())
}

/// Output bookkeeping for one run.
struct Run<'a> {
    command: &'a str,
    dir: &'a Path,
    inputs: Vec<&'a Path>,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, out: &'a OutArgs, inputs: Vec<&'a Path>) -> Result<Self> {
        for p in &inputs {
            require_file(p)?;
        }
        fs::create_dir_all(&out.out).map_err(|e| Error::io(&out.out, e))?;
        Ok(Self {
            command,
            dir: &out.out,
            inputs,
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        write_atomic(&path, contents.as_bytes())
    }

    fn finish<S: Serialize>(mut self, seed: Option<u64>, settings: &S) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<Result<_>>()?;
        self.outputs.sort();
        let manifest = Manifest {
            command: self.command,
            seed,
            settings: serde_json::to_value(settings)?,
            format_versions: FormatVersions {
                manifest: MANIFEST_VERSION,
                checkpoint: CHECKPOINT_VERSION,
                embedding_dump: DUMP_VERSION,
            },
            inputs,
            outputs: self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join("manifest.json"), &bytes)
    }
}

enum Source {
    Model(EncoderModel<f32>),
    Dump(DumpSource),
}

impl Source {
    fn open(args: &SourceArgs) -> Result<Self> {
        match (&args.model, &args.embeddings) {
            (Some(m), _) => Ok(Source::Model(load_checkpoint(m)?.encoder)),
            (None, Some(d)) => Ok(Source::Dump(DumpSource::new(load_embedding_dump(d)?))),
            (None, None) => Err(Error::invalid("one of --model or --embeddings is required")),
        }
    }

    fn as_dyn(&self) -> Box<dyn EmbeddingSource + '_> {
        match self {
            Source::Model(m) => Box::new(EncoderSource(m)),
            Source::Dump(d) => Box::new(d.clone()),
        }
    }
}

fn source_paths(args: &SourceArgs) -> Vec<&Path> {
    args.model
        .iter()
        .chain(&args.embeddings)
        .map(PathBuf::as_path)
        .collect()
}

fn gen_synthetic(args: &GenArgs) -> Result<()> {
    let mut run = Run::start("gen-synthetic", &args.out, vec![])?;
    let cfg = SyntheticConfig {
        n_postings: args.n,
        n_fields: args.fields,
        vocab_size: args.vocab,
        seed: args.seed,
    };
    let corpus = generate_synthetic_corpus(&cfg)?;
    write_jsonl(&run.path("postings.jsonl"), &corpus.postings)?;
    write_jsonl(&run.path("synonyms.jsonl"), &corpus.synonyms.to_records())?;
    write_jsonl(&run.path("occupation.jsonl"), &corpus.occupation.to_records())?;
    let mut lexicon = serde_json::to_vec(&corpus.lexicon)?;
    lexicon.push(b'\n');
    write_atomic(&run.path("lexicon.json"), &lexicon)?;
    run.finish(Some(args.seed), args)
}

fn build_pairs(args: &PairsArgs) -> Result<()> {
    let mut run = Run::start("build-pairs", &args.out, vec![&args.postings])?;
    let postings = load_postings(&args.postings)?;
    let pairs = build_translation_pairs(&postings);
    let matches = sample_match_pairs(
        &postings,
        args.negatives,
        args.iou_threshold,
        derive_seed(args.seed, "negatives/0"),
    )?;
    write_jsonl(&run.path("translation_pairs.jsonl"), &pairs.pairs)?;
    write_jsonl(&run.path("match_pairs.jsonl"), &matches.pairs)?;
    run.write(
        "pair_stats.csv",
        &format!(
            "translation_pairs,skipped_postings,match_pairs,negative_shortfall\n{},{},{},{}\n",
            pairs.pairs.len(),
            pairs.skipped,
            matches.pairs.len(),
            matches.shortfall
        ),
    )?;
    run.finish(Some(args.seed), args)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
        cfg.epochs = None;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.iou_threshold {
        cfg.iou_threshold = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let inputs: Vec<&Path> = std::iter::once(args.postings.as_path())
        .chain(args.pairs.as_deref())
        .chain(args.match_pairs.as_deref())
        .chain(args.config.as_deref())
        .collect();
    let mut run = Run::start("train", &args.out, inputs)?;
    let cfg = resolve_train_config(args)?;
    let data = TrainData {
        postings: load_postings(&args.postings)?,
        translation_pairs: args
            .pairs
            .as_deref()
            .map(|p| Ok::<_, Error>(read_records::<TitlePair>(p)?.into_iter().map(|r| r.1).collect()))
            .transpose()?,
        match_pairs: args
            .match_pairs
            .as_deref()
            .map(|p| Ok::<_, Error>(read_records(p)?.into_iter().map(|r| r.1).collect()))
            .transpose()?,
    };
    let out = train(&cfg, &data, None)?;
    crate::encoder::save_checkpoint(
        &run.path("model.ckpt"),
        &out.model.to_checkpoint(serde_json::to_value(&cfg)?),
    )?;
    run.write("loss_log.csv", &loss_log_csv(&out.log))?;
    #[derive(Serialize)]
    struct Settings<'a> {
        #[serde(flatten)]
        args: &'a TrainArgs,
        resolved: &'a TrainConfig,
    }
    run.finish(Some(cfg.seed), &Settings { args, resolved: &cfg })
}

#[derive(Debug, Deserialize)]
struct TextRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    lang: Option<LangTag>,
}

fn encode_cmd(args: &EncodeArgs) -> Result<()> {
    let mut run = Run::start("encode", &args.out, vec![&args.model, &args.input])?;
    let model = load_checkpoint(&args.model)?.encoder;
    let records = read_records::<TextRecord>(&args.input)?;
    let scripts = ScriptRanges::default();
    let texts: Vec<&str> = records.iter().map(|(_, r)| r.text.as_str()).collect();
    let embeddings = model.encode(&texts)?;
    let rows = records
        .iter()
        .zip(embeddings)
        .map(|((line, r), e)| {
            let lang = match r.lang {
                Some(l) => l,
                None => scripts.tag(&r.text)?,
            };
            Ok((r.id.clone().unwrap_or_else(|| format!("r{line:06}")), lang, e))
        })
        .collect::<Result<Vec<(String, LangTag, Embedding)>>>()?;
    write_embedding_dump(&run.path("embeddings.jsonl"), &rows)?;
    run.finish(None, args)
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let mut inputs = vec![args.benchmark.as_path()];
    inputs.extend(source_paths(&args.source));
    let mut run = Run::start("eval-synonym", &args.out, inputs)?;
    let scripts = ScriptRanges::default();
    let bench = load_synonym_benchmark(&args.benchmark, &scripts)?;
    let source = Source::open(&args.source)?;
    let mut metrics: Vec<Metric> = args.top_k.iter().map(|&k| Metric::Recall(k)).collect();
    metrics.push(Metric::AveragePrecision(args.map_k));
    let options = EvalOptions {
        metrics,
        capped_recall: args.capped_recall,
        exclude_self: true,
    };
    let report = evaluate_synonym(source.as_dyn().as_ref(), &bench, args.pool, &scripts, &options)?;
    run.write("metrics.csv", &report.to_csv())?;
    run.write("per_query.csv", &report.per_query_csv())?;
    run.write("skipped.csv", &report.skipped_csv())?;
    run.finish(None, args)
}

fn probe_cmd(args: &ProbeArgs) -> Result<()> {
    let mut inputs = vec![args.occupation.as_path()];
    inputs.extend(source_paths(&args.source));
    let mut run = Run::start("probe", &args.out, inputs)?;
    let data = load_occupation_dataset(&args.occupation, derive_seed(args.seed, "splits"))?;
    let source = Source::open(&args.source)?;
    let source = source.as_dyn();
    let split = |s: Split| -> Result<Vec<(Embedding, usize)>> {
        let samples: Vec<_> = data.split(s).collect();
        let items: Vec<crate::corpus::SynonymItem> = samples
            .iter()
            .map(|x| crate::corpus::SynonymItem {
                id: x.id.clone(),
                text: x.text.clone(),
                lang: LangTag::L1,
                group: x.label.clone(),
            })
            .collect();
        let refs: Vec<_> = items.iter().collect();
        let embs = source.embed(&refs)?;
        Ok(embs
            .into_iter()
            .zip(&samples)
            .map(|(e, x)| (e, data.label_index(&x.label).expect("label from dataset")))
            .collect())
    };
    let (train_set, test_set) = (split(Split::Train)?, split(Split::Test)?);
    let config = ProbeConfig {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        seed: derive_seed(args.seed, "probe"),
        ..ProbeConfig::default()
    };
    let report = run_probe(&train_set, &test_set, data.labels.len(), &config, &args.top_k)?;
    run.write("probe.csv", &report.to_csv())?;
    run.finish(Some(args.seed), args)
}

fn lbkl_cmd(args: &LbklArgs) -> Result<()> {
    let mut inputs = vec![args.benchmark.as_path()];
    inputs.extend(source_paths(&args.source));
    let mut run = Run::start("bias-lbkl", &args.out, inputs)?;
    let scripts = ScriptRanges::default();
    let bench = load_synonym_benchmark(&args.benchmark, &scripts)?;
    let source = Source::open(&args.source)?;
    let report = benchmark_lbkl(source.as_dyn().as_ref(), &bench, &scripts, args.pred_k, args.log_base)?;
    let name = match &args.name {
        Some(n) => n.clone(),
        None => args
            .benchmark
            .file_stem()
            .map_or_else(|| "benchmark".into(), |s| s.to_string_lossy().into_owned()),
    };
    run.write("lbkl.csv", &report.to_csv(&name))?;
    run.write("lbkl_per_query.csv", &report.per_query_csv())?;
    run.finish(None, args)
}

fn histogram_cmd(args: &HistogramArgs) -> Result<()> {
    let mut inputs = vec![args.benchmark.as_path()];
    inputs.extend(source_paths(&args.source));
    let mut run = Run::start("bias-histogram", &args.out, inputs)?;
    let scripts = ScriptRanges::default();
    let bench = load_synonym_benchmark(&args.benchmark, &scripts)?;
    let source = Source::open(&args.source)?;
    let report = language_histogram(source.as_dyn().as_ref(), &bench, &scripts, args.top_k)?;
    run.write("histogram.csv", &report.to_csv())?;
    run.write("histogram_per_query.csv", &report.per_query_csv())?;
    run.finish(None, args)
}

/// Runs one already-parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::BuildPairs(a) => build_pairs(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode_cmd(a),
        Command::EvalSynonym(a) => eval_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::BiasLbkl(a) => lbkl_cmd(a),
        Command::BiasHistogram(a) => histogram_cmd(a),
    }
}

/// One-line error for scripts: `error kind=<kind>: <message>`.
pub fn error_line(kind: &str, msg: &str) -> String {
    let flat: Vec<&str> = msg.split_whitespace().collect();
    format!("error kind={kind}: {}", flat.join(" "))
}

/// Parses `args` and runs them, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line() {
        let l = error_line("io", "bad\n  thing\thappened");
        assert_eq!(l, "error kind=io: bad thing happened");
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "bilingua",
            "eval-synonym",
            "--benchmark",
            "b.jsonl",
            "--embeddings",
            "d.jsonl",
            "--pool",
            "l1",
            "--top-k",
            "1",
            "--top-k",
            "20",
            "--out",
            "o",
        ])
        .unwrap();
        match cli.command {
            Command::EvalSynonym(a) => {
                assert_eq!(a.pool, PoolMode::L1);
                assert_eq!(a.top_k, vec![1, 20]);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["bilingua", "bias-lbkl", "--benchmark", "b", "--out", "o"]).is_err());
        assert!(Cli::try_parse_from(["bilingua", "gen-synthetic", "--out", "o", "--bogus"]).is_err());
        assert!(Cli::try_parse_from([
            "bilingua",
            "bias-lbkl",
            "--benchmark",
            "b",
            "--model",
            "m",
            "--log-base",
            "3",
            "--out",
            "o"
        ])
        .is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"steps": 7, "seed": 3, "batch_size": 16}"#).unwrap();
        let args = TrainArgs {
            postings: "p".into(),
            pairs: None,
            match_pairs: None,
            config: Some(cfg),
            seed: Some(9),
            steps: None,
            batch_size: None,
            learning_rate: None,
            temperature: None,
            iou_threshold: None,
            out: OutArgs { out: "o".into() },
        };
        let c = resolve_train_config(&args).unwrap();
        assert_eq!((c.steps, c.seed, c.batch_size), (7, 9, 16));
    }
}

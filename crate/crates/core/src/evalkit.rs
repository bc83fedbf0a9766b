//! Retrieval metrics over candidate pools, the linear-probe protocol and
//! embedding-dump ingestion.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LangTag, ScriptRanges, SynonymBenchmark, SynonymItem};
use crate::encoder::{parse_dump_header, DumpRecord, Embedding, EncoderModel, DUMP_VERSION};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, Activation, AdamConfig, AdamState, DenseLayer};

/// Norm deviation above which a loaded vector counts as unnormalized.
const NORM_WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    L1,
    L2,
    Combined,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::L1 => "l1",
            PoolMode::L2 => "l2",
            PoolMode::Combined => "combined",
        }
    }

    pub fn admits(self, lang: LangTag) -> bool {
        match self {
            PoolMode::L1 => lang == LangTag::L1,
            PoolMode::L2 => lang == LangTag::L2,
            PoolMode::Combined => true,
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PoolMode::L1),
            "l2" => Ok(PoolMode::L2),
            "combined" => Ok(PoolMode::Combined),
            _ => Err(Error::invalid(format!("unknown pool mode `{s}` (l1, l2, combined)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    /// Always L1 or L2; mixed-script texts are resolved before pooling.
    pub lang: LangTag,
    pub embedding: Embedding,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub mode: PoolMode,
    pub entries: Vec<PoolEntry>,
}

impl CandidatePool {
    /// Keeps the entries admitted by `mode`. Ids must be unique and every
    /// entry must carry a single-language tag.
    pub fn new(mode: PoolMode, entries: Vec<PoolEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.lang == LangTag::CodeSwitched {
                return Err(Error::invalid(format!(
                    "pool entry `{}` is code-switched; resolve it to one language first",
                    e.id
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        let entries = entries.into_iter().filter(|e| mode.admits(e.lang)).collect();
        Ok(Self { mode, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// Indices into the pool's entries, best first.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids<'a>(&'a self, pool: &'a CandidatePool) -> impl Iterator<Item = &'a str> + 'a {
        self.order.iter().map(move |&i| pool.entries[i].id.as_str())
    }
}

/// Ranks the whole pool by cosine to `query`, descending, ties by ascending
/// candidate id. `exclude_self` drops the candidate carrying the query id.
pub fn rank(query_id: &str, query: &Embedding, pool: &CandidatePool, exclude_self: bool) -> Result<RankedList> {
    if pool.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(pool.len());
    for (i, e) in pool.entries.iter().enumerate() {
        if e.embedding.dim() != query.dim() {
            return Err(Error::DimensionMismatch {
                expected: query.dim(),
                got: e.embedding.dim(),
            });
        }
        if exclude_self && e.id == query_id {
            continue;
        }
        scored.push((i, query.cosine(&e.embedding)));
    }
    // partial_cmp so that 0.0 and -0.0 tie; scores of unit vectors are finite
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| pool.entries[a.0].id.cmp(&pool.entries[b.0].id))
    });
    Ok(RankedList {
        query_id: query_id.to_string(),
        order: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
    })
}

/// Relevance flags of a ranking, best first.
pub fn relevance(ranked: &RankedList, pool: &CandidatePool, relevant: &HashSet<&str>) -> Vec<bool> {
    ranked.ids(pool).map(|id| relevant.contains(id)).collect()
}

/// `|top-k ∩ relevant| / |relevant|`, or `/ min(|relevant|, k)` when capped.
pub fn recall_at_k(hits: &[bool], n_relevant: usize, k: usize, capped: bool) -> Result<f64> {
    if n_relevant == 0 {
        return Err(Error::Empty("relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let found = hits.iter().take(k).filter(|&&h| h).count();
    let denom = if capped { n_relevant.min(k) } else { n_relevant };
    Ok(found as f64 / denom as f64)
}

/// Truncated average precision with denominator `min(|relevant|, k)`.
pub fn average_precision_at_k(hits: &[bool], n_relevant: usize, k: usize) -> Result<f64> {
    if n_relevant == 0 {
        return Err(Error::Empty("relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, _) in hits.iter().take(k).enumerate().filter(|(_, &h)| h) {
        found += 1;
        sum += found as f64 / (r + 1) as f64;
    }
    Ok(sum / n_relevant.min(k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Recall(usize),
    AveragePrecision(usize),
}

impl Metric {
    pub fn name(self) -> String {
        match self {
            Metric::Recall(k) => format!("R@{k}"),
            Metric::AveragePrecision(k) => format!("mAP@{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub capped_recall: bool,
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Recall(5), Metric::Recall(10), Metric::AveragePrecision(25)],
            capped_recall: false,
            exclude_self: true,
        }
    }
}

/// Supplies embeddings for benchmark items, either by encoding their text
/// or by looking their ids up in a precomputed dump.
pub trait EmbeddingSource: Sync {
    fn embed(&self, items: &[&SynonymItem]) -> Result<Vec<Embedding>>;
}

/// Encodes item texts with a trained encoder.
pub struct EncoderSource<'a>(pub &'a EncoderModel<f32>);

impl EmbeddingSource for EncoderSource<'_> {
    fn embed(&self, items: &[&SynonymItem]) -> Result<Vec<Embedding>> {
        let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
        self.0.encode(&texts)
    }
}

/// Looks item ids up in a loaded embedding dump.
#[derive(Debug, Clone, Default)]
pub struct DumpSource {
    vectors: HashMap<String, Embedding>,
}

impl DumpSource {
    pub fn new(dump: EmbeddingDump) -> Self {
        Self {
            vectors: dump.records.into_iter().map(|r| (r.id, r.embedding)).collect(),
        }
    }
}

impl EmbeddingSource for DumpSource {
    fn embed(&self, items: &[&SynonymItem]) -> Result<Vec<Embedding>> {
        items
            .iter()
            .map(|i| {
                self.vectors
                    .get(&i.id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("id `{}` missing from embedding dump", i.id)))
            })
            .collect()
    }
}

/// Embeds every candidate into a pool. Mixed-script candidates are placed
/// by majority script.
pub fn build_pool(
    source: &dyn EmbeddingSource,
    candidates: &[SynonymItem],
    mode: PoolMode,
    scripts: &ScriptRanges,
) -> Result<CandidatePool> {
    let refs: Vec<&SynonymItem> = candidates.iter().collect();
    let embeddings = source.embed(&refs)?;
    let entries = candidates
        .iter()
        .zip(embeddings)
        .map(|(c, embedding)| {
            Ok(PoolEntry {
                id: c.id.clone(),
                lang: resolve_lang(c, scripts)?,
                embedding,
                group: c.group.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CandidatePool::new(mode, entries)
}

/// L1/L2 tag of an item, resolving code-switched text by letter majority.
pub fn resolve_lang(item: &SynonymItem, scripts: &ScriptRanges) -> Result<LangTag> {
    match item.lang {
        LangTag::CodeSwitched => scripts.dominant(&item.text),
        l => Ok(l),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub lang: LangTag,
    pub n_relevant: usize,
    /// One value per metric, in report order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedQuery {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub pool: PoolMode,
    pub metrics: Vec<Metric>,
    /// Sorted by query id.
    pub per_query: Vec<QueryMetrics>,
    pub skipped: Vec<SkippedQuery>,
}

impl MetricsReport {
    /// Unweighted mean over the evaluated queries; `None` if there are none.
    pub fn mean(&self, lang: Option<LangTag>) -> Option<Vec<f64>> {
        let rows: Vec<&QueryMetrics> = self
            .per_query
            .iter()
            .filter(|q| lang.is_none_or(|l| q.lang == l))
            .collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(
            (0..self.metrics.len())
                .map(|m| rows.iter().map(|q| q.values[m]).sum::<f64>() / n)
                .collect(),
        )
    }

    pub fn micro(&self) -> Option<Vec<f64>> {
        self.mean(None)
    }

    pub fn value(&self, metric: Metric) -> Option<f64> {
        let m = self.metrics.iter().position(|&x| x == metric)?;
        self.micro().map(|v| v[m])
    }

    pub fn count(&self, lang: Option<LangTag>) -> usize {
        self.per_query
            .iter()
            .filter(|q| lang.is_none_or(|l| q.lang == l))
            .count()
    }

    /// `subcategory,pool,metric,value,n_queries`, one row per subcategory
    /// (all, l1, l2, cs) and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subcategory,pool,metric,value,n_queries\n");
        let cats = [None, Some(LangTag::L1), Some(LangTag::L2), Some(LangTag::CodeSwitched)];
        for lang in cats {
            let name = lang.map_or("all", LangTag::as_str);
            let n = self.count(lang);
            let means = self.mean(lang);
            for (m, metric) in self.metrics.iter().enumerate() {
                let value = means.as_ref().map(|v| format!("{:.6}", v[m])).unwrap_or_default();
                out += &format!("{name},{},{},{value},{n}\n", self.pool, metric.name());
            }
        }
        out
    }

    /// Per-query detail: `query_id,lang,n_relevant,<metrics...>`.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query_id,lang,n_relevant");
        for m in &self.metrics {
            out += &format!(",{}", m.name());
        }
        out.push('\n');
        for q in &self.per_query {
            out += &format!("{},{},{}", q.query_id, q.lang, q.n_relevant);
            for v in &q.values {
                out += &format!(",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn skipped_csv(&self) -> String {
        let mut out = String::from("query_id,reason\n");
        for s in &self.skipped {
            out += &format!("{},{}\n", s.query_id, s.reason);
        }
        out
    }
}

/// Ranks every query against the candidate pool of `mode`; relevance is
/// group membership. Queries whose group has no candidate in the pool are
/// skipped and reported.
pub fn evaluate_synonym(
    source: &dyn EmbeddingSource,
    bench: &SynonymBenchmark,
    mode: PoolMode,
    scripts: &ScriptRanges,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    if options.metrics.is_empty() {
        return Err(Error::invalid("no metrics requested"));
    }
    let pool = build_pool(source, &bench.candidates, mode, scripts)?;
    if pool.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let queries: Vec<&SynonymItem> = bench.queries.iter().collect();
    let query_emb = source.embed(&queries)?;
    let mut by_group: HashMap<&str, HashSet<&str>> = HashMap::new();
    for e in &pool.entries {
        by_group.entry(e.group.as_str()).or_default().insert(e.id.as_str());
    }

    let outcomes: Vec<Result<std::result::Result<QueryMetrics, SkippedQuery>>> = queries
        .par_iter()
        .zip(query_emb.par_iter())
        .map(|(q, emb)| {
            let mut relevant = by_group.get(q.group.as_str()).cloned().unwrap_or_default();
            if options.exclude_self {
                relevant.remove(q.id.as_str());
            }
            if relevant.is_empty() {
                return Ok(Err(SkippedQuery {
                    query_id: q.id.clone(),
                    reason: format!("group {} has no candidate in the {mode} pool", q.group),
                }));
            }
            let ranked = rank(&q.id, emb, &pool, options.exclude_self)?;
            let hits = relevance(&ranked, &pool, &relevant);
            let values = options
                .metrics
                .iter()
                .map(|&m| match m {
                    Metric::Recall(k) => recall_at_k(&hits, relevant.len(), k, options.capped_recall),
                    Metric::AveragePrecision(k) => average_precision_at_k(&hits, relevant.len(), k),
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Ok(QueryMetrics {
                query_id: q.id.clone(),
                lang: q.lang,
                n_relevant: relevant.len(),
                values,
            }))
        })
        .collect();

    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            Ok(m) => per_query.push(m),
            Err(s) => skipped.push(s),
        }
    }
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    skipped.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    if !skipped.is_empty() {
        warn!("{} queries skipped for the {mode} pool", skipped.len());
    }
    Ok(MetricsReport {
        pool: mode,
        metrics: options.metrics.clone(),
        per_query,
        skipped,
    })
}

/// Single linear layer trained with softmax cross-entropy on frozen
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub layer: DenseLayer<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn stack(embeddings: &[&Embedding]) -> Result<Array2<f64>> {
    let d = embeddings.first().map_or(0, |e| e.dim());
    let mut m = Array2::zeros((embeddings.len(), d));
    for (mut row, e) in m.axis_iter_mut(Axis(0)).zip(embeddings) {
        if e.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.dim(),
            });
        }
        for (x, &v) in row.iter_mut().zip(e.as_slice()) {
            *x = v as f64;
        }
    }
    Ok(m)
}

impl LinearProbe {
    pub fn scores(&self, embeddings: &[&Embedding]) -> Result<Array2<f64>> {
        self.layer.forward(stack(embeddings)?.view())
    }
}

/// Trains a probe over `(embedding, class)` pairs with Adam.
pub fn train_probe(train: &[(Embedding, usize)], n_classes: usize, config: &ProbeConfig) -> Result<LinearProbe> {
    if train.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    if n_classes == 0 || config.batch_size == 0 {
        return Err(Error::invalid(
            "probe needs at least one class and a positive batch size",
        ));
    }
    if let Some((_, c)) = train.iter().find(|(_, c)| *c >= n_classes) {
        return Err(Error::invalid(format!("class {c} outside 0..{n_classes}")));
    }
    let d = train[0].0.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layer = DenseLayer::glorot(d, n_classes, Activation::Identity, &mut rng);
    let mut opt = AdamState::new(AdamConfig::with_lr(config.learning_rate), &layer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let embs: Vec<&Embedding> = chunk.iter().map(|&i| &train[i].0).collect();
            let x = stack(&embs)?;
            let logits = layer.forward(x.view())?;
            let mut grad = logits.clone();
            let b = chunk.len() as f64;
            for (mut row, &i) in grad.axis_iter_mut(Axis(0)).zip(chunk) {
                let max = row.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
                row.mapv_inplace(|z| (z - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|p| p / sum / b);
                row[train[i].1] -= 1.0 / b;
            }
            let g = layer.backward(x.view(), logits.view(), grad.view())?;
            adam_step(&mut opt, &mut layer, &g)?;
        }
    }
    Ok(LinearProbe { layer })
}

/// Fraction of samples whose class is among the `k` highest probe scores,
/// ties broken toward the lower class index.
pub fn probe_acc_at_k(probe: &LinearProbe, test: &[(Embedding, usize)], k: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("probe test set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let embs: Vec<&Embedding> = test.iter().map(|(e, _)| e).collect();
    let scores = probe.scores(&embs)?;
    let mut correct = 0usize;
    for (row, (_, label)) in scores.axis_iter(Axis(0)).zip(test) {
        let mut classes: Vec<usize> = (0..row.len()).collect();
        classes.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        if classes.iter().take(k).any(|c| c == label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub acc_at_k: Vec<(usize, f64)>,
    pub n_train: usize,
    pub n_test: usize,
    /// Test samples whose class never occurs in training.
    pub unseen_test_samples: usize,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,n_train,n_test\n");
        for (k, v) in &self.acc_at_k {
            out += &format!("Acc@{k},{v:.6},{},{}\n", self.n_train, self.n_test);
        }
        out
    }
}

/// Trains a probe on `train` and scores Acc@k on `test` for every `k`.
pub fn run_probe(
    train: &[(Embedding, usize)],
    test: &[(Embedding, usize)],
    n_classes: usize,
    config: &ProbeConfig,
    ks: &[usize],
) -> Result<ProbeReport> {
    let seen: HashSet<usize> = train.iter().map(|(_, c)| *c).collect();
    let unseen = test.iter().filter(|(_, c)| !seen.contains(c)).count();
    if unseen > 0 {
        warn!("{unseen} test samples belong to classes absent from training");
    }
    let probe = train_probe(train, n_classes, config)?;
    let acc_at_k = ks
        .iter()
        .map(|&k| Ok((k, probe_acc_at_k(&probe, test, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        acc_at_k,
        n_train: train.len(),
        n_test: test.len(),
        unseen_test_samples: unseen,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpEntry {
    pub id: String,
    pub lang: LangTag,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub records: Vec<DumpEntry>,
    /// Vectors whose stored norm was off by more than 1e-3.
    pub renormalized: usize,
}

/// Reads an embedding dump, L2-normalizing every vector.
pub fn load_embedding_dump(path: &Path) -> Result<EmbeddingDump> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let (version, dim, count) = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            parse_dump_header(&line).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(Error::Empty("embedding dump")),
    };
    if version != DUMP_VERSION {
        return Err(parse_err(
            1,
            format!("dump format version {version}, expected {DUMP_VERSION}"),
        ));
    }
    let mut records = Vec::with_capacity(count);
    let mut renormalized = 0;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if rec.vector.len() != dim {
            return Err(parse_err(
                i + 1,
                format!("vector has dim {}, header declares {dim}", rec.vector.len()),
            ));
        }
        let (embedding, norm) = Embedding::normalized(rec.vector).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if (norm - 1.0).abs() > NORM_WARN_TOLERANCE {
            renormalized += 1;
        }
        records.push(DumpEntry {
            id: rec.id,
            lang: rec.lang,
            embedding,
        });
    }
    if records.len() != count {
        return Err(parse_err(
            1,
            format!("header declares {count} records, found {}", records.len()),
        ));
    }
    if renormalized > 0 {
        warn!("{renormalized} dump vectors were not unit-norm and have been normalized");
    }
    Ok(EmbeddingDump {
        dim,
        records,
        renormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{write_embedding_dump, EncoderConfig, FeatureConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap().0
    }

    fn entry(id: &str, lang: LangTag, v: &[f32], group: &str) -> PoolEntry {
        PoolEntry {
            id: id.into(),
            lang,
            embedding: emb(v),
            group: group.into(),
        }
    }

    #[test]
    fn rank_trivial_cases() {
        let pool = CandidatePool::new(PoolMode::Combined, vec![entry("a", LangTag::L1, &[1.0, 0.0], "g")]).unwrap();
        let r = rank("q", &emb(&[0.0, 1.0]), &pool, true).unwrap();
        assert_eq!(r.ids(&pool).collect::<Vec<_>>(), vec!["a"]);

        let pool = CandidatePool::new(
            PoolMode::Combined,
            vec![
                entry("b", LangTag::L1, &[0.6, 0.8], "g"),
                entry("a", LangTag::L2, &[1.0, 0.0], "g"),
                entry("c", LangTag::L2, &[0.6, 0.8], "h"),
            ],
        )
        .unwrap();
        let r = rank("q", &emb(&[0.6, 0.8]), &pool, true).unwrap();
        assert_eq!(r.ids(&pool).collect::<Vec<_>>(), vec!["b", "c", "a"]);
        assert!((r.scores[0] - 1.0).abs() < 1e-6);
        let r = rank("b", &emb(&[0.6, 0.8]), &pool, true).unwrap();
        assert_eq!(r.ids(&pool).collect::<Vec<_>>(), vec!["c", "a"]);
        let empty = CandidatePool::new(PoolMode::L1, vec![entry("a", LangTag::L2, &[1.0], "g")]).unwrap();
        assert!(rank("q", &emb(&[1.0]), &empty, false).is_err());
    }

    #[test]
    fn pool_rejects_duplicates_and_mixed_tags() {
        let dup = vec![
            entry("a", LangTag::L1, &[1.0], "g"),
            entry("a", LangTag::L2, &[1.0], "g"),
        ];
        assert!(matches!(
            CandidatePool::new(PoolMode::Combined, dup),
            Err(Error::DuplicateId(_))
        ));
        let cs = vec![entry("a", LangTag::CodeSwitched, &[1.0], "g")];
        assert!(CandidatePool::new(PoolMode::Combined, cs).is_err());
    }

    #[test]
    fn metric_examples() {
        let all = [true, true, false];
        assert_eq!(recall_at_k(&all, 2, 10, false).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[false; 12], 2, 10, false).unwrap(), 0.0);
        let mut hits = vec![false; 20];
        hits[0] = true;
        hits[4] = true;
        hits[15] = true;
        assert_eq!(recall_at_k(&hits, 3, 10, false).unwrap(), 2.0 / 3.0);
        assert_eq!(recall_at_k(&hits, 3, 1, true).unwrap(), 1.0);

        assert_eq!(average_precision_at_k(&[true, false], 1, 25).unwrap(), 1.0);
        assert_eq!(average_precision_at_k(&[false, true], 1, 25).unwrap(), 0.5);
        let ap = average_precision_at_k(&[true, false, true], 2, 25).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert!(recall_at_k(&hits, 0, 5, false).is_err());
        assert!(average_precision_at_k(&hits, 0, 5).is_err());
        assert!(recall_at_k(&hits, 1, 0, false).is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k_and_ap_bounded(hits in prop::collection::vec(any::<bool>(), 1..60), extra in 0usize..5) {
            let n_rel = hits.iter().filter(|&&h| h).count() + extra;
            prop_assume!(n_rel > 0);
            let mut prev = 0.0;
            for k in 1..=hits.len() + 2 {
                let r = recall_at_k(&hits, n_rel, k, false).unwrap();
                prop_assert!(r >= prev);
                prev = r;
                let ap = average_precision_at_k(&hits, n_rel, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&ap));
                let need = n_rel.min(k);
                let perfect = hits.len() >= need && hits[..need].iter().all(|&h| h);
                prop_assert_eq!(ap == 1.0, perfect);
            }
        }
    }

    fn bench_item(id: &str, text: &str, lang: LangTag, group: &str) -> SynonymItem {
        SynonymItem {
            id: id.into(),
            text: text.into(),
            lang,
            group: group.into(),
        }
    }

    struct Fixed(HashMap<String, Vec<f32>>);

    impl EmbeddingSource for Fixed {
        fn embed(&self, items: &[&SynonymItem]) -> Result<Vec<Embedding>> {
            Ok(items.iter().map(|i| emb(&self.0[&i.id])).collect())
        }
    }

    fn toy() -> (SynonymBenchmark, Fixed) {
        let bench = SynonymBenchmark {
            queries: vec![
                bench_item("q1", "sales", LangTag::L2, "g1"),
                bench_item("q2", "ขาย", LangTag::L1, "g2"),
            ],
            candidates: vec![
                bench_item("c1", "seller", LangTag::L2, "g1"),
                bench_item("c2", "ผู้ขาย", LangTag::L1, "g1"),
                bench_item("c3", "cook", LangTag::L2, "g2"),
                bench_item("c4", "chef cook ครัว", LangTag::CodeSwitched, "g3"),
            ],
        };
        let v: HashMap<String, Vec<f32>> = [
            ("q1", vec![1.0, 0.0, 0.0]),
            ("q2", vec![0.0, 1.0, 0.0]),
            ("c1", vec![0.9, 0.1, 0.0]),
            ("c2", vec![0.0, 0.0, 1.0]),
            ("c3", vec![0.1, 0.9, 0.0]),
            ("c4", vec![0.5, 0.5, 0.0]),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        (bench, Fixed(v))
    }

    #[test]
    fn evaluate_pools_and_skips() {
        let (bench, src) = toy();
        let scripts = ScriptRanges::default();
        let opts = EvalOptions::default();
        let combined = evaluate_synonym(&src, &bench, PoolMode::Combined, &scripts, &opts).unwrap();
        assert_eq!(combined.per_query.len(), 2);
        // q1: relevant c1 (rank 1), c2 (rank 4) -> R@5 = 1
        assert_eq!(combined.per_query[0].values[0], 1.0);
        let l1 = evaluate_synonym(&src, &bench, PoolMode::L1, &scripts, &opts).unwrap();
        // g2 has no L1 candidate
        assert_eq!(l1.skipped.len(), 1);
        assert_eq!(l1.skipped[0].query_id, "q2");
        let pool = build_pool(&src, &bench.candidates, PoolMode::L1, &scripts).unwrap();
        assert!(pool.entries.iter().all(|e| e.lang == LangTag::L1));
        let pool = build_pool(&src, &bench.candidates, PoolMode::L2, &scripts).unwrap();
        assert!(pool.entries.iter().all(|e| e.lang == LangTag::L2));
        // the mixed-script candidate has more L2 letters
        assert!(pool.entries.iter().any(|e| e.id == "c4"));
        assert_eq!(
            combined,
            evaluate_synonym(&src, &bench, PoolMode::Combined, &scripts, &opts).unwrap()
        );
        let csv = combined.to_csv();
        assert!(csv.starts_with("subcategory,pool,metric,value,n_queries\nall,combined,R@5,"));
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn micro_average_is_mean_of_per_query() {
        let (bench, src) = toy();
        let r = evaluate_synonym(
            &src,
            &bench,
            PoolMode::Combined,
            &ScriptRanges::default(),
            &EvalOptions::default(),
        )
        .unwrap();
        let micro = r.micro().unwrap();
        for m in 0..r.metrics.len() {
            let mean = r.per_query.iter().map(|q| q.values[m]).sum::<f64>() / r.per_query.len() as f64;
            assert_eq!(micro[m], mean);
        }
    }

    fn blobs(n_per: usize, seed: u64) -> Vec<(Embedding, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        (0..3 * n_per)
            .map(|i| {
                let c = i % 3;
                let v: Vec<f32> = centers[c].iter().map(|&x| x + rng.gen_range(-0.2..0.2)).collect();
                (emb(&v), c)
            })
            .collect()
    }

    #[test]
    fn probe_separates_blobs() {
        let train = blobs(30, 1);
        let test = blobs(20, 2);
        let r = run_probe(&train, &test, 3, &ProbeConfig::default(), &[1, 2, 3]).unwrap();
        assert!(r.acc_at_k[0].1 >= 0.95, "{:?}", r.acc_at_k);
        assert!(r.acc_at_k[0].1 <= r.acc_at_k[1].1 && r.acc_at_k[1].1 <= r.acc_at_k[2].1);
        assert_eq!(r.acc_at_k[2].1, 1.0);
        assert_eq!(r.unseen_test_samples, 0);
    }

    #[test]
    fn probe_ties_break_to_lower_class() {
        let probe = LinearProbe {
            layer: DenseLayer::zeros(2, 4, Activation::Identity),
        };
        let test = vec![(emb(&[1.0, 0.0]), 0), (emb(&[1.0, 0.0]), 1)];
        assert_eq!(probe_acc_at_k(&probe, &test, 1).unwrap(), 0.5);
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig {
            dim: 8,
            features: FeatureConfig {
                hash_size: 128,
                ..FeatureConfig::default()
            },
            ..EncoderConfig::default()
        };
        let model = EncoderModel::<f32>::new(cfg, 3);
        let embs = model.encode(&["sales", "ขาย"]).unwrap();
        let records: Vec<_> = embs
            .iter()
            .enumerate()
            .map(|(i, e)| (format!("x{i}"), LangTag::L2, e.clone()))
            .collect();
        let path = dir.path().join("d.jsonl");
        write_embedding_dump(&path, &records).unwrap();
        let dump = load_embedding_dump(&path).unwrap();
        assert_eq!(dump.renormalized, 0);
        for (a, b) in dump.records.iter().zip(&embs) {
            for (x, y) in a.embedding.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-6);
            }
        }

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"format_version\":1,\"dim\":2,\"count\":2}\n{\"id\":\"a\",\"lang\":\"l1\",\"vector\":[3,4]}\n{\"id\":\"b\",\"lang\":\"l1\",\"vector\":[1,0,0]}\n",
        )
        .unwrap();
        match load_embedding_dump(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let unnorm = dir.path().join("u.jsonl");
        std::fs::write(
            &unnorm,
            "{\"format_version\":1,\"dim\":2,\"count\":1}\n{\"id\":\"a\",\"lang\":\"l1\",\"vector\":[3,4]}\n",
        )
        .unwrap();
        let d = load_embedding_dump(&unnorm).unwrap();
        assert_eq!(d.renormalized, 1);
        assert_eq!(d.records[0].embedding.as_slice(), &[0.6, 0.8]);
    }
}

//! Recruitment text data: postings, title pairs, description/title match
//! pairs, synonym and occupation benchmarks, and a synthetic generator.

mod lang;
mod sampling;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::read_records;

pub use lang::{tag_language, LangTag, ScriptCounts, ScriptRanges};
pub use sampling::{sample_match_pairs, MatchLabel, MatchPair, MatchSample};
pub use synthetic::{generate_synthetic_corpus, Lexicon, SyntheticConfig, SyntheticCorpus, Token};

/// Number of job-field categories in the reference taxonomy.
pub const DEFAULT_FIELD_COUNT: usize = 28;

/// One job posting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobPosting {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title_l1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title_l2: Option<String>,
    pub description: String,
    pub job_fields: BTreeSet<String>,
}

impl JobPosting {
    fn non_empty(title: &Option<String>) -> Option<&str> {
        title.as_deref().map(str::trim).filter(|t| !t.is_empty())
    }

    pub fn l1(&self) -> Option<&str> {
        Self::non_empty(&self.title_l1)
    }

    pub fn l2(&self) -> Option<&str> {
        Self::non_empty(&self.title_l2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("posting id is empty"));
        }
        if self.job_fields.is_empty() {
            return Err(Error::invalid(format!("posting `{}` has empty job_fields", self.id)));
        }
        if self.l1().is_none() && self.l2().is_none() {
            return Err(Error::invalid(format!("posting `{}` has no title", self.id)));
        }
        Ok(())
    }
}

/// Same job title in both languages, taken from one posting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TitlePair {
    pub l1_text: String,
    pub l2_text: String,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymItem {
    pub id: String,
    pub text: String,
    pub lang: LangTag,
    pub group: String,
}

/// Bilingual synonym retrieval benchmark. Items sharing a `group` are
/// relevant to one another.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymBenchmark {
    pub queries: Vec<SynonymItem>,
    pub candidates: Vec<SynonymItem>,
}

/// On-disk synonym record. `role` separates dictionary keys (queries) from
/// synonyms (candidates); `id` and `lang` are filled in when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynonymRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<LangTag>,
    pub group: String,
    pub role: Role,
}

impl SynonymBenchmark {
    pub fn from_records(
        records: impl IntoIterator<Item = (usize, SynonymRecord)>,
        scripts: &ScriptRanges,
    ) -> Result<Self> {
        let mut bench = SynonymBenchmark::default();
        let mut seen = HashSet::new();
        for (line, rec) in records {
            let at = |msg: String| Error::invalid(format!("record {line}: {msg}"));
            let lang = match rec.lang {
                Some(l) => l,
                None => scripts.tag(&rec.text).map_err(|e| at(e.to_string()))?,
            };
            let list = match rec.role {
                Role::Query => &mut bench.queries,
                Role::Candidate => &mut bench.candidates,
            };
            let id = rec.id.unwrap_or_else(|| match rec.role {
                Role::Query => format!("q{:06}", list.len()),
                Role::Candidate => format!("c{:06}", list.len()),
            });
            if !seen.insert((rec.role, id.clone())) {
                return Err(Error::DuplicateId(id));
            }
            if rec.text.trim().is_empty() {
                return Err(at("empty text".into()));
            }
            list.push(SynonymItem {
                id,
                text: rec.text,
                lang,
                group: rec.group,
            });
        }
        bench.validate()?;
        Ok(bench)
    }

    pub fn validate(&self) -> Result<()> {
        let groups: HashSet<&str> = self.candidates.iter().map(|c| c.group.as_str()).collect();
        for q in &self.queries {
            if !groups.contains(q.group.as_str()) {
                return Err(Error::invalid(format!("query group `{}` has no candidate", q.group)));
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<SynonymRecord> {
        let rec = |item: &SynonymItem, role| SynonymRecord {
            id: Some(item.id.clone()),
            text: item.text.clone(),
            lang: Some(item.lang),
            group: item.group.clone(),
            role,
        };
        self.queries
            .iter()
            .map(|q| rec(q, Role::Query))
            .chain(self.candidates.iter().map(|c| rec(c, Role::Candidate)))
            .collect()
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.queries.iter().map(|q| q.group.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupationSample {
    pub id: String,
    pub text: String,
    pub label: String,
    pub split: Split,
}

/// Title/occupation-label dataset with a disjoint train/val/test partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OccupationDataset {
    pub samples: Vec<OccupationSample>,
    /// Sorted label vocabulary; class index = position.
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct OccupationRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    label: String,
    #[serde(default)]
    split: Option<Split>,
}

/// Default validation/test fractions; the remainder is training data.
pub const VAL_FRACTION: f64 = 0.1;
pub const TEST_FRACTION: f64 = 0.1;

/// Stable seeded 80/10/10 partition of `n` items.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let n_val = (n as f64 * VAL_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

impl OccupationDataset {
    pub fn new(samples: Vec<OccupationSample>) -> Self {
        let labels: BTreeSet<&str> = samples.iter().map(|s| s.label.as_str()).collect();
        let labels = labels.into_iter().map(str::to_string).collect();
        Self { samples, labels }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &OccupationSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn to_records(&self) -> Vec<serde_json::Value> {
        self.samples
            .iter()
            .map(|s| serde_json::to_value(s).expect("sample serializes"))
            .collect()
    }
}

/// Loads postings from a JSON-lines file, in file order.
pub fn load_postings(path: &Path) -> Result<Vec<JobPosting>> {
    let records = read_records::<JobPosting>(path)?;
    if records.is_empty() {
        warn!("{}: no postings", path.display());
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, posting) in records {
        posting.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        if !seen.insert(posting.id.clone()) {
            return Err(Error::DuplicateId(posting.id));
        }
        out.push(posting);
    }
    Ok(out)
}

pub fn load_synonym_benchmark(path: &Path, scripts: &ScriptRanges) -> Result<SynonymBenchmark> {
    let records = read_records::<SynonymRecord>(path)?;
    if records.is_empty() {
        warn!("{}: no synonym records", path.display());
    }
    SynonymBenchmark::from_records(records, scripts)
}

/// Loads an occupation dataset. Records either all carry a `split` or none
/// do; in the latter case a seeded 80/10/10 partition is assigned.
pub fn load_occupation_dataset(path: &Path, seed: u64) -> Result<OccupationDataset> {
    let records = read_records::<OccupationRecord>(path)?;
    if records.is_empty() {
        warn!("{}: no occupation records", path.display());
    }
    let with_split = records.iter().filter(|(_, r)| r.split.is_some()).count();
    if with_split != 0 && with_split != records.len() {
        return Err(Error::invalid(format!(
            "{}: split given on {with_split} of {} records; give it on all or none",
            path.display(),
            records.len()
        )));
    }
    let splits = if with_split == 0 {
        assign_splits(records.len(), seed)
    } else {
        records.iter().map(|(_, r)| r.split.unwrap()).collect()
    };
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    for ((line, rec), split) in records.into_iter().zip(splits) {
        let id = rec.id.unwrap_or_else(|| format!("o{:06}", samples.len()));
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        if rec.text.trim().is_empty() || rec.label.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: "empty text or label".into(),
            });
        }
        samples.push(OccupationSample {
            id,
            text: rec.text,
            label: rec.label,
            split,
        });
    }
    Ok(OccupationDataset::new(samples))
}

/// Intersection over union of two non-empty sets.
pub fn iou<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("field set"));
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TranslationPairs {
    pub pairs: Vec<TitlePair>,
    pub skipped: usize,
}

/// One pair per posting that has both titles; others are counted as skipped.
pub fn build_translation_pairs(postings: &[JobPosting]) -> TranslationPairs {
    let mut out = TranslationPairs::default();
    for p in postings {
        match (p.l1(), p.l2()) {
            (Some(l1), Some(l2)) => out.pairs.push(TitlePair {
                l1_text: l1.to_string(),
                l2_text: l2.to_string(),
                source_id: p.id.clone(),
            }),
            _ => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        warn!("{} postings lack a title in one language", out.skipped);
    }
    out
}

/// Sorted field vocabulary of a corpus; class index = position.
pub fn field_vocabulary(postings: &[JobPosting]) -> Vec<String> {
    let set: BTreeSet<&str> = postings
        .iter()
        .flat_map(|p| p.job_fields.iter().map(String::as_str))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

/// Multi-hot field targets per posting against `vocab`.
pub fn field_targets(posting: &JobPosting, vocab: &[String]) -> Vec<bool> {
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect();
    let mut t = vec![false; vocab.len()];
    for f in &posting.job_fields {
        if let Some(&i) = index.get(f.as_str()) {
            t[i] = true;
        }
    }
    t
}

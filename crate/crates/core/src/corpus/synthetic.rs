//! Synthetic bilingual recruitment corpus.
//!
//! Every token has one spelling in each script, so the L1 title of a posting
//! is the token-wise translation of its L2 title and cross-lingual ground
//! truth is known exactly.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_splits, JobPosting, LangTag, OccupationDataset, OccupationSample, SynonymBenchmark, SynonymItem,
    DEFAULT_FIELD_COUNT,
};
use crate::error::{Error, Result};

/// Thai consonants ก..ฮ
const L1_LETTERS: (u32, u32) = (0x0E01, 0x0E2E);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_postings: usize,
    pub n_fields: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n_postings: usize, seed: u64) -> Self {
        Self {
            n_postings,
            n_fields: DEFAULT_FIELD_COUNT,
            vocab_size: 600,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub l1: String,
    pub l2: String,
    pub field: usize,
}

/// Bijective two-script vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub tokens: Vec<Token>,
    pub n_fields: usize,
}

impl Lexicon {
    fn generate(vocab_size: usize, n_fields: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut used = HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng, l1: bool| loop {
            let w: String = if l1 {
                let len = rng.gen_range(3..=5);
                (0..len)
                    .map(|_| char::from_u32(rng.gen_range(L1_LETTERS.0..=L1_LETTERS.1)).unwrap())
                    .collect()
            } else {
                let len = rng.gen_range(4..=7);
                (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
            };
            if used.insert(w.clone()) {
                break w;
            }
        };
        let tokens = (0..vocab_size)
            .map(|i| Token {
                l2: word(rng, false),
                l1: word(rng, true),
                field: i % n_fields,
            })
            .collect();
        Self { tokens, n_fields }
    }

    pub fn field_name(field: usize) -> String {
        format!("field{field:02}")
    }

    fn by_field(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_fields];
        for (i, t) in self.tokens.iter().enumerate() {
            out[t.field].push(i);
        }
        out
    }

    pub fn render(&self, tokens: &[usize], lang: LangTag) -> String {
        let words: Vec<&str> = tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                let tok = &self.tokens[t];
                match lang {
                    LangTag::L1 => tok.l1.as_str(),
                    LangTag::L2 => tok.l2.as_str(),
                    // alternate scripts, starting with L2
                    LangTag::CodeSwitched if pos % 2 == 0 => tok.l2.as_str(),
                    LangTag::CodeSwitched => tok.l1.as_str(),
                }
            })
            .collect();
        words.join(" ")
    }

    /// Maps a rendered text back to token indices; `None` if any word is
    /// outside the lexicon.
    pub fn parse(&self, text: &str) -> Option<Vec<usize>> {
        let index: HashMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .flat_map(|(i, t)| [(t.l1.as_str(), i), (t.l2.as_str(), i)])
            .collect();
        text.split_whitespace()
            .map(|w| index.get(w.to_lowercase().as_str()).copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub postings: Vec<JobPosting>,
    pub synonyms: SynonymBenchmark,
    pub occupation: OccupationDataset,
    pub lexicon: Lexicon,
}

fn choose_fields(n_fields: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = rng.gen_range(1..=3.min(n_fields));
    let mut all: Vec<usize> = (0..n_fields).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}

/// Title tokens: even positions from the dominant field, odd positions from a
/// secondary field with probability `secondary_p`.
fn title_tokens(
    by_field: &[Vec<usize>],
    fields: &[usize],
    len: usize,
    secondary_p: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(len);
    while tokens.len() < len {
        let pos = tokens.len();
        let field = if pos % 2 == 1 && fields.len() > 1 && rng.gen_bool(secondary_p) {
            fields[rng.gen_range(1..fields.len())]
        } else {
            fields[0]
        };
        let t = *by_field[field].choose(rng).unwrap();
        if !tokens.contains(&t) || by_field[field].len() < len {
            tokens.push(t);
        }
    }
    tokens
}

fn random_lang(rng: &mut ChaCha8Rng) -> LangTag {
    if rng.gen_bool(0.5) {
        LangTag::L1
    } else {
        LangTag::L2
    }
}

/// Builds postings, a disjoint synonym benchmark and an occupation dataset
/// from one seeded lexicon.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.n_postings < 10 {
        return Err(Error::invalid("synthetic corpus needs n_postings >= 10"));
    }
    if cfg.vocab_size < 50 {
        return Err(Error::invalid("synthetic corpus needs vocab_size >= 50"));
    }
    if cfg.n_fields == 0 || cfg.n_fields > cfg.vocab_size {
        return Err(Error::invalid("n_fields must be in 1..=vocab_size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = Lexicon::generate(cfg.vocab_size, cfg.n_fields, &mut rng);
    let by_field = lexicon.by_field();

    let mut postings = Vec::with_capacity(cfg.n_postings);
    for i in 0..cfg.n_postings {
        let fields = choose_fields(cfg.n_fields, &mut rng);
        let len = rng.gen_range(1..=4);
        let title = title_tokens(&by_field, &fields, len, 0.5, &mut rng);
        let desc_len = rng.gen_range(12..=20);
        let desc: Vec<usize> = (0..desc_len)
            .map(|_| {
                if rng.gen_bool(0.8) {
                    let f = *fields.choose(&mut rng).unwrap();
                    *by_field[f].choose(&mut rng).unwrap()
                } else {
                    rng.gen_range(0..lexicon.tokens.len())
                }
            })
            .collect();
        let desc_lang = random_lang(&mut rng);
        postings.push(JobPosting {
            id: format!("p{i:06}"),
            title_l1: Some(lexicon.render(&title, LangTag::L1)),
            title_l2: Some(lexicon.render(&title, LangTag::L2)),
            description: lexicon.render(&desc, desc_lang),
            job_fields: fields.iter().map(|&f| Lexicon::field_name(f)).collect(),
        });
    }

    let synonyms = synonym_benchmark(&lexicon, &by_field, (cfg.n_postings / 10).max(10), &mut rng);
    let occupation = occupation_dataset(&lexicon, &by_field, cfg.n_postings, cfg.seed, &mut rng);
    Ok(SyntheticCorpus {
        postings,
        synonyms,
        occupation,
        lexicon,
    })
}

fn synonym_benchmark(
    lexicon: &Lexicon,
    by_field: &[Vec<usize>],
    n_groups: usize,
    rng: &mut ChaCha8Rng,
) -> SynonymBenchmark {
    let mut queries = Vec::with_capacity(n_groups);
    let mut candidates: Vec<(String, LangTag, String)> = Vec::new();
    for g in 0..n_groups {
        let group = format!("g{g:05}");
        let fields = choose_fields(lexicon.n_fields, rng);
        let len = rng.gen_range(2..=4);
        let mut base = Vec::new();
        for _ in 0..50 {
            base = title_tokens(by_field, &fields, len, 0.5, rng);
            if base.iter().collect::<BTreeSet<_>>().len() == base.len() {
                break;
            }
        }
        // tiny lexicons: fall back to the distinct tokens of the last draw
        let mut seen = BTreeSet::new();
        base.retain(|t| seen.insert(*t));
        // variants by reordering and dropping tokens
        let mut variants: Vec<Vec<usize>> = Vec::new();
        for attempt in 0..12 {
            let mut v = base.clone();
            match attempt % 3 {
                0 => v.shuffle(rng),
                1 => {
                    v.remove(rng.gen_range(0..v.len()));
                }
                _ => {
                    v.shuffle(rng);
                    v.remove(rng.gen_range(0..v.len()));
                }
            }
            if v != base && !variants.contains(&v) {
                variants.push(v);
            }
            if variants.len() == 3 {
                break;
            }
        }
        let roll: f64 = rng.gen();
        let query_lang = if roll < 0.05 && base.len() > 1 {
            LangTag::CodeSwitched
        } else if roll < 0.525 {
            LangTag::L1
        } else {
            LangTag::L2
        };
        queries.push(SynonymItem {
            id: format!("q{g:06}"),
            text: lexicon.render(&base, query_lang),
            lang: query_lang,
            group: group.clone(),
        });
        for lang in [LangTag::L1, LangTag::L2] {
            if lang != query_lang {
                candidates.push((lexicon.render(&base, lang), lang, group.clone()));
            }
            for v in &variants {
                candidates.push((lexicon.render(v, lang), lang, group.clone()));
            }
        }
    }
    // shuffled ids keep id tie-breaking independent of language
    candidates.shuffle(rng);
    let candidates = candidates
        .into_iter()
        .enumerate()
        .map(|(i, (text, lang, group))| SynonymItem {
            id: format!("c{i:06}"),
            text,
            lang,
            group,
        })
        .collect();
    SynonymBenchmark { queries, candidates }
}

fn occupation_dataset(
    lexicon: &Lexicon,
    by_field: &[Vec<usize>],
    n: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> OccupationDataset {
    let splits = assign_splits(n, seed);
    let samples = splits
        .into_iter()
        .enumerate()
        .map(|(i, split)| {
            let fields = choose_fields(lexicon.n_fields, rng);
            let len = rng.gen_range(1..=4);
            let title = title_tokens(by_field, &fields, len, 0.3, rng);
            let lang = random_lang(rng);
            OccupationSample {
                id: format!("o{i:06}"),
                text: lexicon.render(&title, lang),
                label: Lexicon::field_name(fields[0]),
                split,
            }
        })
        .collect();
    OccupationDataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{iou, sample_match_pairs, tag_language, MatchLabel};

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = SyntheticConfig::new(50, 7);
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.postings, b.postings);
        assert_eq!(a.synonyms, b.synonyms);
        assert_eq!(a.occupation, b.occupation);
    }

    #[test]
    fn titles_are_token_bijections() {
        let c = generate_synthetic_corpus(&SyntheticConfig::new(100, 1)).unwrap();
        assert_eq!(c.postings.len(), 100);
        for p in &c.postings {
            let l1 = p.title_l1.as_deref().unwrap();
            let l2 = p.title_l2.as_deref().unwrap();
            assert_eq!(tag_language(l1).unwrap(), LangTag::L1);
            assert_eq!(tag_language(l2).unwrap(), LangTag::L2);
            let t1 = c.lexicon.parse(l1).unwrap();
            assert_eq!(t1, c.lexicon.parse(l2).unwrap());
            assert_eq!(c.lexicon.render(&t1, LangTag::L1), l1);
        }
        let l1_words: HashSet<&str> = c.lexicon.tokens.iter().map(|t| t.l1.as_str()).collect();
        assert_eq!(l1_words.len(), c.lexicon.tokens.len());
    }

    #[test]
    fn benchmark_tags_and_groups_are_consistent() {
        let c = generate_synthetic_corpus(&SyntheticConfig::new(200, 3)).unwrap();
        c.synonyms.validate().unwrap();
        for item in c.synonyms.queries.iter().chain(&c.synonyms.candidates) {
            assert_eq!(tag_language(&item.text).unwrap(), item.lang, "{}", item.text);
        }
        assert_eq!(c.occupation.samples.len(), 200);
        assert!(c.occupation.labels.len() <= DEFAULT_FIELD_COUNT);
    }

    #[test]
    fn sampled_negatives_have_low_iou() {
        let c = generate_synthetic_corpus(&SyntheticConfig::new(300, 5)).unwrap();
        let s = sample_match_pairs(&c.postings, 2, 0.5, 11).unwrap();
        let by_id: HashMap<&str, &JobPosting> = c.postings.iter().map(|p| (p.id.as_str(), p)).collect();
        let mut negatives = 0;
        for p in s.pairs.iter().filter(|p| p.label == MatchLabel::Negative) {
            let a = &by_id[p.description_id.as_str()].job_fields;
            let b = &by_id[p.title_id.as_str()].job_fields;
            assert!(iou(a, b).unwrap() < 0.5);
            negatives += 1;
        }
        assert_eq!(negatives, 600 - s.shortfall);
    }

    #[test]
    fn rejects_tiny_configs() {
        assert!(generate_synthetic_corpus(&SyntheticConfig::new(5, 0)).is_err());
        let mut cfg = SyntheticConfig::new(20, 0);
        cfg.vocab_size = 10;
        assert!(generate_synthetic_corpus(&cfg).is_err());
    }
}

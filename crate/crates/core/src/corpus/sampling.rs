use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{iou, JobPosting};
use crate::error::{Error, Result};

/// Rejection-sampling attempts per negative slot.
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Positive,
    Negative,
}

impl MatchLabel {
    pub fn target(self) -> f64 {
        match self {
            MatchLabel::Positive => 1.0,
            MatchLabel::Negative => 0.0,
        }
    }
}

/// Description/title pair with a binary relatedness label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub description: String,
    pub title: String,
    pub label: MatchLabel,
    pub iou_at_sampling: f64,
    pub description_id: String,
    pub title_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSample {
    pub pairs: Vec<MatchPair>,
    /// Negative slots left unfilled after exhausting the attempt budget.
    pub shortfall: usize,
}

fn pick_title<'a>(p: &'a JobPosting, rng: &mut ChaCha8Rng) -> &'a str {
    match (p.l1(), p.l2()) {
        (Some(a), Some(b)) => {
            if rng.gen_bool(0.5) {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("validated posting has a title"),
    }
}

/// For every posting, emits its own description/title as a positive pair and
/// up to `negatives_per_positive` negatives whose field IoU with the anchor is
/// strictly below `threshold`. When both titles exist, the title language is
/// chosen by a seeded coin flip.
pub fn sample_match_pairs(
    postings: &[JobPosting],
    negatives_per_positive: usize,
    threshold: f64,
    seed: u64,
) -> Result<MatchSample> {
    if postings.len() < 2 {
        return Err(Error::invalid("negative sampling needs at least 2 postings"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {threshold} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MatchSample::default();
    let mut negatives = 0usize;
    for (i, anchor) in postings.iter().enumerate() {
        out.pairs.push(MatchPair {
            description: anchor.description.clone(),
            title: pick_title(anchor, &mut rng).to_string(),
            label: MatchLabel::Positive,
            iou_at_sampling: 1.0,
            description_id: anchor.id.clone(),
            title_id: anchor.id.clone(),
        });
        for _ in 0..negatives_per_positive {
            let mut filled = false;
            for _ in 0..MAX_ATTEMPTS {
                // uniform over the other postings
                let mut j = rng.gen_range(0..postings.len() - 1);
                if j >= i {
                    j += 1;
                }
                let other = &postings[j];
                let overlap = iou(&anchor.job_fields, &other.job_fields)?;
                if overlap < threshold {
                    out.pairs.push(MatchPair {
                        description: anchor.description.clone(),
                        title: pick_title(other, &mut rng).to_string(),
                        label: MatchLabel::Negative,
                        iou_at_sampling: overlap,
                        description_id: anchor.id.clone(),
                        title_id: other.id.clone(),
                    });
                    negatives += 1;
                    filled = true;
                    break;
                }
            }
            if !filled {
                out.shortfall += 1;
            }
        }
    }
    if negatives_per_positive > 0 && negatives == 0 {
        warn!("no eligible negatives below IoU {threshold} for any posting");
    } else if out.shortfall > 0 {
        warn!(
            "{} negative slots unfilled after {MAX_ATTEMPTS} attempts",
            out.shortfall
        );
    }
    Ok(out)
}

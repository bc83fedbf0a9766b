//! Task losses and the multi-task training schedule.
//!
//! Each mini-batch runs title translation ranking (JT), description/title
//! matching (JD) and field classification (JF) in that order, each as its own
//! loss-backward-Adam update with weight 1.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use log::{info, warn};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_translation_pairs, field_targets, field_vocabulary, sample_match_pairs, JobPosting, MatchPair, TitlePair,
};
use crate::encoder::{
    nli_combine, nli_combine_backward, save_checkpoint, Checkpoint, EncoderConfig, EncoderGrad, EncoderModel,
    FeatureConfig, FeatureVector, FieldHead, HeadConfig, HeadGrad, MatchHead,
};
use crate::error::{Error, Result};
use crate::jsonl::write_atomic;
use crate::numcore::{adam_step, sigmoid, Activation, AdamConfig, AdamState, Real};

/// Rows must be unit-norm to this tolerance before the contrastive loss.
const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Derives a stage-specific seed from the run seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(stage.as_bytes());
    h.finish() ^ seed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// When set, overrides `steps` with this many passes over the title pairs.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub task_jt: bool,
    pub task_jd: bool,
    pub task_jf: bool,
    pub symmetric_contrastive: bool,
    /// One update on the summed task losses instead of three sequential ones.
    pub summed_loss: bool,
    pub freeze_encoder_jd: bool,
    pub freeze_encoder_jf: bool,
    pub negatives_per_positive: usize,
    pub iou_threshold: f64,
    pub resample_negatives: bool,
    pub dim: usize,
    pub hash_size: usize,
    pub head_width: usize,
    pub head_depth: usize,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            temperature: 0.05,
            batch_size: 64,
            learning_rate: 1e-3,
            steps: 200,
            epochs: None,
            seed: 0,
            task_jt: true,
            task_jd: true,
            task_jf: true,
            symmetric_contrastive: false,
            summed_loss: false,
            freeze_encoder_jd: false,
            freeze_encoder_jf: false,
            negatives_per_positive: 1,
            iou_threshold: 0.5,
            resample_negatives: false,
            dim: 128,
            hash_size: 1 << 18,
            head_width: 512,
            head_depth: 2,
            checkpoint_every_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Reference hyperparameters: batch 512, Adam at 3e-5.
    pub fn large_batch() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 3e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if self.task_jt && self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2 for in-batch negatives"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid("iou_threshold must be in (0, 1]"));
        }
        if self.dim == 0 || self.hash_size == 0 {
            return Err(Error::invalid("dim and hash_size must be positive"));
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            features: FeatureConfig {
                hash_size: self.hash_size,
                ..FeatureConfig::default()
            },
            hidden: vec![Activation::Identity],
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            width: self.head_width,
            depth: self.head_depth,
        }
    }
}

/// Per-step task losses; `None` when the task did not run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub loss_jt: Option<f64>,
    pub loss_jd: Option<f64>,
    pub loss_jf: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub grad_l2: Array2<T>,
    pub grad_l1: Array2<T>,
}

fn row_log_softmax_grad<T: Real>(logits: &Array2<T>, scale: T) -> (T, Array2<T>) {
    // mean over rows of -log softmax(row)[i], computed on offsets from the
    // diagonal so a saturated row keeps full relative precision
    let b = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for i in 0..b {
        let row = logits.row(i);
        let offsets: Vec<T> = row.iter().map(|&x| x - row[i]).collect();
        let max = offsets.iter().fold(T::zero(), |m, &x| m.max(x));
        let rest: T = (0..b).filter(|&j| j != i).map(|j| (offsets[j] - max).exp()).sum();
        let row_loss = if max > T::zero() {
            max + ((-max).exp() + rest).ln()
        } else {
            rest.ln_1p()
        };
        loss += row_loss;
        let mut off_diag = T::zero();
        for j in (0..b).filter(|&j| j != i) {
            let p = (offsets[j] - row_loss).exp();
            off_diag += p;
            grad[[i, j]] = p * scale;
        }
        grad[[i, i]] = -off_diag * scale;
    }
    (loss * scale, grad)
}

/// In-batch InfoNCE: the mean over rows `i` of
/// `-log( exp(sim(t_i, f_i)/tau) / sum_j exp(sim(t_i, f_j)/tau) )`, with
/// `t` the L2 rows and `f` the L1 rows. Rows must be unit-norm so the dot
/// product is the cosine. `symmetric` averages both retrieval directions.
pub fn contrastive_loss<T: Real>(
    l2: ArrayView2<T>,
    l1: ArrayView2<T>,
    temperature: f64,
    symmetric: bool,
) -> Result<ContrastiveOutput<T>> {
    if l2.dim() != l1.dim() {
        return Err(Error::DimensionMismatch {
            expected: l2.nrows(),
            got: l1.nrows(),
        });
    }
    let b = l2.nrows();
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be > 0"));
    }
    for row in l2.rows().into_iter().chain(l1.rows()) {
        let norm = row.dot(&row).sqrt().f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!(
                "contrastive input row has norm {norm}, expected 1"
            )));
        }
    }
    let inv_tau = T::of(1.0 / temperature);
    let logits = l2.dot(&l1.t()) * inv_tau;
    let inv_b = T::one() / T::of(b as f64);
    let (mut loss, mut d_logits) = row_log_softmax_grad(&logits, inv_b);
    if symmetric {
        let (loss_t, d_t) = row_log_softmax_grad(&logits.t().to_owned(), inv_b);
        let half = T::of(0.5);
        loss = (loss + loss_t) * half;
        d_logits = (d_logits + d_t.t()) * half;
    }
    let d_logits = d_logits * inv_tau;
    Ok(ContrastiveOutput {
        loss,
        grad_l2: d_logits.dot(&l1),
        grad_l1: d_logits.t().dot(&l2),
    })
}

/// Stable mean binary cross-entropy from logits, and its gradient.
fn bce_with_logits<T: Real>(logits: &Array2<T>, targets: &Array2<T>) -> (T, Array2<T>) {
    let n = T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(logits.dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &y| {
            loss += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            *g = (sigmoid(z) - y) / n;
        });
    (loss / n, grad)
}

/// Featurized title-pair batch.
#[derive(Debug, Clone)]
pub struct JtBatch {
    pub l2: Vec<FeatureVector>,
    pub l1: Vec<FeatureVector>,
}

/// Featurized description/title batch with 0/1 labels.
#[derive(Debug, Clone)]
pub struct JdBatch<T> {
    pub descriptions: Vec<FeatureVector>,
    pub titles: Vec<FeatureVector>,
    pub labels: Vec<T>,
}

/// Featurized titles with multi-hot field targets (rows = titles).
#[derive(Debug, Clone)]
pub struct JfBatch<T> {
    pub titles: Vec<FeatureVector>,
    pub targets: Array2<T>,
}

pub fn jt_loss<T: Real>(
    model: &EncoderModel<T>,
    batch: &JtBatch,
    temperature: f64,
    symmetric: bool,
) -> Result<(T, EncoderGrad<T>)> {
    let b = batch.l2.len();
    if b != batch.l1.len() {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: batch.l1.len(),
        });
    }
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    let features: Vec<FeatureVector> = batch.l2.iter().chain(&batch.l1).cloned().collect();
    let (emb, cache) = model.forward(&features)?;
    let out = contrastive_loss(emb.slice(s![..b, ..]), emb.slice(s![b.., ..]), temperature, symmetric)?;
    let upstream = ndarray::concatenate(Axis(0), &[out.grad_l2.view(), out.grad_l1.view()]).expect("equal widths");
    Ok((out.loss, model.backward(&cache, upstream.view())?))
}

/// Mean BCE of the match head over description/title pairs.
pub fn jd_loss<T: Real>(
    head: &MatchHead<T>,
    model: &EncoderModel<T>,
    batch: &JdBatch<T>,
) -> Result<(T, HeadGrad<T>, EncoderGrad<T>)> {
    let b = batch.descriptions.len();
    if b == 0 {
        return Err(Error::Empty("match batch"));
    }
    if batch.titles.len() != b || batch.labels.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: batch.titles.len().min(batch.labels.len()),
        });
    }
    let features: Vec<FeatureVector> = batch.descriptions.iter().chain(&batch.titles).cloned().collect();
    let (emb, cache) = model.forward(&features)?;
    let (u, v) = (emb.slice(s![..b, ..]), emb.slice(s![b.., ..]));
    let combined = nli_combine(u, v)?;
    let (logits, head_cache) = head.0.forward(combined.view())?;
    let targets = Array2::from_shape_vec((b, 1), batch.labels.clone()).expect("b labels");
    let (loss, d_logits) = bce_with_logits(&logits, &targets);
    let head_grad = head.0.backward(&head_cache, d_logits.view())?;
    let (du, dv) = nli_combine_backward(u, v, head_grad.input.view());
    let upstream = ndarray::concatenate(Axis(0), &[du.view(), dv.view()]).expect("equal widths");
    let enc_grad = model.backward(&cache, upstream.view())?;
    Ok((loss, head_grad, enc_grad))
}

/// Mean multi-label BCE of the field head over titles and classes.
pub fn jf_loss<T: Real>(
    head: &FieldHead<T>,
    model: &EncoderModel<T>,
    batch: &JfBatch<T>,
) -> Result<(T, HeadGrad<T>, EncoderGrad<T>)> {
    if batch.titles.is_empty() {
        return Err(Error::Empty("field batch"));
    }
    if batch.targets.nrows() != batch.titles.len() || batch.targets.ncols() != head.0.out_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.0.out_dim(),
            got: batch.targets.ncols(),
        });
    }
    if let Some(i) = batch
        .targets
        .rows()
        .into_iter()
        .position(|r| r.iter().all(|&x| x <= T::zero()))
    {
        return Err(Error::invalid(format!("field target row {i} has no positive class")));
    }
    let (emb, cache) = model.forward(&batch.titles)?;
    let (logits, head_cache) = head.0.forward(emb.view())?;
    let (loss, d_logits) = bce_with_logits(&logits, &batch.targets);
    let head_grad = head.0.backward(&head_cache, d_logits.view())?;
    let enc_grad = model.backward(&cache, head_grad.input.view())?;
    Ok((loss, head_grad, enc_grad))
}

/// Shared encoder plus the two task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel<T> {
    pub encoder: EncoderModel<T>,
    pub match_head: MatchHead<T>,
    pub field_head: FieldHead<T>,
    pub field_vocab: Vec<String>,
}

impl<T: Real> MultiTaskModel<T> {
    pub fn new(config: &TrainConfig, field_vocab: Vec<String>) -> Self {
        let encoder = EncoderModel::new(config.encoder_config(), derive_seed(config.seed, "encoder"));
        let head = config.head_config();
        Self {
            match_head: MatchHead::new(config.dim, head, derive_seed(config.seed, "match_head")),
            field_head: FieldHead::new(
                config.dim,
                field_vocab.len(),
                head,
                derive_seed(config.seed, "field_head"),
            ),
            encoder,
            field_vocab,
        }
    }
}

impl MultiTaskModel<f32> {
    pub fn to_checkpoint(&self, metadata: serde_json::Value) -> Checkpoint {
        Checkpoint {
            encoder: self.encoder.clone(),
            match_head: Some(self.match_head.clone()),
            field_head: Some(self.field_head.clone()),
            field_vocab: self.field_vocab.clone(),
            metadata,
        }
    }
}

/// One Adam state per parameter group, so a task only advances the moments
/// of the parameters it touches.
#[derive(Debug, Clone)]
pub struct Optimizers<T> {
    pub encoder: AdamState<T>,
    pub match_head: AdamState<T>,
    pub field_head: AdamState<T>,
}

impl<T: Real> Optimizers<T> {
    pub fn new(config: AdamConfig, model: &MultiTaskModel<T>) -> Self {
        Self {
            encoder: AdamState::new(config, &model.encoder),
            match_head: AdamState::new(config, &model.match_head.0),
            field_head: AdamState::new(config, &model.field_head.0),
        }
    }
}

/// Per-step schedule options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub temperature: f64,
    pub symmetric_contrastive: bool,
    pub summed_loss: bool,
    pub freeze_encoder_jd: bool,
    pub freeze_encoder_jf: bool,
}

impl From<&TrainConfig> for StepOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            temperature: c.temperature,
            symmetric_contrastive: c.symmetric_contrastive,
            summed_loss: c.summed_loss,
            freeze_encoder_jd: c.freeze_encoder_jd,
            freeze_encoder_jf: c.freeze_encoder_jf,
        }
    }
}

/// Batches for one multi-task step; `None` disables a task.
#[derive(Debug, Clone, Default)]
pub struct TaskBatches<T> {
    pub jt: Option<JtBatch>,
    pub jd: Option<JdBatch<T>>,
    pub jf: Option<JfBatch<T>>,
}

fn finite<T: Real>(loss: T, task: &str, step: u64) -> Result<f64> {
    let v = loss.f64();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: format!("{task} loss"),
            step,
        });
    }
    Ok(v)
}

/// Runs JT, then JD, then JF on the current parameters, each followed by its
/// own Adam update (or a single update on the summed gradients when
/// `summed_loss` is set). `step` is only used for error reporting.
pub fn multi_task_step<T: Real>(
    model: &mut MultiTaskModel<T>,
    opt: &mut Optimizers<T>,
    batches: &TaskBatches<T>,
    options: &StepOptions,
    step: u64,
) -> Result<TaskLosses> {
    let mut losses = TaskLosses::default();
    let mut summed: Option<EncoderGrad<T>> = None;
    let mut apply_encoder = |model: &mut MultiTaskModel<T>, opt: &mut Optimizers<T>, g: EncoderGrad<T>| -> Result<()> {
        if options.summed_loss {
            match &mut summed {
                Some(acc) => acc.accumulate(&g),
                None => summed = Some(g),
            }
            Ok(())
        } else {
            adam_step(&mut opt.encoder, &mut model.encoder, &g)
        }
    };

    if let Some(batch) = &batches.jt {
        let (loss, grad) = jt_loss(
            &model.encoder,
            batch,
            options.temperature,
            options.symmetric_contrastive,
        )?;
        losses.loss_jt = Some(finite(loss, "jt", step)?);
        apply_encoder(model, opt, grad)?;
    }
    if let Some(batch) = &batches.jd {
        let (loss, head_grad, enc_grad) = jd_loss(&model.match_head, &model.encoder, batch)?;
        losses.loss_jd = Some(finite(loss, "jd", step)?);
        adam_step(&mut opt.match_head, &mut model.match_head.0, &head_grad)?;
        if !options.freeze_encoder_jd {
            apply_encoder(model, opt, enc_grad)?;
        }
    }
    if let Some(batch) = &batches.jf {
        let (loss, head_grad, enc_grad) = jf_loss(&model.field_head, &model.encoder, batch)?;
        losses.loss_jf = Some(finite(loss, "jf", step)?);
        adam_step(&mut opt.field_head, &mut model.field_head.0, &head_grad)?;
        if !options.freeze_encoder_jf {
            apply_encoder(model, opt, enc_grad)?;
        }
    }
    if let Some(g) = summed {
        adam_step(&mut opt.encoder, &mut model.encoder, &g)?;
    }
    Ok(losses)
}

/// Seeded index stream that reshuffles at every pass.
#[derive(Debug, Clone)]
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            cursor: 0,
            epoch: 0,
            rng,
        }
    }

    /// Next batch of up to `size` indices; returns whether a new pass began.
    fn next(&mut self, size: usize) -> (Vec<usize>, bool) {
        let size = size.min(self.order.len());
        let mut wrapped = false;
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
            wrapped = true;
        }
        let batch = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        (batch, wrapped)
    }
}

/// Training inputs. Pairs are derived from the postings when not supplied.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub postings: Vec<JobPosting>,
    pub translation_pairs: Option<Vec<TitlePair>>,
    pub match_pairs: Option<Vec<MatchPair>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: TaskLosses,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MultiTaskModel<f32>,
    pub log: Vec<LossRecord>,
}

/// Loss log as CSV (`step,loss_jt,loss_jd,loss_jf`); absent tasks are empty.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    let mut out = String::from("step,loss_jt,loss_jd,loss_jf\n");
    for r in log {
        out += &format!(
            "{},{},{},{}\n",
            r.step,
            cell(r.losses.loss_jt),
            cell(r.losses.loss_jd),
            cell(r.losses.loss_jf)
        );
    }
    out
}

struct Streams<'a> {
    config: &'a TrainConfig,
    features: &'a FeatureConfig,
    postings: &'a [JobPosting],
    pairs: Vec<TitlePair>,
    matches: Vec<MatchPair>,
    field_vocab: &'a [String],
    jt: BatchStream,
    jd: BatchStream,
    jf: BatchStream,
    rng: ChaCha8Rng,
}

impl Streams<'_> {
    fn next(&mut self) -> Result<(TaskBatches<f32>, bool)> {
        let c = self.config;
        let mut batches = TaskBatches::default();
        let mut epoch_done = false;
        if c.task_jt {
            let (idx, wrapped) = self.jt.next(c.batch_size);
            epoch_done = wrapped;
            let l2: Vec<&str> = idx.iter().map(|&i| self.pairs[i].l2_text.as_str()).collect();
            let l1: Vec<&str> = idx.iter().map(|&i| self.pairs[i].l1_text.as_str()).collect();
            batches.jt = Some(JtBatch {
                l2: self.features.featurize_all(&l2)?,
                l1: self.features.featurize_all(&l1)?,
            });
        }
        if c.task_jd {
            let (idx, wrapped) = self.jd.next(c.batch_size);
            if wrapped && c.resample_negatives {
                let seed = derive_seed(c.seed, &format!("negatives/{}", self.jd.epoch));
                self.matches =
                    sample_match_pairs(self.postings, c.negatives_per_positive, c.iou_threshold, seed)?.pairs;
            }
            let pairs: Vec<&MatchPair> = idx.iter().map(|&i| &self.matches[i]).collect();
            let desc: Vec<&str> = pairs.iter().map(|p| p.description.as_str()).collect();
            let titles: Vec<&str> = pairs.iter().map(|p| p.title.as_str()).collect();
            batches.jd = Some(JdBatch {
                descriptions: self.features.featurize_all(&desc)?,
                titles: self.features.featurize_all(&titles)?,
                labels: pairs.iter().map(|p| p.label.target() as f32).collect(),
            });
        }
        if c.task_jf {
            let (idx, wrapped) = self.jf.next(c.batch_size);
            if !c.task_jt {
                epoch_done = wrapped;
            }
            let mut titles = Vec::with_capacity(idx.len());
            let mut targets = Array2::zeros((idx.len(), self.field_vocab.len()));
            for (row, &i) in idx.iter().enumerate() {
                let p = &self.postings[i];
                let title = match (p.l1(), p.l2()) {
                    (Some(a), Some(b)) => {
                        if self.rng.gen_bool(0.5) {
                            a
                        } else {
                            b
                        }
                    }
                    (Some(a), None) => a,
                    (None, Some(b)) => b,
                    (None, None) => unreachable!("validated posting has a title"),
                };
                titles.push(self.features.featurize(title)?);
                for (k, hot) in field_targets(p, self.field_vocab).into_iter().enumerate() {
                    if hot {
                        targets[[row, k]] = 1.0;
                    }
                }
            }
            batches.jf = Some(JfBatch { titles, targets });
        }
        Ok((batches, epoch_done))
    }
}

/// Trains a fresh model. When `checkpoint_dir` is given, the final model is
/// written there as `model.ckpt` (and per epoch when configured).
pub fn train(config: &TrainConfig, data: &TrainData, checkpoint_dir: Option<&Path>) -> Result<TrainOutput> {
    config.validate()?;
    if !(config.task_jt || config.task_jd || config.task_jf) {
        return Err(Error::invalid("all tasks disabled"));
    }
    let field_vocab = field_vocabulary(&data.postings);
    let pairs = match &data.translation_pairs {
        Some(p) => p.clone(),
        None => build_translation_pairs(&data.postings).pairs,
    };
    if config.task_jt && pairs.len() < 2 {
        return Err(Error::invalid("title translation task needs at least 2 title pairs"));
    }
    let matches = match (&data.match_pairs, config.task_jd) {
        (Some(m), _) => m.clone(),
        (None, true) => {
            sample_match_pairs(
                &data.postings,
                config.negatives_per_positive,
                config.iou_threshold,
                derive_seed(config.seed, "negatives/0"),
            )?
            .pairs
        }
        (None, false) => Vec::new(),
    };
    if config.task_jd && matches.is_empty() {
        return Err(Error::invalid("matching task has no pairs"));
    }
    if config.task_jf && data.postings.is_empty() {
        return Err(Error::invalid("field task has no postings"));
    }

    let mut model = MultiTaskModel::<f32>::new(config, field_vocab.clone());
    let mut opt = Optimizers::new(AdamConfig::with_lr(config.learning_rate), &model);
    let options = StepOptions::from(config);
    let features = model.encoder.config.features.clone();
    let mut streams = Streams {
        config,
        features: &features,
        postings: &data.postings,
        jt: BatchStream::new(pairs.len(), derive_seed(config.seed, "stream/jt")),
        jd: BatchStream::new(matches.len(), derive_seed(config.seed, "stream/jd")),
        jf: BatchStream::new(data.postings.len(), derive_seed(config.seed, "stream/jf")),
        pairs,
        matches,
        field_vocab: &field_vocab,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "stream/jf-lang")),
    };
    let steps = match config.epochs {
        Some(e) => {
            let n = if config.task_jt {
                streams.pairs.len()
            } else {
                data.postings.len()
            };
            e * (n / config.batch_size.min(n)).max(1)
        }
        None => config.steps,
    };
    let metadata = serde_json::to_value(config)?;
    let mut log = Vec::with_capacity(steps);
    let mut epoch = 0;
    for step in 0..steps {
        let (batches, new_epoch) = streams.next()?;
        if new_epoch {
            epoch += 1;
            if config.checkpoint_every_epoch {
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(
                        &dir.join(format!("model-epoch{epoch:03}.ckpt")),
                        &model.to_checkpoint(metadata.clone()),
                    )?;
                }
            }
        }
        let losses = multi_task_step(&mut model, &mut opt, &batches, &options, step as u64)?;
        if step % 50 == 0 {
            info!("step {step}: {losses:?}");
        }
        log.push(LossRecord { step, losses });
    }
    if steps == 0 {
        warn!("training ran zero steps");
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("model.ckpt"), &model.to_checkpoint(metadata))?;
        write_atomic(&dir.join("loss_log.csv"), loss_log_csv(&log).as_bytes())?;
    }
    Ok(TrainOutput { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticConfig};
    use crate::numcore::{finite_difference_check, Gradients, Parameters};
    use ndarray::array;

    fn orthonormal_rows(b: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::zeros((b, d));
        for i in 0..b {
            m[[i, i]] = 1.0;
        }
        m
    }

    #[test]
    fn perfect_alignment_is_nearly_zero() {
        let t = orthonormal_rows(2, 3);
        let out = contrastive_loss(t.view(), t.view(), 0.05, false).unwrap();
        // per item: log(1 + e^{-20})
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!(out.loss < 1e-6);
    }

    #[test]
    fn identical_rows_give_ln_b() {
        for b in [2usize, 4] {
            let mut t = Array2::zeros((b, 3));
            t.column_mut(1).fill(1.0);
            let out = contrastive_loss(t.view(), t.view(), 0.05, false).unwrap();
            assert!((out.loss - (b as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let t = orthonormal_rows(1, 3);
        assert!(contrastive_loss(t.view(), t.view(), 0.05, false).is_err());
        let u = array![[1.0, 0.0], [0.0, 2.0]];
        assert!(contrastive_loss(u.view(), u.view(), 0.05, false).is_err());
        let ok = orthonormal_rows(2, 2);
        assert!(contrastive_loss(ok.view(), ok.view(), 0.0, false).is_err());
    }

    fn unit_rows(b: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_simple_fn((b, d), || rng.gen_range(-1.0f64..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    #[test]
    fn contrastive_is_invariant_to_candidate_order() {
        let t = unit_rows(5, 4, 1);
        let f = unit_rows(5, 4, 2);
        let base = contrastive_loss(t.view(), f.view(), 0.1, false).unwrap().loss;
        // permute pairs jointly: positive index follows its row
        let perm = [3, 0, 4, 1, 2];
        let tp = ndarray::stack(Axis(0), &perm.map(|i| t.row(i))).unwrap();
        let fp = ndarray::stack(Axis(0), &perm.map(|i| f.row(i))).unwrap();
        let permuted = contrastive_loss(tp.view(), fp.view(), 0.1, false).unwrap().loss;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_sharpens_when_positive_leads() {
        // positives are the argmax similarity in every row
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let f = array![[0.8, 0.6], [0.6, 0.8]];
        let sharp = contrastive_loss(t.view(), f.view(), 0.01, false).unwrap().loss;
        let soft = contrastive_loss(t.view(), f.view(), 1.0, false).unwrap().loss;
        assert!(sharp <= soft, "{sharp} > {soft}");
        assert!(sharp >= 0.0);
    }

    #[test]
    fn contrastive_gradient_wrt_embeddings() {
        for symmetric in [false, true] {
            for tau in [0.05, 1.0] {
                let t = unit_rows(4, 3, 10);
                let f = unit_rows(4, 3, 11);
                let p: Vec<f64> = t.iter().chain(f.iter()).copied().collect();
                let err = finite_difference_check(
                    |x| {
                        let t = Array2::from_shape_vec((4, 3), x[..12].to_vec()).unwrap();
                        let f = Array2::from_shape_vec((4, 3), x[12..].to_vec()).unwrap();
                        let o = contrastive_loss(t.view(), f.view(), tau, symmetric).unwrap();
                        (o.loss, o.grad_l2.iter().chain(o.grad_l1.iter()).copied().collect())
                    },
                    &p,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "tau {tau} symmetric {symmetric}: {err}");
            }
        }
    }

    #[test]
    fn bce_of_uninformative_head_is_ln2() {
        let logits = Array2::<f64>::zeros((3, 4));
        let targets = array![[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0]];
        let (loss, _) = bce_with_logits(&logits, &targets);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let confident = targets.mapv(|y| if y > 0.5 { 40.0 } else { -40.0 });
        assert!(bce_with_logits(&confident, &targets).0 < 1e-15);
    }

    fn tiny_setup(seed: u64) -> (EncoderModel<f64>, MatchHead<f64>, FieldHead<f64>) {
        let cfg = TrainConfig {
            dim: 4,
            hash_size: 32,
            head_width: 6,
            head_depth: 2,
            seed,
            ..TrainConfig::default()
        };
        let m = MultiTaskModel::<f64>::new(&cfg, (0..5).map(|i| format!("f{i}")).collect());
        (m.encoder, m.match_head, m.field_head)
    }

    #[test]
    fn translation_loss_gradient_through_encoder() {
        for seed in 0..3 {
            let (enc, _, _) = tiny_setup(seed);
            let sizes: Vec<usize> = enc.tensors().iter().map(|t| t.len()).collect();
            let f = &enc.config.features;
            let batch = JtBatch {
                l2: f.featurize_all(&["chef", "เชฟ ครัว", "waiter"]).unwrap(),
                l1: f.featurize_all(&["cook", "พ่อครัว", "server job"]).unwrap(),
            };
            for tau in [0.05, 1.0] {
                let err = finite_difference_check(
                    |x| {
                        let mut e = enc.clone();
                        e.load_flat(x);
                        let (loss, g) = jt_loss(&e, &batch, tau, true).unwrap();
                        (loss, g.to_dense(&sizes))
                    },
                    &enc.flatten(),
                    2e-3,
                )
                .unwrap();
                assert!(err < 1e-5, "seed {seed} tau {tau}: {err}");
            }
        }
    }

    #[test]
    fn zero_match_head_gives_ln2_loss() {
        let (enc, head, _) = tiny_setup(0);
        let head = MatchHead(head.0.zeroed());
        let f = &enc.config.features;
        let batch = JdBatch {
            descriptions: f.featurize_all(&["aa bb", "cc"]).unwrap(),
            titles: f.featurize_all(&["dd", "ee"]).unwrap(),
            labels: vec![1.0, 0.0],
        };
        let (loss, _, _) = jd_loss(&head, &enc, &batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let empty = JdBatch::<f64> {
            descriptions: vec![],
            titles: vec![],
            labels: vec![],
        };
        assert!(jd_loss(&head, &enc, &empty).is_err());
    }

    #[test]
    fn field_loss_checks_targets() {
        let (enc, _, head) = tiny_setup(0);
        let zero = FieldHead(head.0.clone().zeroed());
        let f = &enc.config.features;
        let mut batch = JfBatch {
            titles: f.featurize_all(&["aa", "bb"]).unwrap(),
            targets: array![[1.0, 0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0, 0.0]],
        };
        let (loss, _, _) = jf_loss(&zero, &enc, &batch).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        batch.targets[[1, 1]] = 0.0;
        assert!(jf_loss(&head, &enc, &batch).is_err());
    }

    #[test]
    fn summed_mode_and_freezing() {
        let c = generate_synthetic_corpus(&SyntheticConfig::new(40, 2)).unwrap();
        let base = TrainConfig {
            dim: 8,
            hash_size: 256,
            head_width: 8,
            batch_size: 8,
            steps: 3,
            ..TrainConfig::default()
        };
        let data = TrainData {
            postings: c.postings.clone(),
            ..TrainData::default()
        };
        let summed = train(
            &TrainConfig {
                summed_loss: true,
                ..base.clone()
            },
            &data,
            None,
        )
        .unwrap();
        let sequential = train(&base, &data, None).unwrap();
        assert_eq!(summed.log.len(), 3);
        // JT sees identical parameters; later tasks in sequential mode see the updated encoder
        assert_eq!(summed.log[0].losses.loss_jt, sequential.log[0].losses.loss_jt);
        assert_ne!(summed.log[0].losses.loss_jd, sequential.log[0].losses.loss_jd);
        assert_ne!(summed.model.encoder, sequential.model.encoder);

        let frozen = TrainConfig {
            task_jt: false,
            freeze_encoder_jd: true,
            freeze_encoder_jf: true,
            ..base.clone()
        };
        let out = train(&frozen, &data, None).unwrap();
        let init = MultiTaskModel::<f32>::new(&frozen, out.model.field_vocab.clone());
        assert_eq!(out.model.encoder, init.encoder);
        assert_ne!(out.model.match_head, init.match_head);
    }

    #[test]
    fn jt_only_step_matches_pure_contrastive_update() {
        let c = generate_synthetic_corpus(&SyntheticConfig::new(20, 4)).unwrap();
        let cfg = TrainConfig {
            dim: 8,
            hash_size: 128,
            head_width: 4,
            batch_size: 4,
            steps: 2,
            task_jd: false,
            task_jf: false,
            ..TrainConfig::default()
        };
        let data = TrainData {
            postings: c.postings,
            ..TrainData::default()
        };
        let out = train(&cfg, &data, None).unwrap();
        assert!(out
            .log
            .iter()
            .all(|r| r.losses.loss_jd.is_none() && r.losses.loss_jf.is_none()));
        let init = MultiTaskModel::<f32>::new(&cfg, out.model.field_vocab.clone());
        assert_eq!(out.model.match_head, init.match_head);
        assert_eq!(out.model.field_head, init.field_head);
    }

    #[test]
    fn encoder_grad_accumulation_matches_dense_sum() {
        let (enc, _, _) = tiny_setup(3);
        let f = &enc.config.features;
        let feats = f.featurize_all(&["ab", "cd ef"]).unwrap();
        let (out, cache) = enc.forward(&feats).unwrap();
        let g1 = enc.backward(&cache, out.view()).unwrap();
        let g2 = enc.backward(&cache, (&out * 2.0).view()).unwrap();
        let sizes: Vec<usize> = enc.tensors().iter().map(|t| t.len()).collect();
        let mut acc = g1.clone();
        acc.accumulate(&g2);
        let dense: Vec<f64> = g1
            .to_dense(&sizes)
            .iter()
            .zip(g2.to_dense(&sizes))
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in acc.to_dense(&sizes).iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_log_marks_absent_tasks_empty() {
        let log = vec![LossRecord {
            step: 0,
            losses: TaskLosses {
                loss_jt: Some(0.5),
                loss_jd: None,
                loss_jf: Some(1.0),
            },
        }];
        assert_eq!(
            loss_log_csv(&log),
            "step,loss_jt,loss_jd,loss_jf\n0,0.500000000,,1.000000000\n"
        );
    }

    #[test]
    fn config_is_flat_json_with_field_names() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(json["temperature"], 0.05);
        let parsed: TrainConfig = serde_json::from_str(r#"{"batch_size": 512, "learning_rate": 3e-5}"#).unwrap();
        assert_eq!(parsed.batch_size, TrainConfig::large_batch().batch_size);
        assert_eq!(parsed.learning_rate, TrainConfig::large_batch().learning_rate);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

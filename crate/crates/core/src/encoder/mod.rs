//! Text to unit-norm sentence embedding, and the two task heads.
//!
//! Texts are hashed into character n-gram buckets, mean-pooled through a
//! sparse projection table, passed through dense layers and L2-normalized.

mod checkpoint;

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LangTag, ScriptRanges};
use crate::error::{Error, Result};
use crate::jsonl::{to_jsonl, write_atomic};
use crate::numcore::{
    glorot_matrix, sigmoid, Activation, DenseGrad, DenseLayer, GradTensor, Gradients, Parameters, Real,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

/// Embedding dump format version.
pub const DUMP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub hash_size: usize,
    pub orders: Vec<usize>,
    #[serde(default)]
    pub scripts: ScriptRanges,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            hash_size: 1 << 18,
            orders: vec![2, 3, 4],
            scripts: ScriptRanges::default(),
        }
    }
}

/// Sparse bag of hashed n-gram buckets, sorted by index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub counts: Vec<u32>,
}

impl FeatureVector {
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl FeatureConfig {
    /// Padded character n-grams of `text`, script-2 letters lowercased.
    pub fn ngrams(&self, text: &str) -> Result<Vec<String>> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Empty("text"));
        }
        let mut chars = vec!['^'];
        for c in text.chars() {
            if self.scripts.is_l2(c) {
                chars.extend(c.to_lowercase());
            } else {
                chars.push(c);
            }
        }
        chars.push('$');
        let mut out = Vec::new();
        for &n in &self.orders {
            if n == 0 || n > chars.len() {
                continue;
            }
            out.extend(chars.windows(n).map(|w| w.iter().collect::<String>()));
        }
        Ok(out)
    }

    pub fn featurize(&self, text: &str) -> Result<FeatureVector> {
        let mut buckets: BTreeMap<u32, u32> = BTreeMap::new();
        for gram in self.ngrams(text)? {
            let mut h = FnvHasher::default();
            h.write(gram.as_bytes());
            let idx = (h.finish() % self.hash_size as u64) as u32;
            *buckets.entry(idx).or_insert(0) += 1;
        }
        if buckets.is_empty() {
            // shorter than every n-gram order: fall back to the padded text
            let mut h = FnvHasher::default();
            h.write(format!("^{}$", text.trim()).as_bytes());
            buckets.insert((h.finish() % self.hash_size as u64) as u32, 1);
        }
        let (indices, counts) = buckets.into_iter().unzip();
        Ok(FeatureVector { indices, counts })
    }

    pub fn featurize_all<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<FeatureVector>> {
        texts.iter().map(|t| self.featurize(t.as_ref())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub features: FeatureConfig,
    /// Activations of the d → d dense layers after the projection.
    pub hidden: Vec<Activation>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            features: FeatureConfig::default(),
            hidden: vec![Activation::Identity],
        }
    }
}

/// Mean-pooled embedding-bag projection from hash buckets to `dim`,
/// followed by tanh. The table is stored bucket-major (H × d).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub table: Array2<T>,
    pub bias: Array1<T>,
}

/// Unit-norm sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v`; returns the embedding and the norm it had.
    pub fn normalized(mut v: Vec<f32>) -> Result<(Self, f64)> {
        if v.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "embedding entry".into(),
                step: 0,
            });
        }
        let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("zero embedding cannot be normalized"));
        }
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
        Ok((Self(v), norm))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity, accumulated in f64.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub projection: Projection<T>,
    pub hidden: Vec<DenseLayer<T>>,
}

/// Forward intermediates needed by [`EncoderModel::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    features: Vec<FeatureVector>,
    pooled: Array2<T>,
    layer_outputs: Vec<Array2<T>>,
    output: Array2<T>,
    norms: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad<T> {
    pub dim: usize,
    pub table_rows: BTreeMap<usize, Vec<T>>,
    pub projection_bias: Array1<T>,
    pub hidden: Vec<DenseGrad<T>>,
}

impl<T: Real> EncoderGrad<T> {
    pub fn accumulate(&mut self, other: &EncoderGrad<T>) {
        for (r, vals) in &other.table_rows {
            let row = self.table_rows.entry(*r).or_insert_with(|| vec![T::zero(); self.dim]);
            for (a, &b) in row.iter_mut().zip(vals) {
                *a += b;
            }
        }
        self.projection_bias += &other.projection_bias;
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }
}

impl<T: Real> EncoderModel<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d) = (config.features.hash_size, config.dim);
        let projection = Projection {
            table: glorot_matrix(h, d, h, d, &mut rng),
            bias: Array1::zeros(d),
        };
        let hidden = config
            .hidden
            .iter()
            .map(|&act| DenseLayer::glorot(d, d, act, &mut rng))
            .collect();
        Self {
            config,
            projection,
            hidden,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn featurize(&self, text: &str) -> Result<FeatureVector> {
        self.config.features.featurize(text)
    }

    fn pool(&self, features: &[FeatureVector]) -> Result<Array2<T>> {
        let d = self.dim();
        let h = self.projection.table.nrows();
        let mut pooled = Array2::zeros((features.len(), d));
        for (mut row, fv) in pooled.rows_mut().into_iter().zip(features) {
            if fv.is_empty() {
                return Err(Error::Empty("feature vector"));
            }
            let inv_total = T::one() / T::of(fv.total() as f64);
            for (&idx, &count) in fv.indices.iter().zip(&fv.counts) {
                if idx as usize >= h {
                    return Err(Error::DimensionMismatch {
                        expected: h,
                        got: idx as usize + 1,
                    });
                }
                let w = T::of(count as f64) * inv_total;
                row.scaled_add(w, &self.projection.table.row(idx as usize));
            }
            row += &self.projection.bias;
            row.mapv_inplace(|x| x.tanh());
        }
        Ok(pooled)
    }

    /// Batched forward pass returning unit-norm rows and the cache for
    /// back-propagation.
    pub fn forward(&self, features: &[FeatureVector]) -> Result<(Array2<T>, EncoderCache<T>)> {
        if features.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let pooled = self.pool(features)?;
        let mut layer_outputs = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let input = layer_outputs.last().unwrap_or(&pooled);
            let out = layer.forward(input.view())?;
            layer_outputs.push(out);
        }
        let mut output = layer_outputs.last().unwrap_or(&pooled).clone();
        let mut norms = Vec::with_capacity(features.len());
        for mut row in output.rows_mut() {
            let norm = row.dot(&row).sqrt().max(T::min_positive_value());
            row /= norm;
            norms.push(norm);
        }
        let cache = EncoderCache {
            features: features.to_vec(),
            pooled,
            layer_outputs,
            output: output.clone(),
            norms,
        };
        Ok((output, cache))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, upstream: ArrayView2<T>) -> Result<EncoderGrad<T>> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch {
                expected: cache.output.ncols(),
                got: upstream.ncols(),
            });
        }
        // through L2 normalization: (g - y (y.g)) / norm
        let mut grad = upstream.to_owned();
        for ((mut g, y), &n) in grad.rows_mut().into_iter().zip(cache.output.rows()).zip(&cache.norms) {
            let yg = y.dot(&g);
            g.scaled_add(-yg, &y);
            g /= n;
        }
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (k, layer) in self.hidden.iter().enumerate().rev() {
            let input = if k == 0 {
                &cache.pooled
            } else {
                &cache.layer_outputs[k - 1]
            };
            let g = layer.backward(input.view(), cache.layer_outputs[k].view(), grad.view())?;
            grad = g.input.clone();
            hidden.push(g);
        }
        hidden.reverse();
        // through tanh of the pooled projection
        grad.zip_mut_with(&cache.pooled, |g, &y| *g *= T::one() - y * y);
        let d = self.dim();
        let mut table_rows: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        for (g, fv) in grad.rows().into_iter().zip(&cache.features) {
            let inv_total = T::one() / T::of(fv.total() as f64);
            for (&idx, &count) in fv.indices.iter().zip(&fv.counts) {
                let w = T::of(count as f64) * inv_total;
                let row = table_rows.entry(idx as usize).or_insert_with(|| vec![T::zero(); d]);
                for (r, &gv) in row.iter_mut().zip(g.iter()) {
                    *r += w * gv;
                }
            }
        }
        Ok(EncoderGrad {
            dim: d,
            table_rows,
            projection_bias: grad.sum_axis(Axis(0)),
            hidden,
        })
    }

    pub fn encode_array<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<T>> {
        if texts.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let features = self.config.features.featurize_all(texts)?;
        Ok(self.forward(&features)?.0)
    }

    /// Encodes a batch of texts into unit-norm embeddings.
    pub fn encode<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        let out = self.encode_array(texts)?;
        out.rows()
            .into_iter()
            .map(|r| Embedding::normalized(r.iter().map(|x| x.f64() as f32).collect()).map(|(e, _)| e))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            projection: Projection {
                table: self.projection.table.mapv(|x| U::of(x.f64())),
                bias: self.projection.bias.mapv(|x| U::of(x.f64())),
            },
            hidden: self.hidden.iter().map(DenseLayer::cast).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for EncoderModel<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = vec![
            self.projection.table.as_slice().expect("standard layout"),
            self.projection.bias.as_slice().expect("standard layout"),
        ];
        for l in &self.hidden {
            out.extend(l.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![
            self.projection.table.as_slice_mut().expect("standard layout"),
            self.projection.bias.as_slice_mut().expect("standard layout"),
        ];
        for l in &mut self.hidden {
            out.extend(l.tensors_mut());
        }
        out
    }
}

impl<T: Real> Gradients<T> for EncoderGrad<T> {
    fn grad_tensors(&self) -> Vec<GradTensor<'_, T>> {
        let mut out = vec![
            GradTensor::SparseRows {
                row_len: self.dim,
                rows: &self.table_rows,
            },
            GradTensor::Dense(self.projection_bias.as_slice().expect("standard layout")),
        ];
        for g in &self.hidden {
            out.extend(g.grad_tensors());
        }
        out
    }
}

/// `[u; v; |u - v|; u * v]` row-wise.
pub fn nli_combine<T: Real>(u: ArrayView2<T>, v: ArrayView2<T>) -> Result<Array2<T>> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.ncols(),
            got: v.ncols(),
        });
    }
    let d = u.ncols();
    let mut out = Array2::zeros((u.nrows(), 4 * d));
    out.slice_mut(s![.., 0..d]).assign(&u);
    out.slice_mut(s![.., d..2 * d]).assign(&v);
    out.slice_mut(s![.., 2 * d..3 * d]).assign(&(&u - &v).mapv(|x| x.abs()));
    out.slice_mut(s![.., 3 * d..]).assign(&(&u * &v));
    Ok(out)
}

/// Gradients of [`nli_combine`] with respect to `u` and `v`.
pub fn nli_combine_backward<T: Real>(
    u: ArrayView2<T>,
    v: ArrayView2<T>,
    upstream: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let d = u.ncols();
    let g_u = upstream.slice(s![.., 0..d]);
    let g_v = upstream.slice(s![.., d..2 * d]);
    let g_abs = upstream.slice(s![.., 2 * d..3 * d]);
    let g_mul = upstream.slice(s![.., 3 * d..]);
    let sign = (&u - &v).mapv(|x| {
        if x > T::zero() {
            T::one()
        } else if x < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    });
    let abs_term = &g_abs * &sign;
    let du = &g_u + &abs_term + &(&g_mul * &v);
    let dv = &g_v - &abs_term + &(&g_mul * &u);
    (du, dv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub width: usize,
    pub depth: usize,
}

impl Default for HeadConfig {
    /// Two hidden layers of width 512.
    fn default() -> Self {
        Self { width: 512, depth: 2 }
    }
}

/// Relu hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Array2<T>,
    outputs: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad<T> {
    pub layers: Vec<DenseGrad<T>>,
    pub input: Array2<T>,
}

impl<T: Real> MlpHead<T> {
    pub fn new(in_dim: usize, out_dim: usize, config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.depth + 1);
        let mut prev = in_dim;
        for _ in 0..config.depth {
            layers.push(DenseLayer::glorot(prev, config.width, Activation::Relu, &mut rng));
            prev = config.width;
        }
        layers.push(DenseLayer::glorot(prev, out_dim, Activation::Identity, &mut rng));
        Self { layers }
    }

    pub fn zeroed(mut self) -> Self {
        for l in &mut self.layers {
            l.weights.fill(T::zero());
            l.bias.fill(T::zero());
        }
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty head").out_dim()
    }

    /// Returns logits (rows = samples).
    pub fn forward(&self, input: ArrayView2<T>) -> Result<(Array2<T>, HeadCache<T>)> {
        let mut outputs: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = match outputs.last() {
                Some(prev) => layer.forward(prev.view())?,
                None => layer.forward(input)?,
            };
            outputs.push(out);
        }
        let logits = outputs.last().expect("non-empty head").clone();
        Ok((
            logits,
            HeadCache {
                input: input.to_owned(),
                outputs,
            },
        ))
    }

    pub fn backward(&self, cache: &HeadCache<T>, d_logits: ArrayView2<T>) -> Result<HeadGrad<T>> {
        let mut grad = d_logits.to_owned();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = if k == 0 { &cache.input } else { &cache.outputs[k - 1] };
            let g = layer.backward(input.view(), cache.outputs[k].view(), grad.view())?;
            grad = g.input.clone();
            layers.push(g);
        }
        layers.reverse();
        Ok(HeadGrad { layers, input: grad })
    }

    pub fn cast<U: Real>(&self) -> MlpHead<U> {
        MlpHead {
            layers: self.layers.iter().map(DenseLayer::cast).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for MlpHead<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

impl<T: Real> Gradients<T> for HeadGrad<T> {
    fn grad_tensors(&self) -> Vec<GradTensor<'_, T>> {
        self.layers.iter().flat_map(|g| g.grad_tensors()).collect()
    }
}

/// Description/title relatedness head over the NLI combination (width 4d).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchHead<T>(pub MlpHead<T>);

/// Multi-label job-field head.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHead<T>(pub MlpHead<T>);

impl<T: Real> MatchHead<T> {
    pub fn new(dim: usize, config: HeadConfig, seed: u64) -> Self {
        Self(MlpHead::new(4 * dim, 1, config, seed))
    }
}

impl<T: Real> FieldHead<T> {
    pub fn new(dim: usize, n_fields: usize, config: HeadConfig, seed: u64) -> Self {
        Self(MlpHead::new(dim, n_fields, config, seed))
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Probability that a description and a title belong together.
pub fn match_forward<T: Real>(head: &MatchHead<T>, description: ArrayView1<T>, title: ArrayView1<T>) -> Result<f64> {
    check_dim(description.len(), title.len())?;
    check_dim(head.0.in_dim(), 4 * description.len())?;
    let u = description.insert_axis(Axis(0));
    let v = title.insert_axis(Axis(0));
    let (logits, _) = head.0.forward(nli_combine(u, v)?.view())?;
    Ok(sigmoid(logits[[0, 0]]).f64())
}

/// Independent per-field probabilities for one title embedding.
pub fn field_forward<T: Real>(head: &FieldHead<T>, title: ArrayView1<T>) -> Result<Vec<f64>> {
    check_dim(head.0.in_dim(), title.len())?;
    let (logits, _) = head.0.forward(title.insert_axis(Axis(0)))?;
    Ok(logits.row(0).iter().map(|&z| sigmoid(z).f64()).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DumpHeader {
    format_version: u32,
    dim: usize,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DumpRecord {
    pub id: String,
    pub lang: LangTag,
    pub vector: Vec<f32>,
}

/// Writes an embedding dump: a header line then one record per embedding.
pub fn write_embedding_dump(path: &Path, records: &[(String, LangTag, Embedding)]) -> Result<()> {
    let dim = records.first().map_or(0, |(_, _, e)| e.dim());
    let mut bytes = to_jsonl(&[DumpHeader {
        format_version: DUMP_VERSION,
        dim,
        count: records.len(),
    }])?;
    let rows: Vec<DumpRecord> = records
        .iter()
        .map(|(id, lang, e)| DumpRecord {
            id: id.clone(),
            lang: *lang,
            vector: e.as_slice().to_vec(),
        })
        .collect();
    bytes.extend(to_jsonl(&rows)?);
    write_atomic(path, &bytes)
}

pub(crate) fn parse_dump_header(line: &str) -> Result<(u32, usize, usize)> {
    let h: DumpHeader = serde_json::from_str(line)?;
    Ok((h.format_version, h.dim, h.count))
}

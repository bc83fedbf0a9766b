//! Minimal dense network kernel: layers, Adam, and a finite-difference
//! gradient checker.
//!
//! Everything is generic over [`Real`] so training can run in `f32` while
//! gradient checks run the identical code path in `f64`.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Uniform Glorot limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_matrix<T: Real, R: Rng>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Array2<T> {
    let a = glorot_limit(fan_in, fan_out);
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.gen_range(-a..a)))
}

/// Fully connected layer `activation(W x + b)` with `W` of shape out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            weights: glorot_matrix(out_dim, in_dim, in_dim, out_dim, rng),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: width,
            });
        }
        Ok(())
    }

    /// Row-wise forward over a batch (rows = samples).
    pub fn forward(&self, input: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(input.ncols())?;
        let mut out = input.dot(&self.weights.t());
        out += &self.bias;
        let act = self.activation;
        out.mapv_inplace(|x| act.apply(x));
        Ok(out)
    }

    pub fn forward_one(&self, input: ArrayView1<T>) -> Result<Array1<T>> {
        self.check_input(input.len())?;
        let mut out = self.weights.dot(&input);
        out += &self.bias;
        let act = self.activation;
        out.mapv_inplace(|x| act.apply(x));
        Ok(out)
    }

    /// Reverse-mode gradients of the batched forward map, summed over rows.
    /// `output` is the forward result for `input`.
    pub fn backward(
        &self,
        input: ArrayView2<T>,
        output: ArrayView2<T>,
        upstream: ArrayView2<T>,
    ) -> Result<DenseGrad<T>> {
        self.check_input(input.ncols())?;
        if output.dim() != upstream.dim() || output.nrows() != input.nrows() || output.ncols() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim(),
                got: upstream.ncols(),
            });
        }
        let act = self.activation;
        let mut delta = upstream.to_owned();
        delta.zip_mut_with(&output, |g, &y| *g *= act.derivative_from_output(y));
        Ok(DenseGrad {
            weights: delta.t().dot(&input),
            bias: delta.sum_axis(Axis(0)),
            input: delta.dot(&self.weights),
        })
    }

    pub fn cast<U: Real>(&self) -> DenseLayer<U> {
        DenseLayer {
            weights: self.weights.mapv(|x| U::of(x.f64())),
            bias: self.bias.mapv(|x| U::of(x.f64())),
            activation: self.activation,
        }
    }
}

/// Read-only view of one gradient tensor.
#[derive(Debug, Clone, Copy)]
pub enum GradTensor<'a, T> {
    Dense(&'a [T]),
    /// Row-major matrix gradient where only the listed rows are non-zero.
    SparseRows {
        row_len: usize,
        rows: &'a BTreeMap<usize, Vec<T>>,
    },
}

/// Trainable parameters exposed as a fixed-order list of flat tensors.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn flatten(&self) -> Vec<T>
    where
        T: Copy,
    {
        self.tensors().concat()
    }

    fn load_flat(&mut self, flat: &[T])
    where
        T: Copy,
    {
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Gradients in the same tensor order as the matching [`Parameters`].
pub trait Gradients<T> {
    fn grad_tensors(&self) -> Vec<GradTensor<'_, T>>;

    fn to_dense(&self, sizes: &[usize]) -> Vec<T>
    where
        T: Real,
    {
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for (g, &size) in self.grad_tensors().into_iter().zip(sizes) {
            match g {
                GradTensor::Dense(d) => out.extend_from_slice(d),
                GradTensor::SparseRows { row_len, rows } => {
                    let start = out.len();
                    out.resize(start + size, T::zero());
                    for (&r, vals) in rows {
                        out[start + r * row_len..start + (r + 1) * row_len].copy_from_slice(vals);
                    }
                }
            }
        }
        out
    }
}

impl<T: Real> Parameters<T> for DenseLayer<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl<T: Real> Gradients<T> for DenseGrad<T> {
    fn grad_tensors(&self) -> Vec<GradTensor<'_, T>> {
        vec![
            GradTensor::Dense(self.weights.as_slice().expect("standard layout")),
            GradTensor::Dense(self.bias.as_slice().expect("standard layout")),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    /// Rows of sparse tensors that have ever received a gradient. Untouched
    /// rows have zero moments, so their Adam update is exactly zero.
    touched: Vec<Vec<bool>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Parameters<T> + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            touched: vec![Vec::new(); sizes.len()],
        }
    }
}

fn all_finite<T: Real>(grads: &[GradTensor<'_, T>]) -> bool {
    grads.iter().all(|g| match g {
        GradTensor::Dense(d) => d.iter().all(|x| x.is_finite()),
        GradTensor::SparseRows { rows, .. } => rows.values().flatten().all(|x| x.is_finite()),
    })
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient entry is non-finite.
pub fn adam_step<T, P, G>(state: &mut AdamState<T>, params: &mut P, grads: &G) -> Result<()>
where
    T: Real,
    P: Parameters<T> + ?Sized,
    G: Gradients<T> + ?Sized,
{
    let grads = grads.grad_tensors();
    let step = state.step + 1;
    if !all_finite(&grads) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            step,
        });
    }
    let mut tensors = params.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.first.len() {
        return Err(Error::DimensionMismatch {
            expected: state.first.len(),
            got: grads.len(),
        });
    }
    state.step = step;
    let c = state.config;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let corr1 = T::of(1.0 - c.beta1.powi(step as i32));
    let corr2 = T::of(1.0 - c.beta2.powi(step as i32));
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));
    let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (i, (param, grad)) in tensors.iter_mut().zip(&grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        match *grad {
            GradTensor::Dense(g) => {
                if g.len() != param.len() {
                    return Err(Error::DimensionMismatch {
                        expected: param.len(),
                        got: g.len(),
                    });
                }
                for j in 0..param.len() {
                    update(&mut param[j], &mut m[j], &mut v[j], g[j]);
                }
            }
            GradTensor::SparseRows { row_len, rows } => {
                let n_rows = param.len() / row_len.max(1);
                let touched = &mut state.touched[i];
                touched.resize(n_rows, false);
                for &r in rows.keys() {
                    if r >= n_rows {
                        return Err(Error::DimensionMismatch {
                            expected: n_rows,
                            got: r + 1,
                        });
                    }
                    touched[r] = true;
                }
                for r in (0..n_rows).filter(|&r| touched[r]) {
                    let span = r * row_len..(r + 1) * row_len;
                    let (p, m, v) = (&mut param[span.clone()], &mut m[span.clone()], &mut v[span]);
                    match rows.get(&r) {
                        Some(g) => {
                            for j in 0..row_len {
                                update(&mut p[j], &mut m[j], &mut v[j], g[j]);
                            }
                        }
                        None => {
                            for j in 0..row_len {
                                update(&mut p[j], &mut m[j], &mut v[j], T::zero());
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Default step for [`finite_difference_check`].
pub const FD_EPSILON: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`, with its analytic and numeric derivatives.
    pub worst: Option<(usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates whose stencil left the linear region of the base point.
    pub skipped: usize,
}

/// Seven-point central-difference check of an analytic gradient.
///
/// `loss` returns the loss and its analytic gradient at the given point.
/// Returns the maximum over all coordinates of
/// `|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
pub fn finite_difference_check<F>(loss: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_at(loss, params, epsilon, &all)
}

/// As [`finite_difference_check`], restricted to `indices`.
pub fn finite_difference_check_at<F>(mut loss: F, params: &[f64], epsilon: f64, indices: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let report = fd_check(
        |p| {
            let (l, g) = loss(p);
            (l, g, Vec::new())
        },
        params,
        epsilon,
        indices,
    )?;
    Ok(report.max_rel_error)
}

/// Check for piecewise-smooth losses. Besides loss and gradient, `loss`
/// returns the on/off pattern of its kinked units (e.g. which ReLU inputs
/// are positive); a coordinate whose stencil changes that pattern straddles
/// a kink, has no finite-difference derivative there, and is skipped.
pub fn finite_difference_check_piecewise<F>(loss: F, params: &[f64], epsilon: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<bool>),
{
    let all: Vec<usize> = (0..params.len()).collect();
    fd_check(loss, params, epsilon, &all)
}

fn fd_check<F>(mut loss: F, params: &[f64], epsilon: f64, indices: &[usize]) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>, Vec<bool>),
{
    let (_, analytic, pattern) = loss(params);
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut point = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for &i in indices {
        let orig = point[i];
        let mut values = [0.0; 6];
        let mut crossed = false;
        for (v, offset) in values.iter_mut().zip([3.0, 2.0, 1.0, -1.0, -2.0, -3.0]) {
            point[i] = orig + offset * epsilon;
            let (l, _, p) = loss(&point);
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss at perturbed coordinate {i}"),
                    step: 0,
                });
            }
            crossed |= p != pattern;
            *v = l;
        }
        point[i] = orig;
        if crossed {
            report.skipped += 1;
            continue;
        }
        let [p3, p2, p1, m1, m2, m3] = values;
        let numeric = (45.0 * (p1 - m1) - 9.0 * (p2 - m2) + (p3 - m3)) / (60.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, analytic[i], numeric));
        }
        report.checked += 1;
    }
    Ok(report)
}

//! Dense N-D tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major value; all differentiable
//! computation goes through a [`Tape`], which records every primitive in
//! topological order and replays it backwards to populate gradients.
//! The element type is generic: training runs at `f32`, gradient checking
//! at `f64` (central finite differences are unreliable at single
//! precision).

mod gradcheck;
mod kernels;
mod sgd;
mod tape;

pub use gradcheck::{GradCheckOpts, GradCheckReport, GradFailure, check_gradients};
pub use sgd::{SgdConfig, SgdState};
pub use tape::{Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Scalar element of a tensor; implemented for `f32` and `f64`.
pub trait Element:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Dense row-major N-D array. Cheap to clone (shared storage); immutable
/// after construction except through [`Tensor::apply`], which the
/// optimizer uses between steps.
#[derive(Debug, Clone)]
pub struct Tensor<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor.new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor.new", format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed), shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![E::zero(); numel]).expect("zeros")
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![E::one(); numel]).expect("ones")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![E::from_f64(value); numel]).expect("full")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![], vec![E::from_f64(value)]).expect("scalar")
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f64(v)).collect())
    }

    /// Truncated-normal initialization (std `std`, clipped at two sigma).
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut CounterRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| E::from_f64(rng.trunc_normal(std))).collect();
        Tensor::new(shape, data).expect("trunc_normal")
    }

    /// Kaiming normal with fan-out scaling, for convolution kernels of
    /// shape `[out_ch, in_ch_per_group, k, k]`.
    pub fn kaiming_fan_out(shape: Vec<usize>, rng: &mut CounterRng) -> Self {
        let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>();
        let std = (2.0 / fan_out as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| E::from_f64(rng.normal() * std)).collect();
        Tensor::new(shape, data).expect("kaiming_fan_out")
    }

    /// Uniform in `[lo, hi)`, mostly for tests.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut CounterRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| E::from_f64(rng.uniform(lo, hi))).collect();
        Tensor::new(shape, data).expect("rand_uniform")
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn as_slice(&self) -> &[E] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same storage under a new shape; no copy.
    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "tensor.with_shape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// In-place mutation; copies the storage first if it is shared.
    pub fn apply(&mut self, f: impl FnMut(&mut E)) {
        Arc::make_mut(&mut self.data).iter_mut().for_each(f);
    }

    /// Replace the contents, keeping the shape. Used by the optimizer and
    /// the gradient checker.
    pub fn set_data(&mut self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape("tensor.set_data", "length mismatch".to_string()));
        }
        self.data = Arc::new(data);
        self.id = NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn from_f32s(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| E::from_f32(v)).collect())
    }

    /// Max absolute difference, for tolerance asserts in tests.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_close(&self, other: &Tensor<E>, tol: f64) -> bool {
        self.shape == other.shape && self.max_abs_diff(other) <= tol
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

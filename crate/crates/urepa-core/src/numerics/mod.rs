//! Scalar abstraction, deterministic RNG, tensor metadata, and parameter
//! initialization. Everything downstream is generic over [`Scalar`] so the
//! same graph code runs in f32 for training and f64 for gradient checking.

mod fd;

pub use fd::{finite_difference_grad, max_rel_error, rel_error, GradReport};

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::{Debug, Display};

/// Element dtype tag carried by tensor metadata and file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable in graphs: f32 or f64.
///
/// All random draws and trig tables are computed in f64 and narrowed through
/// `from_f64`, so a run is reproducible across the two dtypes up to rounding
/// of the same real value.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Float
    + std::ops::AddAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shape plus dtype for a named tensor. Rank may be zero (a scalar); every
/// extent must be at least 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorSpec {
    pub fn new(shape: impl Into<Vec<usize>>, dtype: DType) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        Ok(TensorSpec { shape, dtype })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How a parameter tensor is filled at initialization time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Zeros,
    Ones,
    /// Zero-mean Gaussian with the given standard deviation (must be > 0).
    Normal {
        std: f64,
    },
}

/// Deterministic, resumable RNG.
///
/// Wraps ChaCha8 keyed by a single `u64` seed; independent subsystems draw
/// from distinct streams of the same seed so adding draws to one subsystem
/// never shifts another. `(seed, stream, word_pos)` fully captures the state
/// for checkpointing.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

/// Stream ids for the fixed subsystems. Per-sample dataset streams live at
/// `STREAM_DATASET_BASE + sample_index`.
pub mod streams {
    pub const MODEL_INIT: u64 = 0;
    pub const PROJECTOR_INIT: u64 = 1;
    pub const TEACHER_INIT: u64 = 2;
    pub const TRAIN_LOOP: u64 = 3;
    pub const SAMPLER: u64 = 4;
    pub const STREAM_DATASET_BASE: u64 = 1_000_000;
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        SeededRng { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on another stream of the same seed, starting at word 0.
    pub fn substream(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed, stream)
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restore an exact position previously read with [`SeededRng::word_pos`].
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut out = SeededRng::new(seed, stream);
        out.rng.set_word_pos(word_pos);
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Standard normal draw, always sampled at f64 precision.
    pub fn normal_f64(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.random_range(0..n)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut ArrayD<T>, std: f64) {
        for v in out.iter_mut() {
            *v = T::from_f64(self.normal_f64() * std);
        }
    }
}

/// Allocate and fill a tensor according to `scheme`, in row-major layout.
/// Draws are consumed in row-major element order, so a given `(rng state,
/// spec, scheme)` triple always yields the same tensor.
pub fn seeded_init<T: Scalar>(
    spec: &TensorSpec,
    scheme: InitScheme,
    rng: &mut SeededRng,
) -> Result<ArrayD<T>> {
    if let InitScheme::Normal { std } = scheme {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!(
                "normal init requires finite std > 0, got {std}"
            )));
        }
    }
    let mut out = ArrayD::from_elem(IxDyn(&spec.shape), T::from_f64(0.0));
    match scheme {
        InitScheme::Zeros => {}
        InitScheme::Ones => out.fill(T::from_f64(1.0)),
        InitScheme::Normal { std } => rng.fill_normal(&mut out, std),
    }
    Ok(out)
}

//! Dense tensors with reverse-mode differentiation and AdamW.
//!
//! Training runs in `f32`; the same graph code is generic over [`Scalar`] so
//! gradient checking can run the identical computation in `f64`.

mod adamw;
mod gradcheck;
mod graph;
pub mod kernels;

pub use adamw::AdamWState;
pub use gradcheck::{grad_check, CoordSelection, GradCheckReport};
pub use graph::{ActKind, Graph, Var};

pub use self::kernels::has_avx512;

use crate::error::{Error, Result};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::Arc;

/// Element type for tensors: `f32` for training, `f64` for the gradient
/// checking shadow mode.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, o: Self) -> Self;
    fn is_finite(self) -> bool;
    /// Fast exponential for kernel hot loops: a vectorizable polynomial for
    /// `f32` (relative error ~1e-7), exact libm for the `f64` shadow mode.
    fn exp_fast(self) -> Self;
    /// Fast tanh via `exp_fast`; exact for `f64`.
    fn tanh_fast(self) -> Self;
}

/// Branch-free polynomial `e^x` for f32: splits `x = k ln2 + r`, evaluates a
/// degree-5 polynomial on `r` and rebuilds the exponent through the float
/// bit layout. Inputs beyond the finite range clamp to 0 or +inf behavior
/// via the [-87.3, 88.7] domain clamp.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.336_54, 88.722_83);
    let kf = (x * LOG2E).round();
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    // degree-5 minimax-style polynomial for e^r on [-ln2/2, ln2/2]
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_5e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5e-1;
    let poly = p * r * r + r + 1.0;
    let k = kf as i32;
    f32::from_bits(((k + 127) << 23) as u32) * poly
}

macro_rules! impl_scalar {
    ($t:ty, $exp_fast:expr, $tanh_fast:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
            #[inline(always)]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline(always)]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline(always)]
            fn maximum(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp_fast(self)
            }
            #[inline(always)]
            fn tanh_fast(self) -> Self {
                $tanh_fast(self)
            }
        }
    };
}

/// Scalar GELU for vector-kernel tails.
#[inline(always)]
pub fn exp_f32_gelu(x: f32) -> f32 {
    let inner = 0.797_884_56 * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + tanh_f32(inner))
}

#[inline(always)]
fn tanh_f32(x: f32) -> f32 {
    // tanh(x) = 1 - 2 / (e^(2x) + 1)
    1.0 - 2.0 / (exp_f32(2.0 * x) + 1.0)
}

impl_scalar!(f32, exp_f32, tanh_f32);
impl_scalar!(f64, f64::exp, f64::tanh);

/// Dense row-major tensor. Cloning shares the buffer; mutation copies on
/// write if the buffer is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::ZERO; numel]),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(|i| f(i)).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the buffer if shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Arc::make_mut(&mut self.data);
        v
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer viewed under a different shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        if std::any::TypeId::of::<U>() == std::any::TypeId::of::<T>() {
            // same element type: share the buffer instead of copying
            let cloned = self.clone();
            let out = unsafe { std::mem::transmute_copy::<Tensor<T>, Tensor<U>>(&cloned) };
            std::mem::forget(cloned);
            return out;
        }
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect()),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Squared L2 norm accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64() * x.to_f64()).sum()
    }
}

/// Process-wide deterministic-execution flag. When set, kernels stay
/// single-threaded with a fixed reduction order.
pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, std::sync::atomic::Ordering::SeqCst);
}

pub fn deterministic() -> bool {
    DETERMINISTIC.load(std::sync::atomic::Ordering::SeqCst)
}

static DETERMINISTIC: std::sync::atomic::AtomicBool = std::sync::atomic::AtomicBool::new(false);

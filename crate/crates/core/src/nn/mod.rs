//! Neural layers: convolution, batch normalisation, dense layers, temporal
//! pooling and the residual basic block.

mod batchnorm;
mod conv;
mod linear;
mod pooling;
mod resblock;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub use batchnorm::{batch_norm_eval, batch_norm_train, BatchNorm2d};
pub use conv::{conv2d, conv_output_dim, Conv2d};
pub use linear::{linear, Linear};
pub use pooling::{temporal_stats_pool, TemporalPooling, STD_EPS};
pub use resblock::{BasicBlock, SeAttachment};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A learnable tensor with its accumulated gradient.
pub struct Param<T: Scalar = f32> {
    id: u64,
    name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        let mut p = Param::new(self.name.clone(), self.value.clone());
        p.grad = self.grad.clone();
        p
    }
}

impl<T: Scalar> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.shape())
    }
}

/// Which SE gates a forward pass should copy out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Probe {
    #[default]
    Off,
    /// Last SE-carrying block of every stage.
    LastPerStage,
    AllBlocks,
}

/// Gate values `[batch, channels]` copied from one SE unit.
#[derive(Debug, Clone)]
pub struct GateCapture<T: Scalar = f32> {
    pub stage: usize,
    pub block: usize,
    pub gates: Tensor<T>,
}

/// Per-forward state: the tape, train/eval mode, parameter bindings and
/// gate captures.
pub struct Ctx<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    train: bool,
    bound: HashMap<u64, Var<'t, T>>,
    pub probe: Probe,
    pub captured: Vec<GateCapture<T>>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// Training context: batch statistics, parameters tracked for gradients.
    pub fn train(tape: &'t Tape<T>) -> Self {
        Self::with_mode(tape, true)
    }

    /// Inference context: running statistics, nothing tracked.
    pub fn eval(tape: &'t Tape<T>) -> Self {
        Self::with_mode(tape, false)
    }

    fn with_mode(tape: &'t Tape<T>, train: bool) -> Self {
        Self {
            tape,
            train,
            bound: HashMap::new(),
            probe: Probe::Off,
            captured: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Binds a parameter onto the tape (once per context).
    pub fn param(&mut self, p: &Param<T>) -> Var<'t, T> {
        let tape = self.tape;
        let train = self.train;
        *self
            .bound
            .entry(p.id)
            .or_insert_with(|| tape.leaf(p.value.clone(), train))
    }

    /// Adds tape gradients of every bound parameter into `Param::grad`.
    pub fn accumulate_grads<'p>(&self, params: impl IntoIterator<Item = &'p mut Param<T>>) -> Result<()> {
        for p in params {
            if let Some(v) = self.bound.get(&p.id) {
                if let Some(g) = self.tape.grad(*v) {
                    p.grad.add_assign(&g)?;
                }
            }
        }
        Ok(())
    }
}

/// Visiting interface for everything that owns parameters.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// He-style uniform initialiser: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub(crate) fn fan_in_uniform<T: Scalar>(rng: &mut impl rand::Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

//! Named, ordered storage for trainable tensors.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `uniform(-sqrt(1/fan_in), +sqrt(1/fan_in))`
    FanIn(usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Values are rounded to f32 so that the
    /// store is exactly representable in a checkpoint.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut StreamRng) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::FanIn(fan_in) => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..numel)
                    .map(|_| round_f32(rng.gen_range(-bound..bound)))
                    .collect()
            }
        };
        self.push(name, Tensor::new(shape, data).expect("parameter shape"))
    }

    pub(crate) fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("param set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Flat view of all parameter values, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}

/// Parameters of a [`ParamStore`] placed on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradient of every parameter, zero-filled where the loss does not
    /// depend on it.
    pub fn collect_grads(&self, grads: &Gradients) -> GradBuffer {
        GradBuffer {
            grads: self
                .vars
                .iter()
                .map(|&v| match grads.wrt(v) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; v.value().len()],
                })
                .collect(),
        }
    }
}

/// Gradient slots matching a [`ParamStore`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    /// Wraps raw slots; the caller is responsible for matching a store.
    pub fn from_slots(grads: Vec<Vec<f64>>) -> Self {
        GradBuffer { grads }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn slots(&self) -> &[Vec<f64>] {
        &self.grads
    }

    /// `self += scale * other`, slot by slot.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len(), "gradient layout");
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

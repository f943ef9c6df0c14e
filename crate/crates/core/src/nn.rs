//! Named parameter storage, the per-pass graph context, and the two
//! parameterised layers (convolution and affine) the network is built from.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ksco::KscoSnapshot;
use crate::tensor::{ConvSpec, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Names follow `module.path.kind`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

/// Source of per-call KSCO statistics during a pass.
///
/// `Record` captures levels and kurtosis at each KSCO call site in order;
/// `Replay` feeds them back so a finite-difference probe sees the same
/// detached constants as the analytic gradient.
#[derive(Clone, Debug, Default)]
pub enum StatsMode {
    #[default]
    Live,
    Record(Vec<KscoSnapshot>),
    Replay(Vec<KscoSnapshot>, usize),
}

/// Forward-pass context: one tape, a snapshot of the parameters bound
/// lazily as leaves, and the KSCO statistics mode.
pub struct Graph<'t, T: Real> {
    tape: &'t Tape<T>,
    params: Vec<Arc<Tensor<T>>>,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    stats: RefCell<StatsMode>,
}

impl<'t, T: Real> Graph<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &ParamStore<T>, trainable: bool) -> Self {
        Graph {
            tape,
            params: params.values.clone(),
            trainable,
            bound: RefCell::new(vec![None; params.len()]),
            stats: RefCell::new(StatsMode::Live),
        }
    }

    pub fn with_stats(self, mode: StatsMode) -> Self {
        *self.stats.borrow_mut() = mode;
        self
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.tape
                .leaf_shared(Arc::clone(&self.params[id.0]), self.trainable)
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Gradients of every parameter touched in this pass (None if unused).
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v)))
            .collect()
    }

    /// Apply the statistics mode to a freshly computed snapshot.
    pub(crate) fn resolve_stats(
        &self,
        live: impl FnOnce() -> Result<KscoSnapshot>,
    ) -> Result<KscoSnapshot> {
        let mut mode = self.stats.borrow_mut();
        match &mut *mode {
            StatsMode::Live => live(),
            StatsMode::Record(log) => {
                let s = live()?;
                log.push(s.clone());
                Ok(s)
            }
            StatsMode::Replay(log, cursor) => {
                let s = log.get(*cursor).cloned().ok_or_else(|| {
                    Error::config(
                        "statistics replay exhausted: call sites differ from the recording",
                    )
                })?;
                *cursor += 1;
                Ok(s)
            }
        }
    }

    pub fn take_stats(&self) -> StatsMode {
        std::mem::take(&mut *self.stats.borrow_mut())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform(±sqrt(6 / fan_in)), for layers followed by a rectifier.
    Relu,
    /// Uniform(±sqrt(3 / fan_in)), unit-variance for linear paths.
    Linear,
    Zeros,
}

pub(crate) fn init_tensor<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    init: Init,
) -> Tensor<T> {
    let bound = match init {
        Init::Relu => (6.0 / fan_in as f64).sqrt(),
        Init::Linear => (3.0 / fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    Tensor::from_fn(shape.to_vec(), |_| {
        if bound == 0.0 {
            T::zero()
        } else {
            T::from_f64_lossy(rng.random_range(-bound..bound))
        }
    })
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(rng, &[c_out, c_in, k, k], c_in * k * k, init),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?;
        Ok(Conv2d {
            weight,
            bias: Some(bias),
            spec,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(
            g.param(self.weight),
            self.bias.map(|b| g.param(b)),
            self.spec,
        )
    }
}

/// Affine map on row vectors: [n, in] → [n, out], weight stored [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(rng, &[d_in, d_out], d_in, init),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<'t, T: Real>(&self, g: &Graph<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(g.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(b)),
            None => Ok(y),
        }
    }
}

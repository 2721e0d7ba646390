//! Parameter storage and the small set of layers the network is built from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered parameter arrays. Order is creation order and is stable,
/// which keeps optimizer state and checkpoints deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Ctx<'a, T: Scalar> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::with_mode(store, true)
    }

    /// Parameters enter the tape as constants; nothing is differentiated.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { self.g.param(t) } else { self.g.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradients for every parameter, aligned with the store; parameters the
    /// pass never touched get zeros.
    pub fn param_grads(&self, root: Var) -> Vec<Tensor<T>> {
        let mut grads = self.g.backward(root);
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// 2-D convolution with optional bias; `[Cin, H, W] -> [Cout, H', W']`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin / groups, kernel, kernel], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[cout], bound)));
        Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

/// Per-position linear map over channels: `[Cin, ...] -> [Cout, ...]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[cout], bound)));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let y = ctx.g.matmul(w, x);
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.g.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Channel-wise layer normalization with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.g.layer_norm(x, g, b, T::lit(1e-5))
    }
}

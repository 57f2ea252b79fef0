//! Parameter storage and the conv/bn/fc layer wrappers the blocks are built
//! from.
//!
//! Parameters live in a flat [`ParamStore`] owned by the model; layers hold
//! stable [`ParamId`]s. Each forward pass binds the parameters it touches as
//! fresh tape leaves and records the (id, var) pair so the optimizer can fetch
//! gradients after backward.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{BnMode, BnState, ConvParams, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Parameter-to-leaf bindings recorded during one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    pairs: Vec<(ParamId, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        let var = tape.leaf(store.get(id).clone());
        self.pairs.push((id, var));
        var
    }

    pub fn pairs(&self) -> &[(ParamId, Var)] {
        &self.pairs
    }
}

/// He-style fan-in scaled uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dLayer {
    /// Odd kernels only; padding defaults to the "same" value (k-1)/2.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = k * k * c_in / groups;
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(vec![c_out, c_in / groups, k, k], fan_in, rng),
        );
        Conv2dLayer {
            weight,
            bias: None,
            stride,
            padding: (k - 1) / 2,
            groups,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
    ) -> Result<Var> {
        let weight = binds.bind(tape, store, self.weight);
        let bias = self.bias.map(|b| binds.bind(tape, store, b));
        let params = ConvParams {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        };
        tape.conv2d(x, &params)
    }
}

#[derive(Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnState,
}

impl BnLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self::with_eps(store, name, channels, 1e-5)
    }

    pub fn with_eps(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        BnLayer {
            gamma,
            beta,
            state: BnState::new(channels, eps, 0.1),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let gamma = binds.bind(tape, store, self.gamma);
        let beta = binds.bind(tape, store, self.beta);
        tape.batchnorm2d(x, gamma, beta, &mut self.state, mode)
    }
}

#[derive(Debug)]
pub struct FcLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl FcLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(vec![d_in, d_out], d_in, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        FcLayer { weight, bias }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
    ) -> Result<Var> {
        let weight = binds.bind(tape, store, self.weight);
        let bias = self.bias.map(|b| binds.bind(tape, store, b));
        tape.fully_connected(x, weight, bias)
    }
}

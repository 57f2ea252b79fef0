//! Attention-based hierarchical joint decision head.
//!
//! Every block output is average-pooled to a per-channel vector Z_k, gated by
//! a learned scalar weight alpha_k = sigmoid((Z_k W1) W2), concatenated, and
//! classified through a 1280-wide FC (ReLU6) followed by the class FC and a
//! softmax. The plain baseline classifies the last block's pooled vector
//! through the same two FC stages.

use crate::error::{Error, Result};
use crate::nn::{Bindings, FcLayer, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Attention hidden width: max(8, c_k / 4), rounded half away from zero.
pub fn attention_hidden(c_k: usize) -> usize {
    let quarter = (c_k as f64 / 4.0).round() as usize;
    quarter.max(8)
}

/// Gate mode for the joint decision: `Learned` runs the attention weights,
/// `Bypass` forces alpha = 1 (used to check equivalence against the plain
/// concat baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    Bypass,
}

/// Per-block attention parameters: W1 (c_k x d) and W2 (d x 1).
#[derive(Debug)]
pub struct AttentionGate {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl AttentionGate {
    pub fn init(store: &mut ParamStore, name: &str, c_k: usize, rng: &mut Rng) -> Self {
        let d = attention_hidden(c_k);
        let w1 = store.add(
            format!("{name}.w1"),
            crate::nn::he_uniform(vec![c_k, d], c_k, rng),
        );
        let w2 = store.add(
            format!("{name}.w2"),
            crate::nn::he_uniform(vec![d, 1], d, rng),
        );
        AttentionGate { w1, w2 }
    }
}

/// alpha_k = sigmoid((Z_k W1) W2): one scalar gate per sample per block.
pub fn attention_weight(tape: &mut Tape, z: Var, w1: Var, w2: Var) -> Result<Var> {
    let hidden = tape.fully_connected(z, w1, None)?;
    let logit = tape.fully_connected(hidden, w2, None)?;
    Ok(tape.sigmoid(logit))
}

/// Average-pool every block output down to (N, c_k) vectors.
pub fn compress(tape: &mut Tape, block_outputs: &[Var]) -> Result<Vec<Var>> {
    if block_outputs.is_empty() {
        return Err(Error::dim(
            "compress needs at least one block output".to_string(),
        ));
    }
    block_outputs
        .iter()
        .map(|&b| tape.global_avg_pool(b))
        .collect()
}

#[derive(Debug)]
pub struct DecisionHead {
    /// One gate per block when attention is enabled.
    pub gates: Option<Vec<AttentionGate>>,
    pub fc_hidden: FcLayer,
    pub fc_class: FcLayer,
    pub block_channels: Vec<usize>,
    pub classes: usize,
}

impl DecisionHead {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        block_channels: &[usize],
        fc_width: usize,
        classes: usize,
        attention: bool,
        rng: &mut Rng,
    ) -> Self {
        let gates = attention.then(|| {
            block_channels
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    AttentionGate::init(store, &format!("{name}.attn.block{}", k + 1), c, rng)
                })
                .collect()
        });
        let in_width = if attention {
            block_channels.iter().sum()
        } else {
            *block_channels.last().expect("at least one block")
        };
        let fc_hidden = FcLayer::init(
            store,
            &format!("{name}.fc_hidden"),
            in_width,
            fc_width,
            true,
            rng,
        );
        let fc_class = FcLayer::init(
            store,
            &format!("{name}.fc_class"),
            fc_width,
            classes,
            true,
            rng,
        );
        DecisionHead {
            gates,
            fc_hidden,
            fc_class,
            block_channels: block_channels.to_vec(),
            classes,
        }
    }

    /// Joint decision over all block outputs. Requires attention gates.
    pub fn forward_joint(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        block_outputs: &[Var],
        mode: GateMode,
    ) -> Result<Var> {
        let gates = self
            .gates
            .as_ref()
            .ok_or_else(|| Error::config("joint decision needs attention gates".to_string()))?;
        if block_outputs.len() != gates.len() {
            return Err(Error::shape(format!(
                "{} block outputs but {} gates",
                block_outputs.len(),
                gates.len()
            )));
        }
        let zs = compress(tape, block_outputs)?;
        let gated = self.apply_gates(tape, store, binds, &zs, mode)?;
        let merged = tape.concat_channels(&gated)?;
        self.classify(tape, store, binds, merged)
    }

    /// Gate pooled vectors: used directly by tests that pre-pool.
    pub fn apply_gates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        zs: &[Var],
        mode: GateMode,
    ) -> Result<Vec<Var>> {
        let gates = self
            .gates
            .as_ref()
            .ok_or_else(|| Error::config("attention gates are disabled".to_string()))?;
        if zs.len() != gates.len() {
            return Err(Error::shape(format!(
                "{} pooled vectors but {} gates",
                zs.len(),
                gates.len()
            )));
        }
        zs.iter()
            .zip(gates)
            .map(|(&z, gate)| match mode {
                GateMode::Learned => {
                    let w1 = binds.bind(tape, store, gate.w1);
                    let w2 = binds.bind(tape, store, gate.w2);
                    let alpha = attention_weight(tape, z, w1, w2)?;
                    tape.scale_rows(z, alpha)
                }
                GateMode::Bypass => Ok(z),
            })
            .collect()
    }

    /// Plain baseline: pooled last-block features through the same FC stack.
    pub fn forward_plain(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        last_block_output: Var,
    ) -> Result<Var> {
        let z = tape.global_avg_pool(last_block_output)?;
        self.classify(tape, store, binds, z)
    }

    /// The shared classification tail: features -> wide FC with ReLU6 ->
    /// class FC -> softmax.
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        features: Var,
    ) -> Result<Var> {
        let hidden = self.fc_hidden.forward(tape, store, binds, features)?;
        let hidden = tape.relu6(hidden);
        let logits = self.fc_class.forward(tape, store, binds, hidden)?;
        tape.softmax(logits)
    }
}

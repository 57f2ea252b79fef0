//! The executable network: stem, five SI blocks, decision head.
//!
//! Built from the same [`crate::arch::ModelPlan`] the analyzer walks, so the
//! executed multiply count of a batch-1 forward pass ties to the analyzer
//! exactly.

use crate::arch::{plan, ModelPlan, ModelSpec};
use crate::blocks::{BottleneckConfig, SIUnitConfig, SiBlock, SiUnit};
use crate::decision::{DecisionHead, GateMode};
use crate::error::Result;
use crate::nn::{Bindings, BnLayer, Conv2dLayer, ParamStore};
use crate::rng::Rng;
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::Tensor;

pub struct SiNetModel {
    pub spec: ModelSpec,
    pub plan: ModelPlan,
    pub store: ParamStore,
    stem_conv: Conv2dLayer,
    stem_bn: BnLayer,
    blocks: Vec<SiBlock>,
    head: DecisionHead,
}

/// Everything a training step needs from one forward pass.
pub struct Forward {
    pub probs: Var,
    pub block_outputs: Vec<Var>,
    pub bindings: Bindings,
}

impl SiNetModel {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let plan = plan(spec)?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);

        let stem_conv = Conv2dLayer::init(
            &mut store,
            "stem",
            3,
            plan.stem.c_out,
            plan.stem.k,
            plan.stem.stride,
            1,
            &mut rng,
        );
        let stem_bn = BnLayer::init(&mut store, "stem.bn_layer", plan.stem.c_out);

        let mut blocks = Vec::with_capacity(plan.blocks.len());
        for bp in &plan.blocks {
            let mut units = Vec::with_capacity(bp.units.len());
            for up in &bp.units {
                let cfg = SIUnitConfig {
                    groups: up.groups,
                    exchange: up.exchange,
                    bottleneck: BottleneckConfig {
                        in_channels: up.c_in / up.groups,
                        out_channels: up.c_out / up.groups,
                        kernel: up.k,
                        stride: up.stride,
                        expansion: up.t,
                    },
                    funnel_out_channels: up.funnel.then_some(up.c_out),
                };
                units.push(SiUnit::init(&mut store, &up.name, cfg, &mut rng)?);
            }
            blocks.push(SiBlock { units });
        }

        let head = DecisionHead::init(
            &mut store,
            "head",
            &plan.head.block_channels,
            plan.head.fc_width,
            plan.head.classes,
            plan.head.attention,
            &mut rng,
        );

        Ok(SiNetModel {
            spec: spec.clone(),
            plan,
            store,
            stem_conv,
            stem_bn,
            blocks,
            head,
        })
    }

    pub fn head(&self) -> &DecisionHead {
        &self.head
    }

    /// Forward a batch of images. `gates` only matters for attention specs.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
        mode: BnMode,
        gates: GateMode,
    ) -> Result<Forward> {
        let mut binds = Bindings::new();
        let x = tape.constant(input.clone());
        let x = self.stem_conv.forward(tape, &self.store, &mut binds, x)?;
        let x = self
            .stem_bn
            .forward(tape, &self.store, &mut binds, x, mode)?;
        let mut x = tape.relu6(x);

        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            x = block.forward(tape, &self.store, &mut binds, x, mode)?;
            block_outputs.push(x);
        }

        let probs = if self.spec.attention {
            self.head
                .forward_joint(tape, &self.store, &mut binds, &block_outputs, gates)?
        } else {
            self.head.forward_plain(
                tape,
                &self.store,
                &mut binds,
                *block_outputs.last().expect("blocks"),
            )?
        };
        Ok(Forward {
            probs,
            block_outputs,
            bindings: binds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::analyze;
    use crate::arch::build_sinet;

    fn small_input(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(
            vec![n, 3, hw, hw],
            (0..n * 3 * hw * hw)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        let spec = build_sinet(0.25, 7, 64).unwrap();
        let mut model = SiNetModel::build(&spec, 1).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &small_input(2, 64, 3),
                BnMode::Train,
                GateMode::Learned,
            )
            .unwrap();
        assert_eq!(tape.value(out.probs).shape(), &[2, 7]);
        for row in tape.value(out.probs).data().chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Block outputs follow the plan.
        for (bp, &v) in model.plan.blocks.iter().zip(&out.block_outputs) {
            assert_eq!(
                tape.value(v).shape(),
                &[2, bp.out_channels, bp.out_hw, bp.out_hw]
            );
        }
    }

    #[test]
    fn analyzer_params_equal_stored_elements() {
        for spec in [
            build_sinet(0.25, 7, 64).unwrap(),
            build_sinet(1.0, 17, 64).unwrap(),
        ] {
            let model = SiNetModel::build(&spec, 2).unwrap();
            let report = analyze(&spec).unwrap();
            assert_eq!(report.total_params, model.store.total_elements() as u64);
        }
    }

    #[test]
    fn analyzer_madds_equal_executed_multiplies_batch1() {
        let spec = build_sinet(0.25, 5, 64).unwrap();
        let mut model = SiNetModel::build(&spec, 3).unwrap();
        let mut tape = Tape::new();
        model
            .forward(
                &mut tape,
                &small_input(1, 64, 4),
                BnMode::Eval,
                GateMode::Learned,
            )
            .unwrap();
        let report = analyze(&spec).unwrap();
        assert_eq!(report.total_madds, tape.mul_count());
    }

    #[test]
    fn gradient_reaches_every_block_output() {
        let spec = build_sinet(0.25, 4, 64).unwrap();
        let mut model = SiNetModel::build(&spec, 5).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &small_input(2, 64, 6),
                BnMode::Train,
                GateMode::Learned,
            )
            .unwrap();
        let loss = tape.nll_loss(out.probs, &[0, 2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &v in &out.block_outputs {
            let g = grads.get(v).expect("block output gradient");
            let norm: f64 = g.data().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "zero gradient at a block output");
        }
    }
}

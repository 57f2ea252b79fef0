//! SINet building blocks.
//!
//! The composite function `H` is an inverted bottleneck: 1x1 expand with
//! BN+ReLU6, depthwise kxk with BN+ReLU6, and a linear 1x1 projection with BN.
//! The exchange shortcut splits channels into `g` groups, runs one `H` branch
//! per group, and adds each branch output to the *next* group's raw input
//! (cyclically), so information crosses groups at zero multiply-add cost.
//! The dense funnel concatenates the unit input with the exchange output and
//! squeezes back down through an ungrouped 1x1 conv.

use crate::error::{Error, Result};
use crate::nn::{Bindings, BnLayer, Conv2dLayer, ParamStore};
use crate::rng::Rng;
use crate::tape::{BnMode, Tape, Var};

/// One inverted-bottleneck branch transforming `in_channels` to
/// `out_channels` with stride `stride` and hidden width
/// `expansion * in_channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub expansion: usize,
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::config(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.expansion * self.in_channels < 1 {
            return Err(Error::config("hidden width must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.expansion * self.in_channels
    }
}

/// Declarative description of one SI Unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SIUnitConfig {
    pub groups: usize,
    pub exchange: bool,
    /// Per-branch bottleneck; `in_channels`/`out_channels` are per-branch
    /// widths (unit width divided by `groups`).
    pub bottleneck: BottleneckConfig,
    pub funnel_out_channels: Option<usize>,
}

impl SIUnitConfig {
    pub fn validate(&self) -> Result<()> {
        self.bottleneck.validate()?;
        if self.groups == 0 {
            return Err(Error::config("groups must be >= 1".to_string()));
        }
        if self.exchange && self.groups == 1 {
            return Err(Error::config("exchange requires g >= 2".to_string()));
        }
        if self.exchange && self.bottleneck.in_channels != self.bottleneck.out_channels {
            return Err(Error::config(
                "exchange adds branch outputs to the other group's input, so branch widths must match".to_string(),
            ));
        }
        if self.exchange && self.bottleneck.stride != 1 {
            return Err(Error::config(
                "exchange is only defined shape-preserving; stride-2 units must disable it"
                    .to_string(),
            ));
        }
        Ok(())
    }

    pub fn unit_in_channels(&self) -> usize {
        self.bottleneck.in_channels * self.groups
    }

    pub fn unit_out_channels(&self) -> usize {
        self.funnel_out_channels
            .unwrap_or(self.bottleneck.out_channels * self.groups)
    }
}

/// Composite convolution function H.
#[derive(Debug)]
pub struct CompositeH {
    pub cfg: BottleneckConfig,
    expand: Conv2dLayer,
    expand_bn: BnLayer,
    dwise: Conv2dLayer,
    dwise_bn: BnLayer,
    project: Conv2dLayer,
    project_bn: BnLayer,
}

impl CompositeH {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cfg: BottleneckConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden();
        let expand = Conv2dLayer::init(
            store,
            &format!("{name}.expand"),
            cfg.in_channels,
            hidden,
            1,
            1,
            1,
            rng,
        );
        let expand_bn = BnLayer::init(store, &format!("{name}.expand_bn"), hidden);
        let dwise = Conv2dLayer::init(
            store,
            &format!("{name}.dwise"),
            hidden,
            hidden,
            cfg.kernel,
            cfg.stride,
            hidden,
            rng,
        );
        let dwise_bn = BnLayer::init(store, &format!("{name}.dwise_bn"), hidden);
        let project = Conv2dLayer::init(
            store,
            &format!("{name}.project"),
            hidden,
            cfg.out_channels,
            1,
            1,
            1,
            rng,
        );
        let project_bn = BnLayer::init(store, &format!("{name}.project_bn"), cfg.out_channels);
        Ok(CompositeH {
            cfg,
            expand,
            expand_bn,
            dwise,
            dwise_bn,
            project,
            project_bn,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "composite H expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let h = self.expand.forward(tape, store, binds, x)?;
        let h = self.expand_bn.forward(tape, store, binds, h, mode)?;
        let h = tape.relu6(h);
        let h = self.dwise.forward(tape, store, binds, h)?;
        let h = self.dwise_bn.forward(tape, store, binds, h, mode)?;
        let h = tape.relu6(h);
        let h = self.project.forward(tape, store, binds, h)?;
        // Linear projection: BN but no activation.
        self.project_bn.forward(tape, store, binds, h, mode)
    }
}

/// Split into `groups`, apply one branch per group, and add each branch
/// output to the raw input of the next group (cyclically). For g = 2 this is
/// exactly the two-way exchange: out1 = H(x1) + x2, out2 = H(x2) + x1.
pub fn exchange_shortcut<F>(tape: &mut Tape, x: Var, groups: usize, mut branch: F) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let parts = tape.split_channels(x, groups)?;
    let mut outs = Vec::with_capacity(groups);
    for (i, &part) in parts.iter().enumerate() {
        let h = branch(tape, i, part)?;
        let partner = parts[(i + 1) % groups];
        let out = tape.add(h, partner).map_err(|_| {
            Error::shape(
                "exchange add needs branch output and partner input to match; stride-2 branches are unsupported"
                    .to_string(),
            )
        })?;
        outs.push(out);
    }
    tape.concat_channels(&outs)
}

/// Dense funnel: concat the running feature summary with the current output,
/// then squeeze through an ungrouped 1x1 conv (BN + ReLU6).
#[derive(Debug)]
pub struct DenseFunnel {
    pub in_channels: usize,
    pub out_channels: usize,
    squeeze: Conv2dLayer,
    bn: BnLayer,
}

impl DenseFunnel {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let squeeze = Conv2dLayer::init(
            store,
            &format!("{name}.squeeze"),
            in_channels,
            out_channels,
            1,
            1,
            1,
            rng,
        );
        let bn = BnLayer::init(store, &format!("{name}.squeeze_bn"), out_channels);
        DenseFunnel {
            in_channels,
            out_channels,
            squeeze,
            bn,
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        prev_features: Var,
        current: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let ps = tape.value(prev_features).dims4()?;
        let cs = tape.value(current).dims4()?;
        if (ps.0, ps.2, ps.3) != (cs.0, cs.2, cs.3) {
            return Err(Error::shape(format!(
                "funnel inputs must share batch and spatial dims: {ps:?} vs {cs:?}"
            )));
        }
        let merged = tape.concat_channels(&[prev_features, current])?;
        let squeezed = self.squeeze.forward(tape, store, binds, merged)?;
        let squeezed = self.bn.forward(tape, store, binds, squeezed, mode)?;
        Ok(tape.relu6(squeezed))
    }
}

/// One SI Unit: grouped composite-H branches under the exchange shortcut,
/// then the dense funnel merging with the unit's input summary.
///
/// Transition units (the first unit of a block) change channel count and may
/// downsample; they run the same grouped branches but with exchange off and
/// no funnel, since neither is defined across a shape change.
#[derive(Debug)]
pub struct SiUnit {
    pub cfg: SIUnitConfig,
    branches: Vec<CompositeH>,
    funnel: Option<DenseFunnel>,
}

impl SiUnit {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cfg: SIUnitConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let branches = (0..cfg.groups)
            .map(|i| {
                CompositeH::init(
                    store,
                    &format!("{name}.branch{i}"),
                    cfg.bottleneck.clone(),
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let funnel = match cfg.funnel_out_channels {
            Some(out) => {
                let concat_in = cfg.unit_in_channels() + cfg.bottleneck.out_channels * cfg.groups;
                Some(DenseFunnel::init(
                    store,
                    &format!("{name}.funnel"),
                    concat_in,
                    out,
                    rng,
                ))
            }
            None => None,
        };
        Ok(SiUnit {
            cfg,
            branches,
            funnel,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.cfg.unit_in_channels() {
            return Err(Error::dim(format!(
                "unit expects {} input channels, got {c}",
                self.cfg.unit_in_channels()
            )));
        }
        let branches = &mut self.branches;
        let merged = if self.cfg.exchange {
            exchange_shortcut(tape, x, self.cfg.groups, |tape, i, part| {
                branches[i].forward(tape, store, binds, part, mode)
            })?
        } else if self.cfg.groups == 1 {
            branches[0].forward(tape, store, binds, x, mode)?
        } else {
            let parts = tape.split_channels(x, self.cfg.groups)?;
            let mut outs = Vec::with_capacity(parts.len());
            for (i, &part) in parts.iter().enumerate() {
                outs.push(branches[i].forward(tape, store, binds, part, mode)?);
            }
            tape.concat_channels(&outs)?
        };
        match self.funnel.as_mut() {
            Some(funnel) => funnel.forward(tape, store, binds, x, merged, mode),
            None => Ok(merged),
        }
    }
}

/// A stack of SI Units; the first is the downsampling transition and the
/// remaining n-1 keep the spatial size with exchange enabled (when the block
/// is configured with g >= 2).
#[derive(Debug)]
pub struct SiBlock {
    pub units: Vec<SiUnit>,
}

impl SiBlock {
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        binds: &mut Bindings,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let mut cur = x;
        for unit in &mut self.units {
            cur = unit.forward(tape, store, binds, cur, mode)?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rand4(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..n * c * h * w).map(|_| rng.uniform(0.5, 5.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    /// H = 0: zero out every branch; the exchange alone swaps the halves.
    #[test]
    fn exchange_with_zero_branches_swaps_halves() {
        let x = rand4(1, 6, 2, 2, 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = exchange_shortcut(&mut tape, xv, 2, |tape, _, part| {
            let shape = tape.value(part).shape().to_vec();
            Ok(tape.constant(Tensor::zeros(shape)))
        })
        .unwrap();
        let out = tape.value(out).data();
        let half = 3 * 4;
        assert_eq!(&out[..half], &x.data()[half..]);
        assert_eq!(&out[half..], &x.data()[..half]);
    }

    /// H = id: each output half is the sum of both input halves.
    #[test]
    fn exchange_with_identity_branches_sums_halves() {
        let x = rand4(1, 6, 2, 2, 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = exchange_shortcut(&mut tape, xv, 2, |_, _, part| Ok(part)).unwrap();
        let out = tape.value(out).data();
        let half = 3 * 4;
        for i in 0..half {
            let expect = x.data()[i] + x.data()[half + i];
            assert!((out[i] - expect).abs() < 1e-12);
            assert!((out[half + i] - expect).abs() < 1e-12);
        }
    }

    /// Swapping the input halves and the branch parameter sets swaps the
    /// output halves exactly (g = 2 symmetry).
    #[test]
    fn exchange_symmetry_under_half_and_param_swap() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let cfg = BottleneckConfig {
            in_channels: 3,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            expansion: 2,
        };
        let mut b0 = CompositeH::init(&mut store, "b0", cfg.clone(), &mut rng).unwrap();
        let mut b1 = CompositeH::init(&mut store, "b1", cfg, &mut rng).unwrap();

        let x = rand4(1, 6, 3, 3, 9);
        let mut swapped = vec![0.0; x.numel()];
        let half = 3 * 9;
        swapped[..half].copy_from_slice(&x.data()[half..]);
        swapped[half..].copy_from_slice(&x.data()[..half]);
        let x_swapped = Tensor::new(vec![1, 6, 3, 3], swapped).unwrap();

        let run = |store: &ParamStore,
                   first: &mut CompositeH,
                   second: &mut CompositeH,
                   input: &Tensor| {
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let xv = tape.leaf(input.clone());
            let branches: &mut [&mut CompositeH] = &mut [first, second];
            let out = exchange_shortcut(&mut tape, xv, 2, |tape, i, part| {
                branches[i].forward(tape, store, &mut binds, part, BnMode::Train)
            })
            .unwrap();
            tape.value(out).data().to_vec()
        };

        let base = run(&store, &mut b0, &mut b1, &x);
        let flipped = run(&store, &mut b1, &mut b0, &x_swapped);
        for i in 0..half {
            assert!((base[i] - flipped[half + i]).abs() < 1e-12);
            assert!((base[half + i] - flipped[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stride2_branch_with_exchange_is_rejected() {
        let cfg = SIUnitConfig {
            groups: 2,
            exchange: true,
            bottleneck: BottleneckConfig {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                expansion: 2,
            },
            funnel_out_channels: Some(8),
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exchange_with_g1_is_rejected() {
        let cfg = SIUnitConfig {
            groups: 1,
            exchange: true,
            bottleneck: BottleneckConfig {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                expansion: 2,
            },
            funnel_out_channels: Some(4),
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn composite_h_stride2_halves_spatial() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let cfg = BottleneckConfig {
            in_channels: 4,
            out_channels: 6,
            kernel: 3,
            stride: 2,
            expansion: 2,
        };
        let mut h = CompositeH::init(&mut store, "h", cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.leaf(rand4(1, 4, 8, 8, 2));
        let y = h
            .forward(&mut tape, &store, &mut binds, x, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 6, 4, 4]);
    }

    /// Identity configuration: t = 1, unit 1x1 weights = identity, depthwise
    /// center tap = 1, BN bypassed (eval mode, stats mean 0 / var 1, eps 0).
    #[test]
    fn composite_h_identity_configuration_is_identity() {
        let mut store = ParamStore::new();
        let c = 3;
        let eye = |store: &mut ParamStore, name: &str| {
            let mut w = Tensor::zeros(vec![c, c, 1, 1]);
            for i in 0..c {
                w.data_mut()[i * c + i] = 1.0;
            }
            store.add(name, w)
        };
        let expand_w = eye(&mut store, "expand");
        let mut center = Tensor::zeros(vec![c, 1, 3, 3]);
        for i in 0..c {
            center.data_mut()[i * 9 + 4] = 1.0;
        }
        let dwise_w = store.add("dwise", center);
        let project_w = eye(&mut store, "project");

        let mut h = CompositeH {
            cfg: BottleneckConfig {
                in_channels: c,
                out_channels: c,
                kernel: 3,
                stride: 1,
                expansion: 1,
            },
            expand: Conv2dLayer {
                weight: expand_w,
                bias: None,
                stride: 1,
                padding: 0,
                groups: 1,
            },
            expand_bn: BnLayer::with_eps(&mut store, "ebn", c, 0.0),
            dwise: Conv2dLayer {
                weight: dwise_w,
                bias: None,
                stride: 1,
                padding: 1,
                groups: c,
            },
            dwise_bn: BnLayer::with_eps(&mut store, "dbn", c, 0.0),
            project: Conv2dLayer {
                weight: project_w,
                bias: None,
                stride: 1,
                padding: 0,
                groups: 1,
            },
            project_bn: BnLayer::with_eps(&mut store, "pbn", c, 0.0),
        };

        // Non-negative inputs below 6 pass ReLU6 unchanged.
        let x = rand4(1, c, 4, 4, 5);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let xv = tape.leaf(x.clone());
        let y = h
            .forward(&mut tape, &store, &mut binds, xv, BnMode::Eval)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-12);
    }

    /// Funnel squeeze weights selecting only the current half reproduce the
    /// current tensor (BN bypassed, inputs in (0, 6)).
    #[test]
    fn funnel_projection_selects_current() {
        let mut store = ParamStore::new();
        let c = 3;
        let mut w = Tensor::zeros(vec![c, 2 * c, 1, 1]);
        for i in 0..c {
            // Output channel i reads input channel c + i (the current half).
            w.data_mut()[i * 2 * c + c + i] = 1.0;
        }
        let squeeze_w = store.add("squeeze", w);
        let mut funnel = DenseFunnel {
            in_channels: 2 * c,
            out_channels: c,
            squeeze: Conv2dLayer {
                weight: squeeze_w,
                bias: None,
                stride: 1,
                padding: 0,
                groups: 1,
            },
            bn: BnLayer::with_eps(&mut store, "fbn", c, 0.0),
        };

        let prev = rand4(1, c, 3, 3, 10);
        let cur = rand4(1, c, 3, 3, 11);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let pv = tape.leaf(prev);
        let cv = tape.leaf(cur.clone());
        let out = funnel
            .forward(&mut tape, &store, &mut binds, pv, cv, BnMode::Eval)
            .unwrap();
        assert!(tape.value(out).max_abs_diff(&cur) < 1e-12);
    }

    #[test]
    fn funnel_channel_count() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let mut funnel = DenseFunnel::init(&mut store, "f", 64, 32, &mut rng);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let prev = tape.leaf(rand4(2, 32, 4, 4, 1));
        let cur = tape.leaf(rand4(2, 32, 4, 4, 2));
        let out = funnel
            .forward(&mut tape, &store, &mut binds, prev, cur, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 32, 4, 4]);
    }

    #[test]
    fn funnel_spatial_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let mut funnel = DenseFunnel::init(&mut store, "f", 8, 4, &mut rng);
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let prev = tape.leaf(rand4(1, 4, 4, 4, 1));
        let cur = tape.leaf(rand4(1, 4, 2, 2, 2));
        assert!(funnel
            .forward(&mut tape, &store, &mut binds, prev, cur, BnMode::Train)
            .is_err());
    }

    #[test]
    fn si_unit_output_channels_follow_funnel() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let cfg = SIUnitConfig {
            groups: 2,
            exchange: true,
            bottleneck: BottleneckConfig {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                expansion: 3,
            },
            funnel_out_channels: Some(8),
        };
        let mut unit = SiUnit::init(&mut store, "u", cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = tape.leaf(rand4(2, 8, 5, 5, 6));
        let y = unit
            .forward(&mut tape, &store, &mut binds, x, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 5, 5]);
    }

    /// With g = 1 and exchange off, the unit is literally bottleneck + funnel;
    /// compare against that composition built directly with shared weights.
    #[test]
    fn si_unit_g1_reduces_to_bottleneck_plus_funnel() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let cfg = SIUnitConfig {
            groups: 1,
            exchange: false,
            bottleneck: BottleneckConfig {
                in_channels: 6,
                out_channels: 6,
                kernel: 3,
                stride: 1,
                expansion: 2,
            },
            funnel_out_channels: Some(6),
        };
        let mut unit = SiUnit::init(&mut store, "u", cfg.clone(), &mut rng).unwrap();

        let x = rand4(1, 6, 4, 4, 12);
        let unit_out = {
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let xv = tape.leaf(x.clone());
            let y = unit
                .forward(&mut tape, &store, &mut binds, xv, BnMode::Train)
                .unwrap();
            tape.value(y).data().to_vec()
        };

        // Plain composition through the same layer objects.
        let plain_out = {
            let mut tape = Tape::new();
            let mut binds = Bindings::new();
            let xv = tape.leaf(x.clone());
            let h = unit.branches[0]
                .forward(&mut tape, &store, &mut binds, xv, BnMode::Train)
                .unwrap();
            let y = unit
                .funnel
                .as_mut()
                .unwrap()
                .forward(&mut tape, &store, &mut binds, xv, h, BnMode::Train)
                .unwrap();
            tape.value(y).data().to_vec()
        };

        assert_eq!(unit_out.len(), plain_out.len());
        for (a, b) in unit_out.iter().zip(&plain_out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// ReLU6 caps activations between linear layers, so finite inputs always
    /// produce finite outputs.
    #[test]
    fn block_outputs_are_finite() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let transition = SiUnit::init(
            &mut store,
            "t",
            SIUnitConfig {
                groups: 2,
                exchange: false,
                bottleneck: BottleneckConfig {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                    expansion: 3,
                },
                funnel_out_channels: None,
            },
            &mut rng,
        )
        .unwrap();
        let unit = SiUnit::init(
            &mut store,
            "u",
            SIUnitConfig {
                groups: 2,
                exchange: true,
                bottleneck: BottleneckConfig {
                    in_channels: 3,
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    expansion: 3,
                },
                funnel_out_channels: Some(6),
            },
            &mut rng,
        )
        .unwrap();
        let mut block = SiBlock {
            units: vec![transition, unit],
        };
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let mut big = rand4(1, 4, 8, 8, 3);
        for v in big.data_mut() {
            *v *= 1e6;
        }
        let x = tape.leaf(big);
        let y = block
            .forward(&mut tape, &store, &mut binds, x, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 6, 4, 4]);
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }
}

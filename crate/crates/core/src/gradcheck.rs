//! Central finite-difference gradient checks.
//!
//! The probe never looks at the tape's gradients: it reruns the forward
//! closure at x +/- h and differences the loss values, so it stays an
//! independent oracle for the reverse-mode path. Default step 1e-5 in f64,
//! default tolerance 1e-4 on the relative error
//! |ad - fd| / max(|ad|, |fd|), with near-zero pairs passed outright.

use crate::blocks::{BottleneckConfig, SIUnitConfig, SiUnit};
use crate::decision::{attention_weight, DecisionHead, GateMode};
use crate::error::Result;
use crate::nn::{Bindings, ParamStore};
use crate::rng::Rng;
use crate::tape::{BnMode, BnState, ConvParams, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    let scale = ad.abs().max(fd.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (ad - fd).abs() / scale
    }
}

/// Run one check: autodiff gradients for every input tensor vs central
/// differences of the loss closure.
#[allow(clippy::needless_range_loop)]
pub fn check<F>(name: &str, inputs: &[Tensor], tol: f64, forward: F) -> CheckResult
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let loss_of = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = forward(&mut tape, &vars).expect("gradcheck forward");
        tape.value(loss).item()
    };

    // Autodiff pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = forward(&mut tape, &vars).expect("gradcheck forward");
    let grads = tape.backward(loss).expect("gradcheck backward");

    let mut max_rel = 0.0_f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let ad = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for e in 0..inputs[ti].numel() {
            let orig = probe[ti].data()[e];
            probe[ti].data_mut()[e] = orig + FD_STEP;
            let plus = loss_of(&probe);
            probe[ti].data_mut()[e] = orig - FD_STEP;
            let minus = loss_of(&probe);
            probe[ti].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(ad[e], fd));
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        pass: max_rel < tol,
    }
}

/// Random values bounded away from the ReLU6 kinks at 0 and 6.
fn kink_safe(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.uniform(lo, hi);
            if v.abs() > 1e-3 && (v - 6.0).abs() > 1e-3 {
                break v;
            }
        })
        .collect()
}

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn rand_t(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, kink_safe(rng, n, lo, hi))
}

/// Weighted-sum loss so every output element gets a distinct pull.
fn weighted_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn loss_weights(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
}

/// The full per-operator and composed-path suite.
pub fn run_all(seed: u64, tol: f64) -> Vec<CheckResult> {
    let mut results = Vec::new();
    let mut rng = Rng::new(seed ^ 0x5eed);

    // relu6: inputs spanning both kink sides, probes away from the kinks.
    {
        let x = rand_t(&mut rng, vec![2, 3, 4, 4], -3.0, 9.0);
        let w = loss_weights(&mut rng, &[2, 3, 4, 4]);
        results.push(check("relu6", &[x], tol, move |tape, vars| {
            let y = tape.relu6(vars[0]);
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![3, 5], -4.0, 4.0);
        let w = loss_weights(&mut rng, &[3, 5]);
        results.push(check("sigmoid", &[x], tol, move |tape, vars| {
            let y = tape.sigmoid(vars[0]);
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![3, 6], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[3, 6]);
        results.push(check("softmax", &[x], tol, move |tape, vars| {
            let y = tape.softmax(vars[0])?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let a = rand_t(&mut rng, vec![2, 4], -2.0, 2.0);
        let b = rand_t(&mut rng, vec![2, 4], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[2, 4]);
        results.push(check("add", &[a, b], tol, move |tape, vars| {
            let y = tape.add(vars[0], vars[1])?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let a = rand_t(&mut rng, vec![2, 4], -2.0, 2.0);
        let b = rand_t(&mut rng, vec![2, 4], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[2, 4]);
        results.push(check("mul", &[a, b], tol, move |tape, vars| {
            let y = tape.mul(vars[0], vars[1])?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![3, 4], -2.0, 2.0);
        let wt = rand_t(&mut rng, vec![4, 5], -1.0, 1.0);
        let b = rand_t(&mut rng, vec![5], -1.0, 1.0);
        let w = loss_weights(&mut rng, &[3, 5]);
        results.push(check(
            "fully_connected",
            &[x, wt, b],
            tol,
            move |tape, vars| {
                let y = tape.fully_connected(vars[0], vars[1], Some(vars[2]))?;
                weighted_loss(tape, y, &w)
            },
        ));
    }

    {
        let x = rand_t(&mut rng, vec![2, 5, 3, 3], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[2, 5]);
        results.push(check("global_avg_pool", &[x], tol, move |tape, vars| {
            let y = tape.global_avg_pool(vars[0])?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![2, 3, 2, 2], -2.0, 2.0);
        let gamma = rand_t(&mut rng, vec![3], 0.5, 1.5);
        let beta = rand_t(&mut rng, vec![3], -0.5, 0.5);
        let w = loss_weights(&mut rng, &[2, 3, 2, 2]);
        results.push(check(
            "batchnorm_train",
            &[x, gamma, beta],
            tol,
            move |tape, vars| {
                let mut state = BnState::new(3, 1e-5, 0.1);
                let y = tape.batchnorm2d(vars[0], vars[1], vars[2], &mut state, BnMode::Train)?;
                weighted_loss(tape, y, &w)
            },
        ));
    }

    // Convolutions: plain, grouped, depthwise, strided.
    let conv_cases: [(&str, usize, usize, usize, usize, usize, usize); 4] = [
        ("conv2d_g1", 3, 4, 1, 3, 1, 5),
        ("conv2d_g2", 4, 6, 2, 3, 1, 5),
        ("conv2d_depthwise", 4, 4, 4, 3, 1, 5),
        ("conv2d_stride2", 3, 4, 1, 3, 2, 6),
    ];
    for (name, c_in, c_out, g, k, stride, hw) in conv_cases {
        let x = rand_t(&mut rng, vec![2, c_in, hw, hw], -2.0, 2.0);
        let wt = rand_t(&mut rng, vec![c_out, c_in / g, k, k], -1.0, 1.0);
        let b = rand_t(&mut rng, vec![c_out], -0.5, 0.5);
        let h_out = (hw + 2 * ((k - 1) / 2) - k) / stride + 1;
        let w = loss_weights(&mut rng, &[2, c_out, h_out, h_out]);
        results.push(check(name, &[x, wt, b], tol, move |tape, vars| {
            let p = ConvParams {
                weight: vars[1],
                bias: Some(vars[2]),
                stride,
                padding: (k - 1) / 2,
                groups: g,
            };
            let y = tape.conv2d(vars[0], &p)?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![2, 6, 2, 2], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[2, 6, 2, 2]);
        results.push(check("split_concat", &[x], tol, move |tape, vars| {
            let parts = tape.split_channels(vars[0], 3)?;
            let swapped = [parts[2], parts[0], parts[1]];
            let y = tape.concat_channels(&swapped)?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![3, 4], -2.0, 2.0);
        let s = rand_t(&mut rng, vec![3, 1], 0.2, 2.0);
        let w = loss_weights(&mut rng, &[3, 4]);
        results.push(check("scale_rows", &[x, s], tol, move |tape, vars| {
            let y = tape.scale_rows(vars[0], vars[1])?;
            weighted_loss(tape, y, &w)
        }));
    }

    {
        let x = rand_t(&mut rng, vec![2, 4], -2.0, 2.0);
        results.push(check("nll_loss", &[x], tol, move |tape, vars| {
            let p = tape.softmax(vars[0])?;
            tape.nll_loss(p, &[1, 3])
        }));
    }

    // Composite bottleneck H on 1x4x6x6.
    {
        let seed = rng.next_u64();
        let w = loss_weights(&mut rng, &[1, 4, 6, 6]);
        let x = rand_t(&mut rng, vec![1, 4, 6, 6], -2.0, 2.0);
        let (params, layout) = composite_params(seed, 4, 4, 2, 3);
        let mut inputs = vec![x];
        inputs.extend(params);
        results.push(check("composite_h", &inputs, tol, move |tape, vars| {
            let y = composite_forward(tape, vars[0], &vars[1..], &layout)?;
            weighted_loss(tape, y, &w)
        }));
    }

    // Dense funnel: concat + 1x1 squeeze path.
    {
        let prev = rand_t(&mut rng, vec![1, 4, 4, 4], -2.0, 2.0);
        let cur = rand_t(&mut rng, vec![1, 4, 4, 4], -2.0, 2.0);
        let sq = rand_t(&mut rng, vec![4, 8, 1, 1], -0.6, 0.6);
        let gamma = rand_t(&mut rng, vec![4], 0.5, 1.5);
        let beta = rand_t(&mut rng, vec![4], -0.5, 0.5);
        let w = loss_weights(&mut rng, &[1, 4, 4, 4]);
        results.push(check(
            "dense_funnel",
            &[prev, cur, sq, gamma, beta],
            tol,
            move |tape, vars| {
                let merged = tape.concat_channels(&[vars[0], vars[1]])?;
                let p = ConvParams {
                    weight: vars[2],
                    bias: None,
                    stride: 1,
                    padding: 0,
                    groups: 1,
                };
                let y = tape.conv2d(merged, &p)?;
                let mut state = BnState::new(4, 1e-5, 0.1);
                let y = tape.batchnorm2d(y, vars[3], vars[4], &mut state, BnMode::Train)?;
                let y = tape.relu6(y);
                weighted_loss(tape, y, &w)
            },
        ));
    }

    // Full SI unit (exchange + funnel) through the real layer structs: the
    // probe perturbs the input; parameters stay fixed.
    {
        let unit_seed = rng.next_u64();
        let x = rand_t(&mut rng, vec![1, 4, 6, 6], -2.0, 2.0);
        let w = loss_weights(&mut rng, &[1, 4, 6, 6]);
        results.push(check("si_unit", &[x], tol, move |tape, vars| {
            let mut store = ParamStore::new();
            let mut unit_rng = Rng::new(unit_seed);
            let cfg = SIUnitConfig {
                groups: 2,
                exchange: true,
                bottleneck: BottleneckConfig {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    expansion: 2,
                },
                funnel_out_channels: Some(4),
            };
            let mut unit = SiUnit::init(&mut store, "u", cfg, &mut unit_rng)?;
            let mut binds = Bindings::new();
            let y = unit.forward(tape, &store, &mut binds, vars[0], BnMode::Train)?;
            weighted_loss(tape, y, &w)
        }));
    }

    // Attention gate: alpha = sigmoid((Z W1) W2).
    {
        let z = rand_t(&mut rng, vec![2, 6], -2.0, 2.0);
        let w1 = rand_t(&mut rng, vec![6, 4], -1.0, 1.0);
        let w2 = rand_t(&mut rng, vec![4, 1], -1.0, 1.0);
        let w = loss_weights(&mut rng, &[2, 1]);
        results.push(check(
            "attention_weight",
            &[z, w1, w2],
            tol,
            move |tape, vars| {
                let alpha = attention_weight(tape, vars[0], vars[1], vars[2])?;
                weighted_loss(tape, alpha, &w)
            },
        ));
    }

    // Joint decision over two pooled blocks. Loss through nll keeps the
    // softmax gradient non-degenerate.
    {
        let head_seed = rng.next_u64();
        let b1 = rand_t(&mut rng, vec![2, 3, 3, 3], -2.0, 2.0);
        let b2 = rand_t(&mut rng, vec![2, 5, 2, 2], -2.0, 2.0);
        results.push(check(
            "joint_decision",
            &[b1, b2],
            tol,
            move |tape, vars| {
                let mut store = ParamStore::new();
                let mut head_rng = Rng::new(head_seed);
                let head = DecisionHead::init(&mut store, "h", &[3, 5], 12, 4, true, &mut head_rng);
                let mut binds = Bindings::new();
                let probs = head.forward_joint(
                    tape,
                    &store,
                    &mut binds,
                    &[vars[0], vars[1]],
                    GateMode::Learned,
                )?;
                tape.nll_loss(probs, &[1, 3])
            },
        ));
    }

    {
        let head_seed = rng.next_u64();
        let last = rand_t(&mut rng, vec![2, 5, 3, 3], -2.0, 2.0);
        results.push(check("plain_decision", &[last], tol, move |tape, vars| {
            let mut store = ParamStore::new();
            let mut head_rng = Rng::new(head_seed);
            let head = DecisionHead::init(&mut store, "h", &[3, 5], 12, 4, false, &mut head_rng);
            let mut binds = Bindings::new();
            let probs = head.forward_plain(tape, &store, &mut binds, vars[0])?;
            tape.nll_loss(probs, &[0, 2])
        }));
    }

    results
}

/// Layout for the manually-wired composite H check: (c_in, c_out, t, k).
type CompositeLayout = (usize, usize, usize, usize);

fn composite_params(
    seed: u64,
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
) -> (Vec<Tensor>, CompositeLayout) {
    let mut rng = Rng::new(seed);
    let hidden = t * c_in;
    let params = vec![
        rand_t(&mut rng, vec![hidden, c_in, 1, 1], -0.7, 0.7),
        rand_t(&mut rng, vec![hidden], 0.5, 1.5),
        rand_t(&mut rng, vec![hidden], -0.5, 0.5),
        rand_t(&mut rng, vec![hidden, 1, k, k], -0.7, 0.7),
        rand_t(&mut rng, vec![hidden], 0.5, 1.5),
        rand_t(&mut rng, vec![hidden], -0.5, 0.5),
        rand_t(&mut rng, vec![c_out, hidden, 1, 1], -0.7, 0.7),
        rand_t(&mut rng, vec![c_out], 0.5, 1.5),
        rand_t(&mut rng, vec![c_out], -0.5, 0.5),
    ];
    (params, (c_in, c_out, t, k))
}

fn composite_forward(tape: &mut Tape, x: Var, p: &[Var], layout: &CompositeLayout) -> Result<Var> {
    let (c_in, _c_out, t, k) = *layout;
    let hidden = t * c_in;
    let conv1 = ConvParams {
        weight: p[0],
        bias: None,
        stride: 1,
        padding: 0,
        groups: 1,
    };
    let y = tape.conv2d(x, &conv1)?;
    let mut bn1 = BnState::new(hidden, 1e-5, 0.1);
    let y = tape.batchnorm2d(y, p[1], p[2], &mut bn1, BnMode::Train)?;
    let y = tape.relu6(y);
    let conv2 = ConvParams {
        weight: p[3],
        bias: None,
        stride: 1,
        padding: (k - 1) / 2,
        groups: hidden,
    };
    let y = tape.conv2d(y, &conv2)?;
    let mut bn2 = BnState::new(hidden, 1e-5, 0.1);
    let y = tape.batchnorm2d(y, p[4], p[5], &mut bn2, BnMode::Train)?;
    let y = tape.relu6(y);
    let conv3 = ConvParams {
        weight: p[6],
        bias: None,
        stride: 1,
        padding: 0,
        groups: 1,
    };
    let y = tape.conv2d(y, &conv3)?;
    let mut bn3 = BnState::new(layout.1, 1e-5, 0.1);
    tape.batchnorm2d(y, p[7], p[8], &mut bn3, BnMode::Train)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let results = run_all(42, DEFAULT_TOL);
        assert!(results.len() >= 18);
        for r in &results {
            assert!(r.pass, "{} failed: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn unattainable_tolerance_fails() {
        let results = run_all(42, 1e-12);
        assert!(results.iter().any(|r| !r.pass));
    }

    #[test]
    fn results_are_reproducible_per_seed() {
        let a = run_all(7, DEFAULT_TOL);
        let b = run_all(7, DEFAULT_TOL);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.max_rel_err.to_bits(), y.max_rel_err.to_bits());
        }
    }
}

//! Static parameter and multiply-add accounting over a model spec.
//!
//! Counting conventions (recorded in every report):
//! - cost unit is fused multiply-adds, batch 1;
//! - a grouped k x k conv from c to m channels over an h x w output costs
//!   h * w * k * k * (c/g) * m madds and k * k * (c/g) * m (+ m with bias)
//!   params;
//! - batch norm counts 2 params per channel and zero madds;
//! - biases, pooling, activations, splits, concats, and the exchange adds
//!   count zero madds.
//!
//! The analyzer walks the same unit plan the executable model is built from,
//! so its madds total equals the tensor kernels' executed multiply count for
//! a batch-1 forward pass exactly.

use serde::{Deserialize, Serialize};

use crate::arch::{plan, ModelPlan, ModelSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub madds: u64,
}

/// conv cost for input (c, h, w), kernel k, output channels m, g groups.
#[allow(clippy::too_many_arguments)]
pub fn conv_cost(
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    m: usize,
    g: usize,
    stride: usize,
    pad: usize,
    bias: bool,
) -> Result<Cost> {
    if g == 0 || !c.is_multiple_of(g) || !m.is_multiple_of(g) {
        return Err(Error::group(format!(
            "c = {c}, m = {m} not divisible by g = {g}"
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::dim(format!(
            "kernel {k} too large for {h}x{w} input with pad {pad}"
        )));
    }
    let h_out = ((h + 2 * pad - k) / stride + 1) as u64;
    let w_out = ((w + 2 * pad - k) / stride + 1) as u64;
    let kk = (k * k) as u64;
    let c_g = (c / g) as u64;
    let m = m as u64;
    let params = kk * c_g * m + if bias { m } else { 0 };
    let madds = h_out * w_out * kk * c_g * m;
    Ok(Cost { params, madds })
}

pub fn fc_cost(d_in: usize, d_out: usize, bias: bool) -> Cost {
    Cost {
        params: (d_in * d_out + if bias { d_out } else { 0 }) as u64,
        madds: (d_in * d_out) as u64,
    }
}

/// Batch norm: gamma and beta per channel; madds counted as zero.
pub fn bn_cost(c: usize) -> Cost {
    Cost {
        params: 2 * c as u64,
        madds: 0,
    }
}

/// Zero-cost ops (exchange adds, splits, concats, pooling, activations).
pub fn zero_cost() -> Cost {
    Cost {
        params: 0,
        madds: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub name: String,
    pub params: u64,
    pub madds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Convention {
    pub cost_unit: String,
    pub batch: usize,
    pub bn_params_counted: bool,
    pub bn_madds_counted: bool,
    pub bias_madds_counted: bool,
    pub pool_and_elementwise_madds_counted: bool,
}

impl Default for Convention {
    fn default() -> Self {
        Convention {
            cost_unit: "multiply_adds".to_string(),
            batch: 1,
            bn_params_counted: true,
            bn_madds_counted: false,
            bias_madds_counted: false,
            pool_and_elementwise_madds_counted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: Convention,
    pub layers: Vec<LayerCost>,
    pub blocks: Vec<BlockCost>,
    pub total_params: u64,
    pub total_madds: u64,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .chain(["layer".len()])
            .max()
            .unwrap_or(5);
        out.push_str(&format!(
            "{:<name_w$}  {:<9} {:>12} {:>14}\n",
            "layer", "kind", "params", "madds"
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<name_w$}  {:<9} {:>12} {:>14}\n",
                l.name, l.kind, l.params, l.madds
            ));
        }
        out.push('\n');
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<name_w$}  {:<9} {:>12} {:>14}\n",
                b.name, "subtotal", b.params, b.madds
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:<9} {:>12} {:>14}\n",
            "total", "", self.total_params, self.total_madds
        ));
        out
    }

    fn layer(&mut self, name: impl Into<String>, kind: &str, cost: Cost) {
        self.layers.push(LayerCost {
            name: name.into(),
            kind: kind.to_string(),
            params: cost.params,
            madds: cost.madds,
        });
    }
}

/// Walk the plan layer by layer.
pub fn analyze(spec: &ModelSpec) -> Result<CostReport> {
    let plan = plan(spec)?;
    analyze_plan(&plan)
}

pub fn analyze_plan(plan: &ModelPlan) -> Result<CostReport> {
    let mut report = CostReport {
        convention: Convention::default(),
        layers: Vec::new(),
        blocks: Vec::new(),
        total_params: 0,
        total_madds: 0,
    };

    let stem = &plan.stem;
    report.layer(
        "stem.conv",
        "conv",
        conv_cost(
            3,
            stem.h_in,
            stem.h_in,
            stem.k,
            stem.c_out,
            1,
            stem.stride,
            (stem.k - 1) / 2,
            false,
        )?,
    );
    report.layer("stem.bn", "bn", bn_cost(stem.c_out));

    for block in &plan.blocks {
        for unit in &block.units {
            let hidden = unit.hidden();
            report.layer(
                format!("{}.expand", unit.name),
                "conv",
                conv_cost(
                    unit.c_in,
                    unit.h_in,
                    unit.h_in,
                    1,
                    hidden,
                    unit.groups,
                    1,
                    0,
                    false,
                )?,
            );
            report.layer(format!("{}.expand_bn", unit.name), "bn", bn_cost(hidden));
            report.layer(
                format!("{}.dwise", unit.name),
                "conv",
                conv_cost(
                    hidden,
                    unit.h_in,
                    unit.h_in,
                    unit.k,
                    hidden,
                    hidden,
                    unit.stride,
                    (unit.k - 1) / 2,
                    false,
                )?,
            );
            report.layer(format!("{}.dwise_bn", unit.name), "bn", bn_cost(hidden));
            report.layer(
                format!("{}.project", unit.name),
                "conv",
                conv_cost(
                    hidden,
                    unit.h_out,
                    unit.h_out,
                    1,
                    unit.c_out,
                    unit.groups,
                    1,
                    0,
                    false,
                )?,
            );
            report.layer(
                format!("{}.project_bn", unit.name),
                "bn",
                bn_cost(unit.c_out),
            );
            if unit.funnel {
                report.layer(
                    format!("{}.funnel", unit.name),
                    "conv",
                    conv_cost(
                        unit.c_in + unit.c_out,
                        unit.h_out,
                        unit.h_out,
                        1,
                        unit.c_out,
                        1,
                        1,
                        0,
                        false,
                    )?,
                );
                report.layer(
                    format!("{}.funnel_bn", unit.name),
                    "bn",
                    bn_cost(unit.c_out),
                );
            }
        }
    }

    let head = &plan.head;
    for (k, &(c_k, d)) in head.gate_dims.iter().enumerate() {
        report.layer(
            format!("head.attn.block{}.w1", k + 1),
            "fc",
            fc_cost(c_k, d, false),
        );
        report.layer(
            format!("head.attn.block{}.w2", k + 1),
            "fc",
            fc_cost(d, 1, false),
        );
    }
    report.layer(
        "head.fc_hidden",
        "fc",
        fc_cost(head.in_width, head.fc_width, true),
    );
    report.layer(
        "head.fc_class",
        "fc",
        fc_cost(head.fc_width, head.classes, true),
    );

    // Subtotals by stage prefix, in walk order.
    let mut names: Vec<String> = vec!["stem".to_string()];
    names.extend(plan.blocks.iter().map(|b| b.name.clone()));
    names.push("head".to_string());
    for stage in names {
        let (mut p, mut m) = (0u64, 0u64);
        for l in report
            .layers
            .iter()
            .filter(|l| l.name.starts_with(&format!("{stage}.")))
        {
            p += l.params;
            m += l.madds;
        }
        report.blocks.push(BlockCost {
            name: stage,
            params: p,
            madds: m,
        });
    }
    report.total_params = report.layers.iter().map(|l| l.params).sum();
    report.total_madds = report.layers.iter().map(|l| l.madds).sum();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub name: String,
    pub params: i64,
    pub madds: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDelta {
    pub params: i64,
    pub madds: i64,
    /// Per-layer deltas, only layers that differ. Layers present on one side
    /// only contribute their full cost.
    pub layers: Vec<LayerDelta>,
}

impl CostDelta {
    pub fn is_zero(&self) -> bool {
        self.params == 0 && self.madds == 0 && self.layers.is_empty()
    }
}

/// Structured b - a delta.
pub fn diff(a: &CostReport, b: &CostReport) -> CostDelta {
    let mut layers = Vec::new();
    let index_b: std::collections::HashMap<&str, &LayerCost> =
        b.layers.iter().map(|l| (l.name.as_str(), l)).collect();
    let index_a: std::collections::HashMap<&str, &LayerCost> =
        a.layers.iter().map(|l| (l.name.as_str(), l)).collect();

    for la in &a.layers {
        match index_b.get(la.name.as_str()) {
            Some(lb) => {
                let dp = lb.params as i64 - la.params as i64;
                let dm = lb.madds as i64 - la.madds as i64;
                if dp != 0 || dm != 0 {
                    layers.push(LayerDelta {
                        name: la.name.clone(),
                        params: dp,
                        madds: dm,
                    });
                }
            }
            None => layers.push(LayerDelta {
                name: la.name.clone(),
                params: -(la.params as i64),
                madds: -(la.madds as i64),
            }),
        }
    }
    for lb in &b.layers {
        if !index_a.contains_key(lb.name.as_str()) {
            layers.push(LayerDelta {
                name: lb.name.clone(),
                params: lb.params as i64,
                madds: lb.madds as i64,
            });
        }
    }
    CostDelta {
        params: b.total_params as i64 - a.total_params as i64,
        madds: b.total_madds as i64 - a.total_madds as i64,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ablation_variants, build_sinet, build_variant, VariantToggles};

    #[test]
    fn conv_cost_examples() {
        // 3 channels, 4x4, k 3, 8 filters, stride 1, pad 1.
        let c = conv_cost(3, 4, 4, 3, 8, 1, 1, 1, false).unwrap();
        assert_eq!(c.madds, 3456);
        assert_eq!(c.params, 3 * 3 * 3 * 8);

        // 3 channels cannot split into 2 groups.
        assert!(conv_cost(3, 4, 4, 3, 8, 2, 1, 1, false).is_err());

        // 4 channels with g = 2 is exactly half the g = 1 cost.
        let g1 = conv_cost(4, 4, 4, 3, 8, 1, 1, 1, false).unwrap();
        let g2 = conv_cost(4, 4, 4, 3, 8, 2, 1, 1, false).unwrap();
        assert_eq!(g1.madds, 4608);
        assert_eq!(g2.madds, 2304);
        assert_eq!(g2.madds * 2, g1.madds);

        // 1x1 conv, 432 -> 1280 at 1x1 spatial.
        let head = conv_cost(432, 1, 1, 1, 1280, 1, 1, 0, false).unwrap();
        assert_eq!(head.params, 552_960);
        assert_eq!(head.madds, 552_960);
    }

    #[test]
    fn fc_and_bn_costs() {
        assert_eq!(fc_cost(1280, 1000, false).madds, 1_280_000);
        assert_eq!(bn_cost(24).params, 48);
        assert_eq!(bn_cost(24).madds, 0);
        assert_eq!(zero_cost().madds, 0);
    }

    #[test]
    fn exchange_toggle_never_changes_the_report() {
        let base = build_sinet(1.0, 1000, 224).unwrap();
        let b = build_variant(
            &base,
            VariantToggles {
                groups: 2,
                exchange: false,
                attention: true,
            },
        )
        .unwrap();
        let c = build_variant(
            &base,
            VariantToggles {
                groups: 2,
                exchange: true,
                attention: true,
            },
        )
        .unwrap();
        let rb = analyze(&b).unwrap();
        let rc = analyze(&c).unwrap();
        assert_eq!(
            serde_json::to_string(&rb).unwrap(),
            serde_json::to_string(&rc).unwrap()
        );
        assert!(diff(&rb, &rc).is_zero());
    }

    #[test]
    fn grouped_layers_cost_exactly_half() {
        let base = build_sinet(1.0, 100, 224).unwrap();
        let [(_, a), (_, b), _] = ablation_variants(&base).unwrap();
        let ra = analyze(&a).unwrap();
        let rb = analyze(&b).unwrap();
        // Per grouped layer: the expand/project stages of every unit whose
        // plan carries g = 2 in variant B must cost exactly half of A's.
        let mut checked = 0;
        for (la, lb) in ra.layers.iter().zip(&rb.layers) {
            assert_eq!(la.name, lb.name);
            let grouped = (la.name.ends_with(".expand") || la.name.ends_with(".project"))
                && !la.name.contains("block1.unit1");
            if grouped {
                assert_eq!(la.madds, 2 * lb.madds, "{}", la.name);
                assert_eq!(la.params, 2 * lb.params, "{}", la.name);
                checked += 1;
            }
        }
        assert!(checked >= 30);
        // Depthwise stages do not change with g.
        for (la, lb) in ra.layers.iter().zip(&rb.layers) {
            if la.name.ends_with(".dwise") {
                assert_eq!(la.madds, lb.madds);
            }
        }
    }

    #[test]
    fn attention_head_delta_is_small_and_positive() {
        let on = build_sinet(1.0, 1000, 224).unwrap();
        let off = build_variant(
            &on,
            VariantToggles {
                groups: 2,
                exchange: true,
                attention: false,
            },
        )
        .unwrap();
        let r_on = analyze(&on).unwrap();
        let r_off = analyze(&off).unwrap();
        let delta = diff(&r_off, &r_on);
        assert!(delta.params > 0);
        assert!((delta.madds as f64) / (r_on.total_madds as f64) < 0.02);
        // The whole delta is attributable to head layers.
        assert!(delta.layers.iter().all(|l| l.name.starts_with("head.")));
        let head_params: i64 = delta.layers.iter().map(|l| l.params).sum();
        assert_eq!(head_params, delta.params);
    }

    #[test]
    fn width_monotonicity() {
        let small = analyze(&build_sinet(1.0, 1000, 224).unwrap()).unwrap();
        let big = analyze(&build_sinet(1.2, 1000, 224).unwrap()).unwrap();
        for (a, b) in small.layers.iter().zip(&big.layers) {
            assert!(b.params >= a.params, "{}", a.name);
            assert!(b.madds >= a.madds, "{}", a.name);
        }
    }

    #[test]
    fn conv_params_scale_roughly_quadratically_in_width() {
        let r10 = analyze(&build_sinet(1.0, 1000, 224).unwrap()).unwrap();
        let r12 = analyze(&build_sinet(1.2, 1000, 224).unwrap()).unwrap();
        // Interior-unit expand convs have both widths scaled, so params scale
        // close to w^2 (up to channel rounding).
        for name in ["block3.unit2.expand", "block5.unit3.expand"] {
            let a = r10.layers.iter().find(|l| l.name == name).unwrap();
            let b = r12.layers.iter().find(|l| l.name == name).unwrap();
            let ratio = b.params as f64 / a.params as f64;
            assert!((ratio - 1.44).abs() < 0.08, "{name}: {ratio}");
        }
    }

    #[test]
    fn table_text_contains_totals() {
        let report = analyze(&build_sinet(1.0, 10, 64).unwrap()).unwrap();
        let table = report.to_table();
        assert!(table.contains("total"));
        assert!(table.contains("stem.conv"));
    }

    #[test]
    fn block_subtotals_appear_in_walk_order_and_sum_to_totals() {
        let report = analyze(&build_sinet(1.0, 100, 224).unwrap()).unwrap();
        let names: Vec<&str> = report.blocks.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(
            names,
            ["stem", "block1", "block2", "block3", "block4", "block5", "head"]
        );
        assert_eq!(
            report.blocks.iter().map(|b| b.params).sum::<u64>(),
            report.total_params
        );
        assert_eq!(
            report.blocks.iter().map(|b| b.madds).sum::<u64>(),
            report.total_madds
        );
        assert!(report.blocks.iter().all(|b| b.madds > 0));
    }
}

//! Architecture table resolution: width multiplier, variant toggles, and the
//! concrete per-unit execution plan shared by the model builder and the cost
//! analyzer.
//!
//! The table: five bottleneck blocks of four units each, with base channels
//! 24/40/80/96/192, kernels 3/5/5/3/5, and expansion 3/3/6/6/6, preceded by a
//! fixed 21-filter 3x3 stem and followed by the decision head
//! (concat -> 1280-wide FC -> class FC).
//!
//! Spatial plan: the stem and each block carry a nominal stride of 2. A
//! stage actually downsamples only while the incoming spatial extent is even
//! and above 4, so a 224 input traces 112/56/28/14/7 and the last block runs
//! at 7x7, and the 64x64 desk preset caps blocks 4-5 at stride 1 once the
//! maps reach 4x4.

use serde::{Deserialize, Serialize};

use crate::decision::attention_hidden;
use crate::error::{Error, Result};

/// One row of the architecture table (base channels, before the width
/// multiplier).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRow {
    pub base_channels: usize,
    pub k: usize,
    pub s: usize,
    pub n: usize,
    pub t: usize,
}

/// The five-block table.
pub const TABLE: [BlockRow; 5] = [
    BlockRow {
        base_channels: 24,
        k: 3,
        s: 2,
        n: 4,
        t: 3,
    },
    BlockRow {
        base_channels: 40,
        k: 5,
        s: 2,
        n: 4,
        t: 3,
    },
    BlockRow {
        base_channels: 80,
        k: 5,
        s: 2,
        n: 4,
        t: 6,
    },
    BlockRow {
        base_channels: 96,
        k: 3,
        s: 2,
        n: 4,
        t: 6,
    },
    BlockRow {
        base_channels: 192,
        k: 5,
        s: 2,
        n: 4,
        t: 6,
    },
];

pub const STEM_CHANNELS: usize = 21;
pub const HEAD_FC_WIDTH: usize = 1280;

/// Resolved block description as serialized in the model spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub k: usize,
    pub s: usize,
    pub n: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub k: usize,
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub fc_width: usize,
}

/// Full architecture after width-multiplier resolution. Field names are part
/// of the JSON contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub width: f64,
    pub classes: usize,
    pub input: usize,
    pub groups: usize,
    pub exchange: bool,
    pub attention: bool,
    pub blocks: Vec<BlockSpec>,
    pub stem: StemSpec,
    pub head: HeadSpec,
}

/// Ablation toggles applied on top of a base spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantToggles {
    pub groups: usize,
    pub exchange: bool,
    pub attention: bool,
}

/// Round base * w to the nearest integer (ties away from zero), then up to
/// the nearest multiple of g so channel splitting stays legal; minimum 2.
pub fn resolve_channels(base: usize, w: f64) -> Result<usize> {
    resolve_channels_for_groups(base, w, 2)
}

pub fn resolve_channels_for_groups(base: usize, w: f64, g: usize) -> Result<usize> {
    if w <= 0.0 || !w.is_finite() {
        return Err(Error::config(format!(
            "width multiplier must be positive, got {w}"
        )));
    }
    let rounded = (base as f64 * w).round().max(1.0) as usize;
    let g = g.max(1);
    let mut c = rounded.div_ceil(g) * g;
    if c < 2 {
        c = 2;
    }
    Ok(c)
}

/// Build the standard network spec for a given width multiplier.
pub fn build_sinet(width: f64, classes: usize, input_hw: usize) -> Result<ModelSpec> {
    if !input_hw.is_multiple_of(32) {
        return Err(Error::config(format!(
            "input size must be divisible by 32 (five halvings), got {input_hw}"
        )));
    }
    if classes < 2 {
        return Err(Error::config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let blocks = TABLE
        .iter()
        .map(|row| {
            Ok(BlockSpec {
                channels: resolve_channels(row.base_channels, width)?,
                k: row.k,
                s: row.s,
                n: row.n,
                t: row.t,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelSpec {
        width,
        classes,
        input: input_hw,
        groups: 2,
        exchange: true,
        attention: true,
        blocks,
        stem: StemSpec {
            channels: STEM_CHANNELS,
            k: 3,
            s: 2,
        },
        head: HeadSpec {
            fc_width: HEAD_FC_WIDTH,
        },
    })
}

/// Desk-scale preset: 64x64 input, so the stem and blocks 1-3 downsample and
/// blocks 4-5 run stride-1 at 4x4.
pub fn build_desk(width: f64, classes: usize) -> Result<ModelSpec> {
    build_sinet(width, classes, 64)
}

/// Apply ablation toggles. Channel counts are kept from the base spec (they
/// are already rounded to multiples of 2), so variant cost comparisons are
/// like for like.
pub fn build_variant(base: &ModelSpec, toggles: VariantToggles) -> Result<ModelSpec> {
    if toggles.exchange && toggles.groups < 2 {
        return Err(Error::config("exchange requires g >= 2".to_string()));
    }
    if toggles.groups == 0 {
        return Err(Error::config("groups must be >= 1".to_string()));
    }
    for b in &base.blocks {
        if b.channels % toggles.groups != 0 {
            return Err(Error::group(format!(
                "block channels {} not divisible by g = {}",
                b.channels, toggles.groups
            )));
        }
    }
    let mut spec = base.clone();
    spec.groups = toggles.groups;
    spec.exchange = toggles.exchange;
    spec.attention = toggles.attention;
    Ok(spec)
}

/// The classic ablation triple: A (g=1), B (g=2, no exchange), C (g=2, with
/// exchange). Attention is inherited from the base spec.
pub fn ablation_variants(base: &ModelSpec) -> Result<[(char, ModelSpec); 3]> {
    let attention = base.attention;
    Ok([
        (
            'A',
            build_variant(
                base,
                VariantToggles {
                    groups: 1,
                    exchange: false,
                    attention,
                },
            )?,
        ),
        (
            'B',
            build_variant(
                base,
                VariantToggles {
                    groups: 2,
                    exchange: false,
                    attention,
                },
            )?,
        ),
        (
            'C',
            build_variant(
                base,
                VariantToggles {
                    groups: 2,
                    exchange: true,
                    attention,
                },
            )?,
        ),
    ])
}

// ---------------------------------------------------------------------------
// Execution plan
// ---------------------------------------------------------------------------

/// A single resolved unit: everything the model builder and the analyzer need
/// to agree on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitPlan {
    pub name: String,
    pub groups: usize,
    pub exchange: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t: usize,
    pub stride: usize,
    pub h_in: usize,
    pub h_out: usize,
    pub funnel: bool,
}

impl UnitPlan {
    pub fn hidden(&self) -> usize {
        self.t * self.c_in
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub name: String,
    pub units: Vec<UnitPlan>,
    pub out_channels: usize,
    pub out_hw: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemPlan {
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h_in: usize,
    pub h_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadPlan {
    pub attention: bool,
    pub block_channels: Vec<usize>,
    /// FC input width: sum of block channels with attention, last block only
    /// without.
    pub in_width: usize,
    pub fc_width: usize,
    pub classes: usize,
    /// (c_k, d) per block when attention is on.
    pub gate_dims: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelPlan {
    pub input_hw: usize,
    pub stem: StemPlan,
    pub blocks: Vec<BlockPlan>,
    pub head: HeadPlan,
}

/// A stage downsamples only if the incoming extent is even and above 4.
fn effective_stride(nominal: usize, h_in: usize) -> usize {
    if nominal == 2 && h_in.is_multiple_of(2) && h_in > 4 {
        2
    } else {
        1
    }
}

/// Resolve a spec into the concrete unit-by-unit plan.
pub fn plan(spec: &ModelSpec) -> Result<ModelPlan> {
    if spec.exchange && spec.groups < 2 {
        return Err(Error::config("exchange requires g >= 2".to_string()));
    }
    if spec.groups == 0 {
        return Err(Error::config("groups must be >= 1".to_string()));
    }
    let mut h = spec.input;
    let stem_stride = effective_stride(spec.stem.s, h);
    let stem = StemPlan {
        c_out: spec.stem.channels,
        k: spec.stem.k,
        stride: stem_stride,
        h_in: h,
        h_out: h / stem_stride,
    };
    h = stem.h_out;

    let mut c_in = spec.stem.channels;
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    for (bi, row) in spec.blocks.iter().enumerate() {
        if row.n < 1 {
            return Err(Error::config("blocks need at least one unit".to_string()));
        }
        if row.channels % spec.groups != 0 {
            return Err(Error::group(format!(
                "block {} channels {} not divisible by g = {}",
                bi + 1,
                row.channels,
                spec.groups
            )));
        }
        let block_name = format!("block{}", bi + 1);
        let mut units = Vec::with_capacity(row.n);

        // Transition unit: changes channel count, may downsample, exchange
        // off. Falls back to a single branch when the incoming width does not
        // split (the 21-channel stem output is odd).
        let stride = effective_stride(row.s, h);
        let t_groups = if c_in.is_multiple_of(spec.groups) {
            spec.groups
        } else {
            1
        };
        units.push(UnitPlan {
            name: format!("{block_name}.unit1"),
            groups: t_groups,
            exchange: false,
            c_in,
            c_out: row.channels,
            k: row.k,
            t: row.t,
            stride,
            h_in: h,
            h_out: h / stride,
            funnel: false,
        });
        h /= stride;

        for ui in 1..row.n {
            units.push(UnitPlan {
                name: format!("{block_name}.unit{}", ui + 1),
                groups: spec.groups,
                exchange: spec.exchange && spec.groups >= 2,
                c_in: row.channels,
                c_out: row.channels,
                k: row.k,
                t: row.t,
                stride: 1,
                h_in: h,
                h_out: h,
                funnel: true,
            });
        }

        blocks.push(BlockPlan {
            name: block_name,
            units,
            out_channels: row.channels,
            out_hw: h,
        });
        c_in = row.channels;
    }

    let block_channels: Vec<usize> = spec.blocks.iter().map(|b| b.channels).collect();
    let in_width = if spec.attention {
        block_channels.iter().sum()
    } else {
        *block_channels.last().expect("five blocks")
    };
    let gate_dims = if spec.attention {
        block_channels
            .iter()
            .map(|&c| (c, attention_hidden(c)))
            .collect()
    } else {
        Vec::new()
    };
    let head = HeadPlan {
        attention: spec.attention,
        block_channels,
        in_width,
        fc_width: spec.head.fc_width,
        classes: spec.classes,
        gate_dims,
    };

    Ok(ModelPlan {
        input_hw: spec.input,
        stem,
        blocks,
        head,
    })
}

/// Per-stage output shapes, for the `trace` surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: String,
    pub out_channels: usize,
    pub out_hw: usize,
}

pub fn trace(spec: &ModelSpec) -> Result<Vec<TraceRow>> {
    let plan = plan(spec)?;
    let mut rows = vec![TraceRow {
        layer: "stem".to_string(),
        out_channels: plan.stem.c_out,
        out_hw: plan.stem.h_out,
    }];
    for block in &plan.blocks {
        for unit in &block.units {
            rows.push(TraceRow {
                layer: unit.name.clone(),
                out_channels: unit.c_out,
                out_hw: unit.h_out,
            });
        }
    }
    rows.push(TraceRow {
        layer: "head.concat".to_string(),
        out_channels: plan.head.in_width,
        out_hw: 1,
    });
    rows.push(TraceRow {
        layer: "head.fc_hidden".to_string(),
        out_channels: plan.head.fc_width,
        out_hw: 1,
    });
    rows.push(TraceRow {
        layer: "head.fc_class".to_string(),
        out_channels: plan.head.classes,
        out_hw: 1,
    });
    Ok(rows)
}

//! Network assembly, bootstrap placement and plan execution.
//!
//! A plan is a tree of operations: layers, bootstrap points and residual
//! branches. Building and bootstrap placement are pure; execution walks the
//! tree against a slot context and records per-layer ledger deltas. The
//! planner is greedy: a bootstrap is inserted exactly when the remaining
//! level cannot pay for the next layer, and residual branches are aligned
//! with cost-free level drops at the join.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::act::{eval_poly_ct, poly_depth, ActError, PolyApprox};
use crate::conv::{
    conv_depthwise, conv_pointwise_unfused, conv_traditional, encode_depthwise,
    encode_kernels_traditional, ConvError,
};
use crate::convbn::{bn_standalone, build_fusion, convbn_fused};
use crate::engine::{
    estimate_cost, CtVec, EngineError, HeParams, OpKind, OpLedger, PtVec, SlotCtx,
};
use crate::model::{ConvKind, LayerWeights, NetConfig, NetWeights};
use crate::packing::{pack, PackError, PackLayout, Tensor3};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error(transparent)]
    Act(#[from] ActError),
    #[error("layer {name} needs {need} levels but the post-bootstrap budget is {usable}")]
    InfeasiblePlan { name: String, need: u32, usable: u32 },
    #[error("missing weights for layer {0}")]
    MissingWeights(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ConvTraditional,
    ConvDscBn,
    BnStandalone,
    ActPoly,
    Downsample,
    AvgPool,
    Fc,
}

/// One layer with its geometry, layouts and multiplicative-depth cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub c_i: usize,
    pub c_o: usize,
    pub f: usize,
    pub stride: usize,
    pub layout_in: PackLayout,
    pub layout_out: PackLayout,
    pub depth_cost: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanOp {
    Layer(LayerSpec),
    Bootstrap,
    /// Residual block: both branches start from the same ciphertext and are
    /// joined by a level-aligned addition.
    Residual { main: Vec<PlanOp>, shortcut: Vec<PlanOp> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub cfg: NetConfig,
    pub ops: Vec<PlanOp>,
    /// Monomial coefficients of the shared activation polynomial.
    pub act_coeffs: Vec<f64>,
    pub act_degree: usize,
    pub act_depth: u32,
}

/// Per-layer measured cost entry of one executed plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub ops: OpLedger,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaintextKernelStage {
    pub stage: usize,
    pub kind: ConvKind,
    /// Kernel plaintexts for the stage's convolutions under its own kind.
    pub count: u64,
    /// Count if the stage used the other convolution flavor instead.
    pub alternative_count: u64,
    pub downsample: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlaintextKernelReport {
    pub init: u64,
    pub stages: Vec<PlaintextKernelStage>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: OpLedger,
    pub total_seconds: f64,
    pub bootstrap_count: u64,
    pub plaintext_kernels: PlaintextKernelReport,
}

fn layout(cfg: &NetConfig, channels: usize, side: usize) -> Result<PackLayout, PlanError> {
    PackLayout::new(cfg.f_max, channels, side).map_err(PlanError::from)
}

/// Assemble the residual network described by the config, without
/// bootstraps. Layer naming follows the weight container convention:
/// "init.conv", "s{stage}.b{block}.conv{1,2}", "s{stage}.b0.down", "fc".
pub fn build_resnet(cfg: &NetConfig) -> Result<NetworkPlan, PlanError> {
    if cfg.widths.is_empty() || cfg.widths.len() != cfg.stage_kinds.len() {
        return Err(PlanError::InvalidGeometry(
            "widths and stage_kinds must be non-empty and of equal length".into(),
        ));
    }
    let act = PolyApprox::silu_default(cfg.activation.degree, cfg.activation.interval_b, 64)?;
    let act_depth = poly_depth(cfg.activation.degree)?;

    let mut ops = Vec::new();
    let input_layout = layout(cfg, cfg.input_channels, cfg.input_side)?;
    let stage0_layout = layout(cfg, cfg.widths[0], cfg.stage_side(0))?;

    ops.push(PlanOp::Layer(LayerSpec {
        name: "init.conv".into(),
        kind: LayerKind::ConvTraditional,
        c_i: cfg.input_channels,
        c_o: cfg.widths[0],
        f: 3,
        stride: 1,
        layout_in: input_layout,
        layout_out: stage0_layout.clone(),
        depth_cost: 2,
    }));
    ops.push(PlanOp::Layer(LayerSpec {
        name: "init.bn".into(),
        kind: LayerKind::BnStandalone,
        c_i: cfg.widths[0],
        c_o: cfg.widths[0],
        f: 1,
        stride: 1,
        layout_in: stage0_layout.clone(),
        layout_out: stage0_layout.clone(),
        depth_cost: 1,
    }));
    ops.push(act_layer("init.act", &stage0_layout, act_depth));

    for (stage, &width) in cfg.widths.iter().enumerate() {
        let kind = cfg.stage_kinds[stage];
        let stage_layout = layout(cfg, width, cfg.stage_side(stage))?;
        for block in 0..cfg.blocks_per_stage {
            let transition = block == 0 && stage > 0;
            let (c_in, stride, block_in) = if transition {
                let prev = layout(cfg, cfg.widths[stage - 1], cfg.stage_side(stage - 1))?;
                (cfg.widths[stage - 1], 2, prev)
            } else {
                (width, 1, stage_layout.clone())
            };
            let prefix = format!("s{stage}.b{block}");

            let mut main = Vec::new();
            push_conv(
                &mut main,
                kind,
                format!("{prefix}.conv1"),
                format!("{prefix}.bn1"),
                c_in,
                width,
                stride,
                &block_in,
                &stage_layout,
            );
            main.push(act_layer(&format!("{prefix}.act1"), &stage_layout, act_depth));
            push_conv(
                &mut main,
                kind,
                format!("{prefix}.conv2"),
                format!("{prefix}.bn2"),
                width,
                width,
                1,
                &stage_layout,
                &stage_layout,
            );

            let shortcut = if transition {
                vec![PlanOp::Layer(LayerSpec {
                    name: format!("{prefix}.down"),
                    kind: LayerKind::Downsample,
                    c_i: c_in,
                    c_o: width,
                    f: 1,
                    stride: 2,
                    layout_in: block_in.clone(),
                    layout_out: stage_layout.clone(),
                    depth_cost: 2,
                })]
            } else {
                Vec::new()
            };
            ops.push(PlanOp::Residual { main, shortcut });
            ops.push(act_layer(&format!("{prefix}.act2"), &stage_layout, act_depth));
        }
    }

    let last_width = *cfg.widths.last().unwrap();
    let last_layout = layout(cfg, last_width, cfg.stage_side(cfg.stages() - 1))?;
    ops.push(PlanOp::Layer(LayerSpec {
        name: "avgpool".into(),
        kind: LayerKind::AvgPool,
        c_i: last_width,
        c_o: last_width,
        f: 1,
        stride: 1,
        layout_in: last_layout.clone(),
        layout_out: last_layout.clone(),
        depth_cost: 1,
    }));
    ops.push(PlanOp::Layer(LayerSpec {
        name: "fc".into(),
        kind: LayerKind::Fc,
        c_i: last_width,
        c_o: cfg.classes,
        f: 1,
        stride: 1,
        layout_in: last_layout.clone(),
        layout_out: last_layout,
        depth_cost: 1,
    }));

    Ok(NetworkPlan {
        cfg: cfg.clone(),
        ops,
        act_coeffs: act.monomial_coeffs,
        act_degree: cfg.activation.degree,
        act_depth,
    })
}

fn act_layer(name: &str, layout: &PackLayout, depth: u32) -> PlanOp {
    PlanOp::Layer(LayerSpec {
        name: name.into(),
        kind: LayerKind::ActPoly,
        c_i: layout.channels,
        c_o: layout.channels,
        f: 1,
        stride: 1,
        layout_in: layout.clone(),
        layout_out: layout.clone(),
        depth_cost: depth,
    })
}

#[allow(clippy::too_many_arguments)]
fn push_conv(
    ops: &mut Vec<PlanOp>,
    kind: ConvKind,
    conv_name: String,
    bn_name: String,
    c_i: usize,
    c_o: usize,
    stride: usize,
    layout_in: &PackLayout,
    layout_out: &PackLayout,
) {
    match kind {
        ConvKind::Traditional => {
            ops.push(PlanOp::Layer(LayerSpec {
                name: conv_name,
                kind: LayerKind::ConvTraditional,
                c_i,
                c_o,
                f: 3,
                stride,
                layout_in: layout_in.clone(),
                layout_out: layout_out.clone(),
                depth_cost: 2,
            }));
            ops.push(PlanOp::Layer(LayerSpec {
                name: bn_name,
                kind: LayerKind::BnStandalone,
                c_i: c_o,
                c_o,
                f: 1,
                stride: 1,
                layout_in: layout_out.clone(),
                layout_out: layout_out.clone(),
                depth_cost: 1,
            }));
        }
        ConvKind::DepthwiseSeparable => {
            // depthwise (1 level) + fused pointwise/BN (1 level)
            ops.push(PlanOp::Layer(LayerSpec {
                name: conv_name,
                kind: LayerKind::ConvDscBn,
                c_i,
                c_o,
                f: 3,
                stride,
                layout_in: layout_in.clone(),
                layout_out: layout_out.clone(),
                depth_cost: 2,
            }));
        }
    }
}

/// Greedy bootstrap placement: walk forward, insert a bootstrap whenever the
/// next layer costs more than the remaining level; residual branches start
/// from the join's incoming level and meet at the minimum of their exits.
pub fn place_bootstraps(plan: &NetworkPlan, he: &HeParams) -> Result<NetworkPlan, PlanError> {
    let usable = he.usable_level();
    let mut level = usable;
    let ops = place_ops(&plan.ops, &mut level, usable)?;
    Ok(NetworkPlan { ops, ..plan.clone() })
}

fn place_ops(ops: &[PlanOp], level: &mut u32, usable: u32) -> Result<Vec<PlanOp>, PlanError> {
    let mut out = Vec::with_capacity(ops.len());
    for op in ops {
        match op {
            PlanOp::Bootstrap => {
                out.push(PlanOp::Bootstrap);
                *level = usable;
            }
            PlanOp::Layer(spec) => {
                if spec.depth_cost > usable {
                    return Err(PlanError::InfeasiblePlan {
                        name: spec.name.clone(),
                        need: spec.depth_cost,
                        usable,
                    });
                }
                if *level < spec.depth_cost {
                    out.push(PlanOp::Bootstrap);
                    *level = usable;
                }
                out.push(PlanOp::Layer(spec.clone()));
                *level -= spec.depth_cost;
            }
            PlanOp::Residual { main, shortcut } => {
                let entry = *level;
                let mut main_level = entry;
                let placed_main = place_ops(main, &mut main_level, usable)?;
                let mut short_level = entry;
                let placed_short = place_ops(shortcut, &mut short_level, usable)?;
                out.push(PlanOp::Residual { main: placed_main, shortcut: placed_short });
                *level = main_level.min(short_level);
            }
        }
    }
    Ok(out)
}

/// Number of bootstraps anywhere in the plan tree.
pub fn bootstrap_count(ops: &[PlanOp]) -> u64 {
    ops.iter()
        .map(|op| match op {
            PlanOp::Bootstrap => 1,
            PlanOp::Layer(_) => 0,
            PlanOp::Residual { main, shortcut } => {
                bootstrap_count(main) + bootstrap_count(shortcut)
            }
        })
        .sum()
}

/// 1x1 stride-2 shortcut convolution into the coarser layout; 2 levels.
pub fn downsample_shortcut(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    pw: &[Vec<f64>],
    layout_in: &PackLayout,
    layout_out: &PackLayout,
    stride: usize,
) -> Result<CtVec, PlanError> {
    Ok(conv_pointwise_unfused(ctx, ct, pw, layout_in, layout_out, stride)?)
}

/// Per-channel spatial mean: a rotate-and-add doubling tree over columns and
/// rows, then one multiply by the 1/(h*w)-scaled mask that keeps the cells
/// of block (0, 0). 2*log2(side) rotations, 1 level.
pub fn global_avgpool(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    layout: &PackLayout,
) -> Result<CtVec, PlanError> {
    let side = layout.fmap_side;
    if !side.is_power_of_two() {
        return Err(PlanError::InvalidGeometry(format!(
            "avgpool needs a power-of-two side, got {side}"
        )));
    }
    let n = layout.n_block as i64;
    let g = layout.grid_side as i64;
    let mut acc = ct.clone();
    let steps = side.trailing_zeros();
    for j in 0..steps {
        let shifted = ctx.rotate(&acc, n * (1 << j))?;
        acc = ctx.add_ct(&acc, &shifted)?;
    }
    for j in 0..steps {
        let shifted = ctx.rotate(&acc, n * g * (1 << j))?;
        acc = ctx.add_ct(&acc, &shifted)?;
    }
    let inv_area = 1.0 / (side * side) as f64;
    let mut mask = PtVec::zeros(layout.f_max);
    for ch in 0..layout.channels {
        mask.slots[layout.slot_index(ch, 0, 0)?] = inv_area;
    }
    Ok(ctx.mul_pt(&acc, &mask)?)
}

/// Masked dot-products of the pooled channel cells against the class weight
/// rows; logit for class k lands in slot k. 1 level.
pub fn fc_layer(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    w: &[Vec<f64>],
    b: &[f64],
    layout: &PackLayout,
) -> Result<CtVec, PlanError> {
    let classes = w.len();
    if classes == 0 || w.iter().any(|row| row.len() != layout.channels) {
        return Err(PlanError::InvalidGeometry(format!(
            "fc weights {}x{} vs {} channels",
            classes,
            w.first().map_or(0, Vec::len),
            layout.channels
        )));
    }
    let mut out: Option<CtVec> = None;
    let mut pt = PtVec::zeros(layout.f_max);
    for (k, row) in w.iter().enumerate() {
        for (ch, &weight) in row.iter().enumerate() {
            let shift = layout.cell_offset(ch) as i64 - k as i64;
            let shifted = ctx.rotate(ct, shift)?;
            pt.slots[k] = weight;
            let term = ctx.mul_pt(&shifted, &pt)?;
            pt.slots[k] = 0.0;
            out = Some(match out {
                Some(a) => ctx.add_ct(&a, &term)?,
                None => term,
            });
        }
    }
    let out = out.ok_or_else(|| PlanError::InvalidGeometry("empty fc".into()))?;
    let mut bias = PtVec::zeros(layout.f_max);
    bias.slots[..classes].copy_from_slice(b);
    Ok(ctx.add_pt(&out, &bias)?)
}

/// Predicted core operation counts of one layer (rotations and multiplies;
/// placement rotations separated). This mirrors the executed algorithms and
/// is checked against measured ledger deltas.
pub fn predict_layer_ledger(spec: &LayerSpec, act_degree: usize) -> OpLedger {
    let mut l = OpLedger::new();
    let f2 = spec.f * spec.f;
    match spec.kind {
        LayerKind::ConvTraditional => {
            l.add(OpKind::Rotate, ((f2 - 1 + spec.c_i) * spec.c_o) as u64);
            l.add(OpKind::MulPt, ((f2 + 1) * spec.c_o) as u64);
            l.add(OpKind::RotatePlacement, (spec.c_o - 1) as u64);
        }
        LayerKind::ConvDscBn => {
            l.add(OpKind::Rotate, (f2 - 1 + spec.c_i) as u64);
            l.add(OpKind::MulPt, (f2 + spec.c_i * spec.c_o) as u64);
            l.add(OpKind::RotatePlacement, (spec.c_o - 1) as u64);
        }
        LayerKind::BnStandalone => {
            l.add(OpKind::MulPt, 1);
        }
        LayerKind::ActPoly => {
            let (mul_ct, mul_pt) = match act_degree {
                0 => (0, 0),
                1 => (0, 1),
                2 => (1, 2),
                3 => (2, 3),
                4 => (3, 4),
                _ => (4, 5),
            };
            l.add(OpKind::MulCt, mul_ct);
            l.add(OpKind::MulPt, mul_pt);
        }
        LayerKind::Downsample => {
            l.add(OpKind::Rotate, (spec.c_i * spec.c_o) as u64);
            l.add(OpKind::MulPt, 2 * spec.c_o as u64);
            l.add(OpKind::RotatePlacement, (spec.c_o - 1) as u64);
        }
        LayerKind::AvgPool => {
            l.add(OpKind::Rotate, 2 * spec.layout_in.fmap_side.trailing_zeros() as u64);
            l.add(OpKind::MulPt, 1);
        }
        LayerKind::Fc => {
            l.add(OpKind::Rotate, (spec.c_i * spec.c_o) as u64);
            l.add(OpKind::MulPt, (spec.c_i * spec.c_o) as u64);
        }
    }
    l
}

fn walk_layers<'a>(ops: &'a [PlanOp], out: &mut Vec<&'a LayerSpec>) {
    for op in ops {
        match op {
            PlanOp::Layer(spec) => out.push(spec),
            PlanOp::Bootstrap => {}
            PlanOp::Residual { main, shortcut } => {
                walk_layers(main, out);
                walk_layers(shortcut, out);
            }
        }
    }
}

/// All layers of a plan in execution order (shortcut after main per block).
pub fn plan_layers(plan: &NetworkPlan) -> Vec<&LayerSpec> {
    let mut out = Vec::new();
    walk_layers(&plan.ops, &mut out);
    out
}

/// Plaintext kernel counts per stage. DSC convolutions need f^2 + c_o
/// plaintexts each (shared depthwise taps, one pointwise column per output
/// channel); traditional convolutions need f^2 * c_o. Downsample shortcuts
/// need c_o.
pub fn plaintext_kernel_report(cfg: &NetConfig) -> PlaintextKernelReport {
    let f2: u64 = 9;
    let init = f2 * cfg.widths[0] as u64;
    let convs = cfg.convs_per_stage() as u64;
    let stages = cfg
        .widths
        .iter()
        .enumerate()
        .map(|(stage, &width)| {
            let c_o = width as u64;
            let dsc = (f2 + c_o) * convs;
            let traditional = f2 * c_o * convs;
            let (count, alternative_count) = match cfg.stage_kinds[stage] {
                ConvKind::Traditional => (traditional, dsc),
                ConvKind::DepthwiseSeparable => (dsc, traditional),
            };
            PlaintextKernelStage {
                stage,
                kind: cfg.stage_kinds[stage],
                count,
                alternative_count,
                downsample: if stage > 0 { c_o } else { 0 },
            }
        })
        .collect();
    PlaintextKernelReport {
        init,
        stages,
        note: "traditional counts follow f^2 * c_o per convolution; at width 32 over 6 \
               convolutions this gives 1728, not the previously reported 1782, which exceeds \
               the formula by 54 and is not reproduced"
            .into(),
    }
}

/// Static cost estimate of a placed plan from the per-layer predictions.
pub fn cost_report_static(plan: &NetworkPlan, he: &HeParams) -> Result<CostReport, PlanError> {
    let mut layers = Vec::new();
    let mut total = OpLedger::new();
    for spec in plan_layers(plan) {
        let ops = predict_layer_ledger(spec, plan.act_degree);
        let seconds = estimate_cost(&ops, &he.cost_weights)?;
        total = total.merged(&ops);
        layers.push(LayerCost { name: spec.name.clone(), ops, seconds });
    }
    let boots = bootstrap_count(&plan.ops);
    let mut boot_ledger = OpLedger::new();
    boot_ledger.add(OpKind::Bootstrap, boots);
    total = total.merged(&boot_ledger);
    let total_seconds = estimate_cost(&total, &he.cost_weights)?;
    Ok(CostReport {
        layers,
        total,
        total_seconds,
        bootstrap_count: boots,
        plaintext_kernels: plaintext_kernel_report(&plan.cfg),
    })
}

struct Executor<'a> {
    ctx: &'a mut SlotCtx,
    plan: &'a NetworkPlan,
    weights: &'a NetWeights,
    layers: Vec<LayerCost>,
    logits: Option<Vec<f64>>,
}

impl Executor<'_> {
    fn run_ops(&mut self, ops: &[PlanOp], mut ct: CtVec) -> Result<CtVec, PlanError> {
        for op in ops {
            match op {
                PlanOp::Bootstrap => {
                    let before = self.ctx.ledger.clone();
                    ct = self.ctx.bootstrap(&ct)?;
                    self.push_cost("bootstrap", &before)?;
                }
                PlanOp::Residual { main, shortcut } => {
                    let saved = ct.clone();
                    let main_out = self.run_ops(main, ct)?;
                    let short_out = self.run_ops(shortcut, saved)?;
                    ct = self.ctx.add_ct_aligned(&main_out, &short_out)?;
                }
                PlanOp::Layer(spec) => {
                    let before = self.ctx.ledger.clone();
                    ct = self.run_layer(spec, ct)?;
                    self.push_cost(&spec.name, &before)?;
                }
            }
        }
        Ok(ct)
    }

    fn push_cost(&mut self, name: &str, before: &OpLedger) -> Result<(), PlanError> {
        let delta = self.ctx.ledger.since(before);
        let seconds = estimate_cost(&delta, &self.ctx.params.cost_weights)?;
        self.layers.push(LayerCost { name: name.into(), ops: delta, seconds });
        Ok(())
    }

    fn run_layer(&mut self, spec: &LayerSpec, ct: CtVec) -> Result<CtVec, PlanError> {
        let weights = self.weights;
        let lookup = move |name: &str| -> Result<&LayerWeights, PlanError> {
            weights.get(name).ok_or_else(|| PlanError::MissingWeights(name.into()))
        };
        match spec.kind {
            LayerKind::ConvTraditional => {
                let LayerWeights::Traditional(k) = lookup(&spec.name)? else {
                    return Err(PlanError::MissingWeights(spec.name.clone()));
                };
                let kernels = encode_kernels_traditional(k, &spec.layout_in)?;
                Ok(conv_traditional(
                    self.ctx,
                    &ct,
                    &kernels,
                    k.f,
                    &spec.layout_in,
                    &spec.layout_out,
                    spec.stride,
                )?)
            }
            LayerKind::ConvDscBn => {
                let LayerWeights::Dsc { depthwise, pointwise, bn } = lookup(&spec.name)?
                else {
                    return Err(PlanError::MissingWeights(spec.name.clone()));
                };
                let taps = encode_depthwise(depthwise, &spec.layout_in)?;
                let fm =
                    build_fusion(pointwise, bn, &spec.layout_in, &spec.layout_out, spec.stride)?;
                let mid = conv_depthwise(self.ctx, &ct, &taps, depthwise.f, &spec.layout_in)?;
                Ok(convbn_fused(self.ctx, &mid, &fm, &spec.layout_in, &spec.layout_out)?)
            }
            LayerKind::BnStandalone => {
                let LayerWeights::Bn(bn) = lookup(&spec.name)? else {
                    return Err(PlanError::MissingWeights(spec.name.clone()));
                };
                Ok(bn_standalone(self.ctx, &ct, bn, &spec.layout_in)?)
            }
            LayerKind::ActPoly => Ok(eval_poly_ct(self.ctx, &ct, &self.plan.act_coeffs)?),
            LayerKind::Downsample => {
                let LayerWeights::Downsample(pw) = lookup(&spec.name)? else {
                    return Err(PlanError::MissingWeights(spec.name.clone()));
                };
                downsample_shortcut(
                    self.ctx,
                    &ct,
                    pw,
                    &spec.layout_in,
                    &spec.layout_out,
                    spec.stride,
                )
            }
            LayerKind::AvgPool => global_avgpool(self.ctx, &ct, &spec.layout_in),
            LayerKind::Fc => {
                let LayerWeights::Fc(fc) = lookup(&spec.name)? else {
                    return Err(PlanError::MissingWeights(spec.name.clone()));
                };
                let out = fc_layer(self.ctx, &ct, &fc.w, &fc.b, &spec.layout_in)?;
                self.logits = Some(out.slots[..fc.w.len()].to_vec());
                Ok(out)
            }
        }
    }
}

/// Execute a placed plan on one input. Returns the logits and the measured
/// per-layer cost report.
pub fn run_plan(
    ctx: &mut SlotCtx,
    plan: &NetworkPlan,
    weights: &NetWeights,
    input: &Tensor3,
) -> Result<(Vec<f64>, CostReport), PlanError> {
    let input_layout = PackLayout::new(plan.cfg.f_max, plan.cfg.input_channels, plan.cfg.input_side)?;
    let ct = ctx.fresh_ct(pack(input, &input_layout)?)?;
    let mut exec = Executor { ctx, plan, weights, layers: Vec::new(), logits: None };
    exec.run_ops(&plan.ops, ct)?;
    let logits = exec
        .logits
        .ok_or_else(|| PlanError::InvalidGeometry("plan has no fc layer".into()))?;
    let layers = exec.layers;
    let total = layers.iter().fold(OpLedger::new(), |acc, l| acc.merged(&l.ops));
    let total_seconds = estimate_cost(&total, &ctx.params.cost_weights)?;
    let report = CostReport {
        bootstrap_count: total.count(OpKind::Bootstrap),
        total,
        total_seconds,
        layers,
        plaintext_kernels: plaintext_kernel_report(&plan.cfg),
    };
    Ok((logits, report))
}

/// Result of one batch element.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub logits: Vec<f64>,
    pub report: CostReport,
}

fn run_one(
    plan: &NetworkPlan,
    weights: &NetWeights,
    params: &HeParams,
    input: &Tensor3,
) -> Result<InferenceResult, PlanError> {
    let mut ctx = SlotCtx::new(params.clone());
    let (logits, report) = run_plan(&mut ctx, plan, weights, input)?;
    Ok(InferenceResult { logits, report })
}

/// Sequential batch execution, one fresh context per input.
pub fn run_batch_sequential(
    plan: &NetworkPlan,
    weights: &NetWeights,
    params: &HeParams,
    inputs: &[Tensor3],
) -> Result<Vec<InferenceResult>, PlanError> {
    inputs.iter().map(|t| run_one(plan, weights, params, t)).collect()
}

/// Data-parallel batch execution: independent contexts per input, joined by
/// a work-stealing thread pool. Falls back to the sequential path when the
/// `parallel` feature is disabled.
#[cfg(feature = "parallel")]
pub fn run_batch(
    plan: &NetworkPlan,
    weights: &NetWeights,
    params: &HeParams,
    inputs: &[Tensor3],
) -> Result<Vec<InferenceResult>, PlanError> {
    use rayon::prelude::*;
    inputs.par_iter().map(|t| run_one(plan, weights, params, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(
    plan: &NetworkPlan,
    weights: &NetWeights,
    params: &HeParams,
    inputs: &[Tensor3],
) -> Result<Vec<InferenceResult>, PlanError> {
    run_batch_sequential(plan, weights, params, inputs)
}

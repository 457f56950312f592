//! Ciphertext convolution over block-packed slot vectors.
//!
//! Two algorithms are provided: the traditional multi-channel convolution
//! (per output channel: tap rotations, plaintext tap multiplies, channel
//! accumulation, mask) and the depthwise-separable pipeline (shared tap
//! rotations for the depthwise stage, then per-output-channel pointwise
//! mixing). Padding is folded into the kernel plaintexts: taps that would
//! read outside the map are zeroed at encoding time, so no explicit padded
//! map exists in slot space.
//!
//! Stride 2 needs no repacking pass. With N_out = 2 N_in the base slot of
//! input position (2r, 2c) coincides with the base slot of output position
//! (r, c), so the mask stage that keeps even positions already produces the
//! output layout.

use thiserror::Error;

use crate::engine::{CtVec, EngineError, PtVec, SlotCtx};
use crate::model::{ConvKind, DepthwiseKernel, Kernel4};
use crate::packing::{make_mask, PackError, PackLayout};

#[derive(Debug, Error)]
pub enum ConvError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error("convolution shape mismatch: {0}")]
    Shape(String),
}

/// Predicted per-layer operation counts for one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CountPrediction {
    pub rotations: u64,
    pub mults: u64,
    pub depth: u32,
}

/// Core-stage rotation and multiplication counts.
/// Traditional: (f^2-1+c_i)*c_o rotations, (f^2+1)*c_o multiplications,
/// 2 levels. Depthwise-separable (unfused): f^2-1+c_i*c_o rotations,
/// f^2+2*c_o multiplications, 3 levels (1 depthwise + 2 pointwise).
/// Placement rotations are excluded; they are tracked separately.
pub fn predict_counts(kind: ConvKind, f: usize, c_i: usize, c_o: usize) -> CountPrediction {
    match kind {
        ConvKind::Traditional => CountPrediction {
            rotations: ((f * f - 1 + c_i) * c_o) as u64,
            mults: ((f * f + 1) * c_o) as u64,
            depth: 2,
        },
        ConvKind::DepthwiseSeparable => CountPrediction {
            rotations: (f * f - 1 + c_i * c_o) as u64,
            mults: (f * f + 2 * c_o) as u64,
            depth: 3,
        },
    }
}

/// Slot rotation index of kernel tap offset (dr, dc) under the block layout.
fn tap_rotation(layout: &PackLayout, dr: isize, dc: isize) -> i64 {
    let n = layout.n_block as i64;
    let g = layout.grid_side as i64;
    dr as i64 * n * g + dc as i64 * n
}

/// True when the tap (dr, dc) read from position (r, c) stays inside the map.
fn tap_in_range(side: usize, r: usize, c: usize, dr: isize, dc: isize) -> bool {
    let rr = r as isize + dr;
    let cc = c as isize + dc;
    rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side
}

/// Mask keeping cell 0 of the blocks at stride-aligned positions; after
/// channel accumulation this both filters rotation garbage and performs the
/// spatial subsampling of a strided convolution.
fn stride_cell0_mask(layout_in: &PackLayout, stride: usize) -> PtVec {
    make_mask(layout_in, |ch, r, c| ch == 0 && r % stride == 0 && c % stride == 0)
}

/// Per-(output channel, tap) kernel plaintexts for the traditional
/// algorithm: f^2 * c_o encodings, boundary taps zeroed.
pub fn encode_kernels_traditional(
    k: &Kernel4,
    layout_in: &PackLayout,
) -> Result<Vec<Vec<PtVec>>, ConvError> {
    if k.c_i != layout_in.channels {
        return Err(ConvError::Shape(format!(
            "kernel c_i {} != layout channels {}",
            k.c_i, layout_in.channels
        )));
    }
    let pad = (k.f / 2) as isize;
    let side = layout_in.fmap_side;
    let mut out = Vec::with_capacity(k.c_o);
    for o in 0..k.c_o {
        let mut taps = Vec::with_capacity(k.f * k.f);
        for kr in 0..k.f {
            for kc in 0..k.f {
                let (dr, dc) = (kr as isize - pad, kc as isize - pad);
                let mut slots = vec![0.0; layout_in.f_max];
                for i in 0..k.c_i {
                    let w = k.get(o, i, kr, kc);
                    if w == 0.0 {
                        continue;
                    }
                    for r in 0..side {
                        for c in 0..side {
                            if tap_in_range(side, r, c, dr, dc) {
                                slots[layout_in.slot_index(i, r, c)?] = w;
                            }
                        }
                    }
                }
                taps.push(PtVec { slots });
            }
        }
        out.push(taps);
    }
    Ok(out)
}

/// Traditional multi-channel convolution. Consumes exactly 2 levels; the
/// core ledger is (f^2-1+c_i)*c_o rotations and (f^2+1)*c_o plaintext
/// multiplications, plus one placement rotation per nonzero output cell.
pub fn conv_traditional(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    kernels: &[Vec<PtVec>],
    f: usize,
    layout_in: &PackLayout,
    layout_out: &PackLayout,
    stride: usize,
) -> Result<CtVec, ConvError> {
    let c_o = layout_out.channels;
    if kernels.len() != c_o {
        return Err(ConvError::Shape(format!(
            "{} kernel channel groups != {} output channels",
            kernels.len(),
            c_o
        )));
    }
    let pad = (f / 2) as isize;
    let mask = stride_cell0_mask(layout_in, stride);
    let mut out: Option<CtVec> = None;
    for (o, taps) in kernels.iter().enumerate() {
        // tap stage: f^2-1 rotations (offset 0 skipped), f^2 multiplies
        let mut partial: Option<CtVec> = None;
        for kr in 0..f {
            for kc in 0..f {
                let rot = tap_rotation(layout_in, kr as isize - pad, kc as isize - pad);
                let rotated = if rot == 0 { ct.clone() } else { ctx.rotate(ct, rot)? };
                let term = ctx.mul_pt(&rotated, &taps[kr * f + kc])?;
                partial = Some(match partial {
                    Some(acc) => ctx.add_ct(&acc, &term)?,
                    None => term,
                });
            }
        }
        let partial = partial.ok_or_else(|| ConvError::Shape("empty kernel".into()))?;

        // channel accumulation into cell 0: c_i rotations, the zero rotation
        // for channel 0 included in the count
        let mut acc: Option<CtVec> = None;
        for i in 0..layout_in.channels {
            let shifted = ctx.rotate(&partial, layout_in.cell_offset(i) as i64)?;
            acc = Some(match acc {
                Some(a) => ctx.add_ct(&a, &shifted)?,
                None => shifted,
            });
        }
        let masked = ctx.mul_pt(&acc.unwrap(), &mask)?;

        let d_out = layout_out.cell_offset(o) as i64;
        let placed =
            if d_out == 0 { masked } else { ctx.rotate_placement(&masked, -d_out)? };
        out = Some(match out {
            Some(a) => ctx.add_ct(&a, &placed)?,
            None => placed,
        });
    }
    Ok(out.ok_or_else(|| ConvError::Shape("no output channels".into()))?)
}

/// Shared tap plaintexts of a depthwise convolution: f^2 encodings, each
/// carrying every channel's own tap value at that channel's cells.
pub fn encode_depthwise(
    k: &DepthwiseKernel,
    layout: &PackLayout,
) -> Result<Vec<PtVec>, ConvError> {
    if k.c != layout.channels {
        return Err(ConvError::Shape(format!(
            "depthwise channels {} != layout channels {}",
            k.c, layout.channels
        )));
    }
    let pad = (k.f / 2) as isize;
    let side = layout.fmap_side;
    let mut taps = Vec::with_capacity(k.f * k.f);
    for kr in 0..k.f {
        for kc in 0..k.f {
            let (dr, dc) = (kr as isize - pad, kc as isize - pad);
            let mut slots = vec![0.0; layout.f_max];
            for ch in 0..k.c {
                let w = k.get(ch, kr, kc);
                if w == 0.0 {
                    continue;
                }
                for r in 0..side {
                    for c in 0..side {
                        if tap_in_range(side, r, c, dr, dc) {
                            slots[layout.slot_index(ch, r, c)?] = w;
                        }
                    }
                }
            }
            taps.push(PtVec { slots });
        }
    }
    Ok(taps)
}

/// Depthwise convolution: every channel filtered by its own f x f kernel.
/// f^2-1 rotations, f^2 multiplications, exactly 1 level.
pub fn conv_depthwise(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    taps: &[PtVec],
    f: usize,
    layout: &PackLayout,
) -> Result<CtVec, ConvError> {
    if taps.len() != f * f {
        return Err(ConvError::Shape(format!("{} taps != f^2 = {}", taps.len(), f * f)));
    }
    let pad = (f / 2) as isize;
    let mut out: Option<CtVec> = None;
    for kr in 0..f {
        for kc in 0..f {
            let rot = tap_rotation(layout, kr as isize - pad, kc as isize - pad);
            let rotated = if rot == 0 { ct.clone() } else { ctx.rotate(ct, rot)? };
            let term = ctx.mul_pt(&rotated, &taps[kr * f + kc])?;
            out = Some(match out {
                Some(acc) => ctx.add_ct(&acc, &term)?,
                None => term,
            });
        }
    }
    Ok(out.ok_or_else(|| ConvError::Shape("empty kernel".into()))?)
}

/// 1x1 cross-channel mixing without BN fusion. Per output channel: one
/// weight multiply, c_i accumulation rotations, one mask multiply, one
/// placement rotation. 2 levels; c_i*c_o rotations, 2*c_o multiplications.
pub fn conv_pointwise_unfused(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    pw: &[Vec<f64>],
    layout_in: &PackLayout,
    layout_out: &PackLayout,
    stride: usize,
) -> Result<CtVec, ConvError> {
    let c_i = layout_in.channels;
    let c_o = layout_out.channels;
    if pw.len() != c_o || pw.iter().any(|row| row.len() != c_i) {
        return Err(ConvError::Shape(format!(
            "pointwise {}x{} vs layouts {} -> {}",
            pw.len(),
            pw.first().map_or(0, Vec::len),
            c_i,
            c_o
        )));
    }
    let mask = stride_cell0_mask(layout_in, stride);
    let mut out: Option<CtVec> = None;
    for o in 0..c_o {
        let weights = make_weight_plaintext(&pw[o], layout_in);
        let prod = ctx.mul_pt(ct, &weights)?;
        let mut acc: Option<CtVec> = None;
        for ch in 0..c_i {
            let shifted = ctx.rotate(&prod, layout_in.cell_offset(ch) as i64)?;
            acc = Some(match acc {
                Some(a) => ctx.add_ct(&a, &shifted)?,
                None => shifted,
            });
        }
        let masked = ctx.mul_pt(&acc.unwrap(), &mask)?;
        let d_out = layout_out.cell_offset(o) as i64;
        let placed =
            if d_out == 0 { masked } else { ctx.rotate_placement(&masked, -d_out)? };
        out = Some(match out {
            Some(a) => ctx.add_ct(&a, &placed)?,
            None => placed,
        });
    }
    Ok(out.ok_or_else(|| ConvError::Shape("no output channels".into()))?)
}

/// Plaintext holding weight `w[ch]` at every cell of channel `ch`.
fn make_weight_plaintext(w: &[f64], layout: &PackLayout) -> PtVec {
    let mut slots = vec![0.0; layout.f_max];
    for (ch, &v) in w.iter().enumerate() {
        for r in 0..layout.fmap_side {
            for c in 0..layout.fmap_side {
                slots[layout.slot_index(ch, r, c).unwrap()] = v;
            }
        }
    }
    PtVec { slots }
}

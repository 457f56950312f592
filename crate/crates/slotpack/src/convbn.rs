//! Pointwise-convolution / batch-normalization fusion.
//!
//! Inference-mode BN after a pointwise convolution is an affine map per
//! output channel: alpha_o * (y_o - mu_o) + beta_o with
//! alpha_o = gamma_o / sqrt(var_o + eps). Folding alpha into the pointwise
//! weights gives the fusion matrix zeta[o][i] = nu[o][i] * alpha_o, which is
//! encoded together with the redundancy mask into plaintexts. The fused
//! operator then needs a single plaintext multiply per (output, input)
//! channel pair; the remaining -mu*alpha and beta corrections are depth-free
//! plaintext additions, so the whole ConvBN consumes one level instead of
//! the unfused two.

use crate::conv::ConvError;
use crate::engine::{CtVec, PtVec, SlotCtx};
use crate::model::BnParams;
use crate::packing::{make_mask, PackLayout};

/// zeta[o][i] = nu[o][i] * gamma_o / sqrt(var_o + eps)
pub fn bn_fold(pw: &[Vec<f64>], bn: &BnParams) -> Vec<Vec<f64>> {
    pw.iter()
        .enumerate()
        .map(|(o, row)| {
            let alpha = bn.alpha(o);
            row.iter().map(|&nu| nu * alpha).collect()
        })
        .collect()
}

/// Plaintext-domain encodings of one fused ConvBN layer. The per-pair
/// plaintexts are zeta[o][n] times the shared stride/cell mask; they are
/// synthesized on demand into a scratch buffer instead of being stored,
/// since c_i * c_o full slot vectors would dominate memory at width 64.
#[derive(Debug, Clone)]
pub struct FusionMatrix {
    pub zeta: Vec<Vec<f64>>,
    /// 1 at cell 0 of stride-aligned blocks, the accumulation target.
    pub mask: PtVec,
    /// -mu_o * alpha_o packed at every output cell, added after placement.
    pub neg_mu_alpha: PtVec,
    /// beta_o packed at every output cell.
    pub beta_pt: PtVec,
}

/// Build the fusion encodings entirely in the plaintext domain; no
/// ciphertext ledger impact.
pub fn build_fusion(
    pw: &[Vec<f64>],
    bn: &BnParams,
    layout_in: &PackLayout,
    layout_out: &PackLayout,
    stride: usize,
) -> Result<FusionMatrix, ConvError> {
    let c_o = layout_out.channels;
    if pw.len() != c_o || bn.gamma.len() != c_o {
        return Err(ConvError::Shape(format!(
            "pointwise rows {} / bn channels {} != output channels {}",
            pw.len(),
            bn.gamma.len(),
            c_o
        )));
    }
    if pw.iter().any(|row| row.len() != layout_in.channels) {
        return Err(ConvError::Shape("pointwise columns != input channels".into()));
    }
    let mask = make_mask(layout_in, |ch, r, c| ch == 0 && r % stride == 0 && c % stride == 0);
    let neg_mu_alpha = per_channel_plaintext(layout_out, |o| -bn.mu[o] * bn.alpha(o));
    let beta_pt = per_channel_plaintext(layout_out, |o| bn.beta[o]);
    Ok(FusionMatrix { zeta: bn_fold(pw, bn), mask, neg_mu_alpha, beta_pt })
}

fn per_channel_plaintext(layout: &PackLayout, value: impl Fn(usize) -> f64) -> PtVec {
    let mut slots = vec![0.0; layout.f_max];
    for ch in 0..layout.channels {
        let v = value(ch);
        for r in 0..layout.fmap_side {
            for c in 0..layout.fmap_side {
                slots[layout.slot_index(ch, r, c).unwrap()] = v;
            }
        }
    }
    PtVec { slots }
}

/// Fused pointwise + BN on a depthwise-convolution output. The c_i
/// accumulation rotations are shared by every output channel; each (o, n)
/// pair costs one plaintext multiply. Exactly 1 level consumed.
pub fn convbn_fused(
    ctx: &mut SlotCtx,
    dw_ct: &CtVec,
    fm: &FusionMatrix,
    layout_in: &PackLayout,
    layout_out: &PackLayout,
) -> Result<CtVec, ConvError> {
    let c_i = layout_in.channels;
    let c_o = layout_out.channels;
    if fm.zeta.len() != c_o || fm.zeta.iter().any(|row| row.len() != c_i) {
        return Err(ConvError::Shape("fusion matrix shape mismatch".into()));
    }
    let rotations: Vec<CtVec> = (0..c_i)
        .map(|n| ctx.rotate(dw_ct, layout_in.cell_offset(n) as i64))
        .collect::<Result<_, _>>()?;

    let mut scratch = PtVec::zeros(layout_in.f_max);
    let mut out: Option<CtVec> = None;
    for o in 0..c_o {
        let mut acc: Option<CtVec> = None;
        for (n, rho) in rotations.iter().enumerate() {
            let z = fm.zeta[o][n];
            for (dst, &m) in scratch.slots.iter_mut().zip(&fm.mask.slots) {
                *dst = z * m;
            }
            let term = ctx.mul_pt(rho, &scratch)?;
            acc = Some(match acc {
                Some(a) => ctx.add_ct(&a, &term)?,
                None => term,
            });
        }
        let acc = acc.ok_or_else(|| ConvError::Shape("no input channels".into()))?;
        let d_out = layout_out.cell_offset(o) as i64;
        let placed = if d_out == 0 { acc } else { ctx.rotate_placement(&acc, -d_out)? };
        out = Some(match out {
            Some(a) => ctx.add_ct(&a, &placed)?,
            None => placed,
        });
    }
    let out = out.ok_or_else(|| ConvError::Shape("no output channels".into()))?;
    let out = ctx.add_pt(&out, &fm.neg_mu_alpha)?;
    Ok(ctx.add_pt(&out, &fm.beta_pt)?)
}

/// Pointwise convolution followed by standalone BN, without depth
/// optimization: the pointwise result is shifted by -mu, multiplied by the
/// alpha-with-mask plaintext, and beta is added at placement. Numerically
/// identical to [`convbn_fused`] but consumes 2 levels.
pub fn convbn_unfused(
    ctx: &mut SlotCtx,
    dw_ct: &CtVec,
    pw: &[Vec<f64>],
    bn: &BnParams,
    layout_in: &PackLayout,
    layout_out: &PackLayout,
    stride: usize,
) -> Result<CtVec, ConvError> {
    let c_i = layout_in.channels;
    let c_o = layout_out.channels;
    if pw.len() != c_o || pw.iter().any(|row| row.len() != c_i) {
        return Err(ConvError::Shape("pointwise shape mismatch".into()));
    }
    let mask = make_mask(layout_in, |ch, r, c| ch == 0 && r % stride == 0 && c % stride == 0);
    let beta_pt = per_channel_plaintext(layout_out, |o| bn.beta[o]);
    let mut out: Option<CtVec> = None;
    for o in 0..c_o {
        let mut weights = PtVec::zeros(layout_in.f_max);
        for (ch, &nu) in pw[o].iter().enumerate() {
            for r in 0..layout_in.fmap_side {
                for c in 0..layout_in.fmap_side {
                    weights.slots[layout_in.slot_index(ch, r, c)?] = nu;
                }
            }
        }
        let prod = ctx.mul_pt(dw_ct, &weights)?;
        let mut acc: Option<CtVec> = None;
        for ch in 0..c_i {
            let shifted = ctx.rotate(&prod, layout_in.cell_offset(ch) as i64)?;
            acc = Some(match acc {
                Some(a) => ctx.add_ct(&a, &shifted)?,
                None => shifted,
            });
        }
        // subtract the mean at the accumulation cells (depth-free), then
        // apply the alpha scaling together with the mask
        let mut neg_mu = PtVec::zeros(layout_in.f_max);
        for (dst, &m) in neg_mu.slots.iter_mut().zip(&mask.slots) {
            *dst = -bn.mu[o] * m;
        }
        let centered = ctx.add_pt(&acc.unwrap(), &neg_mu)?;
        let mut alpha_mask = PtVec::zeros(layout_in.f_max);
        let alpha = bn.alpha(o);
        for (dst, &m) in alpha_mask.slots.iter_mut().zip(&mask.slots) {
            *dst = alpha * m;
        }
        let scaled = ctx.mul_pt(&centered, &alpha_mask)?;
        let d_out = layout_out.cell_offset(o) as i64;
        let placed = if d_out == 0 { scaled } else { ctx.rotate_placement(&scaled, -d_out)? };
        out = Some(match out {
            Some(a) => ctx.add_ct(&a, &placed)?,
            None => placed,
        });
    }
    let out = out.ok_or_else(|| ConvError::Shape("no output channels".into()))?;
    Ok(ctx.add_pt(&out, &beta_pt)?)
}

/// Standalone BN over an already-placed layer output: one multiply by the
/// packed alpha plaintext plus one depth-free addition of beta - mu*alpha.
/// 1 level consumed.
pub fn bn_standalone(
    ctx: &mut SlotCtx,
    ct: &CtVec,
    bn: &BnParams,
    layout: &PackLayout,
) -> Result<CtVec, ConvError> {
    if bn.gamma.len() != layout.channels {
        return Err(ConvError::Shape(format!(
            "bn channels {} != layout channels {}",
            bn.gamma.len(),
            layout.channels
        )));
    }
    let alpha_pt = per_channel_plaintext(layout, |o| bn.alpha(o));
    let shift_pt = per_channel_plaintext(layout, |o| bn.beta[o] - bn.mu[o] * bn.alpha(o));
    let scaled = ctx.mul_pt(ct, &alpha_pt)?;
    Ok(ctx.add_pt(&scaled, &shift_pt)?)
}

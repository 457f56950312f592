//! Plaintext reference implementations.
//!
//! Direct tensor arithmetic with no dependency on the slot engine, used as
//! ground truth by the equivalence tests. `expected_counts` re-derives the
//! per-layer operation formulas independently of `conv::predict_counts`.

use thiserror::Error;

use crate::model::{BnParams, DepthwiseKernel, FcWeights, Kernel4, LayerWeights, NetWeights};
use crate::netplan::{LayerKind, NetworkPlan, PlanOp};
use crate::packing::Tensor3;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing weights for layer {0}")]
    MissingWeights(String),
}

/// Textbook direct convolution with zero padding (f-1)/2.
pub fn conv2d_ref(t: &Tensor3, k: &Kernel4, stride: usize) -> Result<Tensor3, OracleError> {
    if t.c != k.c_i {
        return Err(OracleError::ShapeMismatch(format!(
            "input channels {} != kernel {}",
            t.c, k.c_i
        )));
    }
    let pad = (k.f - 1) / 2;
    let h_o = t.h.div_ceil(stride);
    let w_o = t.w.div_ceil(stride);
    let mut out = Tensor3::zeros(k.c_o, h_o, w_o);
    for o in 0..k.c_o {
        for r in 0..h_o {
            for c in 0..w_o {
                let mut acc = 0.0;
                for i in 0..k.c_i {
                    for kr in 0..k.f {
                        for kc in 0..k.f {
                            let rr = (r * stride + kr) as isize - pad as isize;
                            let cc = (c * stride + kc) as isize - pad as isize;
                            if rr >= 0 && cc >= 0 && (rr as usize) < t.h && (cc as usize) < t.w {
                                acc += k.get(o, i, kr, kc) * t.get(i, rr as usize, cc as usize);
                            }
                        }
                    }
                }
                out.set(o, r, c, acc);
            }
        }
    }
    Ok(out)
}

/// Per-channel spatial convolution, no cross-channel mixing.
pub fn depthwise_ref(t: &Tensor3, k: &DepthwiseKernel, stride: usize) -> Result<Tensor3, OracleError> {
    if t.c != k.c {
        return Err(OracleError::ShapeMismatch(format!("channels {} != kernel {}", t.c, k.c)));
    }
    let pad = (k.f - 1) / 2;
    let h_o = t.h.div_ceil(stride);
    let w_o = t.w.div_ceil(stride);
    let mut out = Tensor3::zeros(t.c, h_o, w_o);
    for ch in 0..t.c {
        for r in 0..h_o {
            for c in 0..w_o {
                let mut acc = 0.0;
                for kr in 0..k.f {
                    for kc in 0..k.f {
                        let rr = (r * stride + kr) as isize - pad as isize;
                        let cc = (c * stride + kc) as isize - pad as isize;
                        if rr >= 0 && cc >= 0 && (rr as usize) < t.h && (cc as usize) < t.w {
                            acc += k.get(ch, kr, kc) * t.get(ch, rr as usize, cc as usize);
                        }
                    }
                }
                out.set(ch, r, c, acc);
            }
        }
    }
    Ok(out)
}

/// 1x1 cross-channel mixing, `pw[o][i]`.
pub fn pointwise_ref(t: &Tensor3, pw: &[Vec<f64>]) -> Result<Tensor3, OracleError> {
    let c_o = pw.len();
    if c_o == 0 || pw[0].len() != t.c {
        return Err(OracleError::ShapeMismatch(format!(
            "pointwise {}x{} vs {} input channels",
            c_o,
            pw.first().map_or(0, Vec::len),
            t.c
        )));
    }
    let mut out = Tensor3::zeros(c_o, t.h, t.w);
    for o in 0..c_o {
        for r in 0..t.h {
            for c in 0..t.w {
                let acc: f64 = (0..t.c).map(|i| pw[o][i] * t.get(i, r, c)).sum();
                out.set(o, r, c, acc);
            }
        }
    }
    Ok(out)
}

/// Depthwise followed by pointwise convolution.
pub fn dsc_ref(
    t: &Tensor3,
    d: &DepthwiseKernel,
    pw: &[Vec<f64>],
    stride: usize,
) -> Result<Tensor3, OracleError> {
    pointwise_ref(&depthwise_ref(t, d, stride)?, pw)
}

/// Strided 1x1 convolution used by shortcut downsampling.
pub fn downsample_ref(t: &Tensor3, pw: &[Vec<f64>], stride: usize) -> Result<Tensor3, OracleError> {
    let mixed = pointwise_ref(t, pw)?;
    let h_o = t.h.div_ceil(stride);
    let w_o = t.w.div_ceil(stride);
    let mut out = Tensor3::zeros(mixed.c, h_o, w_o);
    for ch in 0..mixed.c {
        for r in 0..h_o {
            for c in 0..w_o {
                out.set(ch, r, c, mixed.get(ch, r * stride, c * stride));
            }
        }
    }
    Ok(out)
}

/// Inference-mode batch normalization: alpha * (x - mu) + beta per channel.
pub fn bn_ref(t: &Tensor3, bn: &BnParams) -> Result<Tensor3, OracleError> {
    if bn.gamma.len() != t.c {
        return Err(OracleError::ShapeMismatch(format!(
            "bn channels {} != {}",
            bn.gamma.len(),
            t.c
        )));
    }
    let mut out = t.clone();
    for ch in 0..t.c {
        let alpha = bn.alpha(ch);
        for r in 0..t.h {
            for c in 0..t.w {
                out.set(ch, r, c, alpha * (t.get(ch, r, c) - bn.mu[ch]) + bn.beta[ch]);
            }
        }
    }
    Ok(out)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Horner evaluation of a monomial-basis polynomial, lowest coefficient first.
pub fn poly_eval(x: f64, coeffs: &[f64]) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

pub fn poly_tensor(t: &Tensor3, coeffs: &[f64]) -> Tensor3 {
    let data = t.data.iter().map(|&x| poly_eval(x, coeffs)).collect();
    Tensor3 { c: t.c, h: t.h, w: t.w, data }
}

pub fn silu_tensor(t: &Tensor3) -> Tensor3 {
    let data = t.data.iter().map(|&x| silu(x)).collect();
    Tensor3 { c: t.c, h: t.h, w: t.w, data }
}

/// Spatial mean per channel.
pub fn avgpool_ref(t: &Tensor3) -> Vec<f64> {
    let area = (t.h * t.w) as f64;
    (0..t.c)
        .map(|ch| {
            let mut acc = 0.0;
            for r in 0..t.h {
                for c in 0..t.w {
                    acc += t.get(ch, r, c);
                }
            }
            acc / area
        })
        .collect()
}

pub fn fc_ref(pooled: &[f64], fc: &FcWeights) -> Result<Vec<f64>, OracleError> {
    if fc.w.is_empty() || fc.w[0].len() != pooled.len() {
        return Err(OracleError::ShapeMismatch(format!(
            "fc {}x{} vs {} inputs",
            fc.w.len(),
            fc.w.first().map_or(0, Vec::len),
            pooled.len()
        )));
    }
    Ok(fc
        .w
        .iter()
        .zip(&fc.b)
        .map(|(row, &b)| b + row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

/// Activation applied by the reference forward pass: the same polynomial the
/// ciphertext path evaluates (for exact equivalence checks) or true SiLU
/// (for approximation-gap studies).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActMode {
    Poly,
    Silu,
}

/// Plain forward pass over the same plan the ciphertext executor runs.
pub fn forward_ref(
    plan: &NetworkPlan,
    weights: &NetWeights,
    input: &Tensor3,
    act: ActMode,
) -> Result<Vec<f64>, OracleError> {
    let mut t = input.clone();
    let mut logits = None;
    forward_ops(&plan.ops, plan, weights, act, &mut t, &mut logits)?;
    logits.ok_or_else(|| OracleError::ShapeMismatch("plan has no fc layer".into()))
}

fn forward_ops(
    ops: &[PlanOp],
    plan: &NetworkPlan,
    weights: &NetWeights,
    act: ActMode,
    t: &mut Tensor3,
    logits: &mut Option<Vec<f64>>,
) -> Result<(), OracleError> {
    for op in ops {
        match op {
            PlanOp::Bootstrap => {}
            PlanOp::Residual { main, shortcut } => {
                let saved = t.clone();
                forward_ops(main, plan, weights, act, t, logits)?;
                let mut side = saved;
                forward_ops(shortcut, plan, weights, act, &mut side, logits)?;
                if side.c != t.c || side.h != t.h {
                    return Err(OracleError::ShapeMismatch("skip branch shapes differ".into()));
                }
                for (a, b) in t.data.iter_mut().zip(&side.data) {
                    *a += b;
                }
            }
            PlanOp::Layer(layer) => {
                let lookup = |name: &str| {
                    weights.get(name).ok_or_else(|| OracleError::MissingWeights(name.into()))
                };
                match layer.kind {
                    LayerKind::ConvTraditional => match lookup(&layer.name)? {
                        LayerWeights::Traditional(k) => *t = conv2d_ref(t, k, layer.stride)?,
                        _ => return Err(OracleError::MissingWeights(layer.name.clone())),
                    },
                    LayerKind::ConvDscBn => match lookup(&layer.name)? {
                        LayerWeights::Dsc { depthwise, pointwise, bn } => {
                            *t = bn_ref(&dsc_ref(t, depthwise, pointwise, layer.stride)?, bn)?;
                        }
                        _ => return Err(OracleError::MissingWeights(layer.name.clone())),
                    },
                    LayerKind::BnStandalone => match lookup(&layer.name)? {
                        LayerWeights::Bn(bn) => *t = bn_ref(t, bn)?,
                        _ => return Err(OracleError::MissingWeights(layer.name.clone())),
                    },
                    LayerKind::ActPoly => {
                        *t = match act {
                            ActMode::Poly => poly_tensor(t, &plan.act_coeffs),
                            ActMode::Silu => silu_tensor(t),
                        };
                    }
                    LayerKind::Downsample => match lookup(&layer.name)? {
                        LayerWeights::Downsample(pw) => *t = downsample_ref(t, pw, layer.stride)?,
                        _ => return Err(OracleError::MissingWeights(layer.name.clone())),
                    },
                    LayerKind::AvgPool => {
                        let pooled = avgpool_ref(t);
                        *t = Tensor3::new(pooled.len(), 1, 1, pooled).unwrap();
                    }
                    LayerKind::Fc => match lookup(&layer.name)? {
                        LayerWeights::Fc(fc) => *logits = Some(fc_ref(&t.data, fc)?),
                        _ => return Err(OracleError::MissingWeights(layer.name.clone())),
                    },
                }
            }
        }
    }
    Ok(())
}

/// Independent re-derivation of the per-layer rotation/multiplication
/// formulas: traditional (f^2-1+c_i)*c_o rotations and (f^2+1)*c_o
/// multiplications over 2 levels; depthwise-separable f^2-1+c_i*c_o
/// rotations and f^2+2*c_o multiplications over 3 levels unfused.
pub fn expected_counts(kind: crate::model::ConvKind, f: usize, c_i: usize, c_o: usize) -> (u64, u64, u32) {
    match kind {
        crate::model::ConvKind::Traditional => {
            let rot = (f * f - 1 + c_i) * c_o;
            let mult = (f * f + 1) * c_o;
            (rot as u64, mult as u64, 2)
        }
        crate::model::ConvKind::DepthwiseSeparable => {
            let rot = f * f - 1 + c_i * c_o;
            let mult = f * f + 2 * c_o;
            (rot as u64, mult as u64, 3)
        }
    }
}

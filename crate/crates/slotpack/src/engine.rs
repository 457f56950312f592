//! Deterministic virtual machine for RNS-CKKS slot semantics.
//!
//! Ciphertexts are modeled as exact double-precision slot vectors with a
//! remaining multiplicative level. There is no noise: every operation is
//! slot-exact, so simulator outputs can be compared bit-for-bit against a
//! plaintext oracle. Every homomorphic operation is recorded in a per-context
//! ledger, which a cost model converts into estimated seconds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("ciphertext levels differ: {0} vs {1}")]
    LevelMismatch(u32, u32),
    #[error("slot vector length mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("multiplicative depth exhausted (level 0); a bootstrap is missing")]
    DepthExhausted,
    #[error("level_drop target {target} above current level {level}")]
    TargetAboveCurrent { level: u32, target: u32 },
    #[error("no cost weight defined for {0:?}")]
    MissingWeight(OpKind),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Homomorphic operation kinds tracked by the ledger.
///
/// `RotatePlacement` counts the rotations that move a finished output channel
/// into its block cell; they are kept apart from the core `Rotate` counter so
/// that per-layer measurements can be compared against the per-channel
/// rotation formulas, which exclude placement overhead. `LevelDrop` models
/// cost-free modulus switching used to align branches before addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    AddPt,
    AddCt,
    MulPt,
    MulCt,
    Rotate,
    RotatePlacement,
    Bootstrap,
    LevelDrop,
}

pub const ALL_OP_KINDS: [OpKind; 8] = [
    OpKind::AddPt,
    OpKind::AddCt,
    OpKind::MulPt,
    OpKind::MulCt,
    OpKind::Rotate,
    OpKind::RotatePlacement,
    OpKind::Bootstrap,
    OpKind::LevelDrop,
];

/// Monotone counters of homomorphic operations executed in one context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpLedger {
    counts: BTreeMap<OpKind, u64>,
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, kind: OpKind) {
        *self.counts.entry(kind).or_insert(0) += 1;
    }

    pub fn add(&mut self, kind: OpKind, n: u64) {
        if n > 0 {
            *self.counts.entry(kind).or_insert(0) += n;
        }
    }

    pub fn count(&self, kind: OpKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.values().all(|&c| c == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Counter-wise sum of two ledgers.
    pub fn merged(&self, other: &OpLedger) -> OpLedger {
        let mut out = self.clone();
        for (kind, count) in other.iter() {
            *out.counts.entry(kind).or_insert(0) += count;
        }
        out
    }

    /// Counter-wise delta since an earlier snapshot of the same ledger.
    pub fn since(&self, earlier: &OpLedger) -> OpLedger {
        let mut out = OpLedger::new();
        for (kind, count) in self.iter() {
            let before = earlier.count(kind);
            if count > before {
                out.counts.insert(kind, count - before);
            }
        }
        out
    }
}

/// Seconds-per-operation weights used by [`estimate_cost`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    weights: BTreeMap<OpKind, f64>,
}

impl CostWeights {
    pub fn new(weights: BTreeMap<OpKind, f64>) -> Self {
        Self { weights }
    }

    /// Measured single-thread execution times on the reference server:
    /// AddPt 0.20s, AddCt 0.22s, MulPt 0.57s, MulCt 1.26s, CRot 1.06s,
    /// Boot 14.176s. Placement rotations are ordinary rotations and carry the
    /// CRot weight; level drops are free.
    pub fn reference() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert(OpKind::AddPt, 0.20);
        weights.insert(OpKind::AddCt, 0.22);
        weights.insert(OpKind::MulPt, 0.57);
        weights.insert(OpKind::MulCt, 1.26);
        weights.insert(OpKind::Rotate, 1.06);
        weights.insert(OpKind::RotatePlacement, 1.06);
        weights.insert(OpKind::Bootstrap, 14.176);
        weights.insert(OpKind::LevelDrop, 0.0);
        Self { weights }
    }

    pub fn get(&self, kind: OpKind) -> Option<f64> {
        self.weights.get(&kind).copied()
    }
}

/// Estimated seconds for a ledger under the given weights. Every nonzero
/// counter must have a weight.
pub fn estimate_cost(ledger: &OpLedger, weights: &CostWeights) -> Result<f64, EngineError> {
    let mut total = 0.0;
    for (kind, count) in ledger.iter() {
        if count == 0 {
            continue;
        }
        let w = weights.get(kind).ok_or(EngineError::MissingWeight(kind))?;
        total += count as f64 * w;
    }
    Ok(total)
}

/// Encryption-scheme parameters of a simulated context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeParams {
    /// Slot count n; must be a power of two.
    pub n_slots: usize,
    /// Total multiplicative depth L.
    pub max_level: u32,
    /// Levels consumed by one bootstrap.
    pub boot_depth: u32,
    pub cost_weights: CostWeights,
}

impl HeParams {
    pub fn new(n_slots: usize, max_level: u32, boot_depth: u32) -> Result<Self, EngineError> {
        if n_slots == 0 || !n_slots.is_power_of_two() {
            return Err(EngineError::InvalidParams(format!(
                "n_slots {n_slots} is not a power of two"
            )));
        }
        if boot_depth > max_level {
            return Err(EngineError::InvalidParams(format!(
                "boot_depth {boot_depth} exceeds max_level {max_level}"
            )));
        }
        if max_level - boot_depth < 1 {
            return Err(EngineError::InvalidParams(
                "post-bootstrap usable level must be at least 1".into(),
            ));
        }
        Ok(Self {
            n_slots,
            max_level,
            boot_depth,
            cost_weights: CostWeights::reference(),
        })
    }

    /// Level of a freshly bootstrapped ciphertext.
    pub fn usable_level(&self) -> u32 {
        self.max_level - self.boot_depth
    }
}

/// Simulated ciphertext: slot vector plus remaining multiplicative level.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVec {
    pub slots: Vec<f64>,
    pub level: u32,
}

/// Encoded plaintext operand. Plaintexts carry no level; multiplying a
/// ciphertext by a plaintext consumes one level of the ciphertext only.
#[derive(Debug, Clone, PartialEq)]
pub struct PtVec {
    pub slots: Vec<f64>,
}

impl PtVec {
    pub fn zeros(n: usize) -> Self {
        Self { slots: vec![0.0; n] }
    }

    pub fn splat(n: usize, value: f64) -> Self {
        Self { slots: vec![value; n] }
    }
}

/// A context owns the parameters and the operation ledger. Contexts are
/// confined to one worker at a time; batch parallelism uses one context per
/// input.
#[derive(Debug, Clone)]
pub struct SlotCtx {
    pub params: HeParams,
    pub ledger: OpLedger,
}

impl SlotCtx {
    pub fn new(params: HeParams) -> Self {
        Self { params, ledger: OpLedger::new() }
    }

    fn check_shape(&self, len: usize) -> Result<(), EngineError> {
        if len != self.params.n_slots {
            return Err(EngineError::ShapeMismatch { expected: self.params.n_slots, got: len });
        }
        Ok(())
    }

    /// Wrap a packed payload as a fresh (steady-state) ciphertext at the
    /// post-bootstrap level. Not a ledger operation.
    pub fn fresh_ct(&self, slots: Vec<f64>) -> Result<CtVec, EngineError> {
        self.check_shape(slots.len())?;
        Ok(CtVec { slots, level: self.params.usable_level() })
    }

    /// Trivial encoding of a constant as a ciphertext at the given level.
    /// Used for constant polynomials; carries no ledger cost.
    pub fn encode_const_ct(&self, value: f64, level: u32) -> CtVec {
        CtVec { slots: vec![value; self.params.n_slots], level }
    }

    pub fn add_ct(&mut self, a: &CtVec, b: &CtVec) -> Result<CtVec, EngineError> {
        self.check_shape(a.slots.len())?;
        self.check_shape(b.slots.len())?;
        if a.level != b.level {
            return Err(EngineError::LevelMismatch(a.level, b.level));
        }
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect();
        self.ledger.record(OpKind::AddCt);
        Ok(CtVec { slots, level: a.level })
    }

    pub fn add_pt(&mut self, ct: &CtVec, pt: &PtVec) -> Result<CtVec, EngineError> {
        self.check_shape(ct.slots.len())?;
        self.check_shape(pt.slots.len())?;
        let slots = ct.slots.iter().zip(&pt.slots).map(|(x, y)| x + y).collect();
        self.ledger.record(OpKind::AddPt);
        Ok(CtVec { slots, level: ct.level })
    }

    pub fn mul_pt(&mut self, ct: &CtVec, pt: &PtVec) -> Result<CtVec, EngineError> {
        self.check_shape(ct.slots.len())?;
        self.check_shape(pt.slots.len())?;
        if ct.level == 0 {
            return Err(EngineError::DepthExhausted);
        }
        let slots = ct.slots.iter().zip(&pt.slots).map(|(x, y)| x * y).collect();
        self.ledger.record(OpKind::MulPt);
        Ok(CtVec { slots, level: ct.level - 1 })
    }

    pub fn mul_ct(&mut self, a: &CtVec, b: &CtVec) -> Result<CtVec, EngineError> {
        self.check_shape(a.slots.len())?;
        self.check_shape(b.slots.len())?;
        if a.level != b.level {
            return Err(EngineError::LevelMismatch(a.level, b.level));
        }
        if a.level == 0 {
            return Err(EngineError::DepthExhausted);
        }
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect();
        self.ledger.record(OpKind::MulCt);
        Ok(CtVec { slots, level: a.level - 1 })
    }

    /// Cyclic rotation: slot i takes the value of slot (i + k) mod n.
    /// Negative k rotates the other way; level is unchanged.
    pub fn rotate(&mut self, ct: &CtVec, k: i64) -> Result<CtVec, EngineError> {
        self.ledger.record(OpKind::Rotate);
        self.rotate_slots(ct, k)
    }

    /// Same data movement as [`rotate`](Self::rotate), counted separately:
    /// used when placing a finished output channel into its block cell.
    pub fn rotate_placement(&mut self, ct: &CtVec, k: i64) -> Result<CtVec, EngineError> {
        self.ledger.record(OpKind::RotatePlacement);
        self.rotate_slots(ct, k)
    }

    fn rotate_slots(&self, ct: &CtVec, k: i64) -> Result<CtVec, EngineError> {
        self.check_shape(ct.slots.len())?;
        let n = self.params.n_slots;
        let k = k.rem_euclid(n as i64) as usize;
        let mut slots = Vec::with_capacity(n);
        slots.extend_from_slice(&ct.slots[k..]);
        slots.extend_from_slice(&ct.slots[..k]);
        Ok(CtVec { slots, level: ct.level })
    }

    /// Refresh the level to max_level - boot_depth; slots are unchanged in
    /// the exact simulator.
    pub fn bootstrap(&mut self, ct: &CtVec) -> Result<CtVec, EngineError> {
        self.check_shape(ct.slots.len())?;
        self.ledger.record(OpKind::Bootstrap);
        Ok(CtVec { slots: ct.slots.clone(), level: self.params.usable_level() })
    }

    /// Cost-free modulus switch down to `target`, used to align branch levels
    /// before ciphertext addition.
    pub fn level_drop(&mut self, ct: &CtVec, target: u32) -> Result<CtVec, EngineError> {
        self.check_shape(ct.slots.len())?;
        if target > ct.level {
            return Err(EngineError::TargetAboveCurrent { level: ct.level, target });
        }
        self.ledger.record(OpKind::LevelDrop);
        Ok(CtVec { slots: ct.slots.clone(), level: target })
    }

    /// Drop both operands to the lower of the two levels and add.
    pub fn add_ct_aligned(&mut self, a: &CtVec, b: &CtVec) -> Result<CtVec, EngineError> {
        let target = a.level.min(b.level);
        let a = if a.level > target { self.level_drop(a, target)? } else { a.clone() };
        let b = if b.level > target { self.level_drop(b, target)? } else { b.clone() };
        self.add_ct(&a, &b)
    }
}

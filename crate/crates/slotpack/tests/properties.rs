//! Property-based invariants of the slot engine, the packing layout and the
//! cost model.

use proptest::prelude::*;

use slotpack::engine::{estimate_cost, CostWeights, HeParams, OpKind, OpLedger, SlotCtx};
use slotpack::packing::{pack, unpack, PackLayout, Tensor3};

fn ctx(n_slots: usize) -> SlotCtx {
    SlotCtx::new(HeParams::new(n_slots, 26, 14).unwrap())
}

proptest! {
    /// Composing two rotations equals one rotation by the summed amount.
    #[test]
    fn rotation_composes_additively(
        a in -200i64..200,
        b in -200i64..200,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cx = ctx(128);
        let ct = cx.fresh_ct(slots).unwrap();
        let two = {
            let first = cx.rotate(&ct, a).unwrap();
            cx.rotate(&first, b).unwrap()
        };
        let one = cx.rotate(&ct, a + b).unwrap();
        prop_assert_eq!(two.slots, one.slots);
        prop_assert_eq!(two.level, one.level);
    }

    /// Rotating by the slot count (or zero) is the identity on values.
    #[test]
    fn full_turn_rotation_is_identity(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cx = ctx(64);
        let ct = cx.fresh_ct(slots.clone()).unwrap();
        let turned = cx.rotate(&ct, 64).unwrap();
        prop_assert_eq!(turned.slots, slots);
    }

    /// pack followed by unpack reproduces the tensor exactly for any
    /// admissible (channels, side) geometry on a 4096-slot grid.
    #[test]
    fn pack_unpack_round_trip(
        side_pow in 2u32..7,
        channel_seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let f_max = 4096usize;
        let side = 1usize << side_pow;
        let n = 64 / side;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(channel_seed);
        let c = rng.gen_range(1..=n * n);
        let layout = PackLayout::new(f_max, c, side).unwrap();
        let data: Vec<f64> = (0..c * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor3::new(c, side, side, data).unwrap();
        let slots = pack(&t, &layout).unwrap();
        let back = unpack(&slots, &layout).unwrap();
        prop_assert_eq!(t.max_abs_diff(&back), 0.0);
    }

    /// Every cell of a layout owns a distinct slot.
    #[test]
    fn slot_indices_are_injective(side_pow in 2u32..7, c_seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let side = 1usize << side_pow;
        let n = 64 / side;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c_seed);
        let c = rng.gen_range(1..=n * n);
        let layout = PackLayout::new(4096, c, side).unwrap();
        let mut seen = std::collections::HashSet::new();
        for ch in 0..c {
            for r in 0..side {
                for col in 0..side {
                    let idx = layout.slot_index(ch, r, col).unwrap();
                    prop_assert!(idx < 4096);
                    prop_assert!(seen.insert(idx), "slot {} assigned twice", idx);
                }
            }
        }
    }

    /// The cost estimate is linear: cost(a + b) = cost(a) + cost(b) and
    /// cost(k * a) = k * cost(a).
    #[test]
    fn cost_estimate_is_linear(
        counts_a in proptest::collection::vec(0u64..50, 8),
        counts_b in proptest::collection::vec(0u64..50, 8),
        k in 1u64..10,
    ) {
        let kinds = [
            OpKind::AddPt, OpKind::AddCt, OpKind::MulPt, OpKind::MulCt,
            OpKind::Rotate, OpKind::RotatePlacement, OpKind::Bootstrap, OpKind::LevelDrop,
        ];
        let weights = CostWeights::reference();
        let fill = |counts: &[u64]| {
            let mut l = OpLedger::new();
            for (kind, &n) in kinds.iter().zip(counts) {
                l.add(*kind, n);
            }
            l
        };
        let a = fill(&counts_a);
        let b = fill(&counts_b);
        let sum = a.merged(&b);
        let ca = estimate_cost(&a, &weights).unwrap();
        let cb = estimate_cost(&b, &weights).unwrap();
        let cs = estimate_cost(&sum, &weights).unwrap();
        prop_assert!((cs - (ca + cb)).abs() < 1e-9);

        let scaled = fill(&counts_a.iter().map(|n| n * k).collect::<Vec<_>>());
        let ck = estimate_cost(&scaled, &weights).unwrap();
        prop_assert!((ck - k as f64 * ca).abs() < 1e-9);
    }

    /// Plaintext multiplication consumes exactly one level; ciphertext
    /// multiplication demands aligned operands and consumes one level.
    #[test]
    fn multiplication_level_accounting(seed in any::<u64>(), drop in 1u32..5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut cx = ctx(32);
        let slots: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = cx.fresh_ct(slots.clone()).unwrap();
        let pt = slotpack::engine::PtVec::splat(32, 0.5);
        let ap = cx.mul_pt(&a, &pt).unwrap();
        prop_assert_eq!(a.level - ap.level, 1);

        let b = cx.fresh_ct(slots).unwrap();
        let b = cx.level_drop(&b, b.level - drop).unwrap();
        prop_assert!(cx.mul_ct(&a, &b).is_err(), "misaligned levels must be rejected");
        let a = cx.level_drop(&a, b.level).unwrap();
        let prod = cx.mul_ct(&a, &b).unwrap();
        prop_assert_eq!(prod.level, b.level - 1);
    }
}

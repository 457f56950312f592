//! End-to-end acceptance suite. Each test prints one PASS/FAIL line for the
//! behavior it certifies and enforces its own wall-clock budget.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slotpack::act::{eval_monomial, eval_poly_ct, legendre_eval, PolyApprox};
use slotpack::conv::{
    conv_depthwise, conv_pointwise_unfused, conv_traditional, encode_depthwise,
    encode_kernels_traditional, predict_counts,
};
use slotpack::convbn::{convbn_fused, convbn_unfused, build_fusion};
use slotpack::engine::{estimate_cost, CostWeights, HeParams, OpKind, OpLedger, SlotCtx};
use slotpack::model::{
    random_weights, BnParams, ConvKind, DepthwiseKernel, Kernel4, NetConfig,
};
use slotpack::netplan::{bootstrap_count, build_resnet, place_bootstraps, run_batch};
use slotpack::oracle;
use slotpack::packing::{pack, unpack, PackLayout, Tensor3};

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn check(name: &str, f: impl FnOnce() -> Result<(), String>) {
    match f() {
        Ok(()) => println!("[PASS] {name}"),
        Err(e) => {
            println!("[FAIL] {name}: {e}");
            panic!("{name}: {e}");
        }
    }
}

fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor3::new(c, h, w, data).unwrap()
}

fn random_kernel(rng: &mut impl Rng, c_o: usize, c_i: usize, f: usize) -> Kernel4 {
    let mut k = Kernel4::zeros(c_o, c_i, f);
    for v in k.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    k
}

fn random_pointwise(rng: &mut impl Rng, c_o: usize, c_i: usize) -> Vec<Vec<f64>> {
    (0..c_o).map(|_| (0..c_i).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn random_bn(rng: &mut impl Rng, c: usize) -> BnParams {
    BnParams {
        gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        mu: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        eps: 1e-5,
    }
}

fn ctx(f_max: usize) -> SlotCtx {
    SlotCtx::new(HeParams::new(f_max, 26, 14).unwrap())
}

#[test]
fn pack_unpack_identity_across_block_sizes() {
    check("pack/unpack round-trip, 200 tensors, N in {1,4,8,16}", || {
        let start = Instant::now();
        let f_max = 4096;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // side 64/16/8/4 gives N = 1/4/8/16 on a 64x64 grid
        for &(side, n) in &[(64usize, 1usize), (16, 4), (8, 8), (4, 16)] {
            let layout_probe = PackLayout::new(f_max, 1, side).map_err(|e| e.to_string())?;
            ensure!(layout_probe.n_block == n, "side {side} gave N {}", layout_probe.n_block);
            for _ in 0..50 {
                let c = rng.gen_range(1..=n * n);
                let layout = PackLayout::new(f_max, c, side).map_err(|e| e.to_string())?;
                let t = random_tensor(&mut rng, c, side, side);
                let slots = pack(&t, &layout).map_err(|e| e.to_string())?;
                let back = unpack(&slots, &layout).map_err(|e| e.to_string())?;
                ensure!(t.max_abs_diff(&back) == 0.0, "round-trip not exact at N={n}, c={c}");
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(elapsed < 10.0, "took {elapsed:.1}s, budget 10s");
        Ok(())
    });
}

#[test]
fn traditional_convolution_matches_oracle() {
    check("traditional convolution vs plaintext oracle, 50 instances", || {
        let start = Instant::now();
        let f_max = 4096;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for i in 0..50 {
            let f = if i % 2 == 0 { 3 } else { 1 };
            let stride = if i % 5 == 0 { 2 } else { 1 };
            let side = [4usize, 8, 16][i % 3];
            let side = if stride == 2 && side == 4 { 8 } else { side };
            let c_i = rng.gen_range(1..=16);
            let c_o = rng.gen_range(1..=16);
            let layout_in = PackLayout::new(f_max, c_i, side).map_err(|e| e.to_string())?;
            let layout_out =
                PackLayout::new(f_max, c_o, side / stride).map_err(|e| e.to_string())?;
            let t = random_tensor(&mut rng, c_i, side, side);
            let k = random_kernel(&mut rng, c_o, c_i, f);

            let mut ctx = ctx(f_max);
            let ct = ctx.fresh_ct(pack(&t, &layout_in).map_err(|e| e.to_string())?).unwrap();
            let kernels = encode_kernels_traditional(&k, &layout_in).map_err(|e| e.to_string())?;
            let out = conv_traditional(&mut ctx, &ct, &kernels, f, &layout_in, &layout_out, stride)
                .map_err(|e| e.to_string())?;
            let got = unpack(&out.slots, &layout_out).map_err(|e| e.to_string())?;
            let want = oracle::conv2d_ref(&t, &k, stride).map_err(|e| e.to_string())?;
            let diff = got.max_abs_diff(&want);
            ensure!(
                diff <= 1e-9,
                "instance {i} (f={f}, stride={stride}, {c_i}->{c_o}, side {side}): diff {diff:e}"
            );
        }
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(elapsed < 60.0, "took {elapsed:.1}s, budget 60s");
        Ok(())
    });
}

#[test]
fn operation_counts_match_closed_forms() {
    check("rotation/mult counts across (f, c_i, c_o) grid and DSC ratio", || {
        let f_max = 4096;
        let side = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for &f in &[1usize, 3] {
            for &c_i in &[1usize, 4, 16] {
                for &c_o in &[1usize, 4, 16, 64] {
                    let layout_in = PackLayout::new(f_max, c_i, side).map_err(|e| e.to_string())?;
                    let layout_out =
                        PackLayout::new(f_max, c_o, side).map_err(|e| e.to_string())?;
                    let t = random_tensor(&mut rng, c_i, side, side);

                    // traditional
                    let mut cx = ctx(f_max);
                    let ct = cx.fresh_ct(pack(&t, &layout_in).unwrap()).unwrap();
                    let k = random_kernel(&mut rng, c_o, c_i, f);
                    let kernels =
                        encode_kernels_traditional(&k, &layout_in).map_err(|e| e.to_string())?;
                    let before = ct.level;
                    let out =
                        conv_traditional(&mut cx, &ct, &kernels, f, &layout_in, &layout_out, 1)
                            .map_err(|e| e.to_string())?;
                    let rot = cx.ledger.count(OpKind::Rotate);
                    let mul = cx.ledger.count(OpKind::MulPt);
                    let p = predict_counts(ConvKind::Traditional, f, c_i, c_o);
                    let (erot, emul, edepth) =
                        oracle::expected_counts(ConvKind::Traditional, f, c_i, c_o);
                    ensure!(
                        (p.rotations, p.mults, p.depth) == (erot, emul, edepth),
                        "traditional closed forms disagree at f={f}, {c_i}->{c_o}"
                    );
                    ensure!(
                        rot == erot && mul == emul && before - out.level == 2,
                        "traditional measured ({rot}, {mul}) != expected ({erot}, {emul}) at f={f}, {c_i}->{c_o}"
                    );

                    // depthwise-separable (unfused: depthwise then pointwise)
                    let mut cx = ctx(f_max);
                    let ct = cx.fresh_ct(pack(&t, &layout_in).unwrap()).unwrap();
                    let mut dw = DepthwiseKernel::zeros(c_i, f);
                    for v in dw.data.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                    let pw = random_pointwise(&mut rng, c_o, c_i);
                    let taps = encode_depthwise(&dw, &layout_in).map_err(|e| e.to_string())?;
                    let mid = conv_depthwise(&mut cx, &ct, &taps, f, &layout_in)
                        .map_err(|e| e.to_string())?;
                    let out =
                        conv_pointwise_unfused(&mut cx, &mid, &pw, &layout_in, &layout_out, 1)
                            .map_err(|e| e.to_string())?;
                    let rot = cx.ledger.count(OpKind::Rotate);
                    let mul = cx.ledger.count(OpKind::MulPt);
                    let (erot, emul, edepth) =
                        oracle::expected_counts(ConvKind::DepthwiseSeparable, f, c_i, c_o);
                    let p = predict_counts(ConvKind::DepthwiseSeparable, f, c_i, c_o);
                    ensure!(
                        (p.rotations, p.mults, p.depth) == (erot, emul, edepth),
                        "DSC closed forms disagree at f={f}, {c_i}->{c_o}"
                    );
                    ensure!(
                        rot == erot && mul == emul && before - out.level == edepth,
                        "DSC measured ({rot}, {mul}) != expected ({erot}, {emul}) at f={f}, {c_i}->{c_o}"
                    );
                }
            }
        }
        let dsc = predict_counts(ConvKind::DepthwiseSeparable, 3, 64, 64);
        let trad = predict_counts(ConvKind::Traditional, 3, 64, 64);
        let ratio = dsc.mults as f64 / trad.mults as f64;
        ensure!(
            (0.18..=0.25).contains(&ratio),
            "DSC/traditional mult ratio {ratio} outside [0.18, 0.25]"
        );
        Ok(())
    });
}

#[test]
fn plaintext_kernel_counts_of_resnet20() {
    check("plaintext-kernel counts of the full-scale network", || {
        let report = slotpack::netplan::plaintext_kernel_report(&NetConfig::resnet20());
        ensure!(report.init == 144, "init {} != 144", report.init);
        let s = &report.stages;
        ensure!(s.len() == 3, "expected 3 stages");
        ensure!(s[0].count == 864, "stage 1 {} != 864", s[0].count);
        ensure!(s[1].count == 246, "stage 2 {} != 246", s[1].count);
        ensure!(s[1].downsample == 32, "stage 2 downsample {} != 32", s[1].downsample);
        ensure!(s[2].count == 438, "stage 3 {} != 438", s[2].count);
        ensure!(s[2].downsample == 64, "stage 3 downsample {} != 64", s[2].downsample);
        ensure!(
            s[2].alternative_count == 3456,
            "stage 3 traditional alternative {} != 3456",
            s[2].alternative_count
        );
        ensure!(
            s[1].alternative_count == 1728,
            "stage 2 traditional alternative {} != 1728",
            s[1].alternative_count
        );
        ensure!(
            report.note.contains("1728") && report.note.contains("1782"),
            "note does not document the 1728 vs 1782 discrepancy"
        );
        Ok(())
    });
}

#[test]
fn fused_convbn_equals_unfused_and_saves_a_level() {
    check("fused ConvBN vs unfused, 100 instances, one level saved", || {
        let f_max = 1024;
        let side = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for i in 0..100 {
            let c_i = rng.gen_range(1..=16);
            let c_o = rng.gen_range(1..=16);
            let layout_in = PackLayout::new(f_max, c_i, side).map_err(|e| e.to_string())?;
            let layout_out = PackLayout::new(f_max, c_o, side).map_err(|e| e.to_string())?;
            let t = random_tensor(&mut rng, c_i, side, side);
            let pw = random_pointwise(&mut rng, c_o, c_i);
            let bn = random_bn(&mut rng, c_o);

            let mut cx = ctx(f_max);
            let ct = cx.fresh_ct(pack(&t, &layout_in).unwrap()).unwrap();
            let fm = build_fusion(&pw, &bn, &layout_in, &layout_out, 1)
                .map_err(|e| e.to_string())?;
            let fused = convbn_fused(&mut cx, &ct, &fm, &layout_in, &layout_out)
                .map_err(|e| e.to_string())?;
            let unfused = convbn_unfused(&mut cx, &ct, &pw, &bn, &layout_in, &layout_out, 1)
                .map_err(|e| e.to_string())?;

            let diff = fused
                .slots
                .iter()
                .zip(&unfused.slots)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure!(diff <= 1e-9, "instance {i} ({c_i}->{c_o}): slot diff {diff:e}");
            ensure!(
                ct.level - fused.level == 1,
                "fused consumed {} levels, want 1",
                ct.level - fused.level
            );
            ensure!(
                ct.level - unfused.level == 2,
                "unfused consumed {} levels, want 2",
                ct.level - unfused.level
            );
        }
        Ok(())
    });
}

#[test]
fn silu_legendre_projection_is_exact_on_odd_terms_and_optimal() {
    check("SiLU Legendre coefficients and projection optimality", || {
        let approx = PolyApprox::silu_default(5, 1.0, 64).map_err(|e| e.to_string())?;
        let a = &approx.legendre_coeffs;
        ensure!((a[1] - 0.5).abs() <= 1e-12, "a1 {} != 0.5", a[1]);
        ensure!(a[3].abs() <= 1e-12, "a3 {} != 0", a[3]);
        ensure!(a[5].abs() <= 1e-12, "a5 {} != 0", a[5]);

        // independent oracle for the even coefficients: composite Simpson on a
        // fine grid instead of Gauss-Legendre nodes
        for &n in &[0usize, 2, 4] {
            let steps = 20_000;
            let h = 2.0 / steps as f64;
            let g = |u: f64| oracle::silu(u) * legendre_eval(n, u);
            let mut integral = g(-1.0) + g(1.0);
            for i in 1..steps {
                let u = -1.0 + i as f64 * h;
                integral += g(u) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            integral *= h / 3.0;
            let want = (2 * n + 1) as f64 / 2.0 * integral;
            ensure!(
                (a[n] - want).abs() <= 1e-9,
                "a{n} {} vs Simpson oracle {want}",
                a[n]
            );
        }

        // the truncated projection minimizes L2 error over degree-5 polynomials
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for i in 0..1000 {
            let competitor: Vec<f64> = approx
                .monomial_coeffs
                .iter()
                .map(|c| c + rng.gen_range(-0.05..0.05))
                .collect();
            let (l2, _) =
                slotpack::act::approx_error(oracle::silu, &competitor, (-1.0, 1.0), 2000);
            ensure!(
                approx.l2_error <= l2 + 1e-12,
                "competitor {i} beats the projection: {l2} < {}",
                approx.l2_error
            );
        }
        Ok(())
    });
}

#[test]
fn degree5_ciphertext_polynomial_costs_three_levels() {
    check("degree-5 polynomial evaluation: 3 levels, matches plaintext", || {
        let approx = PolyApprox::silu_default(5, 8.0, 64).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut cx = ctx(1024);
        let slots: Vec<f64> = (0..1024).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let ct = cx.fresh_ct(slots.clone()).unwrap();
        let out = eval_poly_ct(&mut cx, &ct, &approx.monomial_coeffs).map_err(|e| e.to_string())?;
        ensure!(
            ct.level - out.level == 3,
            "consumed {} levels, want 3",
            ct.level - out.level
        );
        let diff = out
            .slots
            .iter()
            .zip(&slots)
            .map(|(y, x)| (y - eval_monomial(&approx.monomial_coeffs, *x)).abs())
            .fold(0.0, f64::max);
        ensure!(diff <= 1e-9, "slot diff vs plaintext Horner {diff:e}");
        Ok(())
    });
}

#[test]
fn bootstrap_placement_is_sound_and_deterministic() {
    check("bootstrap placement on full and quarter networks", || {
        for cfg in [NetConfig::resnet20(), NetConfig::resnet20_quarter()] {
            let he = HeParams::new(cfg.f_max, 26, 14).map_err(|e| e.to_string())?;
            let plan = build_resnet(&cfg).map_err(|e| e.to_string())?;
            let placed = place_bootstraps(&plan, &he).map_err(|e| e.to_string())?;
            let again = place_bootstraps(&plan, &he).map_err(|e| e.to_string())?;
            let n = bootstrap_count(&placed.ops);
            ensure!(
                n == bootstrap_count(&again.ops),
                "{}: bootstrap count not deterministic",
                cfg.name
            );
            ensure!(n > 0, "{}: expected at least one bootstrap", cfg.name);
            ensure!(placed.ops == again.ops, "{}: placement not deterministic", cfg.name);
        }
        Ok(())
    });
}

#[test]
fn quarter_network_inference_matches_oracle() {
    check("quarter-scale inference vs oracle, 20 inputs, argmax 20/20", || {
        let start = Instant::now();
        let cfg = NetConfig::resnet20_quarter();
        let he = HeParams::new(cfg.f_max, 26, 14).map_err(|e| e.to_string())?;
        let plan = build_resnet(&cfg).map_err(|e| e.to_string())?;
        let plan = place_bootstraps(&plan, &he).map_err(|e| e.to_string())?;
        let weights = random_weights(&cfg, 99);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let inputs: Vec<Tensor3> =
            (0..20).map(|_| random_tensor(&mut rng, 3, 16, 16)).collect();
        let results = run_batch(&plan, &weights, &he, &inputs).map_err(|e| e.to_string())?;
        let mut matches = 0;
        for (i, (t, r)) in inputs.iter().zip(&results).enumerate() {
            let want = oracle::forward_ref(&plan, &weights, t, oracle::ActMode::Poly)
                .map_err(|e| e.to_string())?;
            let diff = r
                .logits
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            ensure!(diff <= 1e-6, "input {i}: logit diff {diff:e}");
            let am = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .unwrap()
            };
            if am(&r.logits) == am(&want) {
                matches += 1;
            }
        }
        ensure!(matches == 20, "argmax agreement {matches}/20");
        let elapsed = start.elapsed().as_secs_f64();
        ensure!(elapsed < 600.0, "took {elapsed:.1}s, budget 600s");
        Ok(())
    });
}

#[test]
fn cost_model_reference_point_and_additivity() {
    check("cost model: reference weights and per-layer additivity", || {
        let mut ledger = OpLedger::new();
        ledger.add(OpKind::Rotate, 2);
        ledger.add(OpKind::Bootstrap, 1);
        let cost = estimate_cost(&ledger, &CostWeights::reference()).map_err(|e| e.to_string())?;
        ensure!((cost - 16.296).abs() <= 1e-9, "2 rotations + 1 bootstrap cost {cost} != 16.296");

        let cfg = NetConfig::resnet20_quarter();
        let he = HeParams::new(cfg.f_max, 26, 14).map_err(|e| e.to_string())?;
        let plan = build_resnet(&cfg).map_err(|e| e.to_string())?;
        let plan = place_bootstraps(&plan, &he).map_err(|e| e.to_string())?;
        let weights = random_weights(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let input = random_tensor(&mut rng, 3, 16, 16);
        let results =
            run_batch(&plan, &weights, &he, std::slice::from_ref(&input)).map_err(|e| e.to_string())?;
        let report = &results[0].report;

        let layer_sum: f64 = report.layers.iter().map(|l| l.seconds).sum();
        ensure!(
            (layer_sum - report.total_seconds).abs() <= 1e-6 * report.total_seconds.max(1.0),
            "layer seconds {layer_sum} do not sum to total {}",
            report.total_seconds
        );
        let merged = report
            .layers
            .iter()
            .fold(OpLedger::new(), |acc, l| acc.merged(&l.ops));
        let as_map = |l: &OpLedger| -> BTreeMap<OpKind, u64> { l.iter().collect() };
        ensure!(
            as_map(&merged) == as_map(&report.total),
            "merged per-layer ledgers disagree with the report total"
        );
        Ok(())
    });
}

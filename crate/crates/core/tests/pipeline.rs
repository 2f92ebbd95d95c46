use half::f16;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use claq::alloc::{
    allocate_outlier_budget, allocate_precision, equivalent_bits_of, plan_fusion, BitPair,
    ColumnPlan, FusionSpec, MatrixProfile, OrSplit, Preset,
};
use claq::outlier::{outlier_ratio, threshold_for_fraction};
use claq::quantizer::{
    compute_hessian, quantize_matrix, quantize_matrix_plain, quantize_model, reconstruction_error,
    QuantOptions,
};
use claq::synthetic::{synthetic_model, FixtureSpec};
use claq::tensor_store::{dequantize_tensor, measure_size, WeightMatrix};

fn matrix(seed: u64, rows: usize, cols: usize, spikes: usize) -> WeightMatrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    for _ in 0..spikes {
        let i = r.random_range(0..data.len());
        data[i] = 40.0 * r.sample::<f64, _>(StandardNormal);
    }
    WeightMatrix::new("w", rows, cols, data).unwrap()
}

fn random_plan(seed: u64, rows: usize, cols: usize) -> ColumnPlan {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut plan = ColumnPlan::uniform(cols, 2);
    for c in 0..cols {
        plan.bits[c] = r.random_range(2..=4);
        plan.reserve_pairs[c] = r.random_range(0..=rows / 2);
    }
    plan
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reserved_and_codebook_values_are_respected(
        seed in any::<u64>(),
        rows in 2usize..24,
        cols in 1usize..10,
        compensate in any::<bool>(),
    ) {
        let w = matrix(seed, rows, cols, 3);
        let plan = random_plan(seed, rows, cols);
        let opts = QuantOptions::default();
        let (t, _) = if compensate {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let calib: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..cols).map(|_| r.sample(StandardNormal)).collect())
                .collect();
            let h = compute_hessian(&calib, cols, 0.01).unwrap();
            quantize_matrix(&w, &plan, &h, &opts).unwrap()
        } else {
            quantize_matrix_plain(&w, &plan, &opts).unwrap()
        };
        let deq = dequantize_tensor(&t);
        let mut per_col = vec![0usize; cols];
        let mut reserved = vec![false; rows * cols];
        for o in t.outliers() {
            let (r, c) = (o.row as usize, o.col as usize);
            per_col[c] += 1;
            reserved[r * cols + c] = true;
            prop_assert_eq!(deq.get(r, c), o.value.to_f64());
        }
        for c in 0..cols {
            prop_assert_eq!(per_col[c], 2 * plan.reserve_pairs[c]);
            prop_assert_eq!(t.codebooks()[c].len(), 1usize << plan.bits[c]);
            let book: Vec<f64> = t.codebooks()[c].iter().map(|v| v.to_f64()).collect();
            for r in 0..rows {
                if !reserved[r * cols + c] {
                    prop_assert!(book.contains(&deq.get(r, c)));
                }
            }
        }
        if !compensate {
            // plain path stores the original values at reserved positions
            for o in t.outliers() {
                let v = w.get(o.row as usize, o.col as usize);
                prop_assert_eq!(o.value, f16::from_f64(v));
            }
        }
    }

    #[test]
    fn plans_respect_budgets(
        seed in any::<u64>(),
        rows in 4usize..64,
        cols in 1usize..80,
        fraction in 0.0f64..=1.0,
        budget in 0.0f64..2.0,
        setting in 1u8..=3,
    ) {
        let w = matrix(seed, rows, cols, cols / 3);
        let p = outlier_ratio(&w, 13.0).unwrap();
        let (bits, sel) = allocate_precision(&p, BitPair::new(4, 2).unwrap(), fraction).unwrap();
        if fraction > 0.0 {
            let expect = threshold_for_fraction(&p, fraction).unwrap();
            prop_assert_eq!(&sel, &expect);
        }
        let mut high: Vec<usize> = (0..cols).filter(|&c| bits[c] == 4).collect();
        let mut chosen = sel.columns.clone();
        high.sort_unstable();
        chosen.sort_unstable();
        prop_assert_eq!(high, chosen);

        let split = OrSplit::setting(setting).unwrap();
        let b = allocate_outlier_budget(&p, rows, budget, split, 0.1).unwrap();
        prop_assert!(b.reserved() <= b.budget_scalars);
        prop_assert!(b.pairs.iter().all(|&k| 2 * k <= rows));
        if b.clamped_pairs == 0 {
            // within each group, counts differ by at most one pair and follow the Outlier Order
            let top = threshold_for_fraction(&p, 0.1).unwrap().columns.len();
            for group in [&p.order[..top], &p.order[top..]] {
                let ks: Vec<usize> = group.iter().map(|&c| b.pairs[c]).collect();
                if let (Some(max), Some(min)) = (ks.iter().max(), ks.iter().min()) {
                    prop_assert!(max - min <= 1);
                }
                prop_assert!(ks.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn plans_are_scale_invariant(seed in any::<u64>(), exp in -8i32..8) {
        let spec = FixtureSpec::heavy_tailed().with_shape(2, 48, 64);
        let model = synthetic_model(&spec, seed).unwrap();
        let factor = 2f64.powi(exp);
        let scaled = claq::tensor_store::ModelWeights::new(
            model.matrices.iter().map(|m| m.scaled(factor).unwrap()).collect(),
            model.metadata.clone(),
        ).unwrap();
        for preset in Preset::ALL {
            let a = plan_fusion(&MatrixProfile::of_model(&model, 13.0).unwrap(), preset.spec()).unwrap();
            let b = plan_fusion(&MatrixProfile::of_model(&scaled, 13.0).unwrap(), preset.spec()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn inverse_factor_matches_dense_inverse() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for dim in [1, 3, 8, 24] {
        let calib: Vec<Vec<f64>> = (0..dim / 2 + 1)
            .map(|_| (0..dim).map(|_| r.sample(StandardNormal)).collect())
            .collect();
        let h = compute_hessian(&calib, dim, 0.01).unwrap();
        let hm = DMatrix::from_fn(dim, dim, |i, j| h.h[(i, j)]);
        for i in 0..dim {
            for j in 0..dim {
                let a = h.h[(i, j)];
                assert!((a - h.h[(j, i)]).abs() <= 1e-8 * a.abs().max(1.0));
            }
        }
        let inv = hm.clone().try_inverse().unwrap();
        let u = DMatrix::from_fn(dim, dim, |i, j| h.inv_factor[(i, j)]);
        let rebuilt = u.transpose() * &u;
        let rel = (&rebuilt - &inv).norm() / inv.norm();
        assert!(rel < 1e-6, "dim {dim}: relative error {rel}");
    }
}

#[test]
fn frobenius_matches_brute_force() {
    let w = matrix(3, 12, 9, 2);
    let plan = random_plan(3, 12, 9);
    let (t, report) = quantize_matrix_plain(&w, &plan, &QuantOptions::default()).unwrap();
    let deq = dequantize_tensor(&t);
    let mut sum = 0.0;
    for r in 0..12 {
        for c in 0..9 {
            sum += (w.get(r, c) - deq.get(r, c)).powi(2);
        }
    }
    assert!((report.frobenius - sum.sqrt()).abs() < 1e-12);
    assert!((report.relative - sum.sqrt() / w.frobenius_norm()).abs() < 1e-12);
    let again = reconstruction_error(&w, &t, None).unwrap();
    assert_eq!(again, report);
}

#[test]
fn lossless_when_columns_have_few_values() {
    let data: Vec<f64> = (0..40).map(|i| [0.5, -1.0, 2.25, 8.0][(i * 7 / 3) % 4]).collect();
    let w = WeightMatrix::new("w", 10, 4, data).unwrap();
    let (_, r) = quantize_matrix_plain(&w, &ColumnPlan::uniform(4, 2), &QuantOptions::default()).unwrap();
    assert_eq!(r.frobenius, 0.0);
    let calib = vec![vec![1.0, 0.5, -0.25, 2.0], vec![0.0, 1.0, 1.0, -1.0]];
    let h = compute_hessian(&calib, 4, 0.01).unwrap();
    let (_, r) = quantize_matrix(&w, &ColumnPlan::uniform(4, 2), &h, &QuantOptions::default()).unwrap();
    assert_eq!(r.frobenius, 0.0);
    assert_eq!(r.proxy_loss, Some(0.0));
}

#[test]
fn preset_plan_matches_packed_size() {
    let model = synthetic_model(&FixtureSpec::heavy_tailed().with_shape(3, 96, 200), 21).unwrap();
    let profiles = MatrixProfile::of_model(&model, 13.0).unwrap();
    for spec in [Preset::P212.spec(), Preset::P323.spec(), FusionSpec::custom(2, 0.0, 0.0)] {
        let alloc = plan_fusion(&profiles, spec).unwrap();
        let (packed, _) = quantize_model(&model, &alloc, None, &QuantOptions::default()).unwrap();
        assert_eq!(measure_size(&packed), equivalent_bits_of(&alloc));
    }
}

#[test]
fn quantization_is_deterministic() {
    let model = synthetic_model(&FixtureSpec::heavy_tailed().with_shape(2, 64, 64), 5).unwrap();
    let alloc = plan_fusion(&MatrixProfile::of_model(&model, 13.0).unwrap(), Preset::P224.spec()).unwrap();
    let a = quantize_model(&model, &alloc, None, &QuantOptions::default()).unwrap();
    let b = quantize_model(&model, &alloc, None, &QuantOptions::default()).unwrap();
    assert_eq!(a, b);
}

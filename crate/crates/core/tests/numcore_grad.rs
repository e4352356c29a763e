//! Every tape primitive against central finite differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sticker_core::numcore::{
    grad_check, GradCheckOptions, Tape, TapeObjective, Tensor, Var, LN_EPS,
};
use sticker_core::Result;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
}

fn check<F>(params: Vec<Tensor>, f: F) -> f64
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..params.len()).map(|i| format!("p{i}")).collect();
    let report = grad_check(
        &mut TapeObjective(f),
        &names,
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.deterministic);
    report.max_rel_error
}

/// Fixed random weights so nonlinear outputs feed a non-trivial scalar.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(x).dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(r, c, &mut rng));
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng)], |t, p| {
        let m = t.matmul(p[0], p[1])?;
        weighted_sum(t, m, 9)
    });
    assert!(err < 1e-6, "{err}");

    let err = check(vec![random(3, 4, &mut rng), random(5, 4, &mut rng)], |t, p| {
        let m = t.matmul_nt(p[0], p[1])?;
        weighted_sum(t, m, 10)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        random(3, 6, &mut rng),
        random(1, 6, &mut rng),
        random(1, 6, &mut rng),
    ];
    let err = check(params, |t, p| {
        let y = t.layer_norm(p[0], p[1], p[2], LN_EPS)?;
        weighted_sum(t, y, 3)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cosine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let err = check(vec![random(1, 5, &mut rng), random(1, 5, &mut rng)], |t, p| {
        let c = t.cosine_rows(p[0], p[1])?;
        Ok(t.sum(c))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn quadratic_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let err = check(vec![random(2, 3, &mut rng)], |t, p| {
        let sq = t.mul(p[0], p[0])?;
        let s = t.sum(sq);
        Ok(t.scale(s, 0.5))
    });
    assert!(err < 1e-9, "{err}");
}

#[test]
fn softmax_cross_entropy_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target = vec![0.1, 0.6, 0.05, 0.05, 0.1, 0.05, 0.05];
    let params = vec![random(1, 8, &mut rng), random(8, 7, &mut rng), random(1, 7, &mut rng)];
    let err = check(params, move |t, p| {
        let z = t.matmul(p[0], p[1])?;
        let z = t.add_row(z, p[2])?;
        let ls = t.log_softmax_rows(z);
        let tgt = t.constant(Tensor::row_vector(target.clone()));
        let m = t.mul(ls, tgt)?;
        let s = t.sum(m);
        Ok(t.scale(s, -1.0))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn nondeterministic_loss_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut calls = 0u64;
    let params = vec![random(2, 4, &mut rng)];
    let report = grad_check(
        &mut TapeObjective(|t: &mut Tape, p: &[Var]| {
            calls += 1;
            // fresh dropout seed on every call
            let mask = sticker_core::numcore::dropout_mask(2, 4, 0.5, calls)?;
            let d = t.mul_const(p[0], mask)?;
            Ok(t.sum(d))
        }),
        &["x".to_string()],
        &params,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.deterministic);
    assert!(!report.passed(1e-4));
}

/// Applies one primitive selected by `op` to a 3×4 input.
fn apply(t: &mut Tape, op: usize, x: Var, y: Var) -> Result<Var> {
    Ok(match op {
        0 => t.add(x, y)?,
        1 => t.sub(x, y)?,
        2 => t.mul(x, y)?,
        3 => t.exp(x),
        4 => t.sigmoid(x),
        5 => t.tanh(x),
        6 => t.gelu(x),
        7 => t.softmax_rows(x),
        8 => t.log_softmax_rows(x),
        9 => t.layer_norm_rows(x, LN_EPS)?,
        10 => t.normalize_rows(x)?,
        11 => t.transpose(x),
        12 => t.slice_cols(x, 1, 2)?,
        13 => t.slice_rows(x, 1, 2)?,
        14 => t.concat_cols(&[x, y])?,
        15 => t.concat_rows(&[x, y])?,
        16 => t.gather_rows(x, &[2, 0, 2])?,
        17 => t.pick_per_row(x, &[3, 0, 1])?,
        18 => t.row_sums(x),
        19 => t.mean_over_rows(x),
        20 => {
            let c = t.slice_cols(y, 0, 1)?;
            t.mul_col(x, c)?
        }
        21 => {
            let r = t.slice_rows(y, 0, 1)?;
            t.mul_row(x, r)?
        }
        22 => {
            let r = t.slice_rows(y, 0, 1)?;
            t.add_row(x, r)?
        }
        23 => {
            let e = t.exp(x);
            t.ln(e)?
        }
        24 => t.mean(x),
        25 => t.reshape(x, vec![2, 6])?,
        26 => t.cosine_rows(x, y)?,
        _ => unreachable!(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_primitive_matches_finite_differences(op in 0usize..27, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![random(3, 4, &mut rng), random(3, 4, &mut rng)];
        let err = check(params, move |t, p| {
            let y = apply(t, op, p[0], p[1])?;
            weighted_sum(t, y, seed + 1)
        });
        prop_assert!(err < 1e-4, "op {} rel err {}", op, err);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = random(4, 7, &mut rng);
        let x = Tensor::matrix(4, 7, x.data().iter().map(|v| v * scale).collect());
        let xv = t.constant(x);
        let s = t.softmax_rows(xv);
        for i in 0..4 {
            let row = t.value(s).row(i);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

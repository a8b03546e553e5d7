//! Dense arithmetic, the scalar functions shared by every stage, the
//! optimizer and the finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod optim;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use matrix::{argmax, axpy, dot, norm, squared_distance, RealMatrix};
pub use optim::{lr_at, sgd_step, ParamStore, SgdConfig};

use crate::error::{contract, domain, Result};

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!(
            "cosine of vectors with widths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(domain("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(domain("softmax of non-finite input"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `log(Σ exp(v))`, stable.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-3.0, 0.0, 17.5] {
            for p in softmax(&[c, c, c]).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            v in prop::collection::vec(-30.0f64..30.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_is_scale_invariant_and_symmetric(
            a in prop::collection::vec(-5.0f64..5.0, 3),
            b in prop::collection::vec(-5.0f64..5.0, 3),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let c = cosine_similarity(&a, &b).unwrap();
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            prop_assert!((cosine_similarity(&ka, &b).unwrap() - c).abs() <= 1e-12);
            prop_assert_eq!(cosine_similarity(&b, &a).unwrap(), c);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}

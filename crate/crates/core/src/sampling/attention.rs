//! Attention variants on plain `[n, d]` matrices and the guidance mix.

use crate::diffusion::unet::attention;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor};

fn check<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    let ok = q.ndim() == 2
        && k.ndim() == 2
        && v.ndim() == 2
        && q.shape()[1] == k.shape()[1]
        && k.shape()[0] == v.shape()[0];
    if !ok {
        return Err(Error::shape(format!(
            "attention with Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

fn run<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, hard: bool) -> Result<Tensor<T>> {
    check(q, k, v)?;
    let mut tape = Tape::<T>::inference();
    let lift = |tape: &mut Tape<T>, t: &Tensor<T>| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(&s).map(|t| tape.constant(t))
    };
    let (qv, kv, vv) = (
        lift(&mut tape, q)?,
        lift(&mut tape, k)?,
        lift(&mut tape, v)?,
    );
    let out = attention(&mut tape, qv, kv, vv, hard)?;
    tape.value(out).reshape(&[q.shape()[0], v.shape()[1]])
}

/// `softmax(Q·K_refᵀ/√d)·V_ref` for queries from the current view.
pub fn cross_frame_attention<T: Float>(
    q: &Tensor<T>,
    k_ref: &Tensor<T>,
    v_ref: &Tensor<T>,
) -> Result<Tensor<T>> {
    run(q, k_ref, v_ref, false)
}

/// Each output row is the `V_ref` row whose key scores highest against the
/// query; ties go to the lowest key index.
pub fn hard_attention<T: Float>(
    q: &Tensor<T>,
    k_ref: &Tensor<T>,
    v_ref: &Tensor<T>,
) -> Result<Tensor<T>> {
    run(q, k_ref, v_ref, true)
}

/// `(1 − γ)·ε_hard + γ·ε_soft`. At `γ = 1` the soft prediction is returned
/// untouched.
pub fn hag_combine<T: Float>(
    eps_soft: &Tensor<T>,
    eps_hard: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    if eps_soft.shape() != eps_hard.shape() {
        return Err(Error::shape(format!(
            "guidance mixes {:?} with {:?}",
            eps_soft.shape(),
            eps_hard.shape()
        )));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "guidance strength {gamma} must be finite and >= 0"
        )));
    }
    if gamma == 1.0 {
        return Ok(eps_soft.clone());
    }
    let (g, h) = (T::from_f64(gamma), T::from_f64(1.0 - gamma));
    eps_soft.zip_map(eps_hard, |s, e| h * e + g * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_normal;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_keys_average_values() {
        let out = cross_frame_attention(
            &m(1, 1, &[0.0]),
            &m(2, 1, &[1.0, -1.0]),
            &m(2, 1, &[2.0, 4.0]),
        )
        .unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_reference_key_copies_value() {
        let q = seeded_normal::<f64>(&[5, 4], 1).unwrap();
        let k = seeded_normal::<f64>(&[1, 4], 2).unwrap();
        let v = seeded_normal::<f64>(&[1, 3], 3).unwrap();
        let out = cross_frame_attention(&q, &k, &v).unwrap();
        for row in out.data().chunks(3) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn hard_attention_examples() {
        let out = hard_attention(
            &m(1, 1, &[1.0]),
            &m(2, 1, &[0.9, 1.1]),
            &m(2, 1, &[5.0, 7.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[7.0]);
        let out = hard_attention(
            &m(1, 1, &[0.0]),
            &m(3, 1, &[1.0, 2.0, 3.0]),
            &m(3, 1, &[5.0, 6.0, 7.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn mismatched_dims() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        assert!(
            cross_frame_attention(&q, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 2])).is_err()
        );
        assert!(hard_attention(&q, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[5, 2])).is_err());
    }

    #[test]
    fn guidance_examples() {
        let s = Tensor::<f64>::from_vec(&[1], vec![0.2]).unwrap();
        let h = Tensor::<f64>::from_vec(&[1], vec![0.1]).unwrap();
        assert!((hag_combine(&s, &h, 1.5).unwrap().data()[0] - 0.25).abs() < 1e-15);
        assert!(hag_combine(&s, &h, 1.0).unwrap().bit_eq(&s));
        assert!(hag_combine(&s, &h, 0.0).unwrap().bit_eq(&h));
        assert!(hag_combine(&s, &h, -0.1).is_err());
        assert!(hag_combine(&s, &Tensor::zeros(&[2]), 1.0).is_err());
    }
}

use super::Matrix;
use crate::error::{invalid, shape_err, Result};

const LANES: usize = 8;

/// Inner product with eight interleaved partial sums combined pairwise.
///
/// The summation order depends only on the length, so results are identical
/// on every target while the loop still vectorizes.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; LANES];
    let chunks = a.len() / LANES;
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s4 = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (s4[0] + s4[2]) + (s4[1] + s4[3]) + tail
}

/// `x·W + b` for a `(rows × c_in)` token matrix and `(c_in × c_out)` weight.
pub fn linear(x: &Matrix, weight: &Matrix, bias: &[f32]) -> Result<Matrix> {
    if x.cols() != weight.rows() {
        return Err(shape_err!(
            "linear: input has {} features, weight expects {}",
            x.cols(),
            weight.rows()
        ));
    }
    let c_out = weight.cols();
    if bias.len() != c_out {
        return Err(shape_err!("linear: bias has {} entries for {c_out} outputs", bias.len()));
    }
    let mut out = Matrix::zeros(x.rows(), c_out);
    for (r, dst) in out.data_mut().chunks_mut(c_out.max(1)).enumerate() {
        for (i, &xv) in x.row(r).iter().enumerate() {
            for (d, &wv) in dst.iter_mut().zip(weight.row(i)) {
                *d += xv * wv;
            }
        }
        for (d, &b) in dst.iter_mut().zip(bias) {
            *d += b;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax, in place. Returns the partition sum.
pub fn softmax_in_place(v: &mut [f32]) -> f32 {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    v.iter_mut().for_each(|x| *x *= inv);
    sum
}

pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_examples() {
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(linear(&x, &w, &[1.0, 1.0]).unwrap().data(), &[2.0, 7.0]);

        let x = Matrix::new(3, 2, vec![0.5, -1.0, 2.0, 4.0, 0.0, 1.5]).unwrap();
        assert_eq!(linear(&x, &Matrix::identity(2), &[0.0; 2]).unwrap(), x);

        let zero = Matrix::zeros(3, 2);
        let w = Matrix::new(2, 3, vec![1.0; 6]).unwrap();
        let y = linear(&zero, &w, &[1.0, 2.0, 3.0]).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn linear_shape_errors() {
        let x = Matrix::zeros(1, 3);
        assert!(linear(&x, &Matrix::zeros(2, 2), &[0.0; 2]).is_err());
        assert!(linear(&x, &Matrix::zeros(3, 2), &[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[1.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[0.0, 3f32.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-6 && (p[1] - 0.75).abs() < 1e-6);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn dot_matches_sequential_within_rounding() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.11).cos()).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        assert!((f64::from(dot(&a, &b)) - seq).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            ticks in prop::collection::vec(-1280i32..1280, 1..64),
            shift in -50i32..50,
        ) {
            // logits on a 1/64 grid so that adding an integer shift is exact
            let v: Vec<f32> = ticks.iter().map(|&t| t as f32 / 64.0).collect();
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f32> = v.iter().map(|x| x + shift as f32).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
            }
        }
    }
}

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

fn check_affine(c: usize, gamma: &[f32], beta: &[f32]) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!(
            "affine parameters have {}/{} entries for {c} channels",
            gamma.len(),
            beta.len()
        ));
    }
    Ok(())
}

/// Two-pass mean and population variance in f64.
fn moments(values: impl Iterator<Item = f32> + Clone) -> (f64, f64) {
    let (mut sum, mut count) = (0f64, 0usize);
    for v in values.clone() {
        sum += f64::from(v);
        count += 1;
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count as f64;
    (mean, var)
}

/// Zero-variance groups normalize to 0 before the affine.
fn inv_std(var: f64, eps: f64) -> f64 {
    if var == 0.0 {
        0.0
    } else {
        1.0 / (var + eps).sqrt()
    }
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &[f32], beta: &[f32], eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if groups == 0 {
        return Err(invalid!("group count must be >= 1"));
    }
    if c % groups != 0 {
        return Err(shape_err!("{c} channels are not divisible into {groups} groups"));
    }
    check_affine(c, gamma, beta)?;
    let per = c / groups;
    let hw = h * w;
    let mut out = x.clone();
    let data = out.data_mut();
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * per) * hw;
            let span = &x.data()[start..start + per * hw];
            let (mean, var) = moments(span.iter().copied());
            let scale = inv_std(var, eps);
            for ci in 0..per {
                let ch = g * per + ci;
                let (gm, bt) = (f64::from(gamma[ch]), f64::from(beta[ch]));
                let off = start + ci * hw;
                for v in &mut data[off..off + hw] {
                    *v = ((f64::from(*v) - mean) * scale * gm + bt) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Normalizes across channels independently at every `(n, h, w)`.
pub fn layer_norm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    check_affine(c, gamma, beta)?;
    let hw = h * w;
    let mut out = x.clone();
    let src = x.data();
    let data = out.data_mut();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let column = (0..c).map(|ch| src[base + ch * hw + p]);
            let (mean, var) = moments(column);
            let scale = inv_std(var, eps);
            for ch in 0..c {
                let i = base + ch * hw + p;
                data[i] = ((f64::from(src[i]) - mean) * scale * f64::from(gamma[ch])
                    + f64::from(beta[ch])) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Vec<f32> {
        vec![1.0; c]
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full([1, 4, 3, 3], 5.0);
        let y = group_norm(&x, 2, &ones(4), &[0.0; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = layer_norm(&x, &ones(4), &[0.0; 4], 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_shift() {
        let x = Tensor::randn([2, 4, 3, 3], 1, 0);
        let y = group_norm(&x, 4, &[0.0; 4], &[1.5; 4], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn per_group_standardization() {
        let x = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, 5.0, 9.0]).unwrap();
        let y = group_norm(&x, 2, &ones(2), &[0.0; 2], 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn indivisible_groups() {
        let x = Tensor::zeros([1, 3, 2, 2]);
        assert!(matches!(
            group_norm(&x, 2, &ones(3), &[0.0; 3], 1e-5),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        for a in [0.5f32, 3.0, 100.0] {
            let x = Tensor::new([1, 2, 1, 1], vec![-a, a]).unwrap();
            let y = layer_norm(&x, &ones(2), &[0.0; 2], 0.0).unwrap();
            assert_eq!(y.data(), &[-1.0, 1.0]);
        }
        let x = Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &ones(3), &[0.0; 3], 0.0).unwrap();
        let want = [-1.224745f32, 0.0, 1.224745];
        for (g, e) in y.data().iter().zip(want) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn group_norm_moments() {
        let x = Tensor::randn([2, 8, 5, 5], 9, 1).map(|v| 3.0 * v + 2.0);
        let y = group_norm(&x, 4, &ones(8), &[0.0; 8], 1e-5).unwrap();
        let hw = 25;
        for b in 0..2 {
            for g in 0..4 {
                let start = (b * 8 + g * 2) * hw;
                let (mean, var) = moments(y.data()[start..start + 2 * hw].iter().copied());
                assert!(mean.abs() <= 1e-5);
                assert!((var - 1.0).abs() <= 1e-4);
            }
        }
    }
}

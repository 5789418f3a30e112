//! Stock and resolution-aware down/upsamplers.
//!
//! Both RAD variants and RAU run on the stock sampler weights: only the
//! convolution geometry or interpolation factor changes.

use super::RadVariant;
use crate::error::{invalid, Result};
use crate::tensor::{adaptive_avg_pool, conv2d, interp, ConvSpec, ConvWeights, InterpMode, Tensor};

/// Geometry of the re-parameterized downsampler for factor `alpha`.
///
/// `α = 2` is the stock `C_{3,1,2,1}`; larger factors set `d = α/2`, `p = d`
/// so that `conv_out_size(h) = h/α` for `h` divisible by `α`.
pub fn rad_spec(alpha: usize) -> Result<ConvSpec> {
    match alpha {
        2 => Ok(ConvSpec::DOWNSAMPLE),
        4 => Ok(ConvSpec::new(3, 2, 4, 2)),
        8 => Ok(ConvSpec::new(3, 4, 8, 4)),
        other => Err(invalid!("unsupported downsampling factor {other}")),
    }
}

pub fn vanilla_down(x: &Tensor, weights: &ConvWeights) -> Result<Tensor> {
    conv2d(x, weights, ConvSpec::DOWNSAMPLE)
}

pub fn vanilla_up(x: &Tensor, weights: &ConvWeights, mode: InterpMode) -> Result<Tensor> {
    conv2d(&interp(x, 2.0, mode)?, weights, ConvSpec::SAME3)
}

/// Resolution-aware downsampler: reduces both extents by exactly `alpha`.
pub fn rad(x: &Tensor, alpha: usize, variant: RadVariant, weights: &ConvWeights) -> Result<Tensor> {
    let spec = rad_spec(alpha)?;
    if !x.h().is_multiple_of(alpha) || !x.w().is_multiple_of(alpha) {
        return Err(invalid!(
            "feature {}x{} is not divisible by downsampling factor {alpha}",
            x.h(),
            x.w()
        ));
    }
    match variant {
        RadVariant::ReparamConv => conv2d(x, weights, spec),
        RadVariant::ConvThenPool => {
            let y = conv2d(x, weights, ConvSpec::DOWNSAMPLE)?;
            let k = alpha / 2;
            adaptive_avg_pool(&y, y.h() / k, y.w() / k)
        }
    }
}

/// Resolution-aware upsampler: interpolates by `beta`, then the stock 3×3 conv.
pub fn rau(x: &Tensor, beta: usize, weights: &ConvWeights, mode: InterpMode) -> Result<Tensor> {
    if beta < 2 {
        return Err(invalid!("upsampling factor must be >= 2, got {beta}"));
    }
    conv2d(&interp(x, beta as f64, mode)?, weights, ConvSpec::SAME3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(c_out: usize, c_in: usize, seed: u64) -> ConvWeights {
        let fan = (c_in * 9) as f32;
        ConvWeights::new(
            Tensor::new(
                [c_out, c_in, 3, 3],
                crate::rng::uniform(seed, 0, c_out * c_in * 9, 1.0 / fan.sqrt()),
            )
            .unwrap(),
            crate::rng::uniform(seed, 1, c_out, 0.1),
        )
        .unwrap()
    }

    #[test]
    fn rad_factor_four_shapes() {
        let x = Tensor::randn([1, 2, 128, 128], 1, 0);
        let w = weights(3, 2, 2);
        let a = rad(&x, 4, RadVariant::ReparamConv, &w).unwrap();
        assert_eq!(a.shape(), [1, 3, 32, 32]);
        let b = rad(&x, 4, RadVariant::ConvThenPool, &w).unwrap();
        assert_eq!(b.shape(), a.shape());
    }

    #[test]
    fn rad_factor_eight_shape() {
        let x = Tensor::randn([1, 1, 64, 32], 1, 0);
        let y = rad(&x, 8, RadVariant::ReparamConv, &weights(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), [1, 1, 8, 4]);
    }

    #[test]
    fn rad_factor_two_is_stock_downsampler() {
        let x = Tensor::randn([2, 3, 16, 16], 4, 0);
        let w = weights(3, 3, 5);
        let stock = vanilla_down(&x, &w).unwrap();
        assert_eq!(rad(&x, 2, RadVariant::ReparamConv, &w).unwrap(), stock);
        assert_eq!(rad(&x, 2, RadVariant::ConvThenPool, &w).unwrap(), stock);
    }

    #[test]
    fn rau_factor_four_shape_and_stock_equivalence() {
        let x = Tensor::randn([1, 2, 32, 32], 6, 0);
        let w = weights(2, 2, 7);
        assert_eq!(
            rau(&x, 4, &w, InterpMode::Bilinear).unwrap().shape(),
            [1, 2, 128, 128]
        );
        for mode in [InterpMode::Bilinear, InterpMode::Nearest] {
            assert_eq!(rau(&x, 2, &w, mode).unwrap(), vanilla_up(&x, &w, mode).unwrap());
        }
    }

    #[test]
    fn rau_preserves_constants_with_identity_kernel() {
        let c = 3;
        let mut k = vec![0f32; c * c * 9];
        for i in 0..c {
            k[(i * c + i) * 9 + 4] = 1.0;
        }
        let w = ConvWeights::new(Tensor::new([c, c, 3, 3], k).unwrap(), vec![0.0; c]).unwrap();
        let x = Tensor::full([1, c, 8, 8], 0.625);
        let y = rau(&x, 4, &w, InterpMode::Bilinear).unwrap();
        assert_eq!(y.shape(), [1, c, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn unsupported_factors() {
        let x = Tensor::zeros([1, 1, 24, 24]);
        let w = weights(1, 1, 0);
        assert!(matches!(rad(&x, 3, RadVariant::ReparamConv, &w), Err(crate::Error::InvalidSpec(_))));
        assert!(rad(&x, 16, RadVariant::ReparamConv, &w).is_err());
        let x = Tensor::zeros([1, 1, 12, 12]);
        assert!(rad(&x, 8, RadVariant::ReparamConv, &w).is_err());
        assert!(rau(&x, 1, &w, InterpMode::Bilinear).is_err());
    }
}

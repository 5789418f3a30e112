use rayon::prelude::*;

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Square convolution parameters: kernel extent, zero padding, stride, dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub k: usize,
    pub p: usize,
    pub s: usize,
    pub d: usize,
}

impl ConvSpec {
    pub const fn new(k: usize, p: usize, s: usize, d: usize) -> Self {
        Self { k, p, s, d }
    }

    /// `C_{3,1,2,1}`: the stock U-Net downsampler.
    pub const DOWNSAMPLE: Self = Self::new(3, 1, 2, 1);
    /// `C_{3,1,1,1}`: size-preserving 3×3.
    pub const SAME3: Self = Self::new(3, 1, 1, 1);
    /// `C_{1,0,1,1}`: pointwise.
    pub const POINTWISE: Self = Self::new(1, 0, 1, 1);

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.s == 0 || self.d == 0 {
            return Err(invalid!("conv spec {self:?}: k, s and d must be >= 1"));
        }
        Ok(())
    }
}

/// `floor((in + 2p - d(k-1) - 1) / s) + 1`.
pub fn conv_out_size(in_extent: usize, spec: ConvSpec) -> Result<usize> {
    spec.validate()?;
    if in_extent == 0 {
        return Err(invalid!("input extent must be >= 1"));
    }
    let span = (spec.d * (spec.k - 1) + 1) as i64;
    let numer = in_extent as i64 + 2 * spec.p as i64 - span;
    if numer < 0 {
        return Err(invalid!(
            "conv spec {spec:?} produces an empty output for extent {in_extent}"
        ));
    }
    Ok((numer / spec.s as i64) as usize + 1)
}

/// Kernel `(c_out, c_in, k, k)` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        let [c_out, _, kh, kw] = weight.shape();
        if kh != kw {
            return Err(shape_err!("kernel must be square, got {kh}x{kw}"));
        }
        if bias.len() != c_out {
            return Err(shape_err!(
                "bias has {} entries for {c_out} output channels",
                bias.len()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    pub fn c_in(&self) -> usize {
        self.weight.c()
    }

    pub fn k(&self) -> usize {
        self.weight.h()
    }
}

/// Output positions `o` in `[lo, hi)` whose tap `o·s - p + off` lands inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, s: usize, p: usize, off: usize) -> (usize, usize) {
    let shift = off as i64 - p as i64;
    // o*s + shift >= 0
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(s)
    };
    // o*s + shift <= extent - 1
    let max_num = extent as i64 - 1 - shift;
    let hi = if max_num < 0 {
        0
    } else {
        (max_num as usize / s + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Direct cross-correlation with zero padding, plus bias.
///
/// Per output element the products are summed over input channel, then kernel
/// row, then kernel column (innermost), and the bias is added last.
pub fn conv2d(x: &Tensor, weights: &ConvWeights, spec: ConvSpec) -> Result<Tensor> {
    if weights.k() != spec.k {
        return Err(shape_err!(
            "kernel extent {} does not match spec k={}",
            weights.k(),
            spec.k
        ));
    }
    if x.c() != weights.c_in() {
        return Err(shape_err!(
            "input has {} channels, kernel expects {}",
            x.c(),
            weights.c_in()
        ));
    }
    let [n, c_in, h, w] = x.shape();
    let oh = conv_out_size(h, spec)?;
    let ow = conv_out_size(w, spec)?;
    let c_out = weights.c_out();
    let k = spec.k;
    let kernel = weights.weight.data();

    let col_ranges: Vec<(usize, usize)> = (0..k)
        .map(|kx| valid_range(ow, w, spec.s, spec.p, kx * spec.d))
        .collect();
    let row_ranges: Vec<(usize, usize)> = (0..k)
        .map(|ky| valid_range(oh, h, spec.s, spec.p, ky * spec.d))
        .collect();

    let mut out = vec![0f32; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let b = plane_idx / c_out;
            let co = plane_idx % c_out;
            for ci in 0..c_in {
                let src = x.plane(b, ci);
                let kbase = (co * c_in + ci) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = row_ranges[ky];
                    for kx in 0..k {
                        let wv = kernel[kbase + ky * k + kx];
                        let (ox0, ox1) = col_ranges[kx];
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * spec.s + ky * spec.d - spec.p;
                            let ix0 = ox0 * spec.s + kx * spec.d - spec.p;
                            let row = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * ow + ox0..oy * ow + ox1];
                            if spec.s == 1 {
                                let srow = &row[ix0..ix0 + drow.len()];
                                for (d, &s) in drow.iter_mut().zip(srow) {
                                    *d += wv * s;
                                }
                            } else {
                                for (j, d) in drow.iter_mut().enumerate() {
                                    *d += wv * row[ix0 + j * spec.s];
                                }
                            }
                        }
                    }
                }
            }
            let bias = weights.bias[co];
            dst.iter_mut().for_each(|v| *v += bias);
        });
    Tensor::new([n, c_out, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones_kernel(c_out: usize, c_in: usize, k: usize) -> ConvWeights {
        ConvWeights::new(Tensor::full([c_out, c_in, k, k], 1.0), vec![0.0; c_out]).unwrap()
    }

    #[test]
    fn out_size_examples() {
        assert_eq!(conv_out_size(128, ConvSpec::new(3, 2, 4, 2)).unwrap(), 32);
        assert_eq!(conv_out_size(64, ConvSpec::DOWNSAMPLE).unwrap(), 32);
        for h in [1, 7, 64, 128] {
            assert_eq!(conv_out_size(h, ConvSpec::SAME3).unwrap(), h);
        }
    }

    #[test]
    fn out_size_rejects_empty_output() {
        assert!(conv_out_size(1, ConvSpec::new(3, 0, 1, 1)).is_err());
        assert!(conv_out_size(2, ConvSpec::new(3, 0, 1, 2)).is_err());
        assert!(conv_out_size(8, ConvSpec::new(3, 1, 0, 1)).is_err());
        assert!(conv_out_size(0, ConvSpec::SAME3).is_err());
    }

    #[test]
    fn double_downsample_quarters_even_extents() {
        for h in (4..=96).step_by(2) {
            let once = conv_out_size(h, ConvSpec::DOWNSAMPLE).unwrap();
            assert_eq!(once, h / 2);
            if h % 4 == 0 {
                assert_eq!(conv_out_size(once, ConvSpec::DOWNSAMPLE).unwrap(), h / 4);
            }
        }
    }

    #[test]
    fn full_overlap_center() {
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &ones_kernel(1, 1, 3), ConvSpec::SAME3).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn scalar_case() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
        let wts = ConvWeights::new(Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap(), vec![0.5]).unwrap();
        let y = conv2d(&x, &wts, ConvSpec::POINTWISE).unwrap();
        assert_eq!(y.data(), &[6.5]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let err = conv2d(&x, &ones_kernel(1, 3, 3), ConvSpec::SAME3).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn kernel_extent_mismatch() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(conv2d(&x, &ones_kernel(1, 1, 3), ConvSpec::POINTWISE).is_err());
    }

    #[test]
    fn invalid_spec_surfaces() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        let err = conv2d(&x, &ones_kernel(1, 1, 3), ConvSpec::new(3, 0, 1, 1)).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidSpec(_)));
    }
}

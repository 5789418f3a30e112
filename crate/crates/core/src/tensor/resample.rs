use super::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

fn target_extent(extent: usize, factor: f64) -> Result<usize> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(invalid!("interpolation factor must be positive, got {factor}"));
    }
    let t = extent as f64 * factor;
    let r = t.round();
    if (t - r).abs() > 1e-9 || r < 1.0 {
        return Err(invalid!(
            "factor {factor} maps extent {extent} to non-integral or empty {t}"
        ));
    }
    Ok(r as usize)
}

/// Per output index: `(i0, i1, frac)` with half-pixel centres, clamped to the edge.
fn bilinear_taps(out: usize, input: usize, factor: f64) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

fn nearest_taps(out: usize, input: usize, factor: f64) -> Vec<usize> {
    (0..out)
        .map(|o| (((o as f64 + 0.5) / factor).floor() as usize).min(input - 1))
        .collect()
}

/// Resizes both spatial axes by `factor`.
pub fn interp(x: &Tensor, factor: f64, mode: InterpMode) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let oh = target_extent(h, factor)?;
    let ow = target_extent(w, factor)?;
    if oh == h && ow == w {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    match mode {
        InterpMode::Nearest => {
            let rows = nearest_taps(oh, h, factor);
            let cols = nearest_taps(ow, w, factor);
            for b in 0..n {
                for ch in 0..c {
                    let src = x.plane(b, ch);
                    for &iy in &rows {
                        out.extend(cols.iter().map(|&ix| src[iy * w + ix]));
                    }
                }
            }
        }
        InterpMode::Bilinear => {
            let rows = bilinear_taps(oh, h, factor);
            let cols = bilinear_taps(ow, w, factor);
            for b in 0..n {
                for ch in 0..c {
                    let src = x.plane(b, ch);
                    for &(y0, y1, fy) in &rows {
                        for &(x0, x1, fx) in &cols {
                            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                            out.push(top * (1.0 - fy) + bot * fy);
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

fn pool_bounds(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

/// Mean over the adaptive window `[floor(i·h/oh), ceil((i+1)·h/oh))` per axis.
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(invalid!(
            "adaptive pool target {out_h}x{out_w} must be within 1..={h}x{w}"
        ));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for i in 0..out_h {
                let (y0, y1) = pool_bounds(i, h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = pool_bounds(j, w, out_w);
                    let mut acc = 0f32;
                    for y in y0..y1 {
                        for v in &src[y * w + x0..y * w + x1] {
                            acc += v;
                        }
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f32);
                }
            }
        }
    }
    Tensor::new([n, c, out_h, out_w], out)
}

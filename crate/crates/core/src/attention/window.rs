use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Geometry needed to undo a [`window_partition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: (usize, usize),
    pub shift: (usize, usize),
}

impl WindowLayout {
    pub fn rows(&self) -> usize {
        self.h / self.window.0
    }

    pub fn cols(&self) -> usize {
        self.w / self.window.1
    }

    pub fn windows_per_sample(&self) -> usize {
        self.rows() * self.cols()
    }
}

fn check(h: usize, w: usize, window: (usize, usize)) -> Result<()> {
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
        return Err(shape_err!(
            "feature {h}x{w} is not divisible into {wh}x{ww} windows"
        ));
    }
    Ok(())
}

/// Rolls `x` by `(-sh, -sw)` and tiles it into non-overlapping windows.
///
/// The result stacks windows on the batch axis in `(sample, window_row,
/// window_col)` order, each window of shape `(c, wh, ww)`.
pub fn window_partition(
    x: &Tensor,
    window: (usize, usize),
    shift: (usize, usize),
) -> Result<(Tensor, WindowLayout)> {
    let [n, c, h, w] = x.shape();
    check(h, w, window)?;
    let (wh, ww) = window;
    let layout = WindowLayout {
        batch: n,
        channels: c,
        h,
        w,
        window,
        shift,
    };
    let (sh, sw) = (shift.0 % h, shift.1 % w);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for wy in 0..layout.rows() {
            for wx in 0..layout.cols() {
                for ch in 0..c {
                    let plane = x.plane(b, ch);
                    for y in 0..wh {
                        let sy = (wy * wh + y + sh) % h;
                        let row = &plane[sy * w..(sy + 1) * w];
                        out.extend((0..ww).map(|xx| row[(wx * ww + xx + sw) % w]));
                    }
                }
            }
        }
    }
    let windows = Tensor::new([n * layout.windows_per_sample(), c, wh, ww], out)?;
    Ok((windows, layout))
}

/// Exact inverse of [`window_partition`], including the reverse roll.
pub fn window_merge(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let (wh, ww) = layout.window;
    check(layout.h, layout.w, layout.window)?;
    let expect = [
        layout.batch * layout.windows_per_sample(),
        layout.channels,
        wh,
        ww,
    ];
    if windows.shape() != expect {
        return Err(shape_err!(
            "window stack {:?} does not match layout {:?}",
            windows.shape(),
            expect
        ));
    }
    let (h, w, c) = (layout.h, layout.w, layout.channels);
    let (sh, sw) = (layout.shift.0 % h, layout.shift.1 % w);
    let mut out = Tensor::zeros([layout.batch, c, h, w]);
    let nwin = layout.windows_per_sample();
    let data = out.data_mut();
    for b in 0..layout.batch {
        for wi in 0..nwin {
            let (wy, wx) = (wi / layout.cols(), wi % layout.cols());
            for ch in 0..c {
                let src = windows.plane(b * nwin + wi, ch);
                let base = (b * c + ch) * h * w;
                for y in 0..wh {
                    let dy = (wy * wh + y + sh) % h;
                    for xx in 0..ww {
                        let dx = (wx * ww + xx + sw) % w;
                        data[base + dy * w + dx] = src[y * ww + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

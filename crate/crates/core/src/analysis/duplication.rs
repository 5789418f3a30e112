use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Normalized cross-correlation of a map with its cyclic shift by `(dy, dx)`.
///
/// A cyclic shift preserves mean and variance, so one variance suffices.
fn shifted_correlation(map: &[f64], h: usize, w: usize, dy: usize, dx: usize) -> f64 {
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    let var: f64 = map.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let mut cov = 0.0;
    for y in 0..h {
        for x in 0..w {
            let s = ((y + dy) % h) * w + (x + dx) % w;
            cov += (map[y * w + x] - mean) * (map[s] - mean);
        }
    }
    cov / var
}

/// Half-period self-similarity of the channel-mean map, in `[0, 1]`.
///
/// Takes the largest correlation over offsets `(h/2, 0)`, `(h/2, w/2)` and
/// `(0, w/2)`, averaged over the batch. Constant maps score 0.
pub fn duplication_score(feature: &Tensor) -> Result<f64> {
    let [n, _, h, w] = feature.shape();
    if h < 4 || w < 4 {
        return Err(invalid!("duplication score needs h, w >= 4, got {h}x{w}"));
    }
    let mean = feature.channel_mean();
    let offsets = [(h / 2, 0), (h / 2, w / 2), (0, w / 2)];
    let total: f64 = (0..n)
        .map(|b| {
            let map: Vec<f64> = mean.plane(b, 0).iter().map(|&v| f64::from(v)).collect();
            offsets
                .iter()
                .map(|&(dy, dx)| shifted_correlation(&map, h, w, dy, dx))
                .fold(f64::NEG_INFINITY, f64::max)
                .clamp(0.0, 1.0)
        })
        .sum();
    Ok(total / n as f64)
}

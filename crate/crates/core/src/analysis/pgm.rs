use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// How a multi-channel feature becomes one grayscale map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelReduce {
    Mean,
    Single(usize),
}

/// Decoded 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// The `h × w` map of sample 0 after channel reduction.
pub fn reduce_channels(feature: &Tensor, reduce: ChannelReduce) -> Result<Vec<f32>> {
    if feature.is_empty() {
        return Err(invalid!("cannot export an empty feature"));
    }
    match reduce {
        ChannelReduce::Mean => Ok(feature.channel_mean().plane(0, 0).to_vec()),
        ChannelReduce::Single(c) if c < feature.c() => Ok(feature.plane(0, c).to_vec()),
        ChannelReduce::Single(c) => Err(invalid!("channel {c} out of range for {} channels", feature.c())),
    }
}

/// Binary P5 bytes for a map, min-max scaled to `0..=255` with half-up rounding.
/// Constant maps become mid-gray 128.
pub fn encode_pgm(map: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if map.len() != height * width || map.is_empty() {
        return Err(invalid!("map of {} values is not {height}x{width}", map.len()));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("map contains non-finite values"));
    }
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    if hi == lo {
        out.resize(out.len() + map.len(), 128);
    } else {
        let scale = 255.0 / (hi - lo);
        out.extend(
            map.iter()
                .map(|&v| ((f64::from(v) - lo) * scale + 0.5).floor().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

/// Writes the reduced map of sample 0 as a P5 image.
pub fn dump_feature_pgm(feature: &Tensor, reduce: ChannelReduce, path: &Path) -> Result<()> {
    let map = reduce_channels(feature, reduce)?;
    write_atomic(path, &encode_pgm(&map, feature.h(), feature.w())?)
}

/// Parses a binary P5 image with maxval 255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let fmt = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(fmt("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P5" {
        return Err(fmt("missing P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    if number("maxval")? != 255 {
        return Err(fmt("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| fmt("missing raster"))?;
    if raster.len() != width * height {
        return Err(fmt(&format!(
            "raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    Ok(Pgm {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

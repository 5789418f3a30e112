use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::observe::{AttentionSite, Observer};
use crate::tensor::Matrix;

/// Per-head attention probabilities over an `h × w` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    heads: Vec<Matrix>,
    grid: (usize, usize),
}

impl AttnMap {
    /// Checks that every head is `hw × hw`, non-negative, and row-stochastic within 1e-5.
    pub fn new(heads: Vec<Matrix>, grid: (usize, usize)) -> Result<Self> {
        let t = grid.0 * grid.1;
        if heads.is_empty() || t == 0 {
            return Err(invalid!("attention map needs at least one head and a non-empty grid"));
        }
        for (i, m) in heads.iter().enumerate() {
            if m.rows() != t || m.cols() != t {
                return Err(invalid!(
                    "head {i} is {}x{}, grid {:?} needs {t}x{t}",
                    m.rows(),
                    m.cols(),
                    grid
                ));
            }
            for q in 0..t {
                let row = m.row(q);
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(invalid!("head {i} row {q} has a negative or non-finite entry"));
                }
                let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(invalid!("head {i} row {q} sums to {s}"));
                }
            }
        }
        Ok(Self { heads, grid })
    }

    pub fn heads(&self) -> &[Matrix] {
        &self.heads
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

/// Euclidean distances indexed by `|dy| * w + |dx|`.
fn offset_table(h: usize, w: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(h * w);
    for dy in 0..h {
        for dx in 0..w {
            t.push(((dy * dy + dx * dx) as f64).sqrt());
        }
    }
    t
}

/// `Σ_k p(q,k)·dist(q,k)` for query `q` on a grid `w` wide.
fn row_distance(probs: &[f32], q: usize, w: usize, table: &[f64]) -> f64 {
    let (qy, qx) = (q / w, q % w);
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (ky, kx) = (k / w, k % w);
            f64::from(p) * table[qy.abs_diff(ky) * w + qx.abs_diff(kx)]
        })
        .sum()
}

/// Mean over queries of the probability-weighted key distance, per head, in grid pixels.
pub fn mean_attention_distance(map: &AttnMap) -> Vec<f64> {
    let (h, w) = map.grid;
    let table = offset_table(h, w);
    let t = h * w;
    map.heads
        .iter()
        .map(|m| (0..t).map(|q| row_distance(m.row(q), q, w, &table)).sum::<f64>() / t as f64)
        .collect()
}

/// Streams attention rows into per-`(path, head)` mean distances without
/// materializing maps. Windowed attention is measured in window-local
/// coordinates and averaged over all windows and samples.
#[derive(Debug, Default, Clone)]
pub struct DistanceAccumulator {
    filter: Option<Vec<String>>,
    sums: BTreeMap<String, Vec<(f64, u64)>>,
    tables: BTreeMap<(usize, usize), Vec<f64>>,
}

impl DistanceAccumulator {
    /// Accumulates every attention site.
    pub fn all() -> Self {
        Self::default()
    }

    /// Accumulates only the listed block paths.
    pub fn only(paths: impl IntoIterator<Item = String>) -> Self {
        Self {
            filter: Some(paths.into_iter().collect()),
            ..Self::default()
        }
    }

    /// Per-path mean distance for each head.
    pub fn results(&self) -> BTreeMap<String, Vec<f64>> {
        self.sums
            .iter()
            .map(|(p, heads)| {
                let v = heads
                    .iter()
                    .map(|&(s, n)| if n == 0 { 0.0 } else { s / n as f64 })
                    .collect();
                (p.clone(), v)
            })
            .collect()
    }
}

impl Observer for DistanceAccumulator {
    fn wants_attention(&self, path: &str) -> bool {
        self.filter.as_ref().is_none_or(|f| f.iter().any(|p| p == path))
    }

    fn attention_row(&mut self, site: &AttentionSite<'_>, head: usize, query: usize, probs: &[f32]) {
        let (h, w) = site.grid;
        let table = self.tables.entry(site.grid).or_insert_with(|| offset_table(h, w));
        let d = row_distance(probs, query, w, table);
        let slot = self
            .sums
            .entry(site.path.to_string())
            .or_insert_with(|| vec![(0.0, 0); site.heads]);
        slot[head].0 += d;
        slot[head].1 += 1;
    }
}

/// Materializes full attention maps keyed by `(path, sample, window)`.
///
/// Memory grows with `heads · tokens²` per site; meant for small grids.
#[derive(Debug, Default, Clone)]
pub struct AttentionRecorder {
    maps: BTreeMap<SiteKey, (Vec<Matrix>, (usize, usize))>,
}

/// `(path, sample, window)`.
pub type SiteKey = (String, usize, usize);

impl AttentionRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recorded maps, validated.
    pub fn into_maps(self) -> Result<BTreeMap<SiteKey, AttnMap>> {
        self.maps
            .into_iter()
            .map(|(k, (heads, grid))| Ok((k, AttnMap::new(heads, grid)?)))
            .collect()
    }
}

impl Observer for AttentionRecorder {
    fn wants_attention(&self, _path: &str) -> bool {
        true
    }

    fn attention_row(&mut self, site: &AttentionSite<'_>, head: usize, query: usize, probs: &[f32]) {
        let t = site.grid.0 * site.grid.1;
        let (heads, _) = self
            .maps
            .entry((site.path.to_string(), site.sample, site.window))
            .or_insert_with(|| (vec![Matrix::zeros(t, t); site.heads], site.grid));
        heads[head].data_mut()[query * t..(query + 1) * t].copy_from_slice(probs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(h: usize, w: usize, heads: usize) -> AttnMap {
        let t = h * w;
        let m = Matrix::new(t, t, vec![1.0 / t as f32; t * t]).unwrap();
        AttnMap::new(vec![m; heads], (h, w)).unwrap()
    }

    #[test]
    fn identity_is_zero() {
        let map = AttnMap::new(vec![Matrix::identity(9); 2], (3, 3)).unwrap();
        assert_eq!(mean_attention_distance(&map), vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_two_by_two() {
        let d = mean_attention_distance(&uniform(2, 2, 3));
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        for v in d {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(AttnMap::new(vec![Matrix::zeros(4, 4)], (2, 2)).is_err());
        assert!(AttnMap::new(vec![Matrix::identity(3)], (2, 2)).is_err());
        assert!(AttnMap::new(vec![], (2, 2)).is_err());
        let neg = Matrix::new(2, 2, vec![1.5, -0.5, 0.0, 1.0]).unwrap();
        assert!(AttnMap::new(vec![neg], (1, 2)).is_err());
    }

    fn random_map(h: usize, w: usize, heads: usize, seed: u64) -> AttnMap {
        let t = h * w;
        let ms = (0..heads)
            .map(|i| {
                let mut d = crate::rng::uniform(seed, i as u64, t * t, 1.0);
                for row in d.chunks_mut(t) {
                    row.iter_mut().for_each(|v| *v = v.abs() + 1e-3);
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                Matrix::new(t, t, d).unwrap()
            })
            .collect();
        AttnMap::new(ms, (h, w)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn bounded_and_head_permutation_invariant(h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let map = random_map(h, w, 3, seed);
            let d = mean_attention_distance(&map);
            let max = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt();
            for v in &d {
                prop_assert!(*v >= 0.0 && *v <= max + 1e-9);
            }
            let mut rev = map.heads().to_vec();
            rev.reverse();
            let mut d_rev = mean_attention_distance(&AttnMap::new(rev, (h, w)).unwrap());
            d_rev.reverse();
            prop_assert_eq!(d, d_rev);
        }

        #[test]
        fn transpose_invariant(n in 1usize..5, seed in any::<u64>()) {
            let map = random_map(n, n, 1, seed);
            let t = n * n;
            let tr = |i: usize| (i % n) * n + i / n;
            let src = &map.heads()[0];
            let mut d = vec![0f32; t * t];
            for q in 0..t {
                for k in 0..t {
                    d[tr(q) * t + tr(k)] = src.row(q)[k];
                }
            }
            let flipped = AttnMap::new(vec![Matrix::new(t, t, d).unwrap()], (n, n)).unwrap();
            let a = mean_attention_distance(&map)[0];
            let b = mean_attention_distance(&flipped)[0];
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulator_matches_map() {
        let map = random_map(3, 4, 2, 9);
        let mut acc = DistanceAccumulator::all();
        let site = AttentionSite {
            path: "p",
            sample: 0,
            window: 0,
            grid: (3, 4),
            heads: 2,
        };
        for (h, m) in map.heads().iter().enumerate() {
            for q in 0..12 {
                acc.attention_row(&site, h, q, m.row(q));
            }
        }
        let got = &acc.results()["p"];
        for (a, b) in got.iter().zip(mean_attention_distance(&map)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(!DistanceAccumulator::only(["q".to_string()]).wants_attention("p"));
    }

    #[test]
    fn recording_does_not_change_numerics() {
        use crate::attention::{self_attention, AttentionConfig, AttentionWeights, ShiftSchedule};
        use crate::observe::Silent;
        use crate::tensor::Tensor;

        let x = Tensor::randn([2, 8, 4, 4], 3, 0);
        let w = AttentionWeights::random(8, 2, 3).unwrap();
        let cfg = AttentionConfig::windowed(2, (2, 4), ShiftSchedule::cycle(vec![(1, 1)]));
        let plain = self_attention(&x, &w, &cfg, 0, &mut Silent, "a").unwrap();
        let mut rec = AttentionRecorder::new();
        let seen = self_attention(&x, &w, &cfg, 0, &mut rec, "a").unwrap();
        assert_eq!(plain, seen);
        let maps = rec.into_maps().unwrap();
        assert_eq!(maps.len(), 2 * 2);
        let m = &maps[&("a".to_string(), 1, 1)];
        assert_eq!((m.grid(), m.heads().len()), ((2, 4), 2));
    }
}

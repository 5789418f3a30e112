use rand::Rng;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftPolicy {
    /// `strides[i mod len]`.
    Cycle,
    /// Uniform draw keyed on `(seed, i)`.
    SeededRandom,
}

/// The set of cyclic window offsets and how one is chosen per denoising step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSchedule {
    pub strides: Vec<(usize, usize)>,
    pub policy: ShiftPolicy,
    pub seed: u64,
}

impl ShiftSchedule {
    pub fn cycle(strides: Vec<(usize, usize)>) -> Self {
        Self {
            strides,
            policy: ShiftPolicy::Cycle,
            seed: 0,
        }
    }

    /// No shift at any step.
    pub fn none() -> Self {
        Self::cycle(vec![(0, 0)])
    }

    /// `{(0,0), (w/4,w/4), (w/2,w/2), (3w/4,3w/4)}` for a square window `w`,
    /// the quarter-step stride set used with half-extent windows.
    pub fn quarter_steps(window: usize) -> Self {
        Self::cycle((0..4).map(|k| (k * window / 4, k * window / 4)).collect())
    }

    pub fn validate(&self, window: (usize, usize)) -> Result<()> {
        if self.strides.is_empty() {
            return Err(invalid!("shift stride set is empty"));
        }
        if let Some(s) = self
            .strides
            .iter()
            .find(|(sh, sw)| *sh >= window.0 || *sw >= window.1)
        {
            return Err(invalid!(
                "shift stride {s:?} is not smaller than window {window:?}"
            ));
        }
        Ok(())
    }
}

/// The `(sh, sw)` offset used at denoising step `step_index`.
pub fn shift_stride(step_index: usize, schedule: &ShiftSchedule) -> (usize, usize) {
    let len = schedule.strides.len();
    assert!(len > 0, "shift schedule has no strides");
    match schedule.policy {
        ShiftPolicy::Cycle => schedule.strides[step_index % len],
        ShiftPolicy::SeededRandom => {
            let mut rng = crate::rng::stream(schedule.seed, step_index as u64);
            schedule.strides[rng.gen_range(0..len)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window64_strides() -> ShiftSchedule {
        ShiftSchedule::cycle(vec![(0, 0), (16, 16), (32, 32), (48, 48)])
    }

    #[test]
    fn cycle_indexing() {
        let s = window64_strides();
        assert_eq!(shift_stride(0, &s), (0, 0));
        assert_eq!(shift_stride(2, &s), (32, 32));
        assert_eq!(shift_stride(5, &s), s.strides[1]);
        for i in 0..40 {
            assert_eq!(shift_stride(i, &s), shift_stride(i + 4, &s));
        }
    }

    #[test]
    fn quarter_steps_match_half_window_sets() {
        assert_eq!(ShiftSchedule::quarter_steps(64), window64_strides());
        assert_eq!(
            ShiftSchedule::quarter_steps(128).strides,
            vec![(0, 0), (32, 32), (64, 64), (96, 96)]
        );
        assert_eq!(
            ShiftSchedule::quarter_steps(32).strides,
            vec![(0, 0), (8, 8), (16, 16), (24, 24)]
        );
    }

    #[test]
    fn seeded_random_is_reproducible_and_in_set() {
        let mut s = window64_strides();
        s.policy = ShiftPolicy::SeededRandom;
        s.seed = 99;
        let a: Vec<_> = (0..64).map(|i| shift_stride(i, &s)).collect();
        let b: Vec<_> = (0..64).map(|i| shift_stride(i, &s)).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|st| s.strides.contains(st)));
        // all four strides show up over 64 draws
        for st in &s.strides {
            assert!(a.contains(st));
        }
    }

    #[test]
    fn validation() {
        assert!(window64_strides().validate((64, 64)).is_ok());
        assert!(window64_strides().validate((48, 64)).is_err());
        assert!(ShiftSchedule::cycle(vec![]).validate((4, 4)).is_err());
    }
}

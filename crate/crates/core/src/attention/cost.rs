use super::AttentionMode;
use crate::error::{invalid, Result};

/// Number of (query, key) interactions for one head over an `h × w` feature.
///
/// Global attention costs `(h·w)²`; windowed attention costs
/// `(h/wh)(w/ww)·(wh·ww)²`.
pub fn attn_token_pairs(h: usize, w: usize, mode: AttentionMode, window: (usize, usize)) -> Result<u64> {
    let tokens = (h * w) as u64;
    match mode {
        AttentionMode::Global => Ok(tokens * tokens),
        AttentionMode::Windowed => {
            let (wh, ww) = window;
            if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
                return Err(invalid!(
                    "feature {h}x{w} is not divisible into {wh}x{ww} windows"
                ));
            }
            let per = (wh * ww) as u64;
            Ok(((h / wh) * (w / ww)) as u64 * per * per)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(
            attn_token_pairs(128, 128, AttentionMode::Global, (0, 0)).unwrap(),
            268_435_456
        );
        let win = attn_token_pairs(128, 128, AttentionMode::Windowed, (64, 64)).unwrap();
        assert_eq!(win, 67_108_864);
        assert_eq!(268_435_456 / win, 4);
        assert_eq!(
            attn_token_pairs(16, 8, AttentionMode::Windowed, (16, 8)).unwrap(),
            attn_token_pairs(16, 8, AttentionMode::Global, (1, 1)).unwrap()
        );
    }

    #[test]
    fn ratio_equals_window_count() {
        for (h, w, wh, ww) in [(32, 32, 8, 8), (64, 32, 16, 16), (12, 12, 4, 6)] {
            let g = attn_token_pairs(h, w, AttentionMode::Global, (wh, ww)).unwrap();
            let l = attn_token_pairs(h, w, AttentionMode::Windowed, (wh, ww)).unwrap();
            assert_eq!(g % l, 0);
            assert_eq!(g / l, ((h / wh) * (w / ww)) as u64);
        }
    }

    #[test]
    fn non_divisible_is_invalid() {
        assert!(matches!(
            attn_token_pairs(10, 10, AttentionMode::Windowed, (4, 4)),
            Err(crate::Error::InvalidSpec(_))
        ));
    }
}

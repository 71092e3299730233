use super::Moment;

/// Number of clips covering `duration` at `clip_len` seconds per clip.
pub fn num_clips(duration: f64, clip_len: f64) -> usize {
    ((duration / clip_len) - 1e-9).ceil().max(1.0) as usize
}

/// Clip `i` is relevant when it overlaps a single moment by more than half a
/// clip, or when the (possibly truncated) clip lies entirely inside it.
pub fn clip_labels_from_moments(moments: &[Moment], duration: f64, clip_len: f64) -> Vec<u8> {
    assert!(clip_len > 0.0, "clip_len must be positive");
    let l = num_clips(duration, clip_len);
    (0..l)
        .map(|i| {
            let lo = i as f64 * clip_len;
            let hi = ((i + 1) as f64 * clip_len).min(duration);
            let hit = moments.iter().any(|m| {
                let overlap = (hi.min(m.end()) - lo.max(m.start())).max(0.0);
                let contained = m.start() <= lo && hi <= m.end();
                overlap > clip_len / 2.0 || contained
            });
            hit as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_enumerated_example() {
        let c = clip_labels_from_moments(&[Moment(2.0, 6.0)], 10.0, 2.0);
        assert_eq!(c, vec![0, 1, 1, 0, 0]);
    }

    #[test]
    fn full_and_empty_coverage() {
        assert_eq!(
            clip_labels_from_moments(&[Moment(0.0, 10.0)], 10.0, 2.0),
            vec![1; 5]
        );
        assert_eq!(clip_labels_from_moments(&[], 10.0, 2.0), vec![0; 5]);
    }

    #[test]
    fn truncated_last_clip() {
        // clips [0,2) [2,4) [4,5)
        assert_eq!(num_clips(5.0, 2.0), 3);
        assert_eq!(
            clip_labels_from_moments(&[Moment(4.0, 5.0)], 5.0, 2.0),
            vec![0, 0, 1]
        );
    }

    // Oracle: moments live on a 0.25 s grid; overlap is counted in exact
    // 0.05 s cells, so half-clip ties are decided in integers.
    fn oracle(moments: &[(u32, u32)], clips: u32) -> Vec<u8> {
        const CELLS_PER_CLIP: u32 = 40; // 2 s / 0.05 s
        const CELLS_PER_QUARTER: u32 = 5;
        (0..clips)
            .map(|i| {
                let lo = i * CELLS_PER_CLIP;
                let hi = lo + CELLS_PER_CLIP;
                let hit = moments.iter().any(|&(s, e)| {
                    let (s, e) = (s * CELLS_PER_QUARTER, e * CELLS_PER_QUARTER);
                    let cells = (lo..hi).filter(|&c| c >= s && c < e).count() as u32;
                    cells * 2 > CELLS_PER_CLIP || (s <= lo && hi <= e)
                });
                hit as u8
            })
            .collect()
    }

    proptest! {
        #[test]
        fn agrees_with_cell_count_oracle(
            clips in 1u32..12,
            raw in proptest::collection::vec((0u32..1000, 1u32..1000), 0..4),
        ) {
            let quarters = clips * 8;
            let moments: Vec<(u32, u32)> = raw
                .into_iter()
                .map(|(a, w)| {
                    let s = a % quarters;
                    let e = (s + 1 + w % quarters).min(quarters);
                    (s, e)
                })
                .collect();
            let ms: Vec<Moment> = moments.iter().map(|&(s, e)| Moment(s as f64 * 0.25, e as f64 * 0.25)).collect();
            let got = clip_labels_from_moments(&ms, clips as f64 * 2.0, 2.0);
            prop_assert_eq!(got, oracle(&moments, clips));
        }
    }
}

use crate::config::SliceHash;

/// Maps a line index (byte address / line size) to an L2 slice.
pub fn slice_hash(line: u64, slices: u32, kind: SliceHash) -> u32 {
    let slices = u64::from(slices);
    let mixed = match kind {
        SliceHash::Xor => line ^ (line >> 5),
        SliceHash::Naive => line,
    };
    (mixed % slices) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loads(lines: impl Iterator<Item = u64>, kind: SliceHash) -> Vec<u64> {
        let mut counts = vec![0u64; 80];
        for l in lines {
            counts[slice_hash(l, 80, kind) as usize] += 1;
        }
        counts
    }

    #[test]
    fn fixed_points() {
        assert_eq!(slice_hash(0, 80, SliceHash::Xor), 0);
        assert_eq!(1280 ^ 40, 1320);
        assert_eq!(slice_hash(1280, 80, SliceHash::Xor), 40);
        assert_eq!(slice_hash(1280, 80, SliceHash::Naive), 0);
    }

    #[test]
    fn strided_stream_spreads_wider_under_xor() {
        // 80 lines, 2048 bytes apart: every 16th line
        let distinct = |kind| {
            let c = loads((0..80u64).map(|i| i * 16), kind);
            c.iter().filter(|&&n| n > 0).count()
        };
        assert_eq!(distinct(SliceHash::Naive), 5);
        assert!(distinct(SliceHash::Xor) > distinct(SliceHash::Naive));
    }

    #[test]
    fn naive_hash_hotspots_stride_sixteen() {
        let c = loads((0..10_000u64).map(|i| i * 16), SliceHash::Naive);
        assert_eq!(c.iter().filter(|&&n| n == 0).count(), 75);
    }

    proptest! {
        #[test]
        fn xor_hash_balances_consecutive_lines(start in 0u64..1 << 40) {
            let c = loads(start..start + 10_000, SliceHash::Xor);
            let max = *c.iter().max().unwrap();
            let min = *c.iter().min().unwrap();
            prop_assert!(min > 0 && max <= 2 * min, "max {} min {}", max, min);
        }
    }
}

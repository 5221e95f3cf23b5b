//! OTSU histogram thresholding with exact integer arithmetic.

/// Outcome of thresholding a 256-bin histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Otsu {
    /// Split into `[0..=t]` and `[t+1..=255]`.
    Threshold(u8),
    /// No threshold leaves both classes non-empty (all mass in one bin).
    NoSplit,
}

/// 8-bit luma used for all foreground decisions:
/// `round(0.299 R + 0.587 G + 0.114 B)`, computed in integers.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Threshold maximizing the between-class variance `w0*w1*(mu0-mu1)^2`,
/// ties broken toward the smallest threshold.
///
/// The score is compared as the exact rational
/// `(s0*n1 - s1*n0)^2 / (n0*n1)` so the result is independent of float
/// rounding and matches an exhaustive search bit-for-bit.
pub fn otsu_threshold(hist: &[u64; 256]) -> Otsu {
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();

    let mut best: Option<(u8, u128, u128)> = None; // (t, score_num, score_den)
    let mut n0: u64 = 0;
    let mut s0: u64 = 0;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as u64 * hist[t];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let diff = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
        let num = (diff.unsigned_abs()) * (diff.unsigned_abs());
        let den = (n0 as u128) * (n1 as u128);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => fraction_gt(num, den, *bn, *bd),
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    match best {
        Some((t, _, _)) => Otsu::Threshold(t),
        None => Otsu::NoSplit,
    }
}

/// Exact `a_num/a_den > b_num/b_den` for positive denominators, avoiding
/// overflow via quotient/remainder comparison.
fn fraction_gt(a_num: u128, a_den: u128, b_num: u128, b_den: u128) -> bool {
    let (qa, ra) = (a_num / a_den, a_num % a_den);
    let (qb, rb) = (b_num / b_den, b_num % b_den);
    if qa != qb {
        return qa > qb;
    }
    // remainders are < denominators, so these products stay in range
    ra * b_den > rb * a_den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    /// Independent oracle: recompute class statistics from scratch for every
    /// candidate threshold and pick the argmax by exact comparison.
    pub fn otsu_brute_force(hist: &[u64; 256]) -> Otsu {
        let mut best: Option<(u8, u128, u128)> = None;
        for t in 0..255usize {
            let n0: u64 = hist[..=t].iter().sum();
            let n1: u64 = hist[t + 1..].iter().sum();
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let s0: u64 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
            let s1: u64 = hist[t + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (t + 1 + i) as u64 * c)
                .sum();
            let diff = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
            let num = diff.unsigned_abs() * diff.unsigned_abs();
            let den = (n0 as u128) * (n1 as u128);
            let better = match &best {
                None => true,
                Some((_, bn, bd)) => fraction_gt(num, den, *bn, *bd),
            };
            if better {
                best = Some((t as u8, num, den));
            }
        }
        match best {
            Some((t, _, _)) => Otsu::Threshold(t),
            None => Otsu::NoSplit,
        }
    }

    #[test]
    fn bimodal_extremes_tie_toward_smallest() {
        let mut h = [0u64; 256];
        h[0] = 100;
        h[255] = 100;
        // every interior threshold ties; smallest wins
        assert_eq!(otsu_threshold(&h), Otsu::Threshold(0));
        assert_eq!(otsu_brute_force(&h), Otsu::Threshold(0));
    }

    #[test]
    fn constant_image_has_no_split() {
        let mut h = [0u64; 256];
        h[128] = 5000;
        assert_eq!(otsu_threshold(&h), Otsu::NoSplit);
        let empty = [0u64; 256];
        assert_eq!(otsu_threshold(&empty), Otsu::NoSplit);
    }

    #[test]
    fn matches_brute_force_on_random_histograms() {
        let mut rng = Stream::new(2024);
        for _ in 0..1000 {
            let mut h = [0u64; 256];
            let bins = 1 + rng.below(256) as usize;
            for _ in 0..bins {
                let b = rng.below(256) as usize;
                h[b] += rng.below(10_000);
            }
            assert_eq!(otsu_threshold(&h), otsu_brute_force(&h));
        }
    }

    #[test]
    fn matches_brute_force_at_slide_scale_counts() {
        // counts the size of a full slide histogram must not overflow
        let mut rng = Stream::new(7);
        for _ in 0..100 {
            let mut h = [0u64; 256];
            let mut remaining: u64 = 1120 * 1120;
            while remaining > 0 {
                let b = rng.below(256) as usize;
                let c = rng.below(remaining.min(100_000)) + 1;
                h[b] += c;
                remaining -= c;
            }
            assert_eq!(otsu_threshold(&h), otsu_brute_force(&h));
        }
    }

    #[test]
    fn luma_rounds_half_up() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(0, 0, 0), 0);
        // 0.299*1 = 0.299 -> 0; 0.299*2 = 0.598 -> 1
        assert_eq!(luma(1, 0, 0), 0);
        assert_eq!(luma(2, 0, 0), 1);
    }
}

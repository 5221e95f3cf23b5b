//! Deterministic random streams built on splitmix64.
//!
//! Every source of randomness in the pipeline is a [`Stream`] derived from a
//! root seed plus a tag, so any artifact can be regenerated bit-exactly from
//! the seed alone, on any platform.

/// splitmix64 output mixing function.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// A deterministic splitmix64 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    /// Stream for a bare seed, state starts at the seed itself.
    pub fn new(seed: u64) -> Self {
        Stream { state: seed }
    }

    /// Tagged sub-stream: identical `(seed, tag)` yields an identical stream.
    pub fn tagged(seed: u64, tag: u64) -> Self {
        Stream {
            state: seed ^ mix(tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)),
        }
    }

    /// Sub-stream derived from a path of tags, for nested scopes
    /// (e.g. seed -> epoch -> patch).
    pub fn tagged_path(seed: u64, tags: &[u64]) -> Self {
        let mut s = seed;
        for &t in tags {
            s ^= mix(t.wrapping_mul(GOLDEN).wrapping_add(GOLDEN));
            s = mix(s);
        }
        Stream { state: s }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn gauss(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Truncated normal: resample until |z| <= 2, then scale.
    pub fn trunc_gauss(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.gauss();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }

    /// Bernoulli draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Uniform sample of `k` distinct indices out of `n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let j = self.below(pool.len() as u64) as usize;
            out.push(pool.swap_remove(j));
        }
        out
    }

    /// Poisson draw: Knuth's method for small lambda, normal approximation
    /// above 64 (Knuth's product underflows for large lambda).
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        if lambda > 64.0 {
            let v = lambda + lambda.sqrt() * self.gauss();
            return v.round().max(0.0) as u64;
        }
        let limit = (-lambda).exp();
        let mut k = 0u64;
        let mut p = 1.0;
        loop {
            p *= self.next_f64();
            if p <= limit {
                return k;
            }
            k += 1;
        }
    }
}

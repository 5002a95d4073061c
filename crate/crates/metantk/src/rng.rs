//! Seedable PRNG with stable streams.
//!
//! xoshiro256++ seeded through SplitMix64. Hand-rolled so that every seeded
//! artifact (parameter draws, task batches, probe sets) is bit-reproducible
//! across platforms and dependency upgrades, which the CLI manifest contract
//! relies on.

#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Derives an independent stream from a seed and a label path.
    ///
    /// Used to give each operator / layer / task its own draw that is stable
    /// under changes elsewhere (pruning one operator must not reshuffle the
    /// parameters of the others).
    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        let mut sm = seed;
        let mut acc = splitmix64(&mut sm);
        for &p in path {
            let mut mix = acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            acc = splitmix64(&mut mix);
        }
        Rng::new(acc)
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal pair via Box-Muller.
    fn normal_pair(&mut self) -> (f64, f64) {
        // u in (0,1] so the log is finite
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        let r = (-2.0 * u.ln()).sqrt();
        let a = 2.0 * std::f64::consts::PI * v;
        (r * a.cos(), r * a.sin())
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal_pair().0
    }

    /// Fills `buf` with i.i.d. N(0, std^2) draws, consuming one pair per two slots.
    pub fn fill_normal(&mut self, buf: &mut [f64], std: f64) {
        let mut i = 0;
        while i + 1 < buf.len() {
            let (a, b) = self.normal_pair();
            buf[i] = std * a;
            buf[i + 1] = std * b;
            i += 2;
        }
        if i < buf.len() {
            buf[i] = std * self.normal_pair().0;
        }
    }
}

/// Stable 64-bit hash of a string label, for seed-path derivation.
pub fn label(tag: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn path_streams_differ() {
        let mut a = Rng::from_path(7, &[1, 2]);
        let mut b = Rng::from_path(7, &[1, 3]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(3);
        let mut buf = vec![0.0; 100_000];
        rng.fill_normal(&mut buf, 1.0);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}

//! Pinned pseudo-random generator so datasets and initializations are
//! byte-reproducible across runs, platforms, and reimplementations.
//!
//! The generator is xoshiro256** with the published state transition:
//!
//! ```text
//! out  = rotl(s1 * 5, 7) * 9
//! t    = s1 << 17
//! s2 ^= s0;  s3 ^= s1;  s1 ^= s2;  s0 ^= s3;  s2 ^= t
//! s3   = rotl(s3, 45)
//! ```
//!
//! State is seeded from splitmix64 (`z = s += 0x9E3779B97F4A7C15`, then two
//! xor-shift-multiply scrambles). Independent streams (one per batch
//! element) mix the stream index into the splitmix initializer:
//! `init = seed ^ (stream + 1) * 0xA3EC647659359ACD`.
//!
//! Uniform doubles take the top 53 bits: `(x >> 11) * 2^-53`, giving
//! values in `[0, 1)`. Bounded integers use plain modulo, which keeps the
//! mapping trivially portable; the bias is negligible for the small
//! ranges used here.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

const STREAM_MIX: u64 = 0xA3EC647659359ACD;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seeded(seed: u64) -> Self {
        Rng::stream(seed, 0)
    }

    /// Stream `i` of `seed`: a statistically independent generator per
    /// batch element or per batch index.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut init = seed ^ stream.wrapping_add(1).wrapping_mul(STREAM_MIX);
        let mut s = [0u64; 4];
        for v in &mut s {
            *v = splitmix64(&mut init);
        }
        if s == [0, 0, 0, 0] {
            s[0] = 1; // xoshiro must not start at the all-zero state
        }
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        out
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }
}

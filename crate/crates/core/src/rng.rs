//! Counter-based pseudo-random generator for reproducible fixtures.
//!
//! Draw number `i` (0-based) of stream `s` under seed `k` is
//!
//! ```text
//! z   = k XOR (s * 0xD1B54A32D192ED03) + (i + 1) * 0x9E3779B97F4A7C15   (wrapping u64)
//! z   = (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9
//! z   = (z XOR (z >> 27)) * 0x94D049BB133111EB
//! out = z XOR (z >> 31)
//! ```
//!
//! i.e. the SplitMix64 finalizer applied to a keyed Weyl sequence. Uniforms
//! take the top 53 bits (`out >> 11) * 2^-53`; normals use Box-Muller on two
//! consecutive uniforms `(1 - u1, u2)` and discard the sine branch.
//! Transcendentals come from `libm`, so the bit patterns do not depend on the
//! platform's math library.

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless draw `counter` of `stream` under `seed`.
pub fn draw(seed: u64, stream: u64, counter: u64) -> u64 {
    let z = (seed ^ stream.wrapping_mul(STREAM_MUL))
        .wrapping_add(counter.wrapping_add(1).wrapping_mul(WEYL));
    mix64(z)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw(self.seed, self.stream, self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (multiply-shift, `n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

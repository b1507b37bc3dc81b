//! Deterministic sampling primitives.
//!
//! Subsampling must be reproducible bit-for-bit across implementations, so
//! the algorithm is pinned rather than left to a library default:
//!
//! 1. Expand the 64-bit seed into xoshiro256** state with four successive
//!    splitmix64 outputs.
//! 2. Draw indices with a partial Fisher–Yates shuffle: for step `i` in
//!    `0..k`, swap position `i` with `i + (next_u64() mod (n - i))`.
//! 3. Return the first `k` positions, sorted ascending.
//!
//! The generator constants follow the published xoshiro256** reference.
//! `docs/dataset-formats.md` restates the procedure for reimplementors.

/// splitmix64 stream, used only to expand seeds.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// xoshiro256** generator.
#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    /// Seed via splitmix64 expansion of a single 64-bit value.
    pub fn from_seed_u64(seed: u64) -> Self {
        let mut mix = SplitMix64::new(seed);
        Self {
            s: [
                mix.next_u64(),
                mix.next_u64(),
                mix.next_u64(),
                mix.next_u64(),
            ],
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }
}

/// Choose `k` of `n` positions uniformly without replacement, deterministic
/// in `seed`. Returns positions sorted ascending.
///
/// # Panics
/// Panics if `k > n`; callers surface that as their own error.
pub fn sample_without_replacement(n: usize, k: usize, seed: u64) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n}");
    let mut rng = Xoshiro256StarStar::from_seed_u64(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let remaining = (n - i) as u64;
        let j = i + (rng.next_u64() % remaining) as usize;
        positions.swap(i, j);
    }
    let mut chosen: Vec<usize> = positions[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

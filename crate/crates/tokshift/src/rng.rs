//! Deterministic counter-based pseudorandomness.
//!
//! Everything randomized in this crate draws from the splitmix64 finalizer,
//! either as a keyed counter-based generator (toy-policy parameters, which
//! must be a pure function of `(seed, context)`) or as a sequential stream
//! (sampling during generation). No global state, no platform dependence:
//! the same seed produces the same bits everywhere.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer: a high-quality 64-bit mixing function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into a single 64-bit key, order-sensitively.
pub fn fold_key(parts: &[u64]) -> u64 {
    let mut h = mix64(parts.len() as u64);
    for &p in parts {
        h = mix64(h ^ p);
    }
    h
}

/// Maps a 64-bit word to a double in the open interval (0, 1).
pub fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Counter-based draw: the `counter`-th uniform in (0, 1) under `key`.
pub fn keyed_unit(key: u64, counter: u64) -> f64 {
    unit_open(mix64(key ^ mix64(counter)))
}

/// Sequential uniform stream for seeded sampling.
#[derive(Debug, Clone)]
pub struct DrawStream {
    state: u64,
}

impl DrawStream {
    pub fn new(seed: u64) -> Self {
        Self { state: mix64(seed) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

//! 32-bit XORShift generator and Rademacher (±1) perturbation streams.
//!
//! Streams are fully determined by their seed, so a perturbation can be
//! regenerated instead of stored.

use crate::error::{Error, Result};

/// XORShift32 state with shift triple (13, 17, 5). Never zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XorShift32 {
    state: u32,
}

/// One step of the recurrence. Maps 0 to 0 and is a bijection on `u32`.
#[inline]
pub fn xorshift32_step(mut s: u32) -> u32 {
    s ^= s << 13;
    s ^= s >> 17;
    s ^= s << 5;
    s
}

impl XorShift32 {
    pub fn new(seed: u32) -> Result<Self> {
        if seed == 0 {
            return Err(Error::ZeroSeed);
        }
        Ok(Self { state: seed })
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Advance and return the new state.
    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        self.state = xorshift32_step(self.state);
        self.state
    }

    /// LSB 1 maps to -1, LSB 0 to +1.
    #[inline]
    pub fn rademacher(&mut self) -> i8 {
        if self.next_u32() & 1 == 1 {
            -1
        } else {
            1
        }
    }
}

impl Iterator for XorShift32 {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        Some(self.next_u32())
    }
}

/// The first `n` Rademacher draws of the stream seeded with `seed`.
pub fn rademacher_fill(seed: u32, n: usize) -> Result<Vec<i8>> {
    let mut rng = XorShift32::new(seed)?;
    Ok((0..n).map(|_| rng.rademacher()).collect())
}

const MIX: u32 = 0x9E37_79B1;

/// Largest index encodable per coordinate of [`derive_seed`].
pub const MAX_LAYER: usize = (1 << 8) - 1;
pub const MAX_QUERY: usize = (1 << 12) - 1;
pub const MAX_SAMPLE: usize = (1 << 12) - 1;

/// Seed for the perturbation of `(layer, query, sample)` under `base`.
///
/// The tuple is packed into 8/12/12 bits, xored into the base, multiplied by
/// an odd constant and passed through one xorshift step. Every stage is a
/// bijection on `u32`, so distinct in-range tuples get distinct seeds except
/// for the remap of 0 to 1.
pub fn derive_seed(base: u32, layer: usize, query: usize, sample: usize) -> u32 {
    debug_assert!(layer <= MAX_LAYER && query <= MAX_QUERY && sample <= MAX_SAMPLE);
    let enc = ((layer as u32 & 0xFF) << 24) | ((query as u32 & 0xFFF) << 12) | (sample as u32 & 0xFFF);
    nonzero(xorshift32_step((base ^ enc).wrapping_mul(MIX)))
}

/// Per-iteration base seed derived from a run seed.
pub fn stream_seed(run_seed: u32, index: u64) -> u32 {
    let folded = (index as u32) ^ ((index >> 32) as u32).rotate_left(16);
    let h = xorshift32_step((run_seed ^ folded).wrapping_mul(MIX).rotate_left(7));
    nonzero(xorshift32_step(h ^ run_seed))
}

#[inline]
fn nonzero(s: u32) -> u32 {
    if s == 0 {
        1
    } else {
        s
    }
}

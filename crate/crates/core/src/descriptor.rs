//! 256-bit binary feature descriptors.

use std::fmt;

use rand::Rng;

/// A 256-bit binary descriptor stored as four little-endian 64-bit words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub const BITS: usize = 256;
    pub const BYTES: usize = 32;

    pub fn zeros() -> Self {
        Descriptor([0; 4])
    }

    pub fn ones() -> Self {
        Descriptor([u64::MAX; 4])
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Descriptor([rng.random(), rng.random(), rng.random(), rng.random()])
    }

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.0[i / 64] |= mask;
        } else {
            self.0[i / 64] &= !mask;
        }
    }

    /// Copy with each bit flipped independently with probability `rate`.
    pub fn with_bit_flips(&self, rate: f64, rng: &mut impl Rng) -> Self {
        let mut out = *self;
        if rate <= 0.0 {
            return out;
        }
        for i in 0..Self::BITS {
            if rng.random::<f64>() < rate {
                out.0[i / 64] ^= 1u64 << (i % 64);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (w, chunk) in self.0.iter().zip(out.chunks_mut(8)) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (w, chunk) in words.iter_mut().zip(bytes.chunks(8)) {
            *w = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Descriptor(words)
    }

    /// 64 lowercase hex characters, byte order as in [`Descriptor::to_bytes`].
    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return None;
        }
        let mut bytes = [0u8; 32];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Self::from_bytes(&bytes))
    }

    /// Bitwise majority vote; ties resolve to 0.
    pub fn majority<'a>(items: impl IntoIterator<Item = &'a Descriptor>) -> Descriptor {
        let mut counts = [0u32; Self::BITS];
        let mut n = 0u32;
        for d in items {
            n += 1;
            for (i, c) in counts.iter_mut().enumerate() {
                if d.bit(i) {
                    *c += 1;
                }
            }
        }
        let mut out = Descriptor::zeros();
        for (i, &c) in counts.iter().enumerate() {
            if 2 * c > n {
                out.set_bit(i, true);
            }
        }
        out
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hamming_extremes() {
        assert_eq!(Descriptor::zeros().hamming(&Descriptor::ones()), 256);
        assert_eq!(Descriptor::ones().hamming(&Descriptor::ones()), 0);
    }

    #[test]
    fn majority_vote() {
        let a = Descriptor([0b011, 0, 0, 0]);
        let b = Descriptor([0b110, 0, 0, 0]);
        let c = Descriptor([0b010, 0, 0, 0]);
        assert_eq!(Descriptor::majority([&a, &b, &c]), Descriptor([0b010, 0, 0, 0]));
    }

    #[test]
    fn bad_hex_rejected() {
        assert!(Descriptor::from_hex("abc").is_none());
        assert!(Descriptor::from_hex(&"zz".repeat(32)).is_none());
    }

    proptest! {
        #[test]
        fn hex_round_trip(words in any::<[u64; 4]>()) {
            let d = Descriptor(words);
            prop_assert_eq!(Descriptor::from_hex(&d.to_hex()), Some(d));
        }
    }
}

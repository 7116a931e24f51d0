//! The l-bit binary address tree.
//!
//! Addresses are leaves of a binary tree of `l + 1` levels. A level-k subtree
//! is the set of addresses sharing a `(l - k)`-bit prefix, and the level-k
//! sibling of an address is the subtree under the same parent as the
//! address's own level-k subtree. Bit positions are counted MSB-first, so the
//! rendering `01X` reads left to right as the prefix `01` followed by one free
//! bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::AddressError;

/// Widest supported address.
pub const MAX_WIDTH: u8 = 16;

/// Sibling level inside the address tree, `0..width`.
pub type Level = u8;

/// Permanent node identifier, independent of the transient network address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A transient `width`-bit network address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetAddress {
    bits: u32,
    width: u8,
}

impl NetAddress {
    pub fn new(bits: u32, width: u8) -> Result<Self, AddressError> {
        if width == 0 || width > MAX_WIDTH {
            return Err(AddressError::BadWidth(width));
        }
        if bits >> width != 0 {
            return Err(AddressError::ValueTooWide { bits, width });
        }
        Ok(NetAddress { bits, width })
    }

    /// The all-zeros address taken by a network founder.
    pub fn zero(width: u8) -> Result<Self, AddressError> {
        Self::new(0, width)
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn width(self) -> u8 {
        self.width
    }

    /// Number of bytes an address occupies on the wire.
    pub fn wire_len(width: u8) -> usize {
        usize::from(width).div_ceil(8)
    }

    /// Bit at MSB-first position `pos`.
    pub fn bit(self, pos: u8) -> bool {
        debug_assert!(pos < self.width);
        (self.bits >> (self.width - 1 - pos)) & 1 == 1
    }

    /// Length of the shared MSB-first prefix with `other`.
    pub fn common_prefix_len(self, other: NetAddress) -> u8 {
        debug_assert_eq!(self.width, other.width);
        let diff = self.bits ^ other.bits;
        if diff == 0 {
            self.width
        } else {
            self.width - 1 - highest_bit(diff)
        }
    }

    /// The level-k sibling of this address.
    pub fn sibling(self, level: Level) -> Result<SiblingRef, AddressError> {
        sibling_of(self, level)
    }

    /// Top `len` bits as an integer.
    pub fn prefix(self, len: u8) -> u32 {
        debug_assert!(len <= self.width);
        if len == 0 {
            0
        } else {
            self.bits >> (self.width - len)
        }
    }

    /// Address with the bit controlling sibling level `level` inverted.
    pub fn flip_level_bit(self, level: Level) -> NetAddress {
        debug_assert!(level < self.width);
        NetAddress {
            bits: self.bits ^ (1 << level),
            width: self.width,
        }
    }

    /// Hamming distance between two addresses of equal width.
    pub fn changed_bits(self, other: NetAddress) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    /// All addresses of the given width, in increasing order.
    pub fn all(width: u8) -> impl Iterator<Item = NetAddress> {
        (0..1u32 << width).map(move |bits| NetAddress { bits, width })
    }

    pub fn parse_with_width(s: &str, width: u8) -> Result<Self, AddressError> {
        let a: NetAddress = s.parse()?;
        if a.width != width {
            return Err(AddressError::Parse(format!(
                "address {s:?} has {} bits, expected {width}",
                a.width
            )));
        }
        Ok(a)
    }
}

fn highest_bit(x: u32) -> u8 {
    debug_assert!(x != 0);
    (31 - x.leading_zeros()) as u8
}

impl fmt::Display for NetAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for pos in 0..self.width {
            f.write_str(if self.bit(pos) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for NetAddress {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let width = u8::try_from(s.len()).map_err(|_| AddressError::Parse(s.to_string()))?;
        if width == 0 || width > MAX_WIDTH {
            return Err(AddressError::Parse(s.to_string()));
        }
        let mut bits = 0u32;
        for c in s.chars() {
            bits = (bits << 1)
                | match c {
                    '0' => 0,
                    '1' => 1,
                    _ => return Err(AddressError::Parse(s.to_string())),
                };
        }
        NetAddress::new(bits, width)
    }
}

/// A level-k subtree identified by its fixed `(width - level)`-bit prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiblingRef {
    level: Level,
    prefix: u32,
    width: u8,
}

impl SiblingRef {
    pub fn level(self) -> Level {
        self.level
    }

    pub fn prefix(self) -> u32 {
        self.prefix
    }

    pub fn width(self) -> u8 {
        self.width
    }

    /// Number of addresses in the subtree.
    pub fn size(self) -> u32 {
        1 << self.level
    }

    pub fn contains(self, a: NetAddress) -> bool {
        contains(self, a)
    }

    pub fn lowest_address(self) -> NetAddress {
        lowest_address(self)
    }
}

impl fmt::Display for SiblingRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fixed = self.width - self.level;
        for i in (0..fixed).rev() {
            f.write_str(if (self.prefix >> i) & 1 == 1 { "1" } else { "0" })?;
        }
        for _ in 0..self.level {
            f.write_str("X")?;
        }
        Ok(())
    }
}

impl FromStr for SiblingRef {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fixed: String = s.chars().take_while(|c| *c != 'X').collect();
        let level = s.len() - fixed.len();
        if fixed.is_empty() || s[fixed.len()..].chars().any(|c| c != 'X') {
            return Err(AddressError::Parse(s.to_string()));
        }
        let width = u8::try_from(s.len()).map_err(|_| AddressError::Parse(s.to_string()))?;
        let head: NetAddress = fixed.parse()?;
        if width > MAX_WIDTH {
            return Err(AddressError::BadWidth(width));
        }
        Ok(SiblingRef {
            level: level as u8,
            prefix: head.bits(),
            width,
        })
    }
}

/// The subtree sharing `a`'s top `(l - k - 1)` bits with the next bit flipped.
pub fn sibling_of(a: NetAddress, level: Level) -> Result<SiblingRef, AddressError> {
    if level >= a.width {
        return Err(AddressError::LevelOutOfRange { level, width: a.width });
    }
    Ok(SiblingRef {
        level,
        prefix: (a.bits >> level) ^ 1,
        width: a.width,
    })
}

/// The unique level `k` such that `b` lies in `sibling_of(a, k)`.
pub fn sibling_level(a: NetAddress, b: NetAddress) -> Result<Level, AddressError> {
    debug_assert_eq!(a.width, b.width);
    let diff = a.bits ^ b.bits;
    if diff == 0 {
        return Err(AddressError::SameAddress(a));
    }
    Ok(highest_bit(diff))
}

pub fn contains(s: SiblingRef, a: NetAddress) -> bool {
    s.width == a.width && a.bits >> s.level == s.prefix
}

/// The sibling's prefix followed by `level` zero bits.
pub fn lowest_address(s: SiblingRef) -> NetAddress {
    NetAddress {
        bits: s.prefix << s.level,
        width: s.width,
    }
}

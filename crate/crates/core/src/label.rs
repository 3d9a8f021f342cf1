//! Six-DOF gesture labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of decoded degrees of freedom: five finger flexions plus wrist pronation.
pub const NUM_DOF: usize = 6;

pub const DOF_NAMES: [&str; NUM_DOF] = ["thumb", "index", "middle", "ring", "little", "wrist"];

/// Flex/rest state of the six DOF. Bit `d` set means DOF `d` is flexing,
/// with bit 0 = thumb through bit 5 = wrist. The string form lists the DOF
/// in the same order, so `"100000"` is a thumb flex.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GestureLabel(u8);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed gesture string {0:?}: expected six characters of '0'/'1'")]
pub struct GestureParseError(pub String);

impl GestureLabel {
    pub const REST: GestureLabel = GestureLabel(0);

    pub fn from_mask(mask: u8) -> Option<Self> {
        (mask < 1 << NUM_DOF).then_some(GestureLabel(mask))
    }

    pub fn from_bits(bits: [bool; NUM_DOF]) -> Self {
        let mut m = 0u8;
        for (d, &b) in bits.iter().enumerate() {
            if b {
                m |= 1 << d;
            }
        }
        GestureLabel(m)
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn is_flexed(self, dof: usize) -> bool {
        self.0 >> dof & 1 == 1
    }

    pub fn bits(self) -> [bool; NUM_DOF] {
        std::array::from_fn(|d| self.is_flexed(d))
    }

    pub fn is_rest(self) -> bool {
        self.0 == 0
    }

    pub fn active_dofs(self) -> impl Iterator<Item = usize> {
        (0..NUM_DOF).filter(move |&d| self.is_flexed(d))
    }

    pub fn complement(self) -> Self {
        GestureLabel(!self.0 & 0x3F)
    }
}

impl fmt::Display for GestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..NUM_DOF {
            f.write_str(if self.is_flexed(d) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for GestureLabel {
    type Err = GestureParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.len() != NUM_DOF {
            return Err(GestureParseError(s.to_string()));
        }
        let mut m = 0u8;
        for (d, c) in t.chars().enumerate() {
            match c {
                '0' => {}
                '1' => m |= 1 << d,
                _ => return Err(GestureParseError(s.to_string())),
            }
        }
        Ok(GestureLabel(m))
    }
}

impl Serialize for GestureLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GestureLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named gestures used throughout the matching task and the benchmark sessions.
pub mod gestures {
    use super::GestureLabel;

    pub const REST: GestureLabel = GestureLabel(0b000000);
    pub const THUMB: GestureLabel = GestureLabel(0b000001);
    pub const INDEX: GestureLabel = GestureLabel(0b000010);
    pub const MIDDLE: GestureLabel = GestureLabel(0b000100);
    pub const RING: GestureLabel = GestureLabel(0b001000);
    pub const LITTLE: GestureLabel = GestureLabel(0b010000);
    pub const WRIST: GestureLabel = GestureLabel(0b100000);
    pub const FIST: GestureLabel = GestureLabel(0b011111);
    pub const PINCH: GestureLabel = GestureLabel(0b000011);

    /// The eight non-rest targets of the matching task.
    pub const MATCHING_TARGETS: [GestureLabel; 8] =
        [THUMB, INDEX, MIDDLE, RING, LITTLE, FIST, PINCH, WRIST];

    /// Gesture set recorded in a benchmark session.
    pub const SESSION_GESTURES: [GestureLabel; 7] =
        [THUMB, INDEX, MIDDLE, RING, LITTLE, WRIST, FIST];

    pub fn name(g: GestureLabel) -> &'static str {
        match g {
            REST => "rest",
            THUMB => "thumb",
            INDEX => "index",
            MIDDLE => "middle",
            RING => "ring",
            LITTLE => "little",
            WRIST => "wrist",
            FIST => "fist",
            PINCH => "pinch",
            _ => "combo",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn string_order_is_thumb_first() {
        let g: GestureLabel = "100000".parse().unwrap();
        assert_eq!(g.mask(), 0x01);
        assert_eq!(gestures::FIST.to_string(), "111110");
        assert_eq!(gestures::PINCH.to_string(), "110000");
        assert_eq!(gestures::WRIST.to_string(), "000001");
    }

    #[test]
    fn rejects_malformed() {
        assert!("10000".parse::<GestureLabel>().is_err());
        assert!("10000x".parse::<GestureLabel>().is_err());
        assert!("1000000".parse::<GestureLabel>().is_err());
    }

    #[test]
    fn all_masks_round_trip() {
        for m in 0..64u8 {
            let g = GestureLabel::from_mask(m).unwrap();
            assert_eq!(g.to_string().parse::<GestureLabel>().unwrap(), g);
            assert_eq!(GestureLabel::from_bits(g.bits()), g);
        }
        assert!(GestureLabel::from_mask(64).is_none());
    }
}

//! Small domain types shared across the crate.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagnosis label. Class index 0 is benign and 1 is malignant everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "B")]
    Benign,
    #[serde(rename = "M")]
    Malignant,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Malignant];

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::ClassOutOfRange(other)),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Label::Benign => "B",
            Label::Malignant => "M",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Benign => Label::Malignant,
            Label::Malignant => Label::Benign,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "B" | "b" | "benign" => Ok(Label::Benign),
            "M" | "m" | "malignant" => Ok(Label::Malignant),
            other => Err(Error::Config(format!("unknown label {other:?}"))),
        }
    }
}

/// Which image planes make up a model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// B-mode only, gray replicated into three channels.
    B,
    /// Elastography only, RGB.
    Se,
    /// Gray plane stacked in front of the elastography RGB planes.
    Bse,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::B, Modality::Se, Modality::Bse];

    pub fn channels(self) -> usize {
        match self {
            Modality::B | Modality::Se => 3,
            Modality::Bse => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::B => "b",
            Modality::Se => "se",
            Modality::Bse => "bse",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Modality::B => "B-US",
            Modality::Se => "SE-US",
            Modality::Bse => "BSE-US",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "b" => Ok(Modality::B),
            "se" => Ok(Modality::Se),
            "bse" => Ok(Modality::Bse),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Axis-aligned pixel rectangle, `x`/`y` being the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|r| r <= width)
            && self.y.checked_add(self.h).is_some_and(|b| b <= height)
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for Roi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<_> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
        match parts.as_slice() {
            [Ok(x), Ok(y), Ok(w), Ok(h)] => Ok(Roi::new(*x, *y, *w, *h)),
            _ => Err(Error::Config(format!("roi must be \"x,y,w,h\", got {s:?}"))),
        }
    }
}

impl Serialize for Roi {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Roi {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Derive an independent, reproducible random stream from a base seed and a
/// stream name ("split", "augment", "head-init", ...).
pub fn rng_stream(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, then splitmix64 finalization with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Class probabilities `[p_benign, p_malignant]`.
pub type ProbRow = [f64; 2];

pub const DISTRIBUTION_TOL: f64 = 1e-4;

/// Reject rows with negative or non-finite entries, or a sum away from 1.
pub fn check_distribution(row: ProbRow) -> crate::Result<()> {
    let ok = row.iter().all(|p| p.is_finite() && *p >= 0.0)
        && (row[0] + row[1] - 1.0).abs() <= DISTRIBUTION_TOL;
    if ok {
        Ok(())
    } else {
        Err(crate::Error::InvalidDistribution { row })
    }
}

/// Predicted class of a probability row; an exact tie goes to malignant.
pub fn argmax_class(row: ProbRow) -> Label {
    if row[0] > row[1] {
        Label::Benign
    } else {
        Label::Malignant
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn label_roundtrip() {
        for l in Label::ALL {
            assert_eq!(Label::from_index(l.index()).unwrap(), l);
            assert_eq!(l.code().parse::<Label>().unwrap(), l);
        }
        assert!(Label::from_index(2).is_err());
    }

    #[test]
    fn roi_parse_and_bounds() {
        let r: Roi = "100,100,200,200".parse().unwrap();
        assert_eq!(r, Roi::new(100, 100, 200, 200));
        assert!(r.fits(600, 400));
        assert!(!r.fits(250, 400));
        assert!(!Roi::new(0, 0, 0, 5).fits(10, 10));
        assert!("1,2,3".parse::<Roi>().is_err());
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = rng_stream(7, "split").gen();
        let b: u64 = rng_stream(7, "split").gen();
        let c: u64 = rng_stream(7, "augment").gen();
        let d: u64 = rng_stream(8, "split").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}

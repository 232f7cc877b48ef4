use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ReprError;

/// Token id into the chord vocabulary.
pub type TokenId = usize;

/// Chord qualities in canonical (byte-sorted) order, with the pitch-class
/// intervals above the root that each one contains.
///
/// `1` is a bare root (a single-note "chord").
pub const QUALITIES: [(&str, &[u8]); 29] = [
    ("1", &[0]),
    ("11", &[0, 2, 4, 5, 7, 10]),
    ("13", &[0, 2, 4, 7, 9, 10]),
    ("5", &[0, 7]),
    ("7", &[0, 4, 7, 10]),
    ("7sus4", &[0, 5, 7, 10]),
    ("9", &[0, 2, 4, 7, 10]),
    ("add9", &[0, 2, 4, 7]),
    ("aug", &[0, 4, 8]),
    ("aug7", &[0, 4, 8, 10]),
    ("dim", &[0, 3, 6]),
    ("dim7", &[0, 3, 6, 9]),
    ("hdim7", &[0, 3, 6, 10]),
    ("maj", &[0, 4, 7]),
    ("maj13", &[0, 2, 4, 7, 9, 11]),
    ("maj6", &[0, 4, 7, 9]),
    ("maj7", &[0, 4, 7, 11]),
    ("maj7#5", &[0, 4, 8, 11]),
    ("maj9", &[0, 2, 4, 7, 11]),
    ("min", &[0, 3, 7]),
    ("min11", &[0, 2, 3, 5, 7, 10]),
    ("min13", &[0, 2, 3, 7, 9, 10]),
    ("min6", &[0, 3, 7, 9]),
    ("min7", &[0, 3, 7, 10]),
    ("min9", &[0, 2, 3, 7, 10]),
    ("minadd9", &[0, 2, 3, 7]),
    ("minmaj7", &[0, 3, 7, 11]),
    ("sus2", &[0, 2, 7]),
    ("sus4", &[0, 5, 7]),
];

pub const NUM_QUALITIES: usize = QUALITIES.len();
pub const NUM_CHORD_SYMBOLS: usize = 12 * NUM_QUALITIES;

pub const NC_TOKEN: TokenId = NUM_CHORD_SYMBOLS;
pub const PAD_TOKEN: TokenId = NUM_CHORD_SYMBOLS + 1;
pub const BAR_TOKEN: TokenId = NUM_CHORD_SYMBOLS + 2;
pub const MASK_TOKEN: TokenId = NUM_CHORD_SYMBOLS + 3;
pub const VOCAB_SIZE: usize = NUM_CHORD_SYMBOLS + 4;

const ROOT_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quality(u8);

impl Quality {
    pub fn from_index(i: usize) -> Option<Self> {
        (i < NUM_QUALITIES).then_some(Self(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn label(self) -> &'static str {
        QUALITIES[self.index()].0
    }

    pub fn intervals(self) -> &'static [u8] {
        QUALITIES[self.index()].1
    }

    pub fn all() -> impl Iterator<Item = Quality> {
        (0..NUM_QUALITIES as u8).map(Quality)
    }
}

impl FromStr for Quality {
    type Err = ReprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QUALITIES
            .iter()
            .position(|(label, _)| *label == s)
            .map(|i| Quality(i as u8))
            .ok_or_else(|| ReprError::UnknownQuality {
                quality: s.to_string(),
                supported: QUALITIES.iter().map(|(l, _)| *l).collect::<Vec<_>>().join(", "),
            })
    }
}

/// A chord symbol or the explicit no-chord marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Chord {
    NoChord,
    Symbol { root: u8, quality: Quality },
}

impl Chord {
    pub fn new(root: u8, quality: Quality) -> Self {
        Chord::Symbol { root: root % 12, quality }
    }

    /// Sorted pitch classes sounding in the chord; empty for no-chord.
    pub fn pitch_classes(&self) -> Vec<u8> {
        match self {
            Chord::NoChord => Vec::new(),
            Chord::Symbol { root, quality } => {
                let mut pcs: Vec<u8> = quality.intervals().iter().map(|i| (root + i) % 12).collect();
                pcs.sort_unstable();
                pcs
            }
        }
    }

    pub fn root(&self) -> Option<u8> {
        match self {
            Chord::NoChord => None,
            Chord::Symbol { root, .. } => Some(*root),
        }
    }

    pub fn token(&self) -> TokenId {
        match self {
            Chord::NoChord => NC_TOKEN,
            Chord::Symbol { root, quality } => *root as usize * NUM_QUALITIES + quality.index(),
        }
    }

    /// Inverse of [`Chord::token`]; `None` for pad/bar/mask and out-of-range ids.
    pub fn from_token(id: TokenId) -> Option<Self> {
        match id {
            NC_TOKEN => Some(Chord::NoChord),
            id if id < NUM_CHORD_SYMBOLS => Some(Chord::Symbol {
                root: (id / NUM_QUALITIES) as u8,
                quality: Quality((id % NUM_QUALITIES) as u8),
            }),
            _ => None,
        }
    }
}

impl fmt::Display for Chord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Chord::NoChord => write!(f, "N"),
            Chord::Symbol { root, quality } => write!(f, "{}:{}", ROOT_NAMES[*root as usize], quality.label()),
        }
    }
}

impl From<Chord> for String {
    fn from(c: Chord) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Chord {
    type Error = ReprError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for Chord {
    type Err = ReprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "N" {
            return Ok(Chord::NoChord);
        }
        let bad = || ReprError::BadSymbol(s.to_string());
        let (root_str, quality_str) = s.split_once(':').ok_or_else(bad)?;
        let mut chars = root_str.chars();
        let base = match chars.next().ok_or_else(bad)? {
            'C' => 0i32,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let shift = match chars.as_str() {
            "" => 0,
            "#" => 1,
            "b" => -1,
            _ => return Err(bad()),
        };
        let root = (base + shift).rem_euclid(12) as u8;
        Ok(Chord::Symbol { root, quality: quality_str.parse()? })
    }
}

/// Human-readable name for any vocabulary id.
pub fn token_label(id: TokenId) -> String {
    match id {
        PAD_TOKEN => "<pad>".into(),
        BAR_TOKEN => "<bar>".into(),
        MASK_TOKEN => "<mask>".into(),
        _ => Chord::from_token(id).map_or_else(|| format!("<unk:{id}>"), |c| c.to_string()),
    }
}

/// Whether `id` is one of the structural specials (pad, bar, mask).
pub fn is_structural(id: TokenId) -> bool {
    matches!(id, PAD_TOKEN | BAR_TOKEN | MASK_TOKEN)
}

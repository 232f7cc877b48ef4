use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Chord, ReprError};

pub const MIN_PITCH: u8 = 21;
pub const MAX_PITCH: u8 = 108;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 2]", into = "[u32; 2]")]
pub struct TimeSignature {
    numerator: u8,
    denominator: u8,
}

impl TimeSignature {
    pub const COMMON: TimeSignature = TimeSignature { numerator: 4, denominator: 4 };

    pub fn new(numerator: u32, denominator: u32) -> Result<Self, ReprError> {
        if !(1..=14).contains(&numerator) || !matches!(denominator, 4 | 8) {
            return Err(ReprError::BadTimeSignature(numerator, denominator));
        }
        Ok(Self { numerator: numerator as u8, denominator: denominator as u8 })
    }

    pub fn numerator(&self) -> u32 {
        self.numerator as u32
    }

    pub fn denominator(&self) -> u32 {
        self.denominator as u32
    }

    /// Bar length in sixteenth notes.
    pub fn bar_len(&self) -> u32 {
        self.numerator() * (16 / self.denominator())
    }

    /// Length of one beat (the denominator unit) in sixteenths.
    pub fn beat_len(&self) -> u32 {
        16 / self.denominator()
    }
}

impl TryFrom<[u32; 2]> for TimeSignature {
    type Error = ReprError;

    fn try_from(v: [u32; 2]) -> Result<Self, ReprError> {
        TimeSignature::new(v[0], v[1])
    }
}

impl From<TimeSignature> for [u32; 2] {
    fn from(ts: TimeSignature) -> Self {
        [ts.numerator(), ts.denominator()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub onset: u32,
    pub duration: u32,
    pub pitch: u8,
}

impl Note {
    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChordEvent {
    pub onset: u32,
    #[serde(rename = "symbol")]
    pub chord: Chord,
}

/// A melody with its chord annotation on a sixteenth-note timebase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadSheet {
    pub time_signature: TimeSignature,
    pub length_16th: u32,
    pub melody: Vec<Note>,
    #[serde(default)]
    pub chords: Vec<ChordEvent>,
}

impl LeadSheet {
    pub fn validate(&self) -> Result<(), ReprError> {
        for n in &self.melody {
            if !(MIN_PITCH..=MAX_PITCH).contains(&n.pitch) {
                return Err(ReprError::PitchOutOfRange(n.pitch));
            }
            if n.duration == 0 {
                return Err(ReprError::Invalid(format!("note at {} has zero duration", n.onset)));
            }
            if n.onset >= self.length_16th {
                return Err(ReprError::OnsetBeyondLength { onset: n.onset, length: self.length_16th });
            }
        }
        for (i, c) in self.chords.iter().enumerate() {
            if c.onset >= self.length_16th {
                return Err(ReprError::OnsetBeyondLength { onset: c.onset, length: self.length_16th });
            }
            if i > 0 && self.chords[i - 1].onset >= c.onset {
                return Err(ReprError::Invalid(format!(
                    "chord onsets must be strictly increasing ({} then {})",
                    self.chords[i - 1].onset, c.onset
                )));
            }
        }
        Ok(())
    }

    /// The chord sounding at time `t`, if any chord has started by then.
    pub fn chord_at(&self, t: u32) -> Option<Chord> {
        let idx = self.chords.partition_point(|c| c.onset <= t);
        (idx > 0).then(|| self.chords[idx - 1].chord)
    }

    /// Same melody with the chord annotation removed.
    pub fn melody_only(&self) -> LeadSheet {
        LeadSheet { chords: Vec::new(), ..self.clone() }
    }

    pub fn from_json(s: &str) -> Result<Self, ReprError> {
        let sheet: LeadSheet = serde_json::from_str(s).map_err(|e| ReprError::Json(e.to_string()))?;
        sheet.validate()?;
        Ok(sheet)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lead sheet serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ReprError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReprError::Io(path.to_path_buf(), e.to_string()))?;
        Self::from_json(&text).map_err(|e| ReprError::InFile(path.to_path_buf(), Box::new(e)))
    }

    pub fn save(&self, path: &Path) -> Result<(), ReprError> {
        std::fs::write(path, self.to_json()).map_err(|e| ReprError::Io(path.to_path_buf(), e.to_string()))
    }
}

/// Loads every `*.json` lead sheet in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, LeadSheet)>, ReprError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ReprError::Io(dir.to_path_buf(), e.to_string()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| LeadSheet::load(&p).map(|s| (p, s))).collect()
}

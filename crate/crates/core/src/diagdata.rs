//! Synthetic diagnostic corpus: one diatonic C-major triad per quarter note,
//! drawn independently, with the melody sounding the chord root.
//!
//! The only way to predict a chord is to look at the melody at the same
//! position, which makes the presence (or absence) of melody-to-harmony
//! attention easy to read off an attention map.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::{Chord, ChordEvent, LeadSheet, Note, Quality, ReprError, TimeSignature};
use crate::rng::derive_rng;

/// Scale degrees of C major with their triad qualities.
pub const DIATONIC_TRIADS: [(u8, &str); 7] =
    [(0, "maj"), (2, "min"), (4, "min"), (5, "maj"), (7, "maj"), (9, "min"), (11, "dim")];

/// Melody roots sit in octave 4 (MIDI 60-71).
pub const ROOT_OCTAVE_BASE: u8 = 60;

const SLOTS_PER_BAR: u32 = 4;
const QUARTER: u32 = 4;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("invalid diagnostic config: {0}")]
    Config(String),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub bars: u32,
    pub seed: u64,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { n_train: 1000, n_test: 100, bars: 8, seed: 0 }
    }
}

pub fn diatonic_chords() -> Vec<Chord> {
    DIATONIC_TRIADS.iter().map(|&(root, q)| Chord::new(root, q.parse::<Quality>().expect("known quality"))).collect()
}

fn piece(rng: &mut impl Rng, bars: u32) -> LeadSheet {
    let chords = diatonic_chords();
    let slots = bars * SLOTS_PER_BAR;
    let mut melody = Vec::with_capacity(slots as usize);
    let mut events = Vec::with_capacity(slots as usize);
    for slot in 0..slots {
        let chord = chords[rng.random_range(0..chords.len())];
        let onset = slot * QUARTER;
        let root = chord.root().expect("triads have roots");
        melody.push(Note { onset, duration: QUARTER, pitch: ROOT_OCTAVE_BASE + root });
        events.push(ChordEvent { onset, chord });
    }
    LeadSheet {
        time_signature: TimeSignature::COMMON,
        length_16th: bars * TimeSignature::COMMON.bar_len(),
        melody,
        chords: events,
    }
}

/// `(train, test)`; the two splits use separate RNG streams.
pub fn generate(cfg: &DiagConfig) -> Result<(Vec<LeadSheet>, Vec<LeadSheet>), DiagError> {
    if cfg.n_train == 0 || cfg.n_test == 0 || cfg.bars == 0 {
        return Err(DiagError::Config("n_train, n_test and bars must be positive".into()));
    }
    let split = |tag: u64, n: usize| -> Vec<LeadSheet> {
        (0..n).map(|i| piece(&mut derive_rng(cfg.seed, &[tag, i as u64]), cfg.bars)).collect()
    };
    Ok((split(0, cfg.n_train), split(1, cfg.n_test)))
}

/// Writes `train/NNNN.json` and `test/NNNN.json` under `out`.
pub fn write_corpus(out: &Path, train: &[LeadSheet], test: &[LeadSheet]) -> Result<(), DiagError> {
    for (name, sheets) in [("train", train), ("test", test)] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| ReprError::Io(dir.clone(), e.to_string()))?;
        for (i, s) in sheets.iter().enumerate() {
            s.save(&dir.join(format!("{i:04}.json")))?;
        }
    }
    Ok(())
}

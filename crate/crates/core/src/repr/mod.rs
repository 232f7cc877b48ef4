//! Lead sheets, the chord vocabulary and grid encoding of melody/harmony pairs.

mod chord;
mod grid;
mod sheet;

use std::path::PathBuf;

pub use chord::{
    is_structural, token_label, Chord, Quality, TokenId, BAR_TOKEN, MASK_TOKEN, NC_TOKEN, NUM_CHORD_SYMBOLS,
    NUM_QUALITIES, PAD_TOKEN, QUALITIES, VOCAB_SIZE,
};
pub use grid::{
    decode_harmony, encode, pitch_to_rows, ts_vector, BarMode, Column, EncodedPair, GridConfig, GridLayout,
    MelodyMode, Quant, TS_VECTOR_LEN,
};
pub use sheet::{load_corpus, ChordEvent, LeadSheet, Note, TimeSignature, MAX_PITCH, MIN_PITCH};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReprError {
    #[error("unknown chord quality `{quality}`; supported qualities: {supported}")]
    UnknownQuality { quality: String, supported: String },
    #[error("malformed chord symbol `{0}` (expected e.g. `C:maj7`, `Bb:min`, or `N`)")]
    BadSymbol(String),
    #[error("time signature {0}/{1} unsupported (numerator 1-14, denominator 4 or 8)")]
    BadTimeSignature(u32, u32),
    #[error("MIDI pitch {0} outside 21-108")]
    PitchOutOfRange(u8),
    #[error("onset {onset} beyond piece length {length}")]
    OnsetBeyondLength { onset: u32, length: u32 },
    #[error("{0}")]
    Invalid(String),
    #[error("invalid lead-sheet JSON: {0}")]
    Json(String),
    #[error("{0}: {1}")]
    Io(PathBuf, String),
    #[error("{0}: {1}")]
    InFile(PathBuf, Box<ReprError>),
}

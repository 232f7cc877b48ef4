use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    Chord, ChordEvent, LeadSheet, ReprError, TimeSignature, TokenId, BAR_TOKEN, MASK_TOKEN, MAX_PITCH, MIN_PITCH,
    NC_TOKEN, PAD_TOKEN,
};

/// Length of the time-signature condition vector (14 numerator bits + 2 denominator bits).
pub const TS_VECTOR_LEN: usize = 16;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = ReprError;

            fn from_str(s: &str) -> Result<Self, ReprError> {
                $(if s.eq_ignore_ascii_case($text) { return Ok($name::$variant); })+
                Err(ReprError::Invalid(format!(
                    concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                    s,
                    [$($text),+].join(", ")
                )))
            }
        }

        impl TryFrom<String> for $name {
            type Error = ReprError;

            fn try_from(s: String) -> Result<Self, ReprError> {
                s.parse()
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.to_string()
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Quant {
    Q4,
    Q16,
}
text_enum!(Quant { Q4 => "q4", Q16 => "q16" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BarMode {
    /// Bar tokens intertwined with the harmony, bar row in the melody roll.
    Bar,
    /// Time signature supplied as a separate condition vector.
    Ts,
}
text_enum!(BarMode { Bar => "bar", Ts => "ts" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MelodyMode {
    Pc,
    Fr,
    Frpc,
}
text_enum!(MelodyMode { Pc => "PC", Fr => "FR", Frpc => "FRPC" });

/// Map a MIDI pitch to the melody-roll rows it activates.
pub fn pitch_to_rows(pitch: u8, mode: MelodyMode) -> Result<Vec<usize>, ReprError> {
    if !(MIN_PITCH..=MAX_PITCH).contains(&pitch) {
        return Err(ReprError::PitchOutOfRange(pitch));
    }
    let fr = (pitch - MIN_PITCH) as usize;
    let pc = (pitch % 12) as usize;
    Ok(match mode {
        MelodyMode::Pc => vec![pc],
        MelodyMode::Fr => vec![fr],
        MelodyMode::Frpc => vec![fr, 88 + pc],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridConfig {
    pub quant: Quant,
    pub bar_mode: BarMode,
    pub melody_mode: MelodyMode,
    pub max_len: usize,
}

impl GridConfig {
    /// Grid step in sixteenth notes.
    pub fn step(&self) -> u32 {
        match self.quant {
            Quant::Q4 => 4,
            Quant::Q16 => 1,
        }
    }

    /// Pitch rows, excluding the bar row.
    pub fn pitch_dim(&self) -> usize {
        match self.melody_mode {
            MelodyMode::Pc => 12,
            MelodyMode::Fr => 88,
            MelodyMode::Frpc => 100,
        }
    }

    /// Melody-roll feature width including the bar row when present.
    pub fn melody_dim(&self) -> usize {
        self.pitch_dim() + usize::from(self.bar_mode == BarMode::Bar)
    }
}

/// Role of one grid column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    /// Barline marker (bar mode only).
    Bar,
    /// A chord position covering sixteenths `start..end`.
    Slot { start: u32, end: u32 },
    /// Beyond the end of the piece.
    Pad,
}

/// Column layout of one piece under a grid configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    columns: Vec<Column>,
}

impl GridLayout {
    /// Layout for a piece of `length_16th`, truncated or padded to `max_len`.
    ///
    /// Every bar starts at a multiple of the bar length; slots restart at
    /// each barline, so a final slot may be shorter than the grid step.
    pub fn new(cfg: &GridConfig, ts: TimeSignature, length_16th: u32) -> Self {
        let mut columns = Vec::with_capacity(cfg.max_len);
        let bar_len = ts.bar_len();
        let step = cfg.step();
        let mut bar_start = 0u32;
        'outer: while bar_start < length_16th && columns.len() < cfg.max_len {
            if cfg.bar_mode == BarMode::Bar {
                columns.push(Column::Bar);
            }
            let mut offset = 0;
            while offset < bar_len {
                if columns.len() >= cfg.max_len {
                    break 'outer;
                }
                let start = bar_start + offset;
                if start >= length_16th {
                    break 'outer;
                }
                columns.push(Column::Slot { start, end: (start + step).min(bar_start + bar_len) });
                offset += step;
            }
            bar_start += bar_len;
        }
        columns.truncate(cfg.max_len);
        columns.resize(cfg.max_len, Column::Pad);
        Self { columns }
    }

    /// Layout with every one of the `max_len` columns filled with content.
    pub fn unbounded(cfg: &GridConfig, ts: TimeSignature) -> Self {
        Self::new(cfg, ts, u32::MAX / 2)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Indices of chord slots (the only maskable harmony positions).
    pub fn chord_positions(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, Column::Slot { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_chord_slot(&self, i: usize) -> bool {
        matches!(self.columns.get(i), Some(Column::Slot { .. }))
    }
}

/// Aligned melody roll and harmony tokens for one piece.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    /// Row-major `max_len x melody_dim` binary matrix.
    pub melody_roll: Vec<u8>,
    pub melody_dim: usize,
    pub harmony: Vec<TokenId>,
    pub ts_vector: Option<[u8; TS_VECTOR_LEN]>,
    pub layout: GridLayout,
    pub time_signature: TimeSignature,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.harmony.len()
    }

    pub fn is_empty(&self) -> bool {
        self.harmony.is_empty()
    }

    pub fn melody_row(&self, col: usize) -> &[u8] {
        &self.melody_roll[col * self.melody_dim..(col + 1) * self.melody_dim]
    }

    /// Harmony tokens with every chord slot replaced by the mask token.
    pub fn masked_harmony(&self) -> Vec<TokenId> {
        self.harmony
            .iter()
            .zip(self.layout.columns())
            .map(|(&t, c)| if matches!(c, Column::Slot { .. }) { MASK_TOKEN } else { t })
            .collect()
    }
}

/// 14-bit one-hot numerator followed by a 2-bit one-hot denominator (4, 8).
pub fn ts_vector(ts: TimeSignature) -> [u8; TS_VECTOR_LEN] {
    let mut v = [0u8; TS_VECTOR_LEN];
    v[ts.numerator() as usize - 1] = 1;
    v[if ts.denominator() == 4 { 14 } else { 15 }] = 1;
    v
}

/// Encode a lead sheet onto the grid. Chords repeat over every slot they
/// sound in; positions before the first chord are no-chord.
pub fn encode(sheet: &LeadSheet, cfg: &GridConfig) -> Result<EncodedPair, ReprError> {
    sheet.validate()?;
    if cfg.max_len == 0 {
        return Err(ReprError::Invalid("grid max_len must be positive".into()));
    }
    let layout = GridLayout::new(cfg, sheet.time_signature, sheet.length_16th);
    let dim = cfg.melody_dim();
    let mut roll = vec![0u8; cfg.max_len * dim];
    let mut harmony = Vec::with_capacity(cfg.max_len);
    for (col, column) in layout.columns().iter().enumerate() {
        let row = &mut roll[col * dim..(col + 1) * dim];
        match *column {
            Column::Bar => {
                row[cfg.pitch_dim()] = 1;
                harmony.push(BAR_TOKEN);
            }
            Column::Pad => harmony.push(PAD_TOKEN),
            Column::Slot { start, end } => {
                for note in sheet.melody.iter().filter(|n| n.onset < end && n.end() > start) {
                    for r in pitch_to_rows(note.pitch, cfg.melody_mode)? {
                        row[r] = 1;
                    }
                }
                harmony.push(sheet.chord_at(start).map_or(NC_TOKEN, |c| c.token()));
            }
        }
    }
    Ok(EncodedPair {
        melody_roll: roll,
        melody_dim: dim,
        harmony,
        ts_vector: (cfg.bar_mode == BarMode::Ts).then(|| ts_vector(sheet.time_signature)),
        layout,
        time_signature: sheet.time_signature,
    })
}

/// Recover chord events from a token sequence laid out under `cfg` and `ts`.
///
/// Consecutive identical chords merge into one event; bar, pad and mask
/// tokens are skipped.
pub fn decode_harmony(tokens: &[TokenId], cfg: &GridConfig, ts: TimeSignature) -> Vec<ChordEvent> {
    let layout = GridLayout::unbounded(&GridConfig { max_len: tokens.len(), ..*cfg }, ts);
    let mut events: Vec<ChordEvent> = Vec::new();
    for (&tok, column) in tokens.iter().zip(layout.columns()) {
        let Column::Slot { start, .. } = *column else { continue };
        let Some(chord) = Chord::from_token(tok) else { continue };
        if events.last().is_some_and(|e| e.chord == chord) {
            continue;
        }
        events.push(ChordEvent { onset: start, chord });
    }
    events
}

//! Harmonization metrics on chord events, and attention diagonality.
//!
//! Chord metrics work on *events*: consecutive repeats of the same symbol
//! are merged first. No-chord events carry no pitch content, so they are
//! left out of the symbol statistics (che, cc, ctd) but still count as
//! harmonic-rhythm events (hrhe, hrc, cbs).
//!
//! Natural logs throughout. The tonal centroid is the usual 6-D projection
//! onto the circles of fifths, minor thirds and major thirds with radii
//! 1, 1 and 0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::repr::{Chord, ChordEvent, LeadSheet, Note, TimeSignature};
use crate::tensor::Tensor;

pub const CENTROID_RADII: [f64; 3] = [1.0, 1.0, 0.5];
pub const METRIC_NAMES: [&str; 9] = ["che", "cc", "ctd", "ctnctr", "pcs", "mctd", "hrhe", "hrc", "cbs"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Shape(String),
    #[error("no mass to measure")]
    ZeroMass,
    #[error("cannot compare {generated} generated pieces with {reference} references")]
    Unpaired { generated: usize, reference: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// The nine per-piece metrics. Counts are stored as reals so reports can be
/// averaged and differenced uniformly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub che: f64,
    pub cc: f64,
    pub ctd: f64,
    pub ctnctr: f64,
    pub pcs: f64,
    pub mctd: f64,
    pub hrhe: f64,
    pub hrc: f64,
    pub cbs: f64,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 9] {
        [self.che, self.cc, self.ctd, self.ctnctr, self.pcs, self.mctd, self.hrhe, self.hrc, self.cbs]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self { che: v[0], cc: v[1], ctd: v[2], ctnctr: v[3], pcs: v[4], mctd: v[5], hrhe: v[6], hrc: v[7], cbs: v[8] }
    }
}

/// Merge consecutive identical chords into single events.
pub fn merge_repeats(chords: &[ChordEvent]) -> Vec<ChordEvent> {
    let mut out: Vec<ChordEvent> = Vec::with_capacity(chords.len());
    for &c in chords {
        if out.last().is_some_and(|p| p.chord == c.chord) {
            continue;
        }
        out.push(c);
    }
    out
}

fn symbols(chords: &[ChordEvent]) -> impl Iterator<Item = Chord> + '_ {
    chords.iter().map(|e| e.chord).filter(|c| *c != Chord::NoChord)
}

fn entropy<K: Ord>(counts: &BTreeMap<K, usize>) -> f64 {
    let total: usize = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    // -0.0 for a single bin
    h.max(0.0)
}

/// Chord histogram entropy.
pub fn che(chords: &[ChordEvent]) -> f64 {
    let mut counts = BTreeMap::new();
    for c in symbols(chords) {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    entropy(&counts)
}

/// Chord coverage: number of distinct chord symbols.
pub fn cc(chords: &[ChordEvent]) -> usize {
    symbols(chords).collect::<BTreeSet<_>>().len()
}

/// 6-D tonal centroid of a pitch-class set; the zero vector for an empty set.
pub fn tonal_centroid(pcs: &[u8]) -> [f64; 6] {
    let mut c = [0.0; 6];
    if pcs.is_empty() {
        return c;
    }
    let angles = [7.0 * PI / 6.0, 3.0 * PI / 2.0, 2.0 * PI / 3.0];
    for &pc in pcs {
        let l = pc as f64;
        for (k, (&a, &r)) in angles.iter().zip(&CENTROID_RADII).enumerate() {
            c[2 * k] += r * (l * a).sin();
            c[2 * k + 1] += r * (l * a).cos();
        }
    }
    c.iter_mut().for_each(|x| *x /= pcs.len() as f64);
    c
}

fn dist(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Chord tonal distance: mean centroid distance between adjacent chords.
pub fn ctd(chords: &[ChordEvent]) -> f64 {
    let cents: Vec<[f64; 6]> = symbols(chords).map(|c| tonal_centroid(&c.pitch_classes())).collect();
    if cents.len() < 2 {
        return 0.0;
    }
    cents.windows(2).map(|w| dist(&w[0], &w[1])).sum::<f64>() / (cents.len() - 1) as f64
}

fn sorted_melody(melody: &[Note]) -> Vec<Note> {
    let mut m = melody.to_vec();
    m.sort_by_key(|n| (n.onset, n.pitch));
    m
}

fn chord_at(chords: &[ChordEvent], t: u32) -> Chord {
    let i = chords.partition_point(|c| c.onset <= t);
    if i == 0 { Chord::NoChord } else { chords[i - 1].chord }
}

/// Chord-tone to non-chord-tone ratio `(n_c + n_p) / (n_c + n_n)`, where a
/// non-chord tone is "proper" when the next note lies within two semitones.
/// Each note is judged against the chord sounding at its onset.
pub fn ctnctr(melody: &[Note], chords: &[ChordEvent]) -> f64 {
    let notes = sorted_melody(melody);
    let (mut nc, mut nn, mut np) = (0usize, 0usize, 0usize);
    for (i, n) in notes.iter().enumerate() {
        if chord_at(chords, n.onset).pitch_classes().contains(&(n.pitch % 12)) {
            nc += 1;
        } else {
            nn += 1;
            if notes.get(i + 1).is_some_and(|next| next.pitch.abs_diff(n.pitch) <= 2) {
                np += 1;
            }
        }
    }
    if nc + nn == 0 { 0.0 } else { (nc + np) as f64 / (nc + nn) as f64 }
}

/// Consonance score of a melody-over-chord interval class.
pub fn interval_score(semitones: u8) -> f64 {
    match semitones % 12 {
        0 | 3 | 4 | 7 | 8 | 9 => 1.0,
        5 => 0.0,
        _ => -1.0,
    }
}

/// Splits every note at chord changes: `(note, chord, duration)` pieces.
fn note_segments(melody: &[Note], chords: &[ChordEvent]) -> Vec<(Note, Chord, u32)> {
    let mut out = Vec::new();
    for n in sorted_melody(melody) {
        let mut t = n.onset;
        while t < n.end() {
            let i = chords.partition_point(|c| c.onset <= t);
            let next_change = chords.get(i).map_or(u32::MAX, |c| c.onset);
            let end = n.end().min(next_change);
            out.push((n, chord_at(chords, t), end - t));
            t = end;
        }
    }
    out
}

fn weighted_mean(items: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (v, w) in items {
        num += v * w;
        den += w;
    }
    if den == 0.0 { 0.0 } else { num / den }
}

/// Pitch consonance score: duration-weighted mean, over melody time with a
/// chord sounding, of the mean interval score against each chord tone.
pub fn pcs(melody: &[Note], chords: &[ChordEvent]) -> f64 {
    weighted_mean(note_segments(melody, chords).into_iter().filter(|(_, c, _)| *c != Chord::NoChord).map(|(n, c, d)| {
        let tones = c.pitch_classes();
        let m = n.pitch % 12;
        let s = tones.iter().map(|&t| interval_score((m + 12 - t) % 12)).sum::<f64>() / tones.len() as f64;
        (s, d as f64)
    }))
}

/// Melody-chord tonal distance: duration-weighted mean distance between each
/// note's centroid and the sounding chord's.
pub fn mctd(melody: &[Note], chords: &[ChordEvent]) -> f64 {
    weighted_mean(note_segments(melody, chords).into_iter().filter(|(_, c, _)| *c != Chord::NoChord).map(|(n, c, d)| {
        (dist(&tonal_centroid(&[n.pitch % 12]), &tonal_centroid(&c.pitch_classes())), d as f64)
    }))
}

/// Event durations in sixteenths; the last event lasts until `length`.
pub fn chord_durations(chords: &[ChordEvent], length: u32) -> Vec<u32> {
    chords
        .iter()
        .enumerate()
        .map(|(i, c)| chords.get(i + 1).map_or(length, |n| n.onset).saturating_sub(c.onset))
        .collect()
}

/// Harmonic rhythm histogram entropy over chord durations.
pub fn hrhe(chords: &[ChordEvent], length: u32) -> f64 {
    let mut counts = BTreeMap::new();
    for d in chord_durations(chords, length) {
        *counts.entry(d).or_insert(0usize) += 1;
    }
    entropy(&counts)
}

/// Harmonic rhythm coverage: distinct chord durations.
pub fn hrc(chords: &[ChordEvent], length: u32) -> usize {
    chord_durations(chords, length).into_iter().collect::<BTreeSet<_>>().len()
}

/// Metrical weight of a position (sixteenths from the bar start); lower is stronger.
///
/// Simple /4 meters: downbeat 0, mid-bar beat of even meters with 4+ beats
/// 0.25, other beats 0.5, eighth offbeats 0.75, sixteenth offbeats 1.
/// Compound /8 meters (6/8, 9/8, 12/8): downbeat 0, dotted-quarter beats
/// 0.25, other eighths 0.5, sixteenth offbeats 1. Other /8 meters: downbeat
/// 0, eighths 0.5, sixteenth offbeats 1.
pub fn metrical_weight(pos: u32, ts: TimeSignature) -> f64 {
    let pos = pos % ts.bar_len();
    if pos == 0 {
        return 0.0;
    }
    let num = ts.numerator();
    if ts.denominator() == 4 {
        if pos % 4 == 0 {
            let beat = pos / 4;
            if num % 2 == 0 && num >= 4 && beat == num / 2 { 0.25 } else { 0.5 }
        } else if pos % 2 == 0 {
            0.75
        } else {
            1.0
        }
    } else if pos % 2 == 1 {
        1.0
    } else if num % 3 == 0 && num > 3 && pos % 6 == 0 {
        0.25
    } else {
        0.5
    }
}

/// Chord beat strength: mean metrical weight of chord onsets.
pub fn cbs(chords: &[ChordEvent], ts: TimeSignature) -> f64 {
    if chords.is_empty() {
        return 0.0;
    }
    chords.iter().map(|c| metrical_weight(c.onset, ts)).sum::<f64>() / chords.len() as f64
}

/// All nine metrics for a lead sheet (repeats merged first).
pub fn report(sheet: &LeadSheet) -> MetricReport {
    let chords = merge_repeats(&sheet.chords);
    let len = sheet.length_16th;
    MetricReport {
        che: che(&chords),
        cc: cc(&chords) as f64,
        ctd: ctd(&chords),
        ctnctr: ctnctr(&sheet.melody, &chords),
        pcs: pcs(&sheet.melody, &chords),
        mctd: mctd(&sheet.melody, &chords),
        hrhe: hrhe(&chords, len),
        hrc: hrc(&chords, len) as f64,
        cbs: cbs(&chords, sheet.time_signature),
    }
}

/// Per-metric mean absolute difference, pieces paired by index.
pub fn compare_corpora(generated: &[MetricReport], reference: &[MetricReport]) -> Result<MetricReport> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(MetricsError::Unpaired { generated: generated.len(), reference: reference.len() });
    }
    let mut acc = [0.0; 9];
    for (g, r) in generated.iter().zip(reference) {
        for ((a, x), y) in acc.iter_mut().zip(g.values()).zip(r.values()) {
            *a += (x - y).abs();
        }
    }
    acc.iter_mut().for_each(|a| *a /= generated.len() as f64);
    Ok(MetricReport::from_values(acc))
}

/// Restricts a harmony-by-melody quadrant to the listed grid positions
/// (dropping bar and pad columns), so row `i` and column `i` share a time.
pub fn align_quadrant(quadrant: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let shape = quadrant.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(MetricsError::Shape(format!("quadrant must be square, got {shape:?}")));
    }
    if let Some(&p) = keep.iter().find(|&&p| p >= shape[0]) {
        return Err(MetricsError::Shape(format!("position {p} outside {}x{} quadrant", shape[0], shape[1])));
    }
    let data = keep.iter().flat_map(|&r| keep.iter().map(move |&c| quadrant.at(r, c))).collect();
    Ok(Tensor::new(vec![keep.len(), keep.len()], data).expect("square"))
}

/// Share of the matrix's mass within `|row - col| <= w`.
pub fn diagonality(aligned: &Tensor, w: usize) -> Result<f64> {
    let shape = aligned.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(MetricsError::Shape(format!("aligned quadrant must be square, got {shape:?}")));
    }
    let n = shape[0];
    let (mut band, mut total) = (0.0, 0.0);
    for r in 0..n {
        for c in 0..n {
            let v = aligned.at(r, c);
            total += v;
            if r.abs_diff(c) <= w {
                band += v;
            }
        }
    }
    if !(total > 0.0) {
        return Err(MetricsError::ZeroMass);
    }
    Ok(band / total)
}

/// One row per piece: `piece,che,cc,...`.
pub fn write_reports(w: impl Write, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["piece"];
    header.extend(METRIC_NAMES);
    out.write_record(&header)?;
    for (name, r) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(r.values().iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

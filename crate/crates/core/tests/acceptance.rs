//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any implementation criterion fails. Criterion 5 is an
//! empirical training outcome rather than a contract of the code: its FAIL
//! line is printed but only fatal under `CROSSHARM_ACCEPTANCE_STRICT=1`.
//!
//! `CROSSHARM_ACCEPTANCE=1,3,5` runs a subset. The diagnostic models of
//! criterion 5 take hours to train on one core, so finished runs are cached
//! under `target/tmp/acceptance/<experiment>-<config hash>/` and reused;
//! `CROSSHARM_ACCEPTANCE_FRESH=1` discards the cache and retrains.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crossharm_core::curriculum::{
    apply_mask, ff_num_unmasked, md_num_stages, md_schedule, mlm_loss_node, CurriculumKind, CurriculumSpec, MaskState,
};
use crossharm_core::diagdata::{generate, DiagConfig};
use crossharm_core::harness::{
    attention_for, evaluate, load_model, load_train_state, split_validation, train, TrainConfig,
};
use crossharm_core::metrics::{self, report};
use crossharm_core::model::{Model, ModelInput};
use crossharm_core::repr::{
    encode, BarMode, Chord, ChordEvent, EncodedPair, LeadSheet, Note, Quant, Quality, TimeSignature, TokenId,
    BAR_TOKEN, MASK_TOKEN, NC_TOKEN, PAD_TOKEN, VOCAB_SIZE,
};
use crossharm_core::sampler::{
    harmonize, nucleus_sample, unmask, ConstraintSet, ModelPredictor, Predictor, SamplerConfig, Strategy,
    EXCLUDED_TOKENS,
};
use crossharm_core::tensor::{Graph, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("CROSSHARM_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "curriculum arithmetic", curriculum_arithmetic),
        (2, "schedule shape", schedule_shape),
        (3, "inference call counts", call_counts),
        (4, "gradient correctness", gradient_check),
        (6, "metric oracles", metric_oracles),
        (7, "sampler contracts", sampler_contracts),
        (8, "masking invariants", masking_invariants),
        (9, "determinism", determinism),
        (5, "diagnostic reproduction", diagnostic_reproduction),
    ];
    let strict = std::env::var("CROSSHARM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for (n, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                if strict || n != 5 {
                    failed += 1;
                }
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn curriculum_arithmetic() -> Outcome {
    let v = ff_num_unmasked(50, 100, 32, 5.0).map_err(err)?;
    ensure!(v == 1, "ff_num_unmasked(50, 100, 32) = {v}");
    for total in [1, 7, 100, 5650] {
        for l in [1, 2, 32, 256] {
            let v = ff_num_unmasked(0, total, l, 5.0).map_err(err)?;
            ensure!(v == 0, "ff_num_unmasked(0, {total}, {l}) = {v}");
        }
    }
    // Fraction of fully masked steps, counted on the masks the trainer draws.
    let spec = CurriculumSpec::new(CurriculumKind::Ff, 0);
    let maskable: Vec<usize> = (0..40).filter(|p| p % 5 != 0).collect();
    assert_eq!(maskable.len(), 32);
    let mut worst: f64 = 0.0;
    for total in [100u64, 999, 5650] {
        let mut rng = ChaCha8Rng::seed_from_u64(total);
        let mut full = 0;
        for s in 0..total {
            let m = spec.training_mask(&mut rng, s, total, 40, &maskable).map_err(err)?;
            if m.visible_count == 0 {
                full += 1;
            }
        }
        let frac = full as f64 / total as f64;
        ensure!((frac - 0.5).abs() <= 1.0 / total as f64, "s_total={total}: fully masked fraction {frac}");
        worst = worst.max((frac - 0.5).abs() * total as f64);
    }
    Ok(format!("ff(50,100,32)=1, ff(0,..)=0, fully masked fraction within {worst:.2} steps of 1/2"))
}

// ---------------------------------------------------------------- 2

fn ceil_log2(l: usize) -> usize {
    (l as f64).log2().ceil() as usize
}

fn schedule_shape() -> Outcome {
    for l in 2..=256usize {
        let stages = md_num_stages(l);
        ensure!(stages == ceil_log2(l), "L={l}: {stages} stages, want {}", ceil_log2(l));
        let sched = md_schedule(l);
        ensure!(sched.len() == stages + 1, "L={l}: schedule has {} sets", sched.len());
        ensure!(sched[0].is_empty(), "L={l}: stage 0 reveals {:?}", sched[0]);
        ensure!(sched[stages] == (0..l).collect::<Vec<_>>(), "L={l}: last stage is not everything");
        for k in 1..=stages {
            let (prev, cur) = (&sched[k - 1], &sched[k]);
            ensure!(prev.iter().all(|i| cur.contains(i)), "L={l}: stage {k} drops an index");
            ensure!(cur.len() > prev.len(), "L={l}: stage {k} reveals nothing");
            if k > 1 {
                ensure!(cur.len() <= 2 * prev.len(), "L={l}: stage {k} grows {} -> {}", prev.len(), cur.len());
            }
        }
    }
    Ok("L in [2, 256]: ceil(log2 L) nested stages, each at most doubling".into())
}

// ---------------------------------------------------------------- 3

struct Counting<'a> {
    inner: ModelPredictor<'a>,
    calls: usize,
}

impl Predictor for Counting<'_> {
    fn predict(&mut self, harmony: &[TokenId], call: usize) -> crossharm_core::sampler::Result<Tensor> {
        self.calls += 1;
        self.inner.predict(harmony, call)
    }
}

fn random_sheet(rng: &mut impl Rng, ts: TimeSignature, length: u32) -> LeadSheet {
    let mut melody = Vec::new();
    let mut t = 0;
    while t < length {
        t += rng.random_range(0..3);
        if t >= length {
            break;
        }
        let d = rng.random_range(1..=8).min(length - t);
        melody.push(Note { onset: t, duration: d, pitch: rng.random_range(55..=80) });
        t += d;
    }
    let pool: Vec<Chord> = (0..6)
        .map(|_| Chord::new(rng.random_range(0..12), Quality::from_index(rng.random_range(0..6)).unwrap()))
        .collect();
    let mut chords = Vec::new();
    for t in 0..length {
        if (t == 0 && rng.random_bool(0.8)) || rng.random_bool(0.15) {
            let chord = if rng.random_bool(0.1) { Chord::NoChord } else { pool[rng.random_range(0..pool.len())] };
            chords.push(ChordEvent { onset: t, chord });
        }
    }
    LeadSheet { time_signature: ts, length_16th: length, melody, chords }
}

fn call_counts() -> Outcome {
    let mut seen = Vec::new();
    for l in [16usize, 32, 64] {
        let cfg = TrainConfig {
            bar_mode: BarMode::Ts,
            max_len: l,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            ..Default::default()
        };
        let model = Model::new(cfg.model_config(), l as u64).map_err(err)?;
        let sheet = random_sheet(&mut ChaCha8Rng::seed_from_u64(l as u64), TimeSignature::COMMON, 4 * l as u32);
        let item = encode(&sheet, &cfg.grid()).map_err(err)?;
        let maskable = item.layout.chord_positions();
        ensure!(maskable.len() == l, "grid has {} chord slots, want {l}", maskable.len());
        for (strategy, want) in [(Strategy::UR10, 10), (Strategy::UMD, ceil_log2(l)), (Strategy::Seq, l)] {
            let mut p = Counting { inner: ModelPredictor { model: &model, item: &item }, calls: 0 };
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let sc = SamplerConfig::new(strategy, 0);
            let (tokens, reported) =
                unmask(&mut p, &item.harmony, &maskable, &sc, &ConstraintSet::default(), &mut rng).map_err(err)?;
            ensure!(p.calls == want && reported == want, "L={l} {strategy}: {} calls, want {want}", p.calls);
            ensure!(tokens.iter().all(|&t| t < NC_TOKEN + 1), "L={l} {strategy}: left a special token");
            seen.push(format!("{strategy}@{l}={}", p.calls));
        }
    }
    Ok(seen.join(" "))
}

// ---------------------------------------------------------------- 4

fn gradient_check() -> Outcome {
    let cfg = TrainConfig {
        bar_mode: BarMode::Ts,
        max_len: 6,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ff_mult: 2,
        stage_embedding: true,
        ..Default::default()
    };
    let mut model = Model::new(cfg.model_config(), 11).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mc = model.config().clone();
    let items: Vec<(Vec<u8>, Vec<TokenId>, [u8; 16], MaskState)> = (0..2)
        .map(|_| {
            let melody = (0..mc.max_len * mc.melody_dim).map(|_| rng.random_bool(0.3) as u8).collect();
            let targets: Vec<TokenId> = (0..mc.max_len).map(|_| rng.random_range(0..=NC_TOKEN)).collect();
            let mut ts = [0u8; 16];
            ts[rng.random_range(0..16)] = 1;
            let masked: Vec<bool> = (0..mc.max_len).map(|i| i == 0 || rng.random_bool(0.6)).collect();
            let state = MaskState { masked, stage: rng.random_range(0..=mc.max_stage), visible_count: 0 };
            (melody, targets, ts, state)
        })
        .collect();
    let harmonies: Vec<Vec<TokenId>> = items.iter().map(|(_, t, _, s)| apply_mask(t, s).unwrap()).collect();
    let targets: Vec<TokenId> = items.iter().flat_map(|(_, t, _, _)| t.iter().copied()).collect();
    let states: Vec<MaskState> = items.iter().map(|it| it.3.clone()).collect();

    let loss_of = |model: &Model, want_grads: bool| {
        let batch: Vec<ModelInput<'_>> = items
            .iter()
            .zip(&harmonies)
            .map(|((m, _, ts, s), h)| ModelInput { melody: m, harmony: h, ts: Some(ts), stage: Some(s.stage) })
            .collect();
        let mut g = Graph::new();
        let fwd = model.build(&mut g, &batch).unwrap();
        let loss = mlm_loss_node(&mut g, fwd.logits, &targets, &states).unwrap();
        let value = g.value(loss).data()[0];
        let grads = want_grads.then(|| {
            let gr = g.backward(loss).unwrap();
            g.param_grads(&gr, model.params().len())
        });
        (value, grads)
    };

    let (_, grads) = loss_of(&model, true);
    let grads = grads.unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.params().ids().collect();
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    let mut zero = Vec::new();
    for id in ids {
        let n = model.params().get(id).len();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss_of(&model, false).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss_of(&model, false).0;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        checked += n;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        // A gradient that vanishes identically (the key bias shifts every
        // score of a softmax row equally) leaves both sides at rounding noise.
        if norm(&analytic) < 1e-12 && norm(&numeric) < 1e-8 {
            zero.push(model.params().name(id).to_string());
            continue;
        }
        let rel = norm(&diff) / scale;
        if rel > worst {
            worst = rel;
            worst_name = model.params().name(id).to_string();
        }
    }
    ensure!(worst <= 1e-4, "relative error {worst:.3e} on `{worst_name}`");
    Ok(format!(
        "{checked} parameters, worst per-tensor relative error {worst:.2e} (`{worst_name}`); identically zero: {}",
        zero.join(", ")
    ))
}

// ---------------------------------------------------------------- 5

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cached_run(cfg: &TrainConfig, train_set: &[LeadSheet], fresh: bool) -> Result<Model, String> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(format!("{}-{}", cfg.experiment_name(), &cfg.hash()[..12]));
    if fresh && dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(err)?;
    }
    let ckpt = dir.join("model.ckpt");
    if ckpt.exists() && dir.join("run.json").exists() {
        eprintln!("reusing {}", dir.display());
        return Ok(load_model(&ckpt).map_err(err)?.0);
    }
    eprintln!("training {} into {} (resumable)", cfg.experiment_name(), dir.display());
    let (tr, va) = split_validation(train_set, cfg.val_fraction, cfg.val_seed);
    Ok(train(cfg, &tr, &va, Some(&dir), true).map_err(err)?.model)
}

fn diagnostic_reproduction() -> Outcome {
    let fresh = std::env::var("CROSSHARM_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    let (train_set, test_set) = generate(&DiagConfig::default()).map_err(err)?;
    let corpus: Vec<(String, LeadSheet)> =
        test_set.iter().enumerate().map(|(i, s)| (format!("{i:04}"), s.clone())).collect();
    let mut results = BTreeMap::new();
    for kind in ["ff", "md", "r10"] {
        let path = workspace_root().join(format!("configs/diag_{kind}.toml"));
        let cfg = TrainConfig::load(&path).map_err(err)?;
        ensure!(
            cfg.n_layers == 4 && cfg.n_heads == 4 && cfg.d_model == 256 && cfg.epochs >= 50,
            "{} does not match the required architecture",
            path.display()
        );
        ensure!(cfg.quant == Quant::Q4 && cfg.bar_mode == BarMode::Bar, "{} must use q4 with bar tokens", path.display());
        let model = cached_run(&cfg, &train_set, fresh)?;
        let eval = evaluate(&model, &cfg.grid(), &corpus, &SamplerConfig::new(Strategy::UR10, 0)).map_err(err)?;
        let mut diag = 0.0;
        for sheet in &test_set[..10] {
            let item = encode(sheet, &cfg.grid()).map_err(err)?;
            diag += attention_for(&model, &item).map_err(err)?.diagonality;
        }
        results.insert(kind, (eval.accuracy, diag / 10.0));
    }
    let (ff_acc, ff) = results["ff"];
    let (md_acc, md) = results["md"];
    let (r10_acc, r10) = results["r10"];
    let detail = format!(
        "accuracy FF {ff_acc:.4} MD {md_acc:.4} R10 {r10_acc:.4}; diagonality FF {ff:.4} MD {md:.4} R10 {r10:.4}"
    );
    ensure!(ff_acc >= 0.9, "FF accuracy below 0.9 — {detail}");
    ensure!(ff >= 2.0 * md && ff >= 2.0 * r10, "FF diagonality not 2x MD and R10 — {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 6

/// Brute-force reference implementations, written independently of the
/// library (time-sliced where the library splits segments, explicit counting
/// where it uses histograms).
mod oracle {
    use super::*;

    pub fn merged(chords: &[ChordEvent]) -> Vec<ChordEvent> {
        let mut out = Vec::new();
        for i in 0..chords.len() {
            if i == 0 || chords[i].chord != chords[i - 1].chord {
                out.push(chords[i]);
            }
        }
        out
    }

    pub fn entropy_of_counts(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let n = n as f64;
        // H = ln n - (1/n) sum c ln c
        let h = n.ln() - counts.iter().map(|&c| c as f64 * (c as f64).ln()).sum::<f64>() / n;
        h.max(0.0)
    }

    fn symbol_tokens(chords: &[ChordEvent]) -> Vec<TokenId> {
        chords.iter().filter(|c| c.chord != Chord::NoChord).map(|c| c.chord.token()).collect()
    }

    pub fn che(chords: &[ChordEvent]) -> f64 {
        let mut counts: HashMap<TokenId, usize> = HashMap::new();
        for t in symbol_tokens(chords) {
            *counts.entry(t).or_default() += 1;
        }
        entropy_of_counts(&counts.values().copied().collect::<Vec<_>>())
    }

    pub fn cc(chords: &[ChordEvent]) -> f64 {
        let mut t = symbol_tokens(chords);
        t.sort_unstable();
        t.dedup();
        t.len() as f64
    }

    pub fn centroid(pcs: &[u8]) -> [f64; 6] {
        let mut c = [0.0; 6];
        if pcs.is_empty() {
            return c;
        }
        // (angle step in degrees, radius) for fifths, minor thirds, major thirds
        let circles = [(210.0f64, 1.0), (270.0, 1.0), (120.0, 0.5)];
        for &pc in pcs {
            for (k, (deg, r)) in circles.iter().enumerate() {
                let theta = (deg * pc as f64).rem_euclid(360.0).to_radians();
                c[2 * k] += r * theta.sin() / pcs.len() as f64;
                c[2 * k + 1] += r * theta.cos() / pcs.len() as f64;
            }
        }
        c
    }

    fn euclid(a: [f64; 6], b: [f64; 6]) -> f64 {
        (0..6).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt()
    }

    pub fn ctd(chords: &[ChordEvent]) -> f64 {
        let syms: Vec<Chord> = chords.iter().map(|c| c.chord).filter(|c| *c != Chord::NoChord).collect();
        if syms.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 1..syms.len() {
            total += euclid(centroid(&syms[i - 1].pitch_classes()), centroid(&syms[i].pitch_classes()));
        }
        total / (syms.len() - 1) as f64
    }

    pub fn sounding(chords: &[ChordEvent], t: u32) -> Chord {
        let mut c = Chord::NoChord;
        for e in chords {
            if e.onset <= t {
                c = e.chord;
            }
        }
        c
    }

    pub fn ctnctr(melody: &[Note], chords: &[ChordEvent]) -> f64 {
        let mut notes = melody.to_vec();
        notes.sort_by_key(|n| (n.onset, n.pitch));
        if notes.is_empty() {
            return 0.0;
        }
        let (mut chord_tones, mut others, mut proper) = (0, 0, 0);
        for i in 0..notes.len() {
            let tones = sounding(chords, notes[i].onset).pitch_classes();
            if tones.contains(&(notes[i].pitch % 12)) {
                chord_tones += 1;
            } else {
                others += 1;
                if i + 1 < notes.len() && (notes[i + 1].pitch as i32 - notes[i].pitch as i32).abs() <= 2 {
                    proper += 1;
                }
            }
        }
        (chord_tones + proper) as f64 / (chord_tones + others) as f64
    }

    fn consonance(melody_pc: u8, chord_pc: u8) -> f64 {
        let iv = (12 + melody_pc as i32 - chord_pc as i32) % 12;
        if [0, 3, 4, 7, 8, 9].contains(&iv) {
            1.0
        } else if iv == 5 {
            0.0
        } else {
            -1.0
        }
    }

    /// Sixteenth-by-sixteenth sum over sounding notes.
    fn sliced(melody: &[Note], chords: &[ChordEvent], f: impl Fn(u8, Chord) -> f64) -> f64 {
        let end = melody.iter().map(|n| n.onset + n.duration).max().unwrap_or(0);
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..end {
            let c = sounding(chords, t);
            if c == Chord::NoChord {
                continue;
            }
            for n in melody.iter().filter(|n| n.onset <= t && t < n.onset + n.duration) {
                num += f(n.pitch, c);
                den += 1.0;
            }
        }
        if den == 0.0 { 0.0 } else { num / den }
    }

    pub fn pcs(melody: &[Note], chords: &[ChordEvent]) -> f64 {
        sliced(melody, chords, |p, c| {
            let tones = c.pitch_classes();
            tones.iter().map(|&t| consonance(p % 12, t)).sum::<f64>() / tones.len() as f64
        })
    }

    pub fn mctd(melody: &[Note], chords: &[ChordEvent]) -> f64 {
        sliced(melody, chords, |p, c| euclid(centroid(&[p % 12]), centroid(&c.pitch_classes())))
    }

    fn iois(chords: &[ChordEvent], length: u32) -> Vec<u32> {
        let mut out = Vec::new();
        for i in 0..chords.len() {
            let next = if i + 1 < chords.len() { chords[i + 1].onset } else { length };
            out.push(next - chords[i].onset);
        }
        out
    }

    pub fn hrhe(chords: &[ChordEvent], length: u32) -> f64 {
        let d = iois(chords, length);
        let mut distinct = d.clone();
        distinct.sort_unstable();
        distinct.dedup();
        entropy_of_counts(&distinct.iter().map(|v| d.iter().filter(|x| *x == v).count()).collect::<Vec<_>>())
    }

    pub fn hrc(chords: &[ChordEvent], length: u32) -> f64 {
        let mut d = iois(chords, length);
        d.sort_unstable();
        d.dedup();
        d.len() as f64
    }

    pub fn weight(onset: u32, ts: TimeSignature) -> f64 {
        let (num, den) = (ts.numerator(), ts.denominator());
        let bar = num * 16 / den;
        let pos = onset % bar;
        if pos == 0 {
            0.0
        } else if den == 4 {
            match pos % 4 {
                0 if num >= 4 && num % 2 == 0 && 2 * pos == bar => 0.25,
                0 => 0.5,
                2 => 0.75,
                _ => 1.0,
            }
        } else if pos % 2 == 1 {
            1.0
        } else if [6, 9, 12].contains(&num) && pos % 6 == 0 {
            0.25
        } else {
            0.5
        }
    }

    pub fn cbs(chords: &[ChordEvent], ts: TimeSignature) -> f64 {
        if chords.is_empty() {
            return 0.0;
        }
        chords.iter().map(|c| weight(c.onset, ts)).sum::<f64>() / chords.len() as f64
    }

    pub fn report(sheet: &LeadSheet) -> [f64; 9] {
        let c = merged(&sheet.chords);
        let (m, len, ts) = (&sheet.melody, sheet.length_16th, sheet.time_signature);
        [che(&c), cc(&c), ctd(&c), ctnctr(m, &c), pcs(m, &c), mctd(m, &c), hrhe(&c, len), hrc(&c, len), cbs(&c, ts)]
    }
}

fn chord(s: &str) -> Chord {
    let (root, q) = s.split_once(':').unwrap();
    let root = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"].iter().position(|r| *r == root).unwrap();
    Chord::new(root as u8, q.parse().unwrap())
}

fn events(symbols: &[&str], every: u32) -> Vec<ChordEvent> {
    symbols.iter().enumerate().map(|(i, s)| ChordEvent { onset: i as u32 * every, chord: chord(s) }).collect()
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    // Trivial and hand-derived cases.
    ensure!(close(metrics::che(&events(&["C:maj", "F:maj", "G:maj", "A:min"], 4)), 4f64.ln()), "che(uniform-4) != ln 4");
    ensure!(metrics::che(&events(&["C:maj"], 4)) == 0.0, "che(one chord) != 0");
    ensure!(metrics::cc(&events(&["C:maj", "C:maj", "G:maj", "A:min"], 4)) == 3, "cc([C,C,G,Am]) != 3");
    ensure!(metrics::cc(&[]) == 0, "cc([]) != 0");
    ensure!(metrics::cc(&events(&["C:maj", "D:min", "E:min", "F:maj", "G:7"], 4)) == 5, "cc(all distinct) != 5");
    ensure!(metrics::ctd(&events(&["C:maj", "C:maj", "C:maj"], 4)) == 0.0, "ctd(constant) != 0");
    let (c, g) = (chord("C:maj").pitch_classes(), chord("G:maj").pitch_classes());
    let hand: f64 = {
        let (a, b) = (oracle::centroid(&c), oracle::centroid(&g));
        (0..6).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    };
    let cg = metrics::ctd(&events(&["C:maj", "G:maj"], 4));
    ensure!(close(cg, hand), "ctd([C,G]) {cg} vs {hand}");
    ensure!(close(cg, metrics::ctd(&events(&["G:maj", "C:maj"], 4))), "ctd not symmetric");
    // Centroid of C major against the textbook formula.
    let r: [f64; 3] = [1.0, 1.0, 0.5];
    let a = [7.0 * PI / 6.0, 3.0 * PI / 2.0, 2.0 * PI / 3.0];
    let lib = metrics::tonal_centroid(&c);
    for k in 0..3 {
        let s = c.iter().map(|&p| r[k] * (p as f64 * a[k]).sin()).sum::<f64>() / 3.0;
        ensure!(close(lib[2 * k], s), "centroid component {} of C:maj", 2 * k);
    }
    let bar = 16;
    let one_per_bar = events(&["C:maj", "F:maj", "G:maj", "C:maj"], bar);
    ensure!(metrics::hrhe(&one_per_bar, 4 * bar) == 0.0 && metrics::hrc(&one_per_bar, 4 * bar) == 1, "hrhe/hrc one per bar");
    let two: Vec<ChordEvent> = [(0, "C:maj"), (4, "F:maj"), (8, "G:maj"), (16, "C:maj")]
        .iter()
        .map(|&(onset, s)| ChordEvent { onset, chord: chord(s) })
        .collect();
    ensure!(close(metrics::hrhe(&two, 24), 2f64.ln()), "hrhe with durations 4,4,8,8 != ln 2");
    let ts = TimeSignature::COMMON;
    ensure!(metrics::cbs(&one_per_bar, ts) == 0.0, "cbs(downbeats) != 0");
    let off: Vec<ChordEvent> = (0..8).map(|i| ChordEvent { onset: 2 * i + 1, chord: chord("C:maj") }).collect();
    ensure!(metrics::cbs(&off, ts) == 1.0, "cbs(sixteenth offbeats) != 1");
    let tone = |p: u8, on: u32| Note { onset: on, duration: 4, pitch: p };
    let cmaj = events(&["C:maj"], 16);
    ensure!(metrics::ctnctr(&[tone(60, 0), tone(64, 4), tone(67, 8)], &cmaj) == 1.0, "ctnctr(all chord tones)");
    ensure!(metrics::ctnctr(&[tone(64, 0), tone(65, 4), tone(67, 8)], &cmaj) == 1.0, "ctnctr(passing tone)");
    let nc = vec![ChordEvent { onset: 0, chord: Chord::NoChord }];
    let by_count = 2.0 / 3.0; // three non-chord tones, the first two followed by a step
    ensure!(close(metrics::ctnctr(&[tone(60, 0), tone(62, 4), tone(64, 8)], &nc), by_count), "ctnctr(all nc)");
    let root_only = vec![ChordEvent { onset: 0, chord: chord("C:1") }];
    ensure!(metrics::pcs(&[tone(48, 0)], &root_only) == 1.0, "pcs(root doubling)");
    ensure!(metrics::pcs(&[tone(54, 0)], &root_only) == -1.0, "pcs(tritone)");
    ensure!(metrics::mctd(&[tone(60, 0)], &root_only) == 0.0, "mctd(same single pc)");

    // Random pieces against the oracles.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let meters = [(4, 4), (3, 4), (2, 4), (5, 4), (6, 4), (6, 8), (9, 8), (12, 8), (7, 8), (3, 8)];
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (n, d) = meters[rng.random_range(0..meters.len())];
        let ts = TimeSignature::new(n, d).map_err(err)?;
        let bars = rng.random_range(1..=4);
        let sheet = random_sheet(&mut rng, ts, ts.bar_len() * bars);
        sheet.validate().map_err(err)?;
        let lib = report(&sheet).values();
        let want = oracle::report(&sheet);
        for (k, name) in metrics::METRIC_NAMES.iter().enumerate() {
            let e = (lib[k] - want[k]).abs();
            ensure!(e <= 1e-9, "piece {i} ({n}/{d}): {name} = {} vs oracle {}", lib[k], want[k]);
            worst = worst.max(e);
        }
    }
    Ok(format!("hand cases exact; 100 random pieces x 9 metrics, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 7

/// Reference nucleus: sort the tempered distribution, take the shortest
/// prefix reaching `top_p`.
fn oracle_nucleus(logits: &[f64], top_p: f64, temperature: f64) -> Vec<TokenId> {
    let allowed: Vec<TokenId> = (0..logits.len()).filter(|t| !EXCLUDED_TOKENS.contains(t)).collect();
    let max = allowed.iter().map(|&t| logits[t]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<(TokenId, f64)> = allowed.iter().map(|&t| (t, ((logits[t] - max) / temperature).exp())).collect();
    let z: f64 = weights.iter().map(|w| w.1).sum();
    let mut probs: Vec<(TokenId, f64)> = weights.into_iter().map(|(t, w)| (t, w / z)).collect();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut out = Vec::new();
    for (t, p) in probs {
        out.push(t);
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    out
}

fn sampler_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..100_000 {
        let sigma = rng.random_range(0.5..5.0);
        let normal = Normal::new(0.0, sigma).unwrap();
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|_| normal.sample(&mut rng)).collect();
        let top_p = rng.random_range(0.05..=1.0);
        let temperature = rng.random_range(0.1..2.0);
        let t = nucleus_sample(&logits, top_p, temperature, &EXCLUDED_TOKENS, &mut rng).map_err(err)?;
        if !oracle_nucleus(&logits, top_p, temperature).contains(&t) {
            violations += 1;
        }
    }
    ensure!(violations == 0, "{violations} samples outside the nucleus");

    for i in 0..1000 {
        let logits: Vec<f64> = (0..VOCAB_SIZE).map(|_| rng.random_range(-10.0..10.0)).collect();
        let argmax = (0..VOCAB_SIZE)
            .filter(|t| !EXCLUDED_TOKENS.contains(t))
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap();
        let t = nucleus_sample(&logits, rng.random_range(0.05..=1.0), 1e-6, &EXCLUDED_TOKENS, &mut rng).map_err(err)?;
        ensure!(t == argmax, "row {i}: T=1e-6 drew {t}, argmax is {argmax}");
    }

    let cfg = TrainConfig { d_model: 16, n_layers: 1, n_heads: 2, ff_mult: 2, ..Default::default() };
    let grid = cfg.grid();
    let model = Model::new(cfg.model_config(), 3).map_err(err)?;
    let (_, pieces) = generate(&DiagConfig { n_train: 1, n_test: 100, bars: 8, seed: 77 }).map_err(err)?;
    let strategies = [Strategy::UR10, Strategy::UMD, Strategy::Seq];
    let mut fixed_total = 0;
    for (i, sheet) in pieces.iter().enumerate() {
        let slots = encode(sheet, &grid).map_err(err)?.layout.chord_positions();
        let mut chosen = slots.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(rng.random_range(1..=8));
        let fixed: BTreeMap<usize, TokenId> = chosen.iter().map(|&p| (p, rng.random_range(0..=NC_TOKEN))).collect();
        fixed_total += fixed.len();
        let constraints = ConstraintSet { fixed: fixed.clone() };
        let sc = SamplerConfig::new(strategies[i % 3], i as u64);
        let h = harmonize(&model, &grid, sheet, &sc, &constraints).map_err(err)?;
        for (&p, &t) in &fixed {
            ensure!(h.tokens[p] == t, "piece {i}: position {p} holds {} instead of {t}", h.tokens[p]);
        }
        ensure!(h.tokens.iter().all(|&t| t != MASK_TOKEN && t != PAD_TOKEN), "piece {i}: unresolved token");
    }
    Ok(format!("0/100000 nucleus violations; 1000/1000 argmax at T=1e-6; {fixed_total} constraints kept in 100 runs"))
}

// ---------------------------------------------------------------- 8

fn masking_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let meters = [(4, 4), (3, 4), (6, 8), (7, 8), (5, 4)];
    let kinds = [CurriculumKind::Ff, CurriculumKind::Md, CurriculumKind::R10];
    let (mut states, mut bars, mut pads) = (0, 0usize, 0usize);
    while states < 10_000 {
        let (n, d) = meters[rng.random_range(0..meters.len())];
        let ts = TimeSignature::new(n, d).map_err(err)?;
        let cfg = TrainConfig {
            quant: if rng.random_bool(0.5) { Quant::Q4 } else { Quant::Q16 },
            bar_mode: if rng.random_bool(0.5) { BarMode::Bar } else { BarMode::Ts },
            max_len: rng.random_range(8..=64),
            ..Default::default()
        };
        let n_bars = rng.random_range(1..=6);
        let sheet = random_sheet(&mut rng, ts, ts.bar_len() * n_bars);
        let item: EncodedPair = encode(&sheet, &cfg.grid()).map_err(err)?;
        let maskable = item.layout.chord_positions();
        if maskable.is_empty() {
            continue;
        }
        let melody_before = item.melody_roll.clone();
        for kind in kinds {
            let spec = CurriculumSpec::new(kind, 0);
            let total = rng.random_range(1..=500u64);
            let step = rng.random_range(0..total);
            let state = spec.training_mask(&mut rng, step, total, item.len(), &maskable).map_err(err)?;
            states += 1;
            ensure!(state.len() == item.harmony.len(), "mask spans {} positions, harmony has {}", state.len(), item.len());
            ensure!(state.masked_count() >= 1, "{kind}: nothing masked");
            let masked = apply_mask(&item.harmony, &state).map_err(err)?;
            for (p, (&orig, &now)) in item.harmony.iter().zip(&masked).enumerate() {
                if orig == BAR_TOKEN || orig == PAD_TOKEN {
                    ensure!(!state.masked[p] && now == orig, "{kind}: structural token at {p} masked");
                }
                ensure!(!state.masked[p] || maskable.contains(&p), "{kind}: non-chord position {p} masked");
                ensure!(now == if state.masked[p] { MASK_TOKEN } else { orig }, "{kind}: position {p} mangled");
            }
            bars += item.harmony.iter().filter(|&&t| t == BAR_TOKEN).count();
            pads += item.harmony.iter().filter(|&&t| t == PAD_TOKEN).count();
        }
        ensure!(item.melody_roll == melody_before, "melody roll changed by masking");
    }
    ensure!(bars > 0 && pads > 0, "corpus exercised no bar ({bars}) or pad ({pads}) tokens");
    Ok(format!("{states} masks; {bars} bar and {pads} pad cells untouched; melody never part of the mask"))
}

// ---------------------------------------------------------------- 9

fn determinism() -> Outcome {
    let (train_set, test_set) = generate(&DiagConfig { n_train: 24, n_test: 3, bars: 8, seed: 9 }).map_err(err)?;
    let (tr, va) = split_validation(&train_set, 0.25, 1);
    let root = tempfile::tempdir().map_err(err)?;
    let mut compared = 0;
    for kind in [CurriculumKind::Ff, CurriculumKind::Md, CurriculumKind::R10] {
        let cfg = TrainConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 2,
            epochs: 2,
            batch_size: 4,
            curriculum: kind,
            seed: 42,
            ..Default::default()
        };
        let mut runs = Vec::new();
        for r in 0..2 {
            let dir = root.path().join(format!("{kind}-{r}"));
            train(&cfg, &tr, &va, Some(&dir), false).map_err(err)?;
            let bytes = |f: &str| std::fs::read(dir.join(f)).map_err(err);
            let model = load_model(&dir.join("model.ckpt")).map_err(err)?.0;
            let mut harmonies = Vec::new();
            for strategy in [Strategy::UR10, Strategy::UMD, Strategy::Seq] {
                for sheet in &test_set {
                    let h = harmonize(&model, &cfg.grid(), sheet, &SamplerConfig::new(strategy, 5), &ConstraintSet::default())
                        .map_err(err)?;
                    harmonies.push(h.tokens);
                }
            }
            // The state checkpoint carries the wall-clock time of the run; blank it.
            let mut state = load_train_state(&dir.join("state.ckpt")).map_err(err)?;
            state.header["record"]["wall_time_secs"] = 0.0.into();
            let state_bits: Vec<(String, Vec<u64>)> =
                state.tensors.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|x| x.to_bits()).collect())).collect();
            runs.push((bytes("model.ckpt")?, (state.header, state_bits), harmonies));
        }
        ensure!(runs[0].0 == runs[1].0, "{kind}: model checkpoints differ");
        ensure!(runs[0].1 == runs[1].1, "{kind}: training states differ");
        ensure!(runs[0].2 == runs[1].2, "{kind}: harmonizations differ");
        compared += runs[0].2.len();
    }
    Ok(format!("FF/MD/R10 model checkpoints bitwise equal across two runs, training states equal up to wall time; {compared} harmonizations identical"))
}

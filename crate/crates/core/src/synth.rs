//! Seeded generators for synthetic concept datasets.
//!
//! Two pattern families are provided: an Alberti-bass accompaniment (the
//! broken-chord figure root, fifth, third, fifth in the left hand, with a
//! random melody above it) and fully random note clouds. Both are
//! deterministic functions of their [`PatternSpec`].
//!
//! Every onset and end time is quantized to the 1/960 s grid of
//! [`crate::midi::export_midi`], so writing a generated sequence to MIDI
//! and parsing it back reproduces the note times exactly.

use crate::midi::{Note, NoteSequence, EXPORT_TICKS_PER_SECOND, PITCH_MAX, PITCH_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pattern family of a synthetic piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    /// Alberti bass in the left hand plus a random diatonic melody above.
    AlbertiBass,
    /// Uniform random pitches, onsets, durations and velocities.
    Random,
}

/// Full description of a synthetic piece.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    /// Key as a pitch class, 0 = C through 11 = B.
    pub key: u8,
    pub tempo_bpm: f64,
    /// Octave anchor of the accompaniment: the figure root is
    /// `register + key`. The default 48 puts a C-major figure on C3.
    pub register: u8,
    pub rng_seed: u64,
}

impl PatternSpec {
    /// Alberti bass in C major at 120 bpm, figure rooted on C3.
    pub fn alberti(rng_seed: u64) -> Self {
        PatternSpec {
            kind: PatternKind::AlbertiBass,
            key: 0,
            tempo_bpm: 120.0,
            register: 48,
            rng_seed,
        }
    }

    /// Uniform random notes; key and tempo are ignored.
    pub fn random(rng_seed: u64) -> Self {
        PatternSpec {
            kind: PatternKind::Random,
            key: 0,
            tempo_bpm: 120.0,
            register: 48,
            rng_seed,
        }
    }
}

/// Snaps a time in seconds to the export tick grid.
fn quantize(t: f64) -> f64 {
    (t * EXPORT_TICKS_PER_SECOND).round() / EXPORT_TICKS_PER_SECOND
}

/// Generates `length` seconds of music from a pattern description.
///
/// Identical specs produce identical sequences. All times lie on the
/// 1/960 s tick grid and within `[0, length]`; `total_duration` is the
/// requested length.
pub fn synth_concept(spec: &PatternSpec, length: f64) -> NoteSequence {
    assert!(length > 0.0, "piece length must be positive");
    assert!(spec.key < 12, "key must be a pitch class 0..12");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut seq = match spec.kind {
        PatternKind::AlbertiBass => alberti(spec, length, &mut rng),
        PatternKind::Random => random_cloud(length, &mut rng),
    };
    seq.total_duration = length;
    seq.normalize();
    seq
}

const MAJOR_SCALE: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const ALBERTI_VELOCITY: u8 = 80;

fn alberti(spec: &PatternSpec, length: f64, rng: &mut ChaCha8Rng) -> NoteSequence {
    assert!(spec.tempo_bpm > 0.0, "tempo must be positive");
    let eighth = 60.0 / spec.tempo_bpm / 2.0;
    let root = spec.register + spec.key;
    let figure = [root, root + 7, root + 4, root + 7];
    assert!(
        figure.iter().all(|&p| (PITCH_MIN..=PITCH_MAX).contains(&p)),
        "accompaniment register out of piano range"
    );
    let end = quantize(length);
    let mut notes = Vec::new();

    // Left hand: the figure cycles without gaps at fixed velocity.
    let mut i = 0usize;
    loop {
        let onset = quantize(i as f64 * eighth);
        let off = quantize((i + 1) as f64 * eighth).min(end);
        if end - onset < 1.0 / EXPORT_TICKS_PER_SECOND / 2.0 || off <= onset {
            break;
        }
        notes.push(Note {
            pitch: figure[i % 4],
            onset,
            duration: off - onset,
            velocity: ALBERTI_VELOCITY,
        });
        i += 1;
    }

    // Right hand: random walk over the major scale two octaves up, with
    // varied note values, velocities and occasional rests.
    let melody_base = root + 24;
    let mut degree: i32 = rng.gen_range(0..14);
    let mut t = 0.0f64;
    while t < length {
        if rng.gen::<f64>() < 0.2 {
            t = quantize(t + eighth);
            continue;
        }
        let value = match rng.gen_range(0..4) {
            0 => eighth,
            1 | 2 => eighth * 2.0,
            _ => eighth * 4.0,
        };
        degree = (degree + rng.gen_range(-3..=3)).clamp(0, 13);
        let pitch = i32::from(melody_base)
            + i32::from(MAJOR_SCALE[(degree % 7) as usize])
            + 12 * (degree / 7);
        let onset = quantize(t);
        let off = quantize(t + value).min(end);
        if off > onset && pitch <= i32::from(PITCH_MAX) {
            notes.push(Note {
                pitch: pitch as u8,
                onset,
                duration: off - onset,
                velocity: rng.gen_range(45..=100),
            });
        }
        t = quantize(t + value);
    }

    NoteSequence { notes, ..Default::default() }
}

const RANDOM_NOTES_PER_SECOND: f64 = 4.0;

fn random_cloud(length: f64, rng: &mut ChaCha8Rng) -> NoteSequence {
    let tick = 1.0 / EXPORT_TICKS_PER_SECOND;
    let count = (length * RANDOM_NOTES_PER_SECOND).ceil() as usize;
    let end = quantize(length);
    let mut notes: Vec<Note> = (0..count)
        .map(|_| {
            let onset = quantize(rng.gen::<f64>() * (length - 0.1).max(0.0));
            let raw_duration = 0.1 + rng.gen::<f64>() * 1.9;
            let off = quantize(onset + raw_duration).min(end).max(onset + tick);
            Note {
                pitch: rng.gen_range(PITCH_MIN..=PITCH_MAX),
                onset,
                duration: off - onset,
                velocity: rng.gen_range(1..=127),
            }
        })
        .collect();

    // A piano key sounds one note at a time: re-striking a held key ends
    // the earlier note. Clip each note at the next onset of its pitch and
    // drop notes squeezed below a tick.
    notes.sort_by(|a, b| a.pitch.cmp(&b.pitch).then(a.onset.total_cmp(&b.onset)));
    let mut kept = Vec::with_capacity(notes.len());
    for i in 0..notes.len() {
        let mut n = notes[i];
        if let Some(next) = notes.get(i + 1) {
            if next.pitch == n.pitch && next.onset < n.end() {
                n.duration = next.onset - n.onset;
            }
        }
        if n.duration >= tick * 0.5 {
            kept.push(n);
        }
    }
    NoteSequence { notes: kept, ..Default::default() }
}

//! Piano-roll representation of note sequences.
//!
//! A roll is an 88 × T grid: one row per piano key (row 0 is A0, MIDI
//! pitch 21), one column per time step. A cell holds the note-on velocity
//! scaled to `[0, 1]` of whichever note sounds in that cell, taking the
//! maximum where notes overlap. The default step is 50 ms.
//!
//! Cell membership is decided with a one-nanosecond tolerance at cell
//! boundaries so that the tiny rounding noise a MIDI round trip introduces
//! cannot flip a boundary-aligned note into a neighbouring cell.

use crate::midi::{NoteSequence, NUM_PITCHES, PITCH_MIN};
use crate::Scalar;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default time step in seconds (50 ms).
pub const DEFAULT_STEP: f64 = 0.05;

/// Tolerance in seconds when assigning note boundaries to cells.
const BOUNDARY_EPS: f64 = 1e-9;

/// Provenance of a roll.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RollMeta {
    /// Name of the piece or generator the roll came from.
    pub source: String,
    /// Start of the excerpt within its piece, in seconds.
    pub offset: f64,
}

/// An 88-pitch piano roll with a fixed time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Roll<T> {
    /// Velocity grid of shape `(88, columns)` with values in `[0, 1]`.
    pub grid: Array2<T>,
    /// Column width in seconds.
    pub step: f64,
    pub meta: RollMeta,
}

impl<T: Scalar> Roll<T> {
    /// All-zero roll with the given number of columns.
    pub fn zeros(columns: usize, step: f64) -> Self {
        assert!(step > 0.0, "time step must be positive");
        Roll {
            grid: Array2::zeros((NUM_PITCHES, columns)),
            step,
            meta: RollMeta::default(),
        }
    }

    /// Number of time columns.
    pub fn columns(&self) -> usize {
        self.grid.ncols()
    }

    /// Time covered by the roll in seconds.
    pub fn duration(&self) -> f64 {
        self.columns() as f64 * self.step
    }

    /// Number of non-zero cells.
    pub fn active_cells(&self) -> usize {
        self.grid.iter().filter(|v| **v > T::zero()).count()
    }
}

/// Bins the notes of `seq` that sound in `[start, start + length)` into a
/// roll with the given step.
///
/// A note covers every cell its interval overlaps by more than the boundary
/// tolerance; the cell value is the note velocity divided by 127, keeping
/// the maximum where notes overlap. `length` and `step` must be positive.
pub fn build_piano_roll<T: Scalar>(
    seq: &NoteSequence,
    start: f64,
    length: f64,
    step: f64,
) -> Roll<T> {
    assert!(step > 0.0, "time step must be positive");
    assert!(length > 0.0, "excerpt length must be positive");
    let columns = ((length - BOUNDARY_EPS) / step).ceil().max(1.0) as usize;
    let mut roll = Roll::zeros(columns, step);
    roll.meta.offset = start;

    for note in &seq.notes {
        let rel_on = note.onset - start;
        let rel_end = note.end() - start;
        if rel_end <= BOUNDARY_EPS || rel_on >= length - BOUNDARY_EPS {
            continue;
        }
        let first = (((rel_on + BOUNDARY_EPS) / step).floor().max(0.0)) as usize;
        let mut last_f = ((rel_end - BOUNDARY_EPS) / step).ceil() - 1.0;
        if last_f < 0.0 {
            last_f = 0.0;
        }
        let first = first.min(columns - 1);
        let last = (last_f as usize).clamp(first, columns - 1);
        let row = (note.pitch - PITCH_MIN) as usize;
        let value = T::from(f64::from(note.velocity) / 127.0).unwrap();
        for t in first..=last {
            let cell = &mut roll.grid[(row, t)];
            if value > *cell {
                *cell = value;
            }
        }
    }
    roll
}

/// Excerpts drawn by [`sample_excerpts`].
#[derive(Debug, Clone)]
pub struct SampledExcerpts<T> {
    pub rolls: Vec<Roll<T>>,
    /// True when the piece was shorter than one excerpt and was padded.
    pub padded_short_piece: bool,
}

/// Draws `count` excerpts of `length` seconds at offsets uniform in
/// `[0, total_duration - length]`, deterministically from `seed`.
///
/// A piece shorter than `length` yields a single zero-padded excerpt at
/// offset zero, flagged in the result.
pub fn sample_excerpts<T: Scalar>(
    seq: &NoteSequence,
    count: usize,
    length: f64,
    step: f64,
    seed: u64,
) -> SampledExcerpts<T> {
    assert!(length > 0.0, "excerpt length must be positive");
    if seq.total_duration < length {
        let roll = build_piano_roll(seq, 0.0, length, step);
        return SampledExcerpts { rolls: vec![roll], padded_short_piece: true };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_offset = seq.total_duration - length;
    let rolls = (0..count)
        .map(|_| {
            let offset = rng.gen::<f64>() * max_offset;
            build_piano_roll(seq, offset, length, step)
        })
        .collect();
    SampledExcerpts { rolls, padded_short_piece: false }
}

/// Fits a roll to an exact number of columns: center-crop when too long,
/// zero-pad at the end when too short.
pub fn crop_or_pad<T: Scalar>(roll: &Roll<T>, target_columns: usize) -> Roll<T> {
    assert!(target_columns > 0, "target width must be positive");
    let columns = roll.columns();
    let mut out = Roll::zeros(target_columns, roll.step);
    out.meta = roll.meta.clone();
    if columns >= target_columns {
        let start = (columns - target_columns) / 2;
        out.grid
            .assign(&roll.grid.slice(s![.., start..start + target_columns]));
        out.meta.offset = roll.meta.offset + start as f64 * roll.step;
    } else {
        out.grid
            .slice_mut(s![.., ..columns])
            .assign(&roll.grid);
    }
    out
}

/// Derives an independent stream seed from a base seed and an index.
///
/// SplitMix64 finalizer over `base + (index + 1) * golden-ratio increment`;
/// used wherever one configuration seed has to fan out into many
/// reproducible sub-streams (per piece, per run, per random dataset).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

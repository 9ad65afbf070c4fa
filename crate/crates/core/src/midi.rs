//! Standard MIDI file parsing and writing.
//!
//! The parser accepts SMF format 0 and 1 with metrical time division,
//! applies the full tempo map when converting ticks to seconds and flattens
//! every track into a single list of [`Note`]s. The writer emits format 0
//! at 480 pulses per quarter note and a fixed 500000 µs/quarter tempo, which
//! puts the tick grid at exactly 960 ticks per second.
//!
//! Recoverable defects in the input (notes left open at the end of a track,
//! pitches outside the 88-key range) are repaired or dropped and counted in
//! [`ParseStats`]; structural defects are reported as [`MidiError`] with the
//! byte offset where parsing failed.

use thiserror::Error;

/// Lowest pitch on an 88-key piano (A0).
pub const PITCH_MIN: u8 = 21;
/// Highest pitch on an 88-key piano (C8).
pub const PITCH_MAX: u8 = 108;
/// Number of piano keys, and of rows in a piano roll.
pub const NUM_PITCHES: usize = 88;

/// Pulses per quarter note used by [`export_midi`].
pub const EXPORT_PPQ: u16 = 480;
/// Tempo written by [`export_midi`], in µs per quarter note (120 bpm).
pub const EXPORT_TEMPO: u32 = 500_000;
/// Tick rate of exported files: `EXPORT_PPQ / (EXPORT_TEMPO / 1e6)`.
pub const EXPORT_TICKS_PER_SECOND: f64 = 960.0;

/// One note with times in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Note {
    /// MIDI pitch, within `PITCH_MIN..=PITCH_MAX`.
    pub pitch: u8,
    /// Onset time in seconds from the start of the file.
    pub onset: f64,
    /// Sounding length in seconds, always positive.
    pub duration: f64,
    /// Note-on velocity, `1..=127`.
    pub velocity: u8,
}

impl Note {
    /// End time in seconds.
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Counters for input defects the parser repaired.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    /// Note-ons never closed; each is ended at its track's final tick.
    pub dangling_note_ons: usize,
    /// Notes outside the 88-key range, dropped from the result.
    pub dropped_out_of_range: usize,
}

impl ParseStats {
    /// Total number of repaired or dropped events.
    pub fn warnings(&self) -> usize {
        self.dangling_note_ons + self.dropped_out_of_range
    }
}

/// A piece as a flat list of notes sorted by onset, then pitch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoteSequence {
    pub notes: Vec<Note>,
    /// End of the piece in seconds: at least the last note end.
    pub total_duration: f64,
    /// Defects repaired while parsing; zero for synthetic sequences.
    pub stats: ParseStats,
}

impl NoteSequence {
    /// Sorts notes by `(onset, pitch, duration, velocity)` and refreshes
    /// `total_duration` to cover the last note end.
    pub fn normalize(&mut self) {
        self.notes.sort_by(|a, b| {
            a.onset
                .total_cmp(&b.onset)
                .then(a.pitch.cmp(&b.pitch))
                .then(a.duration.total_cmp(&b.duration))
                .then(a.velocity.cmp(&b.velocity))
        });
        let last_end = self
            .notes
            .iter()
            .map(Note::end)
            .fold(0.0_f64, f64::max);
        self.total_duration = self.total_duration.max(last_end);
    }
}

/// Parse failure, with the byte offset where the file stopped making sense.
#[derive(Debug, Error)]
pub enum MidiError {
    #[error("not a standard MIDI file: expected {expected} chunk at byte {offset}")]
    BadChunk { offset: usize, expected: &'static str },
    #[error("unsupported SMF format {0}, only formats 0 and 1 are handled")]
    UnsupportedFormat(u16),
    #[error("SMPTE time division is not supported")]
    SmpteDivision,
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("malformed event at byte {offset}: {what}")]
    MalformedEvent { offset: usize, what: &'static str },
    #[error("reading MIDI file: {0}")]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, MidiError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(MidiError::Truncated { offset: self.pos, what })?;
        self.pos += 1;
        Ok(b)
    }

    fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(MidiError::Truncated { offset: self.pos, what });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16be(&mut self, what: &'static str) -> Result<u16, MidiError> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32be(&mut self, what: &'static str) -> Result<u32, MidiError> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self, what: &'static str) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for i in 0..4 {
            let b = self.u8(what)?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(MidiError::MalformedEvent {
            offset: self.pos,
            what: "variable-length quantity longer than four bytes",
        })
    }
}

/// Tempo change at an absolute tick.
#[derive(Debug, Clone, Copy)]
struct TempoEvent {
    tick: u64,
    us_per_qn: u32,
}

/// Piecewise-linear tick-to-seconds conversion.
struct TempoMap {
    /// Segment starts: `(tick, µs/quarter, seconds at tick)`, sorted by tick.
    segments: Vec<(u64, u32, f64)>,
    ppq: f64,
}

impl TempoMap {
    fn build(mut events: Vec<TempoEvent>, ppq: u16) -> Self {
        events.sort_by_key(|e| e.tick);
        let ppq = f64::from(ppq);
        let mut segments: Vec<(u64, u32, f64)> = vec![(0, EXPORT_TEMPO, 0.0)];
        for ev in events {
            let &(last_tick, last_us, last_sec) = segments.last().unwrap();
            if ev.tick == last_tick {
                let last = segments.last_mut().unwrap();
                last.1 = ev.us_per_qn;
                continue;
            }
            let dt = (ev.tick - last_tick) as f64;
            let sec = last_sec + dt * f64::from(last_us) / 1e6 / ppq;
            segments.push((ev.tick, ev.us_per_qn, sec));
        }
        TempoMap { segments, ppq }
    }

    fn seconds_at(&self, tick: u64) -> f64 {
        let idx = match self.segments.binary_search_by_key(&tick, |s| s.0) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let (seg_tick, us, sec) = self.segments[idx];
        sec + (tick - seg_tick) as f64 * f64::from(us) / 1e6 / self.ppq
    }
}

/// Key for pairing note-ons with note-offs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct NoteKey {
    channel: u8,
    pitch: u8,
}

#[derive(Debug, Clone, Copy)]
struct OpenNote {
    tick: u64,
    velocity: u8,
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    pitch: u8,
    on_tick: u64,
    off_tick: u64,
    velocity: u8,
}

/// Parses an SMF format 0 or 1 file from memory.
///
/// Ticks are converted to seconds through the complete tempo map (500000
/// µs/quarter where the file specifies none). A note-on with velocity zero
/// ends the matching note; overlapping note-ons on the same channel and
/// pitch are closed first-in first-out. Repaired defects are counted in the
/// returned sequence's [`ParseStats`].
pub fn parse_midi(bytes: &[u8]) -> Result<NoteSequence, MidiError> {
    let mut c = Cursor::new(bytes);
    if c.bytes(4, "header chunk id")? != b"MThd" {
        return Err(MidiError::BadChunk { offset: 0, expected: "MThd" });
    }
    let header_len = c.u32be("header length")? as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedEvent {
            offset: c.pos,
            what: "header chunk shorter than six bytes",
        });
    }
    let format = c.u16be("format")?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let num_tracks = c.u16be("track count")?;
    let division = c.u16be("time division")?;
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::MalformedEvent {
            offset: c.pos - 2,
            what: "zero pulses per quarter note",
        });
    }
    c.bytes(header_len - 6, "header padding")?;

    let mut tempo_events = Vec::new();
    let mut raw_notes = Vec::new();
    let mut stats = ParseStats::default();
    let mut max_tick: u64 = 0;

    for _ in 0..num_tracks {
        let chunk_offset = c.pos;
        if c.bytes(4, "track chunk id")? != b"MTrk" {
            return Err(MidiError::BadChunk { offset: chunk_offset, expected: "MTrk" });
        }
        let track_len = c.u32be("track length")? as usize;
        let track_bytes = c.bytes(track_len, "track data")?;
        let end_tick = parse_track(
            track_bytes,
            chunk_offset + 8,
            &mut tempo_events,
            &mut raw_notes,
            &mut stats,
        )?;
        max_tick = max_tick.max(end_tick);
    }

    let map = TempoMap::build(tempo_events, division);
    let mut seq = NoteSequence::default();
    for raw in raw_notes {
        if raw.pitch < PITCH_MIN || raw.pitch > PITCH_MAX {
            stats.dropped_out_of_range += 1;
            continue;
        }
        let onset = map.seconds_at(raw.on_tick);
        let end = map.seconds_at(raw.off_tick);
        seq.notes.push(Note {
            pitch: raw.pitch,
            onset,
            duration: end - onset,
            velocity: raw.velocity,
        });
    }
    seq.stats = stats;
    seq.total_duration = map.seconds_at(max_tick);
    seq.normalize();
    Ok(seq)
}

/// Reads and parses a MIDI file from disk.
pub fn parse_midi_file(path: &std::path::Path) -> Result<NoteSequence, MidiError> {
    let bytes = std::fs::read(path)?;
    parse_midi(&bytes)
}

/// Parses one track chunk; returns the tick of its end-of-track.
fn parse_track(
    data: &[u8],
    base_offset: usize,
    tempo_events: &mut Vec<TempoEvent>,
    raw_notes: &mut Vec<RawNote>,
    stats: &mut ParseStats,
) -> Result<u64, MidiError> {
    let mut c = Cursor::new(data);
    let mut tick: u64 = 0;
    let mut running_status: Option<u8> = None;
    // FIFO of open notes per (channel, pitch).
    let mut open: std::collections::HashMap<NoteKey, Vec<OpenNote>> =
        std::collections::HashMap::new();

    macro_rules! offset {
        () => {
            base_offset + c.pos
        };
    }

    while c.remaining() > 0 {
        tick += u64::from(c.vlq("delta time")?);
        let first = c.u8("event status")?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            c.pos -= 1;
            running_status.ok_or(MidiError::MalformedEvent {
                offset: offset!(),
                what: "data byte with no running status",
            })?
        };

        match status {
            0xff => {
                running_status = None;
                let meta_type = c.u8("meta type")?;
                let len = c.vlq("meta length")? as usize;
                let payload = c.bytes(len, "meta payload")?;
                match meta_type {
                    0x51 => {
                        if len != 3 {
                            return Err(MidiError::MalformedEvent {
                                offset: offset!(),
                                what: "tempo meta event is not three bytes",
                            });
                        }
                        let us = u32::from(payload[0]) << 16
                            | u32::from(payload[1]) << 8
                            | u32::from(payload[2]);
                        tempo_events.push(TempoEvent { tick, us_per_qn: us });
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running_status = None;
                let len = c.vlq("sysex length")? as usize;
                c.bytes(len, "sysex payload")?;
            }
            0xf1..=0xf6 => {
                return Err(MidiError::MalformedEvent {
                    offset: offset!(),
                    what: "system common message inside a track",
                });
            }
            _ => {
                running_status = Some(status);
                let kind = status >> 4;
                let channel = status & 0x0f;
                let d1 = c.u8("event data")?;
                let d2 = if matches!(kind, 0xc | 0xd) {
                    0
                } else {
                    c.u8("event data")?
                };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(MidiError::MalformedEvent {
                        offset: offset!(),
                        what: "data byte with the high bit set",
                    });
                }
                match kind {
                    0x9 if d2 > 0 => {
                        open.entry(NoteKey { channel, pitch: d1 })
                            .or_default()
                            .push(OpenNote { tick, velocity: d2 });
                    }
                    0x8 | 0x9 => {
                        let key = NoteKey { channel, pitch: d1 };
                        if let Some(stack) = open.get_mut(&key) {
                            if !stack.is_empty() {
                                let on = stack.remove(0);
                                raw_notes.push(RawNote {
                                    pitch: d1,
                                    on_tick: on.tick,
                                    off_tick: tick.max(on.tick + 1),
                                    velocity: on.velocity,
                                });
                            }
                        }
                        // An unmatched note-off is ignored.
                    }
                    _ => {}
                }
            }
        }
    }

    // Close anything still sounding at the end of the track.
    let mut dangling: Vec<(NoteKey, OpenNote)> = open
        .into_iter()
        .flat_map(|(k, stack)| stack.into_iter().map(move |n| (k, n)))
        .collect();
    dangling.sort_by_key(|(k, n)| (n.tick, k.channel, k.pitch, n.velocity));
    for (key, on) in dangling {
        stats.dangling_note_ons += 1;
        raw_notes.push(RawNote {
            pitch: key.pitch,
            on_tick: on.tick,
            off_tick: tick.max(on.tick + 1),
            velocity: on.velocity,
        });
    }
    Ok(tick)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u64) {
    let mut stack = [0u8; 10];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i > 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

/// Serializes a sequence as SMF format 0.
///
/// The file uses 480 pulses per quarter note at a fixed 500000 µs/quarter
/// tempo, so one tick is 1/960 s. Note times are rounded to the nearest
/// tick; a note whose rounded length is zero is stretched to one tick.
/// Output bytes are a deterministic function of the input.
pub fn export_midi(seq: &NoteSequence) -> Vec<u8> {
    // (tick, is_note_on, pitch, velocity); note-offs sort before note-ons
    // at the same tick so back-to-back repeats of a pitch stay separate.
    let mut events: Vec<(u64, bool, u8, u8)> = Vec::with_capacity(seq.notes.len() * 2);
    for note in &seq.notes {
        let on = (note.onset * EXPORT_TICKS_PER_SECOND).round() as u64;
        let off = ((note.end() * EXPORT_TICKS_PER_SECOND).round() as u64).max(on + 1);
        events.push((on, true, note.pitch, note.velocity.clamp(1, 127)));
        events.push((off, false, note.pitch, 64));
    }
    events.sort_by_key(|&(tick, is_on, pitch, vel)| (tick, is_on, pitch, vel));

    let mut track = Vec::new();
    // Tempo meta event at tick zero.
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&EXPORT_TEMPO.to_be_bytes()[1..]);
    let mut last_tick = 0u64;
    for (tick, is_on, pitch, velocity) in events {
        push_vlq(&mut track, tick - last_tick);
        last_tick = tick;
        track.push(if is_on { 0x90 } else { 0x80 });
        track.push(pitch);
        track.push(velocity);
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&EXPORT_PPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_note(pitch: u8, onset: f64, duration: f64, velocity: u8) -> Note {
        Note { pitch, onset, duration, velocity }
    }

    /// Hand-assembled format 0 file: one C4 quarter note at 120 bpm.
    fn single_note_file() -> Vec<u8> {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]); // format 0, 1 track, ppq 480
        let track = [
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // tempo 500000
            0x00, 0x90, 60, 100, // note on C4
            0x83, 0x60, 0x80, 60, 64, // delta 480, note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);
        f
    }

    #[test]
    fn parses_single_note_with_default_tempo_math() {
        let seq = parse_midi(&single_note_file()).unwrap();
        assert_eq!(seq.notes.len(), 1);
        let n = seq.notes[0];
        assert_eq!(n.pitch, 60);
        assert_eq!(n.velocity, 100);
        // 480 ticks at 500000 µs / 480 ppq is exactly half a second.
        assert_eq!(n.onset, 0.0);
        assert_eq!(n.duration, 0.5);
        assert_eq!(seq.stats.warnings(), 0);
    }

    #[test]
    fn tempo_change_splits_tick_conversion_piecewise() {
        // Two quarter notes; tempo drops to 90 bpm between them. Oracle:
        // first quarter at 120 bpm lasts 0.5 s, the second at 90 bpm lasts
        // 60/90 = 0.666... s, so the second onset is at 0.5 s and its end
        // at 0.5 + 2/3 s.
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]);
        let track = [
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // 500000 µs/qn
            0x00, 0x90, 60, 100, //
            0x83, 0x60, 0x80, 60, 64, // off at tick 480
            0x00, 0xff, 0x51, 0x03, 0x0a, 0x2c, 0x2a, // 666666 µs/qn
            0x00, 0x90, 62, 90, //
            0x83, 0x60, 0x80, 62, 64, // off at tick 960
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);

        let seq = parse_midi(&f).unwrap();
        assert_eq!(seq.notes.len(), 2);
        assert_eq!(seq.notes[0].duration, 0.5);
        assert_eq!(seq.notes[1].onset, 0.5);
        assert_abs_diff_eq!(seq.notes[1].duration, 666666.0 / 1e6, epsilon = 1e-9);
        assert_abs_diff_eq!(seq.total_duration, 0.5 + 666666.0 / 1e6, epsilon = 1e-9);
    }

    #[test]
    fn velocity_zero_note_on_acts_as_note_off() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]);
        let track = [
            0x00, 0x90, 60, 100, //
            0x60, 60, 0, // running status, velocity 0 ends the note
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);

        let seq = parse_midi(&f).unwrap();
        assert_eq!(seq.notes.len(), 1);
        assert_abs_diff_eq!(seq.notes[0].duration, 0.1, epsilon = 1e-12);
        assert_eq!(seq.stats.dangling_note_ons, 0);
    }

    #[test]
    fn dangling_note_on_is_closed_at_track_end_and_counted() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]);
        let track = [
            0x00, 0x90, 60, 100, // never released
            0x83, 0x60, 0xff, 0x2f, 0x00, // end of track at tick 480
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);

        let seq = parse_midi(&f).unwrap();
        assert_eq!(seq.notes.len(), 1);
        assert_eq!(seq.notes[0].duration, 0.5);
        assert_eq!(seq.stats.dangling_note_ons, 1);
    }

    #[test]
    fn out_of_range_pitches_are_dropped_and_counted() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]);
        let track = [
            0x00, 0x90, 15, 100, // below A0
            0x00, 0x90, 60, 100, //
            0x60, 0x80, 15, 64, //
            0x00, 0x80, 60, 64, //
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);

        let seq = parse_midi(&f).unwrap();
        assert_eq!(seq.notes.len(), 1);
        assert_eq!(seq.notes[0].pitch, 60);
        assert_eq!(seq.stats.dropped_out_of_range, 1);
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let full = single_note_file();
        let err = parse_midi(&full[..full.len() - 6]).unwrap_err();
        match err {
            MidiError::Truncated { offset, .. } => assert!(offset >= 14),
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn garbage_header_is_rejected_at_offset_zero() {
        let err = parse_midi(b"RIFFxxxxxxxxxxxx").unwrap_err();
        match err {
            MidiError::BadChunk { offset: 0, expected: "MThd" } => {}
            other => panic!("expected BadChunk, got {other:?}"),
        }
    }

    #[test]
    fn format_two_is_rejected() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 2, 0, 1, 0x01, 0xe0]);
        assert!(matches!(parse_midi(&f), Err(MidiError::UnsupportedFormat(2))));
    }

    #[test]
    fn export_then_parse_recovers_notes_exactly_on_the_tick_grid() {
        // All times are multiples of 1/960 s, so the round trip is exact.
        let mut seq = NoteSequence {
            notes: vec![
                simple_note(60, 0.0, 0.5, 100),
                simple_note(64, 0.5, 0.25, 90),
                simple_note(60, 0.75, 0.125, 80),
            ],
            total_duration: 1.0,
            stats: ParseStats::default(),
        };
        seq.normalize();
        let parsed = parse_midi(&export_midi(&seq)).unwrap();
        assert_eq!(parsed.notes, seq.notes);
        assert_eq!(parsed.stats.warnings(), 0);
    }

    #[test]
    fn export_rounds_to_at_most_half_a_tick() {
        let mut seq = NoteSequence {
            notes: vec![simple_note(72, 0.1003, 0.2004, 70)],
            total_duration: 1.0,
            stats: ParseStats::default(),
        };
        seq.normalize();
        let parsed = parse_midi(&export_midi(&seq)).unwrap();
        let tick = 1.0 / EXPORT_TICKS_PER_SECOND;
        assert_eq!(parsed.notes.len(), 1);
        assert!((parsed.notes[0].onset - 0.1003).abs() <= tick / 2.0 + 1e-12);
        assert!((parsed.notes[0].duration - 0.2004).abs() <= tick + 1e-12);
    }

    #[test]
    fn overlapping_same_pitch_notes_pair_first_in_first_out() {
        let mut f = Vec::new();
        f.extend_from_slice(b"MThd");
        f.extend_from_slice(&6u32.to_be_bytes());
        f.extend_from_slice(&[0, 0, 0, 1, 0x01, 0xe0]);
        let track = [
            0x00, 0x90, 60, 100, // first on at tick 0
            0x60, 0x90, 60, 50, // second on at tick 96
            0x60, 0x80, 60, 64, // off at tick 192 closes the first
            0x60, 0x80, 60, 64, // off at tick 288 closes the second
            0x00, 0xff, 0x2f, 0x00,
        ];
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);

        let seq = parse_midi(&f).unwrap();
        assert_eq!(seq.notes.len(), 2);
        assert_eq!(seq.notes[0].velocity, 100);
        assert_abs_diff_eq!(seq.notes[0].duration, 0.2, epsilon = 1e-12);
        assert_eq!(seq.notes[1].velocity, 50);
        assert_abs_diff_eq!(seq.notes[1].duration, 0.2, epsilon = 1e-12);
    }
}

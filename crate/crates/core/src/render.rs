//! Static piano-roll renders and listenable exports.
//!
//! [`render_roll`] draws a roll as SVG and PNG, coloring note cells by
//! velocity. When a concept heatmap is supplied, cells whose normalized
//! presence reaches a threshold are covered by a translucent overlay and
//! one image pair is produced per threshold, replacing an interactive
//! slider with fixed stops. [`roll_to_notes`] inverts the roll back to a
//! note sequence so any roll can also be exported as a MIDI file.

use crate::concepts::ConceptHeatmap;
use crate::midi::{export_midi, Note, NoteSequence, ParseStats, NUM_PITCHES, PITCH_MIN};
use crate::roll::Roll;
use crate::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("threshold {value} outside (0, 1]")]
    BadThreshold { value: f64 },
    #[error("pixel scales must be positive")]
    BadScale,
    #[error("heatmap is {actual:?}, roll is {expected:?}")]
    HeatmapDims { expected: (usize, usize), actual: (usize, usize) },
    #[error("png encoding failed: {0}")]
    Png(#[from] image::ImageError),
}

/// Velocity color scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Colormap {
    Viridis,
    Grayscale,
}

impl Colormap {
    /// Color for a value in `[0, 1]`.
    pub fn sample(self, v: f64) -> [u8; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Grayscale => {
                let g = (v * 255.0).round() as u8;
                [g, g, g]
            }
            Colormap::Viridis => {
                const ANCHORS: [[u8; 3]; 9] = [
                    [68, 1, 84],
                    [71, 44, 122],
                    [59, 81, 139],
                    [44, 113, 142],
                    [33, 144, 141],
                    [39, 173, 129],
                    [92, 200, 99],
                    [170, 220, 50],
                    [253, 231, 37],
                ];
                let scaled = v * (ANCHORS.len() - 1) as f64;
                let lo = scaled.floor() as usize;
                let hi = (lo + 1).min(ANCHORS.len() - 1);
                let t = scaled - lo as f64;
                let mut out = [0u8; 3];
                for (i, slot) in out.iter_mut().enumerate() {
                    let a = ANCHORS[lo][i] as f64;
                    let b = ANCHORS[hi][i] as f64;
                    *slot = (a + (b - a) * t).round() as u8;
                }
                out
            }
        }
    }
}

/// How rolls are drawn.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    /// Overlay thresholds as fractions of peak presence.
    pub thresholds: Vec<f64>,
    /// Horizontal pixels per time step.
    pub pixels_per_step: usize,
    /// Vertical pixels per pitch.
    pub pixels_per_pitch: usize,
    pub velocity_colormap: Colormap,
    /// Overlay tint, drawn at `overlay_alpha` opacity.
    pub overlay_color: [u8; 3],
    pub overlay_alpha: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            thresholds: vec![0.4, 0.6, 0.8],
            pixels_per_step: 4,
            pixels_per_pitch: 4,
            velocity_colormap: Colormap::Viridis,
            overlay_color: [255, 80, 40],
            overlay_alpha: 0.45,
        }
    }
}

const BACKGROUND: [u8; 3] = [16, 17, 20];

/// One rendered image pair.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    /// The overlay threshold; `None` when no heatmap was drawn.
    pub threshold: Option<f64>,
    pub svg: String,
    pub png: Vec<u8>,
}

fn hex(color: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", color[0], color[1], color[2])
}

/// Maximal runs of horizontally consecutive cells with equal values,
/// per pitch row: `(pitch_index, start_column, length, value)`.
fn merged_runs<T: Scalar>(grid: &ndarray::Array2<T>) -> Vec<(usize, usize, usize, T)> {
    let (pitches, columns) = grid.dim();
    let mut runs = Vec::new();
    for p in 0..pitches {
        let mut start = 0;
        while start < columns {
            let value = grid[(p, start)];
            if value <= T::zero() {
                start += 1;
                continue;
            }
            let mut end = start + 1;
            while end < columns && grid[(p, end)] == value {
                end += 1;
            }
            runs.push((p, start, end - start, value));
            start = end;
        }
    }
    runs
}

/// Renders a roll, with one image per threshold when a heatmap overlay
/// is given and a single image otherwise. The heatmap is expected in
/// piano-roll coordinates with values already normalized to `[0, 1]`.
pub fn render_roll<T: Scalar>(
    roll: &Roll<T>,
    heatmap: Option<&ConceptHeatmap<T>>,
    spec: &RenderSpec,
) -> Result<Vec<RenderedImage>, RenderError> {
    if spec.pixels_per_step == 0 || spec.pixels_per_pitch == 0 {
        return Err(RenderError::BadScale);
    }
    for &t in &spec.thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(RenderError::BadThreshold { value: t });
        }
    }
    if let Some(hm) = heatmap {
        if hm.map.dim() != roll.grid.dim() {
            return Err(RenderError::HeatmapDims {
                expected: roll.grid.dim(),
                actual: hm.map.dim(),
            });
        }
    }

    match heatmap {
        None => Ok(vec![render_one(roll, None, spec)?]),
        Some(hm) => spec
            .thresholds
            .iter()
            .map(|&t| render_one(roll, Some((hm, t)), spec))
            .collect(),
    }
}

fn render_one<T: Scalar>(
    roll: &Roll<T>,
    overlay: Option<(&ConceptHeatmap<T>, f64)>,
    spec: &RenderSpec,
) -> Result<RenderedImage, RenderError> {
    let (pitches, columns) = roll.grid.dim();
    let s_t = spec.pixels_per_step;
    let s_p = spec.pixels_per_pitch;
    let width = columns * s_t;
    let height = pitches * s_p;

    let note_runs = merged_runs(&roll.grid);
    // Overlay runs reuse the cell merger on a thresholded copy.
    let overlay_runs = overlay.map(|(hm, threshold)| {
        let mask = hm.map.mapv(|v| {
            if v.to_f64().unwrap() >= threshold {
                T::one()
            } else {
                T::zero()
            }
        });
        merged_runs(&mask)
    });

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"{}\"/>\n",
        hex(BACKGROUND)
    ));
    svg.push_str("<g class=\"notes\">\n");
    for &(p, start, len, value) in &note_runs {
        let color = spec.velocity_colormap.sample(value.to_f64().unwrap());
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            start * s_t,
            (pitches - 1 - p) * s_p,
            len * s_t,
            s_p,
            hex(color)
        ));
    }
    svg.push_str("</g>\n");
    if let Some(runs) = &overlay_runs {
        svg.push_str(&format!(
            "<g class=\"overlay\" fill=\"{}\" fill-opacity=\"{}\">\n",
            hex(spec.overlay_color),
            spec.overlay_alpha
        ));
        for &(p, start, len, _) in runs {
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\"/>\n",
                start * s_t,
                (pitches - 1 - p) * s_p,
                len * s_t,
                s_p
            ));
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");

    // Rasterize the same geometry.
    let mut pixels = vec![0u8; width * height * 4];
    for chunk in pixels.chunks_exact_mut(4) {
        chunk[..3].copy_from_slice(&BACKGROUND);
        chunk[3] = 255;
    }
    let mut paint = |p: usize, start: usize, len: usize, color: [u8; 3], alpha: f64| {
        let y0 = (pitches - 1 - p) * s_p;
        for y in y0..y0 + s_p {
            for x in start * s_t..(start + len) * s_t {
                let at = (y * width + x) * 4;
                for i in 0..3 {
                    let base = pixels[at + i] as f64;
                    pixels[at + i] =
                        (base * (1.0 - alpha) + color[i] as f64 * alpha).round() as u8;
                }
                pixels[at + 3] = 255;
            }
        }
    };
    for &(p, start, len, value) in &note_runs {
        paint(p, start, len, spec.velocity_colormap.sample(value.to_f64().unwrap()), 1.0);
    }
    if let Some(runs) = &overlay_runs {
        for &(p, start, len, _) in runs {
            paint(p, start, len, spec.overlay_color, spec.overlay_alpha);
        }
    }

    let mut png = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut png);
    image::ImageEncoder::write_image(
        encoder,
        &pixels,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgba8,
    )?;

    Ok(RenderedImage { threshold: overlay.map(|(_, t)| t), svg, png })
}

/// Inverts a roll to notes by merging horizontal runs of equal-velocity
/// cells per pitch.
pub fn roll_to_notes<T: Scalar>(roll: &Roll<T>) -> NoteSequence {
    debug_assert_eq!(roll.grid.nrows(), NUM_PITCHES);
    let mut notes = Vec::new();
    for (p, start, len, value) in merged_runs(&roll.grid) {
        let velocity = (value.to_f64().unwrap() * 127.0).round().clamp(1.0, 127.0) as u8;
        notes.push(Note {
            pitch: PITCH_MIN + p as u8,
            onset: start as f64 * roll.step,
            duration: len as f64 * roll.step,
            velocity,
        });
    }
    let mut seq = NoteSequence {
        notes,
        total_duration: roll.grid.ncols() as f64 * roll.step,
        stats: ParseStats::default(),
    };
    seq.normalize();
    seq
}

/// A roll as a standard MIDI file; see [`roll_to_notes`].
pub fn export_roll_midi<T: Scalar>(roll: &Roll<T>) -> Vec<u8> {
    export_midi(&roll_to_notes(roll))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi::parse_midi;
    use crate::roll::{build_piano_roll, DEFAULT_STEP};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn blank_roll(columns: usize) -> Roll<f64> {
        Roll::zeros(columns, DEFAULT_STEP)
    }

    fn heatmap_for(roll: &Roll<f64>, map: Array2<f64>) -> ConceptHeatmap<f64> {
        assert_eq!(map.dim(), roll.grid.dim());
        ConceptHeatmap {
            map,
            raw_map: Array2::zeros((1, 1)),
            average_presence: 0.0,
            excerpt_id: 0,
            concept_index: 0,
        }
    }

    /// Total overlaid cells, recovered from the emitted SVG geometry.
    fn overlay_cells(svg: &str, pixels_per_step: usize) -> usize {
        let Some(section) = svg.split("class=\"overlay\"").nth(1) else {
            return 0;
        };
        let section = section.split("</g>").next().unwrap();
        section
            .split("width=\"")
            .skip(1)
            .map(|rest| {
                let px: usize = rest.split('"').next().unwrap().parse().unwrap();
                px / pixels_per_step
            })
            .sum()
    }

    #[test]
    fn default_spec_includes_the_sixty_percent_stop() {
        let spec = RenderSpec::default();
        assert!(spec.thresholds.contains(&0.6));
        assert!(spec.thresholds.iter().all(|t| *t > 0.0 && *t <= 1.0));
        assert!(spec.pixels_per_step > 0 && spec.pixels_per_pitch > 0);
    }

    #[test]
    fn zero_roll_renders_a_uniform_background_of_exact_size() {
        let spec = RenderSpec::default();
        let images = render_roll(&blank_roll(30), None, &spec).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(images[0].threshold, None);

        let expected_w = 30 * spec.pixels_per_step;
        let expected_h = NUM_PITCHES * spec.pixels_per_pitch;
        assert!(images[0]
            .svg
            .contains(&format!("width=\"{expected_w}\" height=\"{expected_h}\"")));

        let decoded = image::load_from_memory(&images[0].png).unwrap().to_rgba8();
        assert_eq!(decoded.dimensions(), (expected_w as u32, expected_h as u32));
        let first = decoded.get_pixel(0, 0);
        for (_, _, px) in decoded.enumerate_pixels() {
            assert_eq!(px, first);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut roll = blank_roll(20);
        roll.grid[(40, 3)] = 0.5;
        roll.grid[(40, 4)] = 0.5;
        roll.grid[(52, 10)] = 1.0;
        let map = Array2::from_shape_fn(roll.grid.dim(), |(p, c)| {
            ((p + c) % 7) as f64 / 6.0
        });
        let heatmap = heatmap_for(&roll, map);
        let spec = RenderSpec::default();
        let a = render_roll(&roll, Some(&heatmap), &spec).unwrap();
        let b = render_roll(&roll, Some(&heatmap), &spec).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.svg, y.svg);
            assert_eq!(x.png, y.png);
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_overlay_cells() {
        let roll = blank_roll(25);
        let map = Array2::from_shape_fn(roll.grid.dim(), |(p, c)| {
            (((p * 31 + c * 17) % 100) as f64) / 99.0
        });
        let heatmap = heatmap_for(&roll, map.clone());
        let spec = RenderSpec { thresholds: vec![0.2, 0.4, 0.6, 0.8, 1.0], ..RenderSpec::default() };
        let images = render_roll(&roll, Some(&heatmap), &spec).unwrap();
        let counts: Vec<usize> = images
            .iter()
            .map(|img| overlay_cells(&img.svg, spec.pixels_per_step))
            .collect();
        for pair in counts.windows(2) {
            assert!(pair[1] <= pair[0], "overlay grew: {counts:?}");
        }
        // Each render covers exactly the cells at or above its stop.
        for (img, count) in images.iter().zip(&counts) {
            let t = img.threshold.unwrap();
            let expected = map.iter().filter(|v| **v >= t).count();
            assert_eq!(*count, expected, "threshold {t}");
        }
        // At 1.0 only the peak cells stay.
        let peak_cells = map.iter().filter(|v| **v >= 1.0).count();
        assert_eq!(counts[4], peak_cells);
        assert!(peak_cells > 0);
    }

    #[test]
    fn heatmap_dimensions_must_match_the_roll() {
        let roll = blank_roll(20);
        let bad = ConceptHeatmap {
            map: Array2::<f64>::zeros((NUM_PITCHES, 19)),
            raw_map: Array2::zeros((1, 1)),
            average_presence: 0.0,
            excerpt_id: 0,
            concept_index: 0,
        };
        assert!(matches!(
            render_roll(&roll, Some(&bad), &RenderSpec::default()),
            Err(RenderError::HeatmapDims { .. })
        ));
        assert!(matches!(
            render_roll(&roll, None, &RenderSpec { thresholds: vec![1.5], ..Default::default() }),
            Err(RenderError::BadThreshold { .. })
        ));
        assert!(matches!(
            render_roll(&roll, None, &RenderSpec { pixels_per_step: 0, ..Default::default() }),
            Err(RenderError::BadScale)
        ));
    }

    #[test]
    fn two_cells_merge_into_one_note() {
        let mut roll = blank_roll(10);
        roll.grid[(0, 0)] = 1.0;
        roll.grid[(0, 1)] = 1.0;
        let seq = roll_to_notes(&roll);
        assert_eq!(seq.notes.len(), 1);
        let note = &seq.notes[0];
        assert_eq!(note.pitch, 21);
        assert_abs_diff_eq!(note.onset, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(note.duration, 0.1, epsilon = 1e-12);
        assert_eq!(note.velocity, 127);

        // A velocity change splits the run.
        roll.grid[(0, 1)] = 0.5;
        let split = roll_to_notes(&roll);
        assert_eq!(split.notes.len(), 2);
        assert_eq!(split.notes[0].velocity, 127);
        assert_eq!(split.notes[1].velocity, 64);
    }

    #[test]
    fn empty_roll_exports_a_valid_empty_midi_file() {
        let bytes = export_roll_midi(&blank_roll(8));
        let parsed = parse_midi(&bytes).unwrap();
        assert!(parsed.notes.is_empty());
    }

    #[test]
    fn roll_round_trip_is_cell_exact_and_export_is_idempotent() {
        let seq = crate::synth::synth_concept(&crate::synth::PatternSpec::alberti(5), 2.0);
        let first_bytes = export_midi(&seq);

        let pipeline = |bytes: &[u8]| -> Vec<u8> {
            let parsed = parse_midi(bytes).unwrap();
            let roll: Roll<f32> =
                build_piano_roll(&parsed, 0.0, parsed.total_duration, DEFAULT_STEP);
            export_roll_midi(&roll)
        };
        let once = pipeline(&first_bytes);
        let twice = pipeline(&once);
        assert_eq!(once, twice);

        // Cell-exact roll agreement across the round trip.
        let roll_a: Roll<f32> =
            build_piano_roll(&parse_midi(&first_bytes).unwrap(), 0.0, 2.0, DEFAULT_STEP);
        let roll_b: Roll<f32> =
            build_piano_roll(&parse_midi(&once).unwrap(), 0.0, 2.0, DEFAULT_STEP);
        assert_eq!(roll_a.grid, roll_b.grid);
    }
}

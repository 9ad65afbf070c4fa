//! File-level subcommands that work outside a run directory.

use crate::data::{read_roll_prt, write_roll_prt};
use crate::error::{CliError, CliResult};
use crate::log_event;
use concept_probe::cav::{fit_cav, CavOptions};
use concept_probe::concepts::ConceptHeatmap;
use concept_probe::factorization::{
    concat_modes, nmf, ntd, reconstruct, relative_error, FactorizationOptions, Variant,
};
use concept_probe::midi::parse_midi_file;
use concept_probe::prt::PrtTensor;
use concept_probe::render::{export_roll_midi, render_roll, RenderSpec};
use concept_probe::roll::build_piano_roll;
use concept_probe::PianoRoll;
use ndarray::{Array2, Array4};
use serde::Serialize;
use std::path::Path;

/// `roll`: bins a MIDI file into a roll tensor.
pub fn cmd_roll(
    input: &Path,
    out: &Path,
    start: f64,
    seconds: Option<f64>,
    step: f64,
) -> CliResult<()> {
    if step <= 0.0 {
        return Err(CliError::Config(format!("step {step} must be positive")));
    }
    let seq = parse_midi_file(input)?;
    if seq.stats.warnings() > 0 {
        log_event(&serde_json::json!({
            "event": "warning",
            "message": format!(
                "{}: {} dangling note-ons, {} out-of-range notes dropped",
                input.display(),
                seq.stats.dangling_note_ons,
                seq.stats.dropped_out_of_range,
            ),
        }));
    }
    let length = seconds.unwrap_or((seq.total_duration - start).max(step));
    if length <= 0.0 {
        return Err(CliError::Config(format!("excerpt length {length} must be positive")));
    }
    let mut roll: PianoRoll = build_piano_roll(&seq, start, length, step);
    roll.meta.source = input.display().to_string();
    write_roll_prt(out, &roll)?;
    log_event(&serde_json::json!({
        "event": "roll",
        "columns": roll.grid.ncols(),
        "active_cells": roll.active_cells(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct CavFile {
    concept_id: String,
    layer: usize,
    classifier_accuracy: Option<f64>,
    v: Vec<f32>,
}

/// `cav`: fits one concept activation vector from two activation
/// matrices stored as PRT tensors.
pub fn cmd_cav(
    concept_path: &Path,
    random_path: &Path,
    layer: usize,
    out: &Path,
    seed: u64,
) -> CliResult<()> {
    let concept: Array2<f32> = PrtTensor::read_file(concept_path)?.to_array_fixed()?;
    let random: Array2<f32> = PrtTensor::read_file(random_path)?.to_array_fixed()?;
    let concept_id = concept_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "concept".into());
    let opts = CavOptions { rng_seed: seed, ..CavOptions::default() };
    let cav = fit_cav(&concept, &random, layer, &concept_id, &opts)?;
    let file = CavFile {
        concept_id: cav.concept_id.clone(),
        layer: cav.layer,
        classifier_accuracy: cav.classifier_accuracy,
        v: cav.v.to_vec(),
    };
    std::fs::write(out, serde_json::to_vec_pretty(&file)?)?;
    log_event(&serde_json::json!({
        "event": "cav",
        "concept": file.concept_id,
        "accuracy": file.classifier_accuracy,
        "out": out.display().to_string(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct NtdReport {
    variant: Variant,
    ranks: Vec<usize>,
    loss_history: Vec<f64>,
    relative_error: f64,
    compression_ratio: f64,
    num_parameters: usize,
}

/// `ntd`: factorizes a 4-D activation tensor under the chosen variant
/// and writes the factors plus a convergence report.
pub fn cmd_ntd(
    input: &Path,
    ranks: &[usize],
    variant: Variant,
    out: &Path,
    opts: &FactorizationOptions,
) -> CliResult<()> {
    let tensor = PrtTensor::read_file(input)?;
    let acts: Array4<f32> = tensor.to_array_fixed().map_err(|_| {
        CliError::Data(format!(
            "{} is {:?}; ntd expects a 4-D (N, H, W, C) activation tensor",
            input.display(),
            tensor.dims
        ))
    })?;
    let (x, _) = concat_modes(&acts, variant);
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;

    let report = if variant == Variant::TwoD {
        if ranks.len() != 1 {
            return Err(CliError::Config(format!(
                "variant 2d takes a single rank, got {}",
                ranks.len()
            )));
        }
        let matrix: Array2<f32> =
            x.into_dimensionality().expect("2d concatenation yields a matrix");
        let factors = nmf(&matrix, ranks[0], opts)?;
        PrtTensor::from_array(factors.w.view(), serde_json::json!({"factor": "w"}))
            .write_file(&out.join("w.prt"))?;
        PrtTensor::from_array(factors.h.view(), serde_json::json!({"factor": "h"}))
            .write_file(&out.join("h.prt"))?;
        NtdReport {
            variant,
            ranks: ranks.to_vec(),
            relative_error: relative_error(matrix.view().into_dyn(), factors.reconstruct().view().into_dyn()),
            compression_ratio: factors.compression_ratio(&[matrix.nrows(), matrix.ncols()]),
            num_parameters: factors.num_parameters(),
            loss_history: factors.loss_history,
        }
    } else {
        let factors = ntd(&x, ranks, opts)?;
        PrtTensor::from_array(factors.core.view(), serde_json::json!({"factor": "core"}))
            .write_file(&out.join("core.prt"))?;
        for (mode, factor) in factors.factors.iter().enumerate() {
            PrtTensor::from_array(factor.view(), serde_json::json!({"factor": "u", "mode": mode}))
                .write_file(&out.join(format!("factor_{mode}.prt")))?;
        }
        NtdReport {
            variant,
            ranks: ranks.to_vec(),
            relative_error: relative_error(x.view(), reconstruct(&factors).view()),
            compression_ratio: factors.compression_ratio(x.shape()),
            num_parameters: factors.num_parameters(),
            loss_history: factors.loss_history,
        }
    };
    std::fs::write(out.join("ntd_report.json"), serde_json::to_vec_pretty(&report)?)?;
    log_event(&serde_json::json!({
        "event": "ntd",
        "relative_error": report.relative_error,
        "compression_ratio": report.compression_ratio,
        "iterations": report.loss_history.len(),
    }));
    Ok(())
}

/// Writes one render set: `<name>_t<pct>.svg/.png` per threshold with a
/// heatmap, `<name>.svg/.png` without, and `<name>.mid` either way.
/// Returns the written file names.
pub fn write_render_files(
    dir: &Path,
    name: &str,
    roll: &PianoRoll,
    heatmap: Option<&ConceptHeatmap<f32>>,
    spec: &RenderSpec,
) -> CliResult<Vec<String>> {
    let mut written = Vec::new();
    for image in render_roll(roll, heatmap, spec)? {
        let base = match image.threshold {
            Some(t) => format!("{name}_t{:.0}", t * 100.0),
            None => name.to_owned(),
        };
        std::fs::write(dir.join(format!("{base}.svg")), image.svg.as_bytes())?;
        std::fs::write(dir.join(format!("{base}.png")), &image.png)?;
        written.push(format!("{base}.svg"));
        written.push(format!("{base}.png"));
    }
    std::fs::write(dir.join(format!("{name}.mid")), export_roll_midi(roll))?;
    written.push(format!("{name}.mid"));
    Ok(written)
}

/// `render`: draws a stored roll, optionally under a stored heatmap.
pub fn cmd_render(
    input: &Path,
    heatmap_path: Option<&Path>,
    out: &Path,
    name: &str,
    spec: &RenderSpec,
) -> CliResult<()> {
    let roll = read_roll_prt(input)?;
    let heatmap = match heatmap_path {
        Some(path) => {
            let tensor = PrtTensor::read_file(path)?;
            Some(ConceptHeatmap {
                map: tensor.to_array_fixed::<f32, ndarray::Ix2>()?,
                raw_map: Array2::zeros((1, 1)),
                average_presence: tensor.meta["average_presence"].as_f64().unwrap_or(0.0),
                excerpt_id: tensor.meta["excerpt_id"].as_u64().unwrap_or(0) as usize,
                concept_index: tensor.meta["concept_index"].as_u64().unwrap_or(0) as usize,
            })
        }
        None => None,
    };
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let written = write_render_files(out, name, &roll, heatmap.as_ref(), spec)?;
    log_event(&serde_json::json!({
        "event": "render",
        "files": written,
        "out": out.display().to_string(),
    }));
    Ok(())
}

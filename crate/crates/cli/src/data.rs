//! Synthetic dataset plumbing: deterministic excerpt streams, roll
//! tensors on disk, and the `dataset` subcommand.

use crate::config::{sha256_hex, DataConfig};
use crate::error::{CliError, CliResult};
use concept_probe::midi::export_midi;
use concept_probe::prt::PrtTensor;
use concept_probe::roll::{build_piano_roll, derive_seed, Roll, RollMeta};
use concept_probe::synth::{synth_concept, PatternSpec};
use concept_probe::PianoRoll;
use serde::Serialize;
use std::path::Path;

/// Independent seed streams, so adding excerpts to one set never shifts
/// another.
pub mod streams {
    pub const TRAIN: u64 = 0;
    pub const VAL: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const CONCEPT: u64 = 3;
    pub const RANDOM: u64 = 4;
    pub const DATASET_CMD: u64 = 5;
}

/// Pattern description for the `index`-th excerpt of a named concept.
/// Alberti excerpts cycle through the twelve keys.
pub fn pattern_for(kind: &str, seed: u64, index: usize) -> CliResult<PatternSpec> {
    match kind {
        "alberti" => Ok(PatternSpec { key: (index % 12) as u8, ..PatternSpec::alberti(seed) }),
        "random" => Ok(PatternSpec::random(seed)),
        other => Err(CliError::Config(format!(
            "unknown concept {other:?}; expected \"alberti\" or \"random\""
        ))),
    }
}

pub fn make_roll(spec: &PatternSpec, seconds: f64, step: f64) -> PianoRoll {
    let seq = synth_concept(spec, seconds);
    build_piano_roll(&seq, 0.0, seconds, step)
}

/// One deterministic excerpt set.
pub fn excerpt_set(
    kind: &str,
    stream_seed: u64,
    count: usize,
    data: &DataConfig,
) -> CliResult<Vec<PianoRoll>> {
    (0..count)
        .map(|i| {
            let spec = pattern_for(kind, derive_seed(stream_seed, i as u64), i)?;
            Ok(make_roll(&spec, data.excerpt_seconds, data.step))
        })
        .collect()
}

/// Per-class excerpt sets for one stream (train, val or eval).
pub fn class_sets(
    base_seed: u64,
    stream: u64,
    per_class: usize,
    data: &DataConfig,
) -> CliResult<Vec<Vec<PianoRoll>>> {
    data.classes
        .iter()
        .enumerate()
        .map(|(class, kind)| {
            excerpt_set(
                kind,
                derive_seed(derive_seed(base_seed, stream), class as u64),
                per_class,
                data,
            )
        })
        .collect()
}

/// The TCAV concept excerpts.
pub fn concept_set(base_seed: u64, data: &DataConfig) -> CliResult<Vec<PianoRoll>> {
    excerpt_set(
        &data.concept,
        derive_seed(base_seed, streams::CONCEPT),
        data.concept_excerpts,
        data,
    )
}

/// The random counterexample datasets.
pub fn random_datasets(base_seed: u64, data: &DataConfig) -> CliResult<Vec<Vec<PianoRoll>>> {
    (0..data.num_random_datasets)
        .map(|j| {
            excerpt_set(
                "random",
                derive_seed(derive_seed(base_seed, streams::RANDOM), j as u64),
                data.random_excerpts,
                data,
            )
        })
        .collect()
}

/// Writes a roll as a PRT tensor with its timing in the metadata.
pub fn write_roll_prt(path: &Path, roll: &PianoRoll) -> CliResult<()> {
    let meta = serde_json::json!({
        "kind": "roll",
        "step": roll.step,
        "offset": roll.meta.offset,
        "source": roll.meta.source,
    });
    PrtTensor::from_array(roll.grid.view(), meta).write_file(path)?;
    Ok(())
}

pub fn read_roll_prt(path: &Path) -> CliResult<PianoRoll> {
    let tensor = PrtTensor::read_file(path)?;
    let grid = tensor.to_array_fixed::<f32, ndarray::Ix2>()?;
    let step = tensor.meta["step"].as_f64().ok_or_else(|| {
        CliError::Data(format!("{} has no step metadata", path.display()))
    })?;
    let meta = RollMeta {
        source: tensor.meta["source"].as_str().unwrap_or_default().to_owned(),
        offset: tensor.meta["offset"].as_f64().unwrap_or(0.0),
    };
    Ok(Roll { grid, step, meta })
}

#[derive(Serialize)]
struct DatasetFile {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    kind: &'a str,
    name: &'a str,
    seed: u64,
    excerpts: usize,
    seconds: f64,
    step: f64,
    files: Vec<DatasetFile>,
}

/// Writes one directory of excerpts: MIDI plus roll tensor per excerpt
/// and a manifest of content hashes.
pub fn write_excerpt_dir(
    dir: &Path,
    kind: &str,
    name: &str,
    dir_seed: u64,
    excerpts: usize,
    seconds: f64,
    step: f64,
) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    let mut record = |name: String, bytes: &[u8]| -> CliResult<()> {
        std::fs::write(dir.join(&name), bytes)?;
        files.push(DatasetFile { name, sha256: sha256_hex(bytes) });
        Ok(())
    };
    for i in 0..excerpts {
        let spec = pattern_for(kind, derive_seed(dir_seed, i as u64), i)?;
        let seq = synth_concept(&spec, seconds);
        record(format!("excerpt_{i:03}.mid"), &export_midi(&seq))?;

        let mut roll: PianoRoll = build_piano_roll(&seq, 0.0, seconds, step);
        roll.meta.source = format!("{name}/excerpt_{i:03}.mid");
        let meta = serde_json::json!({
            "kind": "roll",
            "step": roll.step,
            "offset": roll.meta.offset,
            "source": roll.meta.source,
        });
        let bytes = PrtTensor::from_array(roll.grid.view(), meta).to_bytes();
        record(format!("excerpt_{i:03}.prt"), &bytes)?;
    }
    let manifest =
        DatasetManifest { kind, name, seed: dir_seed, excerpts, seconds, step, files };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// The `dataset` subcommand: either `count` random datasets or one
/// directory of concept excerpts.
#[allow(clippy::too_many_arguments)]
pub fn cmd_dataset(
    out: &Path,
    seed: u64,
    random_count: Option<usize>,
    concept: Option<&str>,
    excerpts: usize,
    seconds: f64,
    step: f64,
) -> CliResult<Vec<String>> {
    let base = derive_seed(seed, streams::DATASET_CMD);
    let mut written = Vec::new();
    match (random_count, concept) {
        (Some(count), None) => {
            for j in 0..count {
                let name = format!("random_{j:02}");
                write_excerpt_dir(
                    &out.join(&name),
                    "random",
                    &name,
                    derive_seed(base, j as u64),
                    excerpts,
                    seconds,
                    step,
                )?;
                written.push(name);
            }
        }
        (None, Some(kind)) => {
            pattern_for(kind, 0, 0)?;
            write_excerpt_dir(
                &out.join(kind),
                kind,
                kind,
                derive_seed(base, u64::MAX),
                excerpts,
                seconds,
                step,
            )?;
            written.push(kind.to_owned());
        }
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --random or --concept <name>".into(),
            ))
        }
    }
    Ok(written)
}

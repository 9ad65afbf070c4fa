//! Run-directory stages with cached, hash-chained artifacts.
//!
//! Each stage hashes its effective inputs (the config plus the output
//! hashes of the stages it depends on) and records a stamp next to its
//! outputs. Re-running a stage whose stamp still matches is a no-op, so
//! a pipeline can be resumed or partially re-run stage by stage.

use crate::config::{sha256_hex, RunConfig};
use crate::data::{self, streams};
use crate::error::{CliError, CliResult};
use crate::log_event;
use concept_probe::cav::{tcav_experiment, CavOptions, TcavOptions};
use concept_probe::concepts::{
    c_cavs, channel_sensitivity, fidelity, nmf_channel_dictionary, ntd_channel_dictionary,
    presence_maps, rank_excerpts, ConceptHeatmap, Ranking,
};
use concept_probe::factorization::{
    concat_modes, nmf, ntd, reconstruct, FactorizationOptions, Variant,
};
use concept_probe::model::{train, Cnn, Dataset, TrainConfig};
use concept_probe::prt::PrtTensor;
use concept_probe::roll::derive_seed;
use concept_probe::{Model, PianoRoll};
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 5] = ["train", "activations", "tcav", "explain", "render"];

fn stage_deps(stage: &str) -> &'static [&'static str] {
    match stage {
        "train" => &[],
        "activations" | "tcav" => &["train"],
        "explain" => &["train", "activations"],
        "render" => &["train", "activations", "explain"],
        _ => &[],
    }
}

/// Seed streams private to the stages.
mod rng_streams {
    pub const MODEL_INIT: u64 = 10;
    pub const TRAIN: u64 = 11;
    pub const CAV: u64 = 12;
    pub const FACTOR: u64 = 13;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
}

/// Completion record of one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageStamp {
    pub stage: String,
    /// Hash of the config hash and all upstream output hashes.
    pub inputs_hash: String,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'a str,
    seed: u64,
    config_sha256: &'a str,
    stages: Vec<StageStamp>,
}

/// Per-class mean channel sensitivities and the presence ranking of one
/// dictionary concept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept_index: usize,
    pub ranking: Ranking,
    /// Mean sensitivity per class; empty for dropped zero columns.
    pub mean_sensitivity: Vec<f64>,
}

/// Everything the unsupervised path found.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub source: String,
    pub variant: Variant,
    pub layer: usize,
    pub ranks: Vec<usize>,
    pub relative_error: f64,
    pub compression_ratio: f64,
    pub fidelity: f64,
    pub dropped_zero_columns: Vec<usize>,
    pub concepts: Vec<ConceptReport>,
    /// Concept indices whose class sensitivities have opposite signs.
    pub opposing: Vec<usize>,
}

/// Executes stages inside one run directory.
pub struct Runner<'a> {
    pub config: &'a RunConfig,
    pub run_dir: &'a Path,
    config_hash: String,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a RunConfig, run_dir: &'a Path) -> CliResult<Self> {
        std::fs::create_dir_all(run_dir)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", run_dir.display())))?;
        Ok(Runner { config, run_dir, config_hash: config.hash() })
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> CliResult<()> {
        for stage in STAGES {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs one stage, reusing its cached outputs when nothing upstream
    /// changed. Errors are prefixed with the stage name; outputs written
    /// before a failure are left in place.
    pub fn run_stage(&self, stage: &str) -> CliResult<StageStamp> {
        if !STAGES.contains(&stage) {
            return Err(CliError::Config(format!(
                "unknown stage {stage:?}; expected one of {STAGES:?}"
            )));
        }
        let inputs_hash = self.inputs_hash(stage)?;
        if let Some(stamp) = self.load_stamp(stage)? {
            if stamp.inputs_hash == inputs_hash && self.outputs_valid(&stamp) {
                log_event(&serde_json::json!({ "event": "stage_cached", "stage": stage }));
                self.write_manifest()?;
                return Ok(stamp);
            }
        }
        log_event(&serde_json::json!({ "event": "stage_start", "stage": stage }));
        let written = match stage {
            "train" => self.stage_train(),
            "activations" => self.stage_activations(),
            "tcav" => self.stage_tcav(),
            "explain" => self.stage_explain(),
            "render" => self.stage_render(),
            _ => unreachable!("stage validated above"),
        }
        .map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("stage {stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("stage {stage}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("stage {stage}: {m}")),
        })?;

        let mut outputs = Vec::with_capacity(written.len());
        for path in written {
            let bytes = std::fs::read(self.run_dir.join(&path))?;
            outputs.push(OutputRecord {
                path: path.to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
            });
        }
        let stamp = StageStamp { stage: stage.to_owned(), inputs_hash, outputs };
        let stamp_path = self.stamp_path(stage);
        std::fs::create_dir_all(stamp_path.parent().expect("stages dir"))?;
        std::fs::write(&stamp_path, serde_json::to_vec_pretty(&stamp)?)?;
        self.write_manifest()?;
        log_event(&serde_json::json!({
            "event": "stage_complete",
            "stage": stage,
            "outputs": stamp.outputs.len(),
        }));
        Ok(stamp)
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.run_dir.join("stages").join(format!("{stage}.json"))
    }

    fn load_stamp(&self, stage: &str) -> CliResult<Option<StageStamp>> {
        let path = self.stamp_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        let stamp = serde_json::from_slice(&std::fs::read(&path)?)
            .map_err(|e| CliError::Data(format!("corrupt stamp {}: {e}", path.display())))?;
        Ok(Some(stamp))
    }

    fn outputs_valid(&self, stamp: &StageStamp) -> bool {
        stamp.outputs.iter().all(|record| {
            std::fs::read(self.run_dir.join(&record.path))
                .map(|bytes| sha256_hex(&bytes) == record.sha256)
                .unwrap_or(false)
        })
    }

    /// Chained hash over the config and all upstream outputs. Upstream
    /// stages must have valid stamps.
    fn inputs_hash(&self, stage: &str) -> CliResult<String> {
        let mut material = format!("config:{}\nstage:{stage}\n", self.config_hash);
        for dep in stage_deps(stage) {
            let stamp = self.load_stamp(dep)?.filter(|s| self.outputs_valid(s)).ok_or_else(
                || {
                    CliError::Data(format!(
                        "stage {stage} needs completed stage {dep}; run `pipeline` or the \
                         {dep} stage first"
                    ))
                },
            )?;
            for record in &stamp.outputs {
                material.push_str(&format!("{dep}:{}:{}\n", record.path, record.sha256));
            }
        }
        Ok(sha256_hex(material.as_bytes()))
    }

    fn write_manifest(&self) -> CliResult<()> {
        let mut stages = Vec::new();
        for stage in STAGES {
            if let Some(stamp) = self.load_stamp(stage)? {
                stages.push(stamp);
            }
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            config_sha256: &self.config_hash,
            stages,
        };
        std::fs::write(
            self.run_dir.join("manifest.json"),
            serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(())
    }

    fn load_model(&self) -> CliResult<Model> {
        let dir = self.run_dir.join("model");
        if !dir.join("manifest.json").exists() {
            return Err(CliError::Data(format!(
                "no cached model under {}; run the train stage first",
                dir.display()
            )));
        }
        Ok(Cnn::load(&dir)?)
    }

    fn eval_rolls(&self) -> CliResult<(Vec<PianoRoll>, Vec<usize>)> {
        let sets = data::class_sets(
            self.config.seed,
            streams::EVAL,
            self.config.data.eval_per_class,
            &self.config.data,
        )?;
        Ok(flatten_sets(sets))
    }

    // -- train ------------------------------------------------------------

    fn stage_train(&self) -> CliResult<Vec<PathBuf>> {
        let config = self.config;
        let train_sets =
            data::class_sets(config.seed, streams::TRAIN, config.data.train_per_class, &config.data)?;
        let val_sets =
            data::class_sets(config.seed, streams::VAL, config.data.val_per_class, &config.data)?;
        let (train_rolls, train_labels) = flatten_sets(train_sets);
        let (val_rolls, val_labels) = flatten_sets(val_sets);
        let train_set = Dataset::from_rolls(&train_rolls, train_labels);
        let val_set = Dataset::from_rolls(&val_rolls, val_labels);

        let mut model = Cnn::init(
            config.model.clone(),
            derive_seed(config.seed, rng_streams::MODEL_INIT),
        )?;
        let train_cfg = TrainConfig {
            rng_seed: derive_seed(
                derive_seed(config.seed, rng_streams::TRAIN),
                config.train.rng_seed,
            ),
            ..config.train.clone()
        };
        let report = train(&mut model, &train_set, &val_set, &train_cfg, |stats| {
            log_event(&serde_json::json!({
                "event": "epoch",
                "epoch": stats.epoch,
                "train_loss": stats.train_loss,
                "val_accuracy": stats.val_accuracy,
            }));
        })?;

        let model_dir = self.run_dir.join("model");
        model.save(
            &model_dir,
            serde_json::json!({
                "config_sha256": self.config_hash,
                "seed": config.seed,
            }),
        )?;
        std::fs::write(
            self.run_dir.join("train_report.json"),
            serde_json::to_vec_pretty(&report)?,
        )?;

        let mut written = vec![PathBuf::from("train_report.json")];
        let mut model_files: Vec<PathBuf> = std::fs::read_dir(&model_dir)?
            .map(|entry| Ok(PathBuf::from("model").join(entry?.file_name())))
            .collect::<CliResult<_>>()?;
        model_files.sort();
        written.extend(model_files);
        Ok(written)
    }

    // -- activations ------------------------------------------------------

    fn stage_activations(&self) -> CliResult<Vec<PathBuf>> {
        let model = self.load_model()?;
        let layer = self.config.probe_layer();
        let (rolls, labels) = self.eval_rolls()?;
        let acts = stack_activations(&model, &rolls, layer)?;
        let meta = serde_json::json!({
            "kind": "activations",
            "layer": layer,
            "labels": labels,
            "classes": self.config.data.classes,
        });
        let dir = self.run_dir.join("activations");
        std::fs::create_dir_all(&dir)?;
        PrtTensor::from_array(acts.view(), meta).write_file(&dir.join("acts_eval.prt"))?;
        Ok(vec![PathBuf::from("activations/acts_eval.prt")])
    }

    // -- tcav ---------------------------------------------------------------

    fn stage_tcav(&self) -> CliResult<Vec<PathBuf>> {
        let config = self.config;
        let model = self.load_model()?;
        let layer = config.probe_layer();
        let concept = data::concept_set(config.seed, &config.data)?;
        let randoms = data::random_datasets(config.seed, &config.data)?;
        let eval_sets =
            data::class_sets(config.seed, streams::EVAL, config.data.eval_per_class, &config.data)?;

        let opts = TcavOptions {
            alpha: config.tcav.alpha,
            cav: CavOptions {
                rng_seed: derive_seed(
                    derive_seed(config.seed, rng_streams::CAV),
                    config.tcav.cav.rng_seed,
                ),
                ..config.tcav.cav.clone()
            },
        };
        let report = tcav_experiment(
            &model,
            &concept,
            &randoms,
            &eval_sets,
            layer,
            &config.data.concept,
            &opts,
        )?;
        for result in &report.per_class {
            log_event(&serde_json::json!({
                "event": "tcav_class",
                "class": result.class,
                "mean_score": result.mean,
                "p": result.p,
                "sign": result.sign,
            }));
        }
        let dir = self.run_dir.join("tcav");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("tcav_report.json"), serde_json::to_vec_pretty(&report)?)?;
        Ok(vec![PathBuf::from("tcav/tcav_report.json")])
    }

    // -- explain ------------------------------------------------------------

    fn stage_explain(&self) -> CliResult<Vec<PathBuf>> {
        let config = self.config;
        let model = self.load_model()?;
        let acts_path = self.run_dir.join("activations/acts_eval.prt");
        let tensor = PrtTensor::read_file(&acts_path)?;
        let acts: Array4<f32> = tensor.to_array_fixed()?;
        let layer = tensor.meta["layer"]
            .as_u64()
            .ok_or_else(|| CliError::Data("activations lack layer metadata".into()))?
            as usize;
        let labels: Vec<usize> = serde_json::from_value(tensor.meta["labels"].clone())
            .map_err(|e| CliError::Data(format!("activation labels: {e}")))?;

        let variant = config.factorization.variant;
        let (x, mode_map) = concat_modes(&acts, variant);
        let ranks = effective_ranks(x.shape(), variant, config)?;
        let fopts = FactorizationOptions {
            rng_seed: derive_seed(
                derive_seed(config.seed, rng_streams::FACTOR),
                config.factorization.options.rng_seed,
            ),
            ..config.factorization.options.clone()
        };

        let source;
        let dictionary: Array2<f32>;
        let recon;
        let relative_error;
        let compression;
        if variant == Variant::TwoD {
            let matrix: Array2<f32> = x
                .into_dimensionality()
                .expect("2d concatenation yields a matrix");
            let factors = nmf(&matrix, ranks[0], &fopts)?;
            source = "nmf";
            dictionary = nmf_channel_dictionary(&factors);
            recon = factors.reconstruct().into_dyn();
            relative_error = *factors.loss_history.last().expect("nmf records its loss");
            compression = factors.compression_ratio(&[matrix.nrows(), matrix.ncols()]);
        } else {
            let factors = ntd(&x, &ranks, &fopts)?;
            source = "ntd";
            dictionary = ntd_channel_dictionary(&factors);
            recon = reconstruct(&factors);
            relative_error = *factors.loss_history.last().expect("ntd records its loss");
            compression = factors.compression_ratio(x.shape());
        }
        let reconstructed = mode_map.restore(recon.view())?;
        let fidelity_score = fidelity(&model, &acts, &reconstructed, layer)?;

        let ccavs = c_cavs(&dictionary, source);
        for warning in ccavs.warnings() {
            log_event(&serde_json::json!({ "event": "warning", "message": warning }));
        }

        let (rolls, _) = self.eval_rolls()?;
        let columns = rolls.first().map_or(0, |r| r.grid.ncols());
        let atoms = dictionary.ncols();
        let mut by_concept: Vec<Vec<ConceptHeatmap<f32>>> = (0..atoms).map(|_| Vec::new()).collect();
        for (i, _) in rolls.iter().enumerate() {
            let act = acts.index_axis(Axis(0), i).to_owned();
            for heatmap in presence_maps(&act, &dictionary, i, columns)? {
                by_concept[heatmap.concept_index].push(heatmap);
            }
        }

        // Per-class mean sensitivity of each kept C-CAV.
        let num_classes = config.model.num_classes;
        let mut sensitivity_by_index = vec![Vec::new(); atoms];
        for ccav in &ccavs.cavs {
            let mut means = vec![0.0f64; num_classes];
            let mut counts = vec![0usize; num_classes];
            for (roll, &label) in rolls.iter().zip(&labels) {
                let s = channel_sensitivity(&model, roll, ccav, layer, label)?;
                means[label] += f64::from(s);
                counts[label] += 1;
            }
            for (m, c) in means.iter_mut().zip(&counts) {
                *m /= (*c).max(1) as f64;
            }
            sensitivity_by_index[ccav.concept_index] = means;
        }
        let opposing = if num_classes == 2 {
            let kept: Vec<usize> = ccavs.cavs.iter().map(|c| c.concept_index).collect();
            let matrix = Array2::from_shape_fn((kept.len(), 2), |(i, j)| {
                sensitivity_by_index[kept[i]][j]
            });
            concept_probe::concepts::opposing_concepts(&matrix)?
                .into_iter()
                .map(|row| kept[row])
                .collect()
        } else {
            Vec::new()
        };

        let dir = self.run_dir.join("explain");
        std::fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        let mut concepts = Vec::with_capacity(atoms);
        for (concept_index, group) in by_concept.iter_mut().enumerate() {
            concept_probe::concepts::normalize_for_display(group);
            let ranking = rank_excerpts(group, config.factorization.top_k)?;
            for ranked in &ranking.top {
                let heatmap = group
                    .iter()
                    .find(|hm| hm.excerpt_id == ranked.excerpt_id)
                    .expect("ranked excerpts come from this group");
                let name = heatmap_name(concept_index, ranked.excerpt_id);
                let meta = serde_json::json!({
                    "kind": "heatmap",
                    "concept_index": concept_index,
                    "excerpt_id": ranked.excerpt_id,
                    "average_presence": heatmap.average_presence,
                });
                PrtTensor::from_array(heatmap.map.view(), meta).write_file(&dir.join(&name))?;
                written.push(PathBuf::from("explain").join(&name));
            }
            concepts.push(ConceptReport {
                concept_index,
                ranking,
                mean_sensitivity: sensitivity_by_index[concept_index].clone(),
            });
        }

        let report = ExplainReport {
            source: source.to_owned(),
            variant,
            layer,
            ranks,
            relative_error,
            compression_ratio: compression,
            fidelity: fidelity_score,
            dropped_zero_columns: ccavs.dropped_zero_columns.clone(),
            concepts,
            opposing,
        };
        std::fs::write(dir.join("explain_report.json"), serde_json::to_vec_pretty(&report)?)?;
        written.insert(0, PathBuf::from("explain/explain_report.json"));
        log_event(&serde_json::json!({
            "event": "explain",
            "fidelity": report.fidelity,
            "relative_error": report.relative_error,
            "compression_ratio": report.compression_ratio,
        }));
        Ok(written)
    }

    // -- render -------------------------------------------------------------

    fn stage_render(&self) -> CliResult<Vec<PathBuf>> {
        let report: ExplainReport = serde_json::from_slice(&std::fs::read(
            self.run_dir.join("explain/explain_report.json"),
        )?)
        .map_err(|e| CliError::Data(format!("explain report: {e}")))?;
        let (rolls, _) = self.eval_rolls()?;

        let dir = self.run_dir.join("renders");
        std::fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        for concept in &report.concepts {
            let Some(top) = concept.ranking.top.first() else { continue };
            let excerpt = top.excerpt_id;
            let roll = rolls.get(excerpt).ok_or_else(|| {
                CliError::Data(format!("ranked excerpt {excerpt} outside the eval set"))
            })?;
            let hm_path = self
                .run_dir
                .join("explain")
                .join(heatmap_name(concept.concept_index, excerpt));
            let tensor = PrtTensor::read_file(&hm_path)?;
            let heatmap = ConceptHeatmap {
                map: tensor.to_array_fixed::<f32, ndarray::Ix2>()?,
                raw_map: Array2::zeros((1, 1)),
                average_presence: tensor.meta["average_presence"].as_f64().unwrap_or(0.0),
                excerpt_id: excerpt,
                concept_index: concept.concept_index,
            };
            let base = format!("c{:02}_e{excerpt:03}", concept.concept_index);
            for path in
                crate::commands::write_render_files(&dir, &base, roll, Some(&heatmap), &self.config.render)?
            {
                written.push(PathBuf::from("renders").join(path));
            }
        }
        Ok(written)
    }
}

fn heatmap_name(concept_index: usize, excerpt_id: usize) -> String {
    format!("heatmap_c{concept_index:02}_e{excerpt_id:03}.prt")
}

fn flatten_sets(sets: Vec<Vec<PianoRoll>>) -> (Vec<PianoRoll>, Vec<usize>) {
    let mut rolls = Vec::new();
    let mut labels = Vec::new();
    for (class, set) in sets.into_iter().enumerate() {
        labels.extend(std::iter::repeat(class).take(set.len()));
        rolls.extend(set);
    }
    (rolls, labels)
}

/// Stacks per-excerpt layer activations into an `(N, H, W, C)` batch.
pub fn stack_activations(
    model: &Model,
    rolls: &[PianoRoll],
    layer: usize,
) -> CliResult<Array4<f32>> {
    let (h, w, c) = model.config.block_output_shape(layer);
    let mut buf = Vec::with_capacity(rolls.len() * h * w * c);
    for roll in rolls {
        let act = model.activations_at(roll.grid.view(), layer)?;
        buf.extend(act.iter().copied());
    }
    Ok(Array4::from_shape_vec((rolls.len(), h, w, c), buf).expect("activation batch"))
}

/// Ranks from the config, or halved spatial modes with a small channel
/// rank when unset. The 2d variant takes a single factorization rank.
pub fn effective_ranks(
    shape: &[usize],
    variant: Variant,
    config: &RunConfig,
) -> CliResult<Vec<usize>> {
    let expected = if variant == Variant::TwoD { 1 } else { shape.len() };
    if let Some(ranks) = &config.factorization.ranks {
        if ranks.len() != expected {
            return Err(CliError::Config(format!(
                "variant {variant:?} needs {expected} ranks, got {}",
                ranks.len()
            )));
        }
        return Ok(ranks.clone());
    }
    let channel_rank = config.factorization.channel_rank;
    if variant == Variant::TwoD {
        return Ok(vec![channel_rank.min(shape[0]).min(shape[1])]);
    }
    let channel_mode = variant.channel_mode();
    Ok(shape
        .iter()
        .enumerate()
        .map(|(mode, &dim)| {
            if mode == channel_mode {
                channel_rank.min(dim)
            } else {
                dim.div_ceil(2).max(1)
            }
        })
        .collect())
}

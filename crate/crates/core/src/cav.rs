//! Concept activation vectors and TCAV significance testing.
//!
//! A CAV is the unit normal of a linear boundary trained to separate the
//! layer activations of concept examples from those of random examples.
//! The conceptual sensitivity of an input is the directional derivative
//! of a class logit along the CAV,
//!
//! ```text
//! S = ∇g(f(x)) · v,
//! ```
//!
//! and the TCAV score of a set of inputs is the fraction with positive
//! sensitivity. [`tcav_experiment`] repeats this over several random
//! datasets and compares the resulting scores against a control
//! distribution of random-vs-random CAVs with a two-sided Welch t-test,
//! Bonferroni-corrected across classes.

use crate::model::Cnn;
use crate::roll::{derive_seed, Roll};
use crate::stats::StatsError;
use crate::Scalar;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::stats::{welch_t_test, Welch};

#[derive(Debug, Error)]
pub enum CavError {
    #[error("activation sets have different widths: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{which} activation set is empty")]
    EmptySet { which: &'static str },
    #[error("inseparable identical sets")]
    InseparableIdenticalSets,
    #[error("classifier collapsed to the zero vector")]
    ZeroBoundary,
    #[error("sensitivity needs no fewer than one value")]
    EmptySensitivities,
    #[error(
        "cav length {actual} matches neither the full activation space \
         ({full}) nor the channel space ({channels})"
    )]
    SensitivityDimension { full: usize, channels: usize, actual: usize },
    #[error("{given} random datasets given; the control distribution needs at least 2")]
    TooFewRandomDatasets { given: usize },
    #[error("class {class} has no evaluation pieces")]
    NoEvalPieces { class: usize },
    #[error("evaluation sets cover {given} classes, model has {expected}")]
    EvalClassCount { given: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// A concept activation vector: the unit normal of the concept/random
/// boundary at one layer.
///
/// `v` has one entry per activation value for boundary-trained CAVs, or
/// one entry per channel for dictionary-derived ones.
#[derive(Debug, Clone)]
pub struct Cav<T> {
    pub v: Array1<T>,
    pub layer: usize,
    pub concept_id: String,
    /// Training-set accuracy of the fitted classifier; `None` for CAVs
    /// not obtained from a classifier.
    pub classifier_accuracy: Option<f64>,
}

/// Hyperparameters of the linear classifier behind [`fit_cav`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CavOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (the bias is unregularized).
    pub l2: f64,
    pub rng_seed: u64,
}

impl Default for CavOptions {
    fn default() -> Self {
        CavOptions { epochs: 200, learning_rate: 0.001, l2: 0.01, rng_seed: 0 }
    }
}

/// Raw result of the hinge-loss fit, before orientation and
/// normalization.
#[derive(Debug, Clone)]
pub struct SvmFit<T> {
    pub weights: Array1<T>,
    pub bias: T,
    /// Final value of `l2/2·‖w‖² + mean hinge loss`.
    pub objective: f64,
    /// Fraction of training samples on their correct side.
    pub accuracy: f64,
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Trains a linear classifier with hinge loss and L2 regularization by
/// per-sample gradient descent. `pos` rows are labeled `+1`, `neg` rows
/// `-1`; the shuffle order is reseeded each epoch.
pub fn fit_svm<T: Scalar>(
    pos: &Array2<T>,
    neg: &Array2<T>,
    opts: &CavOptions,
) -> Result<SvmFit<T>, CavError> {
    if pos.nrows() == 0 {
        return Err(CavError::EmptySet { which: "positive" });
    }
    if neg.nrows() == 0 {
        return Err(CavError::EmptySet { which: "negative" });
    }
    if pos.ncols() != neg.ncols() {
        return Err(CavError::DimensionMismatch { left: pos.ncols(), right: neg.ncols() });
    }

    let dim = pos.ncols();
    let n = pos.nrows() + neg.nrows();
    let lr = T::from(opts.learning_rate).unwrap();
    let l2 = T::from(opts.l2).unwrap();
    let one = T::one();

    let mut weights = Array1::<T>::zeros(dim);
    let mut bias = T::zero();

    let sample = |i: usize| -> (ndarray::ArrayView1<'_, T>, T) {
        if i < pos.nrows() {
            (pos.row(i), one)
        } else {
            (neg.row(i - pos.nrows()), T::zero() - one)
        }
    };

    for epoch in 0..opts.epochs {
        for &i in &shuffled_indices(n, derive_seed(opts.rng_seed, epoch as u64)) {
            let (x, y) = sample(i);
            let margin = y * (weights.dot(&x) + bias);
            if margin < one {
                ndarray::Zip::from(&mut weights).and(&x).for_each(|w, &xv| {
                    *w = *w - lr * (l2 * *w - y * xv);
                });
                bias += lr * y;
            } else {
                weights.mapv_inplace(|w| w - lr * l2 * w);
            }
        }
    }

    let mut hinge_sum = 0.0;
    let mut correct = 0usize;
    for i in 0..n {
        let (x, y) = sample(i);
        let margin = (y * (weights.dot(&x) + bias)).to_f64().unwrap();
        hinge_sum += (1.0 - margin).max(0.0);
        if margin > 0.0 {
            correct += 1;
        }
    }
    let norm_sq = weights.iter().map(|w| {
        let w = w.to_f64().unwrap();
        w * w
    });
    let objective = opts.l2 / 2.0 * norm_sq.sum::<f64>() + hinge_sum / n as f64;

    Ok(SvmFit { weights, bias, objective, accuracy: correct as f64 / n as f64 })
}

/// `true` when the two activation sets hold exactly the same rows, up to
/// ordering.
fn identical_multisets<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> bool {
    if a.dim() != b.dim() {
        return false;
    }
    let sorted_rows = |m: &Array2<T>| -> Vec<Vec<T>> {
        let mut rows: Vec<Vec<T>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|p, q| {
            for (x, y) in p.iter().zip(q.iter()) {
                let ord = x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal);
                if ord != std::cmp::Ordering::Equal {
                    return ord;
                }
            }
            std::cmp::Ordering::Equal
        });
        rows
    };
    sorted_rows(a) == sorted_rows(b)
}

/// Fits a CAV: a linear boundary between concept and random activations,
/// returned as a unit vector pointing toward the concept side. The bias
/// participates in training but not in the direction.
pub fn fit_cav<T: Scalar>(
    concept_acts: &Array2<T>,
    random_acts: &Array2<T>,
    layer: usize,
    concept_id: &str,
    opts: &CavOptions,
) -> Result<Cav<T>, CavError> {
    if concept_acts.nrows() > 0
        && concept_acts.ncols() == random_acts.ncols()
        && identical_multisets(concept_acts, random_acts)
    {
        return Err(CavError::InseparableIdenticalSets);
    }
    let fit = fit_svm(concept_acts, random_acts, opts)?;

    let mean_side = |m: &Array2<T>| -> f64 {
        m.rows()
            .into_iter()
            .map(|r| fit.weights.dot(&r).to_f64().unwrap())
            .sum::<f64>()
            / m.nrows() as f64
    };
    let flip = mean_side(concept_acts) < mean_side(random_acts);

    let norm = fit
        .weights
        .iter()
        .map(|w| {
            let w = w.to_f64().unwrap();
            w * w
        })
        .sum::<f64>()
        .sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(CavError::ZeroBoundary);
    }
    let scale = T::from(if flip { -1.0 / norm } else { 1.0 / norm }).unwrap();
    let v = fit.weights.mapv(|w| w * scale);

    Ok(Cav {
        v,
        layer,
        concept_id: concept_id.to_owned(),
        classifier_accuracy: Some(fit.accuracy),
    })
}

/// Flattened layer activations for a batch of rolls, one row per roll.
pub fn layer_activations<T: Scalar>(
    model: &Cnn<T>,
    rolls: &[Roll<T>],
    layer: usize,
) -> Result<Array2<T>, CavError> {
    let mut rows: Vec<T> = Vec::new();
    let mut width = 0;
    for roll in rolls {
        let act = model.activations_at(roll.grid.view(), layer)?;
        width = act.len();
        rows.extend(act.iter().cloned());
    }
    Ok(Array2::from_shape_vec((rolls.len(), width), rows).expect("activation batch"))
}

/// Directional derivative of the class logit along the CAV, given the
/// logit gradient at the CAV's layer. Accepts full-space CAVs (one entry
/// per activation) and channel-space CAVs (one entry per channel, applied
/// at every spatial position).
pub fn sensitivity_from_grad<T: Scalar>(grad: &Array3<T>, cav: &Cav<T>) -> Result<T, CavError> {
    let (h, w, c) = grad.dim();
    if cav.v.len() == h * w * c {
        let mut acc = T::zero();
        for (g, v) in grad.iter().zip(cav.v.iter()) {
            acc += *g * *v;
        }
        Ok(acc)
    } else if cav.v.len() == c {
        let mut acc = T::zero();
        for spatial in grad.rows() {
            acc += spatial.dot(&cav.v);
        }
        Ok(acc)
    } else {
        Err(CavError::SensitivityDimension { full: h * w * c, channels: c, actual: cav.v.len() })
    }
}

/// Conceptual sensitivity of one roll: the logit gradient at the CAV's
/// layer dotted with the CAV.
pub fn conceptual_sensitivity<T: Scalar>(
    model: &Cnn<T>,
    roll: &Roll<T>,
    cav: &Cav<T>,
    class: usize,
) -> Result<T, CavError> {
    let act = model.activations_at(roll.grid.view(), cav.layer)?;
    let grad = model.grad_head(&act, cav.layer, class)?;
    sensitivity_from_grad(&grad, cav)
}

/// Fraction of sensitivities that are strictly positive; zero counts as
/// non-positive.
pub fn tcav_score<T: Scalar>(sensitivities: &[T]) -> Result<f64, CavError> {
    if sensitivities.is_empty() {
        return Err(CavError::EmptySensitivities);
    }
    let positive = sensitivities.iter().filter(|s| **s > T::zero()).count();
    Ok(positive as f64 / sensitivities.len() as f64)
}

/// Per-test threshold after Bonferroni correction across classes.
pub fn per_class_threshold(alpha: f64, num_classes: usize) -> f64 {
    alpha / num_classes as f64
}

/// Whether a significant concept pushed the class up or down; `None`
/// whenever significance failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
    #[serde(rename = "none")]
    None,
}

/// Result of the significance protocol for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: usize,
    /// One TCAV score per concept-vs-random run.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub p: f64,
    pub significant: bool,
    pub sign: Sign,
    /// Per-run, per-excerpt sensitivities; kept for inspection, not
    /// serialized.
    #[serde(skip)]
    pub sensitivities: Vec<Vec<f64>>,
}

/// Full TCAV report for one concept at one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TcavReport {
    pub concept: String,
    pub layer: usize,
    pub per_class: Vec<ClassResult>,
    pub alpha: f64,
}

/// Controls for [`tcav_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavOptions {
    /// Family-wise significance level, Bonferroni-divided across classes.
    pub alpha: f64,
    pub cav: CavOptions,
}

impl Default for TcavOptions {
    fn default() -> Self {
        TcavOptions { alpha: 0.05, cav: CavOptions::default() }
    }
}

/// Runs the TCAV significance protocol for one concept.
///
/// One CAV is fitted per random dataset (concept vs that dataset) and
/// scored on each class's evaluation pieces; the control distribution
/// comes from CAVs between consecutive random datasets. Per class, a
/// two-sided Welch t-test compares concept scores against control scores
/// and significance requires `p < alpha / num_classes`.
pub fn tcav_experiment<T: Scalar>(
    model: &Cnn<T>,
    concept_rolls: &[Roll<T>],
    random_datasets: &[Vec<Roll<T>>],
    eval_per_class: &[Vec<Roll<T>>],
    layer: usize,
    concept_id: &str,
    opts: &TcavOptions,
) -> Result<TcavReport, CavError> {
    let runs = random_datasets.len();
    if runs < 2 {
        return Err(CavError::TooFewRandomDatasets { given: runs });
    }
    let num_classes = model.config.num_classes;
    if eval_per_class.len() != num_classes {
        return Err(CavError::EvalClassCount {
            given: eval_per_class.len(),
            expected: num_classes,
        });
    }
    for (class, pieces) in eval_per_class.iter().enumerate() {
        if pieces.is_empty() {
            return Err(CavError::NoEvalPieces { class });
        }
    }

    let concept_acts = layer_activations(model, concept_rolls, layer)?;
    let random_acts: Vec<Array2<T>> = random_datasets
        .iter()
        .map(|rolls| layer_activations(model, rolls, layer))
        .collect::<Result<_, _>>()?;

    // Logit gradients depend only on the excerpt and class, so they are
    // shared by every run.
    let mut grads: Vec<Vec<Array3<T>>> = Vec::with_capacity(num_classes);
    for (class, pieces) in eval_per_class.iter().enumerate() {
        let mut per_piece = Vec::with_capacity(pieces.len());
        for roll in pieces {
            let act = model.activations_at(roll.grid.view(), layer)?;
            per_piece.push(model.grad_head(&act, layer, class)?);
        }
        grads.push(per_piece);
    }

    let score_cav = |cav: &Cav<T>,
                     class: usize|
     -> Result<(f64, Vec<f64>), CavError> {
        let mut sens = Vec::with_capacity(grads[class].len());
        for grad in &grads[class] {
            sens.push(sensitivity_from_grad(grad, cav)?);
        }
        let score = tcav_score(&sens)?;
        Ok((score, sens.iter().map(|s| s.to_f64().unwrap()).collect()))
    };

    let mut concept_cavs = Vec::with_capacity(runs);
    for (i, acts) in random_acts.iter().enumerate() {
        let run_opts = CavOptions {
            rng_seed: derive_seed(opts.cav.rng_seed, i as u64),
            ..opts.cav.clone()
        };
        concept_cavs.push(fit_cav(&concept_acts, acts, layer, concept_id, &run_opts)?);
    }
    let mut control_cavs = Vec::with_capacity(runs);
    for j in 0..runs {
        let run_opts = CavOptions {
            rng_seed: derive_seed(opts.cav.rng_seed, (runs + j) as u64),
            ..opts.cav.clone()
        };
        let next = (j + 1) % runs;
        control_cavs.push(fit_cav(
            &random_acts[j],
            &random_acts[next],
            layer,
            "random-control",
            &run_opts,
        )?);
    }

    let threshold = per_class_threshold(opts.alpha, num_classes);
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut scores = Vec::with_capacity(runs);
        let mut sensitivities = Vec::with_capacity(runs);
        for cav in &concept_cavs {
            let (score, sens) = score_cav(cav, class)?;
            scores.push(score);
            sensitivities.push(sens);
        }
        let control_scores: Vec<f64> = control_cavs
            .iter()
            .map(|cav| score_cav(cav, class).map(|(score, _)| score))
            .collect::<Result<_, _>>()?;

        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let welch = welch_t_test(&scores, &control_scores)?;
        let significant = welch.p < threshold;
        let sign = if significant && mean > 0.5 {
            Sign::Positive
        } else if significant && mean < 0.5 {
            Sign::Negative
        } else {
            Sign::None
        };
        per_class.push(ClassResult {
            class,
            scores,
            mean,
            p: welch.p,
            significant,
            sign,
            sensitivities,
        });
    }

    Ok(TcavReport {
        concept: concept_id.to_owned(),
        layer,
        per_class,
        alpha: opts.alpha,
    })
}

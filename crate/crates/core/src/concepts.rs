//! Unsupervised concept explanations from factorized activations.
//!
//! The channel-mode factor of a decomposition is read as a dictionary
//! whose columns are concept activation vectors discovered without
//! supervision (C-CAVs). Every spatial position of an excerpt's
//! activation tensor holds one channel tube; expressing each tube as a
//! non-negative combination of the dictionary columns gives per-concept
//! presence coefficients, which are upsampled to piano-roll coordinates
//! as heatmaps and averaged for ranking excerpts. C-CAVs also act as
//! channel-space directions for conceptual sensitivity, which lets the
//! toolkit pick concepts that push one class up and the other down.

use crate::cav::{sensitivity_from_grad, Cav, CavError};
use crate::factorization::{NmfFactors, NtdFactors};
use crate::model::{argmax, Cnn, ModelError};
use crate::roll::Roll;
use crate::Scalar;
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("activation channels ({channels}) do not match dictionary rows ({rows})")]
    ChannelMismatch { channels: usize, rows: usize },
    #[error("concept index {index} out of range for {count} dictionary columns")]
    BadConceptIndex { index: usize, count: usize },
    #[error("no heatmaps to rank")]
    NoHeatmaps,
    #[error("opposing concepts are defined for exactly 2 classes, {given} given; run class pairs separately")]
    TwoClassesOnly { given: usize },
    #[error("activation batches differ in shape: {left:?} vs {right:?}")]
    BatchShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cav(#[from] CavError),
}

// ---------------------------------------------------------------------------
// Channel tubes and dictionaries.

/// Maps rows of the tube matrix back to `(n, h, w)` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TubeIndex {
    pub shape: [usize; 3],
}

impl TubeIndex {
    pub fn row_of(&self, n: usize, h: usize, w: usize) -> usize {
        (n * self.shape[1] + h) * self.shape[2] + w
    }

    pub fn coords_of(&self, row: usize) -> (usize, usize, usize) {
        let w = row % self.shape[2];
        let rest = row / self.shape[2];
        (rest / self.shape[1], rest % self.shape[1], w)
    }

    pub fn rows(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Rearranges an activation batch `(N, H, W, C)` into one channel tube
/// per row.
pub fn extract_channel_tubes<T: Scalar>(batch: &Array4<T>) -> (Array2<T>, TubeIndex) {
    let (n, h, w, c) = batch.dim();
    let flat: Vec<T> = batch.iter().cloned().collect();
    let tubes = Array2::from_shape_vec((n * h * w, c), flat).expect("tube reshape");
    (tubes, TubeIndex { shape: [n, h, w] })
}

/// A concept direction discovered by factorization: one column of the
/// channel dictionary.
#[derive(Debug, Clone)]
pub struct ChannelCav<T> {
    /// Non-negative channel weights, length `C`.
    pub e: Array1<T>,
    /// Column index in the dictionary this vector came from.
    pub concept_index: usize,
    /// Identifier of the factorization that produced it.
    pub source: String,
}

impl<T: Scalar> ChannelCav<T> {
    /// View as a channel-space [`Cav`] for the sensitivity machinery.
    pub fn as_cav(&self, layer: usize) -> Cav<T> {
        Cav {
            v: self.e.clone(),
            layer,
            concept_id: format!("{}#{}", self.source, self.concept_index),
            classifier_accuracy: None,
        }
    }
}

/// C-CAVs extracted from a dictionary, plus the indices of any columns
/// dropped for being identically zero.
#[derive(Debug, Clone)]
pub struct CcavSet<T> {
    pub cavs: Vec<ChannelCav<T>>,
    pub dropped_zero_columns: Vec<usize>,
}

impl<T> CcavSet<T> {
    pub fn warnings(&self) -> Vec<String> {
        self.dropped_zero_columns
            .iter()
            .map(|i| format!("dictionary column {i} is identically zero; concept dropped"))
            .collect()
    }
}

/// Channel dictionary of a Tucker decomposition whose last mode is the
/// channel mode.
pub fn ntd_channel_dictionary<T: Scalar>(f: &NtdFactors<T>) -> Array2<T> {
    f.factors.last().expect("at least one mode").clone()
}

/// Channel dictionary of an NMF whose columns are channels.
pub fn nmf_channel_dictionary<T: Scalar>(f: &NmfFactors<T>) -> Array2<T> {
    f.h.t().to_owned()
}

/// One C-CAV per dictionary column, in column order. Zero columns carry
/// no direction and are dropped with a warning entry.
pub fn c_cavs<T: Scalar>(dictionary: &Array2<T>, source: &str) -> CcavSet<T> {
    let mut cavs = Vec::with_capacity(dictionary.ncols());
    let mut dropped = Vec::new();
    for (index, column) in dictionary.columns().into_iter().enumerate() {
        if column.iter().all(|v| *v == T::zero()) {
            dropped.push(index);
        } else {
            cavs.push(ChannelCav {
                e: column.to_owned(),
                concept_index: index,
                source: source.to_owned(),
            });
        }
    }
    CcavSet { cavs, dropped_zero_columns: dropped }
}

// ---------------------------------------------------------------------------
// Non-negative least squares.

/// Solves `min ‖E·β − t‖², β ≥ 0` for each tube by accelerated projected
/// gradient with a monotone safeguard: up to `iters` steps, stopping
/// early once the iterate moves less than `tolerance`.
fn nnls_batch<T: Scalar>(
    tubes: &Array2<T>,
    dictionary: &Array2<T>,
    iters: usize,
    tolerance: f64,
) -> Array2<T> {
    let atoms = dictionary.ncols();
    let gram = dictionary.t().dot(dictionary);
    let lipschitz = crate::factorization::gram_lambda_max(&gram).max(f64::MIN_POSITIVE);
    let step = T::from(1.0 / lipschitz).unwrap();
    let tol = T::from(tolerance).unwrap();

    let objective = |beta: &Array1<T>, q: &Array1<T>| -> f64 {
        let gb = gram.dot(beta);
        (0.5 * beta.dot(&gb).to_f64().unwrap()) - beta.dot(q).to_f64().unwrap()
    };

    let mut out = Array2::zeros((tubes.nrows(), atoms));
    for (row, tube) in tubes.rows().into_iter().enumerate() {
        let q = dictionary.t().dot(&tube);
        let mut x_prev = Array1::<T>::zeros(atoms);
        let mut f_prev = 0.0;
        let mut y = x_prev.clone();
        let mut t = 1.0f64;
        for _ in 0..iters {
            let grad = gram.dot(&y) - &q;
            let mut z = y.clone();
            ndarray::Zip::from(&mut z).and(&grad).for_each(|zv, &gv| {
                let stepped = *zv - step * gv;
                *zv = if stepped > T::zero() { stepped } else { T::zero() };
            });
            let f_z = objective(&z, &q);
            let accepted = f_z <= f_prev;
            let (x_new, f_new) =
                if accepted { (z.clone(), f_z) } else { (x_prev.clone(), f_prev) };

            // Only an accepted step that barely moved counts as
            // converged; a rejected ripple must keep iterating.
            let moved = if accepted {
                x_new
                    .iter()
                    .zip(x_prev.iter())
                    .map(|(a, b)| (*a - *b).abs())
                    .fold(T::zero(), |m, d| if d > m { d } else { m })
            } else {
                T::infinity()
            };

            let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let a = T::from(t / t_new).unwrap();
            let b = T::from((t - 1.0) / t_new).unwrap();
            let mut y_next = x_new.clone();
            ndarray::Zip::from(&mut y_next)
                .and(&z)
                .and(&x_new)
                .and(&x_prev)
                .for_each(|yv, &zv, &xn, &xp| {
                    *yv = xn + a * (zv - xn) + b * (xn - xp);
                });
            y = y_next;
            x_prev = x_new;
            f_prev = f_new;
            t = t_new;
            if moved < tol {
                break;
            }
        }
        out.row_mut(row).assign(&x_prev);
    }
    out
}

// ---------------------------------------------------------------------------
// Presence heatmaps.

/// Where and how strongly one concept appears in one excerpt.
#[derive(Debug, Clone)]
pub struct ConceptHeatmap<T> {
    /// Presence in piano-roll coordinates, upsampled from `raw_map`.
    pub map: Array2<T>,
    /// Presence coefficient per spatial position of the layer.
    pub raw_map: Array2<T>,
    /// Arithmetic mean of `raw_map`.
    pub average_presence: f64,
    pub excerpt_id: usize,
    pub concept_index: usize,
}

/// Bilinear upsampling with half-pixel centers; a constant map stays
/// constant.
pub fn bilinear_upsample<T: Scalar>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty upsample");
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let y = ((i as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((j as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = T::from(y - y0 as f64).unwrap();
        let dx = T::from(x - x0 as f64).unwrap();
        let one = T::one();
        (one - dy) * ((one - dx) * src[(y0, x0)] + dx * src[(y0, x1)])
            + dy * ((one - dx) * src[(y1, x0)] + dx * src[(y1, x1)])
    })
}

const NNLS_ITERS: usize = 100;
const NNLS_TOLERANCE: f64 = 1e-8;

/// Presence coefficients of every concept at every spatial position:
/// shape `(H, W, C')`.
pub fn presence_coefficients<T: Scalar>(
    act: &Array3<T>,
    dictionary: &Array2<T>,
) -> Result<Array3<T>, ConceptError> {
    let (h, w, c) = act.dim();
    if dictionary.nrows() != c {
        return Err(ConceptError::ChannelMismatch { channels: c, rows: dictionary.nrows() });
    }
    let flat: Vec<T> = act.iter().cloned().collect();
    let tubes = Array2::from_shape_vec((h * w, c), flat).expect("tube reshape");
    let coeffs = nnls_batch(&tubes, dictionary, NNLS_ITERS, NNLS_TOLERANCE);
    let atoms = dictionary.ncols();
    Ok(Array3::from_shape_vec((h, w, atoms), coeffs.into_raw_vec_and_offset().0)
        .expect("coefficient reshape"))
}

/// Heatmaps for every dictionary column of one excerpt, sharing a single
/// NNLS solve. `out_columns` is the time width of the source roll.
pub fn presence_maps<T: Scalar>(
    act: &Array3<T>,
    dictionary: &Array2<T>,
    excerpt_id: usize,
    out_columns: usize,
) -> Result<Vec<ConceptHeatmap<T>>, ConceptError> {
    let coeffs = presence_coefficients(act, dictionary)?;
    let atoms = dictionary.ncols();
    let mut maps = Vec::with_capacity(atoms);
    for concept_index in 0..atoms {
        let raw_map = coeffs.index_axis(Axis(2), concept_index).to_owned();
        let average_presence = raw_map.iter().map(|v| v.to_f64().unwrap()).sum::<f64>()
            / raw_map.len() as f64;
        let map = bilinear_upsample(&raw_map, crate::midi::NUM_PITCHES, out_columns);
        maps.push(ConceptHeatmap { map, raw_map, average_presence, excerpt_id, concept_index });
    }
    Ok(maps)
}

/// Heatmap of a single concept; see [`presence_maps`].
pub fn presence_map<T: Scalar>(
    act: &Array3<T>,
    dictionary: &Array2<T>,
    concept_index: usize,
    excerpt_id: usize,
    out_columns: usize,
) -> Result<ConceptHeatmap<T>, ConceptError> {
    if concept_index >= dictionary.ncols() {
        return Err(ConceptError::BadConceptIndex {
            index: concept_index,
            count: dictionary.ncols(),
        });
    }
    let mut maps = presence_maps(act, dictionary, excerpt_id, out_columns)?;
    Ok(maps.swap_remove(concept_index))
}

/// Scales a group of heatmaps (one concept across an evaluation set) by
/// the group's peak value, so render thresholds read as fractions of the
/// maximum presence. Zero groups are left untouched.
pub fn normalize_for_display<T: Scalar>(heatmaps: &mut [ConceptHeatmap<T>]) {
    let mut peak = T::zero();
    for hm in heatmaps.iter() {
        for v in hm.map.iter() {
            if *v > peak {
                peak = *v;
            }
        }
    }
    if peak > T::zero() {
        for hm in heatmaps.iter_mut() {
            hm.map.mapv_inplace(|v| v / peak);
        }
    }
}

// ---------------------------------------------------------------------------
// Rankings.

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankedExcerpt {
    pub excerpt_id: usize,
    pub average_presence: f64,
}

/// Most- and least-present excerpts for one concept.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ranking {
    /// Descending by average presence.
    pub top: Vec<RankedExcerpt>,
    /// Ascending by average presence: the contrastive set.
    pub bottom: Vec<RankedExcerpt>,
    /// Set when fewer than `k` excerpts were available.
    pub truncated: bool,
}

/// Ranks excerpts by average concept presence; ties break toward the
/// lower excerpt id.
pub fn rank_excerpts<T: Scalar>(
    heatmaps: &[ConceptHeatmap<T>],
    k: usize,
) -> Result<Ranking, ConceptError> {
    if heatmaps.is_empty() {
        return Err(ConceptError::NoHeatmaps);
    }
    let mut order: Vec<RankedExcerpt> = heatmaps
        .iter()
        .map(|hm| RankedExcerpt {
            excerpt_id: hm.excerpt_id,
            average_presence: hm.average_presence,
        })
        .collect();
    order.sort_by(|a, b| {
        b.average_presence
            .total_cmp(&a.average_presence)
            .then(a.excerpt_id.cmp(&b.excerpt_id))
    });
    let take = k.min(order.len());
    let top = order[..take].to_vec();
    let mut bottom: Vec<RankedExcerpt> = order[order.len() - take..].to_vec();
    bottom.reverse();
    Ok(Ranking { top, bottom, truncated: take < k })
}

// ---------------------------------------------------------------------------
// Sensitivities and selection.

/// Conceptual sensitivity of one roll along a C-CAV: the class-logit
/// gradient summed against the channel direction at every spatial
/// position.
pub fn channel_sensitivity<T: Scalar>(
    model: &Cnn<T>,
    roll: &Roll<T>,
    ccav: &ChannelCav<T>,
    layer: usize,
    class: usize,
) -> Result<T, ConceptError> {
    let act = model.activations_at(roll.grid.view(), layer)?;
    let grad = model.grad_head(&act, layer, class)?;
    Ok(sensitivity_from_grad(&grad, &ccav.as_cav(layer))?)
}

/// Concepts whose mean sensitivities have strictly opposite signs for
/// the two classes. Rows of `mean_sensitivities` are concepts, the two
/// columns are the classes.
pub fn opposing_concepts(mean_sensitivities: &Array2<f64>) -> Result<Vec<usize>, ConceptError> {
    if mean_sensitivities.ncols() != 2 {
        return Err(ConceptError::TwoClassesOnly { given: mean_sensitivities.ncols() });
    }
    Ok(mean_sensitivities
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, row)| (row[0] > 0.0 && row[1] < 0.0) || (row[0] < 0.0 && row[1] > 0.0))
        .map(|(i, _)| i)
        .collect())
}

/// Fraction of excerpts whose predicted class is unchanged when the
/// model head runs on reconstructed activations instead of the original
/// ones.
pub fn fidelity<T: Scalar>(
    model: &Cnn<T>,
    original: &Array4<T>,
    reconstructed: &Array4<T>,
    layer: usize,
) -> Result<f64, ConceptError> {
    if original.dim() != reconstructed.dim() {
        return Err(ConceptError::BatchShapeMismatch {
            left: original.shape().to_vec(),
            right: reconstructed.shape().to_vec(),
        });
    }
    let n = original.dim().0;
    let mut unchanged = 0usize;
    for i in 0..n {
        let a = original.index_axis(Axis(0), i).to_owned();
        let b = reconstructed.index_axis(Axis(0), i).to_owned();
        let logits_a = model.head_forward(&a, layer)?;
        let logits_b = model.head_forward(&b, layer)?;
        if argmax(&logits_a) == argmax(&logits_b) {
            unchanged += 1;
        }
    }
    Ok(unchanged as f64 / n as f64)
}

//! Non-negative tensor and matrix factorization of activation tensors.
//!
//! [`ntd`] computes a non-negative Tucker decomposition: a tensor `X` is
//! approximated by a non-negative core contracted with one non-negative
//! factor matrix per mode,
//!
//! ```text
//! X ≈ T ×1 U1 ×2 U2 ... ×M UM,   T ≥ 0, Uk ≥ 0,
//! ```
//!
//! minimizing the Frobenius reconstruction error. Factor matrices are
//! updated column-wise by hierarchical alternating least squares (HALS);
//! the core is updated by a projected-gradient FISTA scheme in its monotone
//! variant, so the recorded loss history never increases. [`nmf`] is the
//! two-mode special case handled directly on matrices.
//!
//! [`concat_modes`] prepares a four-mode activation batch `(N, H, W, C)`
//! for the three variants used by the explanation pipeline: the tensor as
//! is, height and width merged into one spatial mode, or everything but
//! the channel mode merged for plain NMF. The channel mode is always last.

use crate::Scalar;
use ndarray::{Array2, Array4, ArrayD, ArrayViewD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("input holds negative values; non-negative factorization is undefined")]
    NegativeInput,
    #[error("input tensor is empty")]
    EmptyTensor,
    #[error("{given} ranks given for a tensor with {modes} modes")]
    RankCount { given: usize, modes: usize },
    #[error("rank {rank} for mode {mode} is outside 1..={dim}")]
    RankRange { mode: usize, rank: usize, dim: usize },
    #[error("tensor of shape {actual:?} cannot be restored to {expected:?}")]
    RestoreShape { expected: Vec<usize>, actual: Vec<usize> },
}

// ---------------------------------------------------------------------------
// Mode arithmetic.

/// Mode-`k` unfolding: mode `k` becomes the rows, the remaining axes are
/// flattened into columns in their original row-major order.
pub fn unfold<T: Scalar>(x: ArrayViewD<'_, T>, mode: usize) -> Array2<T> {
    let ndim = x.ndim();
    let rows = x.shape()[mode];
    let cols = x.len() / rows;
    let mut perm: Vec<usize> = (0..ndim).collect();
    perm.remove(mode);
    perm.insert(0, mode);
    let moved = x.permuted_axes(perm);
    let flat: Vec<T> = moved.iter().cloned().collect();
    Array2::from_shape_vec((rows, cols), flat).expect("unfold length")
}

/// Inverse of [`unfold`]: rebuilds the tensor of `shape` from its mode-`k`
/// unfolding.
pub fn fold<T: Scalar>(m: &Array2<T>, mode: usize, shape: &[usize]) -> ArrayD<T> {
    let mut moved_shape = Vec::with_capacity(shape.len());
    moved_shape.push(shape[mode]);
    moved_shape.extend(shape.iter().enumerate().filter(|&(i, _)| i != mode).map(|(_, &d)| d));
    let moved = m
        .view()
        .into_shape_with_order(IxDyn(&moved_shape))
        .expect("fold length");
    // Send axis 0 back to position `mode`.
    let mut perm = Vec::with_capacity(shape.len());
    for i in 0..shape.len() {
        perm.push(match i.cmp(&mode) {
            std::cmp::Ordering::Less => i + 1,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => i,
        });
    }
    let restored = moved.permuted_axes(IxDyn(&perm));
    let flat: Vec<T> = restored.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("fold shape")
}

/// Mode-`k` product `x ×k u` with `u` of shape `(new_dim, shape[k])`.
pub fn mode_product<T: Scalar>(x: ArrayViewD<'_, T>, u: &Array2<T>, mode: usize) -> ArrayD<T> {
    debug_assert_eq!(u.ncols(), x.shape()[mode], "mode dimension");
    let mut shape = x.shape().to_vec();
    shape[mode] = u.nrows();
    let product = u.dot(&unfold(x, mode));
    fold(&product, mode, &shape)
}

/// Frobenius norm, accumulated in `f64`.
pub fn frobenius<T: Scalar>(x: ArrayViewD<'_, T>) -> f64 {
    x.iter()
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖x − y‖F / ‖x‖F`. When `x` is the zero tensor the ratio degenerates
/// and the absolute norm `‖y‖F` is returned instead.
pub fn relative_error<T: Scalar>(x: ArrayViewD<'_, T>, y: ArrayViewD<'_, T>) -> f64 {
    assert_eq!(x.shape(), y.shape(), "relative error needs equal shapes");
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        let a = a.to_f64().unwrap();
        let b = b.to_f64().unwrap();
        num += (a - b) * (a - b);
        den += a * a;
    }
    if den == 0.0 {
        return frobenius(y);
    }
    (num / den).sqrt()
}

/// Elements of the original tensor divided by elements kept by the
/// factorization.
pub fn compression_ratio(original_elements: usize, factorized_elements: usize) -> f64 {
    original_elements as f64 / factorized_elements as f64
}

// ---------------------------------------------------------------------------
// Variants over activation batches.

/// How a four-mode activation batch is arranged before factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    /// Keep all four modes `(N, H, W, C)`.
    #[serde(rename = "4d")]
    FourD,
    /// Merge height and width: `(N, H·W, C)`.
    #[serde(rename = "3d")]
    ThreeD,
    /// Merge everything but channels: `(N·H·W, C)`, factorized by NMF.
    #[serde(rename = "2d")]
    TwoD,
}

impl Variant {
    /// Index of the channel mode after concatenation (always the last).
    pub fn channel_mode(self) -> usize {
        match self {
            Variant::FourD => 3,
            Variant::ThreeD => 2,
            Variant::TwoD => 1,
        }
    }
}

/// Remembers the original batch shape so factorization results can be
/// mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeMap {
    pub variant: Variant,
    pub original_shape: [usize; 4],
}

impl ModeMap {
    /// Restores a concatenated tensor to the original four-mode shape.
    pub fn restore<T: Scalar>(&self, x: ArrayViewD<'_, T>) -> Result<Array4<T>, FactorError> {
        let [n, h, w, c] = self.original_shape;
        if x.len() != n * h * w * c {
            return Err(FactorError::RestoreShape {
                expected: vec![n, h, w, c],
                actual: x.shape().to_vec(),
            });
        }
        let flat: Vec<T> = x.iter().cloned().collect();
        Ok(Array4::from_shape_vec((n, h, w, c), flat).expect("restore length"))
    }
}

/// Arranges an activation batch for one factorization variant. Merged axes
/// are concatenated in row-major order, so no values move in memory.
pub fn concat_modes<T: Scalar>(x: &Array4<T>, variant: Variant) -> (ArrayD<T>, ModeMap) {
    let (n, h, w, c) = x.dim();
    let map = ModeMap { variant, original_shape: [n, h, w, c] };
    let owned = x.clone().into_dyn();
    let t = match variant {
        Variant::FourD => owned,
        Variant::ThreeD => owned
            .into_shape_with_order(IxDyn(&[n, h * w, c]))
            .expect("merge height and width"),
        Variant::TwoD => owned
            .into_shape_with_order(IxDyn(&[n * h * w, c]))
            .expect("merge all but channels"),
    };
    (t, map)
}

// ---------------------------------------------------------------------------
// Non-negative Tucker decomposition.

/// Iteration controls shared by [`ntd`] and [`nmf`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FactorizationOptions {
    /// Upper bound on outer iterations.
    pub max_outer_iters: usize,
    /// Stop once the relative error improves by less than this between
    /// outer iterations.
    pub tolerance: f64,
    pub rng_seed: u64,
    /// HALS sweeps over each factor per outer iteration.
    pub hals_sweeps: usize,
    /// FISTA steps on the core per outer iteration.
    pub core_iters: usize,
}

impl Default for FactorizationOptions {
    fn default() -> Self {
        FactorizationOptions {
            max_outer_iters: 200,
            tolerance: 1e-6,
            rng_seed: 0,
            hals_sweeps: 2,
            core_iters: 30,
        }
    }
}

/// A non-negative Tucker decomposition.
#[derive(Debug, Clone)]
pub struct NtdFactors<T> {
    /// Core tensor with one mode per input mode, sized by the ranks.
    pub core: ArrayD<T>,
    /// One `(dim_k, rank_k)` factor per mode; the last factor is the
    /// channel dictionary when the channel mode is last.
    pub factors: Vec<Array2<T>>,
    /// Relative reconstruction error after each outer iteration.
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> NtdFactors<T> {
    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.ncols()).collect()
    }

    /// Values kept by the decomposition: core plus factors.
    pub fn num_parameters(&self) -> usize {
        self.core.len() + self.factors.iter().map(|f| f.len()).sum::<usize>()
    }

    /// Elements of the original tensor divided by elements the
    /// decomposition keeps. Below one when the decomposition is larger.
    pub fn compression_ratio(&self, original_shape: &[usize]) -> f64 {
        compression_ratio(original_shape.iter().product(), self.num_parameters())
    }
}

/// Contracts the core with every factor: the model's approximation of the
/// original tensor.
pub fn reconstruct<T: Scalar>(f: &NtdFactors<T>) -> ArrayD<T> {
    let mut x = f.core.clone();
    for (mode, u) in f.factors.iter().enumerate() {
        x = mode_product(x.view(), u, mode);
    }
    x
}

fn validate_nonnegative<T: Scalar>(x: ArrayViewD<'_, T>) -> Result<(), FactorError> {
    if x.is_empty() {
        return Err(FactorError::EmptyTensor);
    }
    if x.iter().any(|v| *v < T::zero()) {
        return Err(FactorError::NegativeInput);
    }
    Ok(())
}

/// Largest eigenvalue of a small symmetric positive semidefinite matrix,
/// by power iteration with a slight safety margin.
pub(crate) fn gram_lambda_max<T: Scalar>(g: &Array2<T>) -> f64 {
    let n = g.nrows();
    let g64 = g.mapv(|v| v.to_f64().unwrap());
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..20 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += g64[(i, j)] * v[j];
            }
            next[i] = acc;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for (vi, ni) in v.iter_mut().zip(&next) {
            *vi = ni / norm;
        }
    }
    lambda * 1.02
}

/// One HALS pass over the columns of `u`, minimizing the reconstruction
/// error with every other quantity fixed.
///
/// `p` carries the data term (`dim × rank`) and `q` the Gram term
/// (`rank × rank`); the exact minimizer of column `j` under
/// non-negativity is `max(0, u_j + (p_j − (U q)_j) / q_jj)`. A column
/// whose denominator vanishes is skipped; a column driven entirely to
/// zero is reseeded with noise small enough not to disturb the loss.
fn hals_pass<T: Scalar>(
    u: &mut Array2<T>,
    p: &Array2<T>,
    q: &Array2<T>,
    sweeps: usize,
    reseed_scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let (dim, rank) = u.dim();
    for _ in 0..sweeps {
        for j in 0..rank {
            let qjj = q[(j, j)].to_f64().unwrap();
            if qjj <= f64::MIN_POSITIVE {
                continue;
            }
            let inv = T::from(1.0 / qjj).unwrap();
            // residual_j = p_j − U q_j, recomputed column-wise.
            let mut column_max = T::zero();
            for i in 0..dim {
                let mut uq = T::zero();
                for l in 0..rank {
                    uq += u[(i, l)] * q[(l, j)];
                }
                let updated = u[(i, j)] + (p[(i, j)] - uq) * inv;
                let clipped = if updated > T::zero() { updated } else { T::zero() };
                u[(i, j)] = clipped;
                if clipped > column_max {
                    column_max = clipped;
                }
            }
            if column_max == T::zero() {
                for i in 0..dim {
                    u[(i, j)] = T::from(rng.gen::<f64>() * reseed_scale).unwrap();
                }
            }
            debug_assert!(u.column(j).iter().all(|v| *v >= T::zero()));
        }
    }
}

/// Objective used inside the core update, up to the constant `‖X‖²/2`:
/// `φ(C) = ⟨C, C ×k Gk⟩/2 − ⟨C, S⟩` with `Gk` the factor Grams.
fn core_objective<T: Scalar>(core: &ArrayD<T>, grams: &[Array2<T>], s: &ArrayD<T>) -> f64 {
    let mut cg = core.clone();
    for (mode, g) in grams.iter().enumerate() {
        cg = mode_product(cg.view(), g, mode);
    }
    let mut quad = 0.0;
    let mut lin = 0.0;
    for ((c, g), sv) in core.iter().zip(cg.iter()).zip(s.iter()) {
        let c = c.to_f64().unwrap();
        quad += c * g.to_f64().unwrap();
        lin += c * sv.to_f64().unwrap();
    }
    0.5 * quad - lin
}

/// Monotone FISTA on the non-negative core: projected gradient steps with
/// momentum, keeping the best iterate so the objective never increases.
fn update_core<T: Scalar>(
    core: &mut ArrayD<T>,
    grams: &[Array2<T>],
    s: &ArrayD<T>,
    iters: usize,
) {
    let mut lipschitz = 1.0;
    for g in grams {
        lipschitz *= gram_lambda_max(g);
    }
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return;
    }
    let step = T::from(1.0 / lipschitz).unwrap();

    let mut x_prev = core.clone();
    let mut f_prev = core_objective(&x_prev, grams, s);
    let mut y = x_prev.clone();
    let mut t = 1.0f64;

    for _ in 0..iters {
        // Gradient of φ at y.
        let mut grad = y.clone();
        for (mode, g) in grams.iter().enumerate() {
            grad = mode_product(grad.view(), g, mode);
        }
        grad.zip_mut_with(s, |gv, &sv| *gv -= sv);

        let mut z = y.clone();
        ndarray::Zip::from(&mut z).and(&grad).for_each(|zv, &gv| {
            let stepped = *zv - step * gv;
            *zv = if stepped > T::zero() { stepped } else { T::zero() };
        });

        debug_assert!(z.iter().all(|v| *v >= T::zero()));
        let f_z = core_objective(&z, grams, s);
        let (x_new, f_new) = if f_z <= f_prev { (z.clone(), f_z) } else { (x_prev.clone(), f_prev) };

        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let a = T::from(t / t_new).unwrap();
        let b = T::from((t - 1.0) / t_new).unwrap();
        // y = x_new + a (z − x_new) + b (x_new − x_prev)
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
    }
    *core = x_prev;
}

/// Non-negative Tucker decomposition of a tensor with any number of modes.
///
/// Factors start from seeded uniform noise, except that a full-rank mode
/// starts from the identity basis. The core starts from the projection
/// `X ×k Ukᵀ` (non-negative whenever the input is), scaled so the initial
/// reconstruction matches the input norm; with full ranks everywhere this
/// initialization is already exact. Each outer iteration sweeps HALS over
/// every factor, runs the monotone FISTA core update and appends the
/// relative reconstruction error to `loss_history`, which is therefore
/// non-increasing. Iteration stops when the improvement falls below
/// `opts.tolerance`.
pub fn ntd<T: Scalar>(
    x: &ArrayD<T>,
    ranks: &[usize],
    opts: &FactorizationOptions,
) -> Result<NtdFactors<T>, FactorError> {
    validate_nonnegative(x.view())?;
    let dims = x.shape().to_vec();
    if ranks.len() != dims.len() {
        return Err(FactorError::RankCount { given: ranks.len(), modes: dims.len() });
    }
    for (mode, (&rank, &dim)) in ranks.iter().zip(&dims).enumerate() {
        if rank == 0 || rank > dim {
            return Err(FactorError::RankRange { mode, rank, dim });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut factors: Vec<Array2<T>> = dims
        .iter()
        .zip(ranks)
        .map(|(&dim, &rank)| {
            if dim == rank {
                Array2::from_shape_fn((dim, rank), |(i, j)| {
                    if i == j {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            } else {
                Array2::from_shape_simple_fn((dim, rank), || T::from(rng.gen::<f64>()).unwrap())
            }
        })
        .collect();
    let mut core = {
        let mut projected = x.clone();
        for (k, u) in factors.iter().enumerate() {
            let ut = u.t().to_owned();
            projected = mode_product(projected.view(), &ut, k);
        }
        projected
    };

    // Scale the core so the initial reconstruction has the input's norm.
    let norm_x = frobenius(x.view());
    {
        let recon = reconstruct(&NtdFactors {
            core: core.clone(),
            factors: factors.clone(),
            loss_history: vec![],
        });
        let norm_r = frobenius(recon.view());
        let scale = if norm_r > 0.0 { norm_x / norm_r } else { 0.0 };
        let scale = T::from(scale).unwrap();
        core.mapv_inplace(|v| v * scale);
    }

    let mut grams: Vec<Array2<T>> = factors.iter().map(|u| u.t().dot(u)).collect();
    let reseed_scale = 1e-12 * (norm_x / (x.len() as f64).sqrt()).max(f64::MIN_POSITIVE);
    let mut loss_history = Vec::new();

    for _ in 0..opts.max_outer_iters {
        for mode in 0..dims.len() {
            // Data term: unfold(x ×_{j≠k} Ujᵀ) · unfold(core)ᵀ.
            let mut projected = x.clone();
            for (j, u) in factors.iter().enumerate() {
                if j != mode {
                    let ut = u.t().to_owned();
                    projected = mode_product(projected.view(), &ut, j);
                }
            }
            let p = unfold(projected.view(), mode).dot(&unfold(core.view(), mode).t());
            // Gram term: unfold(core ×_{j≠k} Gj) gives Q through the core.
            let mut weighted = core.clone();
            for (j, g) in grams.iter().enumerate() {
                if j != mode {
                    weighted = mode_product(weighted.view(), g, j);
                }
            }
            let q = unfold(core.view(), mode).dot(&unfold(weighted.view(), mode).t());
            hals_pass(&mut factors[mode], &p, &q, opts.hals_sweeps, reseed_scale, &mut rng);
            grams[mode] = factors[mode].t().dot(&factors[mode]);
        }

        // Core update against S = X ×k Ukᵀ.
        let mut s = x.clone();
        for (k, u) in factors.iter().enumerate() {
            let ut = u.t().to_owned();
            s = mode_product(s.view(), &ut, k);
        }
        update_core(&mut core, &grams, &s, opts.core_iters);

        let recon = reconstruct(&NtdFactors {
            core: core.clone(),
            factors: factors.clone(),
            loss_history: vec![],
        });
        let loss = relative_error(x.view(), recon.view());
        let improved = loss_history
            .last()
            .map(|prev| prev - loss >= opts.tolerance)
            .unwrap_or(true);
        loss_history.push(loss);
        if !improved {
            break;
        }
    }

    Ok(NtdFactors { core, factors, loss_history })
}

// ---------------------------------------------------------------------------
// Non-negative matrix factorization.

/// A rank-`r` non-negative factorization `M ≈ W·H`.
#[derive(Debug, Clone)]
pub struct NmfFactors<T> {
    /// Left factor, `(rows, rank)`.
    pub w: Array2<T>,
    /// Right factor, `(rank, cols)`; its transpose is the channel
    /// dictionary when the columns are channels.
    pub h: Array2<T>,
    /// Relative reconstruction error after each outer iteration.
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> NmfFactors<T> {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn num_parameters(&self) -> usize {
        self.w.len() + self.h.len()
    }

    pub fn compression_ratio(&self, original_shape: &[usize]) -> f64 {
        compression_ratio(original_shape.iter().product(), self.num_parameters())
    }

    pub fn reconstruct(&self) -> Array2<T> {
        self.w.dot(&self.h)
    }
}

/// Non-negative matrix factorization by HALS, with the same seeding,
/// scaling, loss recording and stopping rule as [`ntd`].
pub fn nmf<T: Scalar>(
    m: &Array2<T>,
    rank: usize,
    opts: &FactorizationOptions,
) -> Result<NmfFactors<T>, FactorError> {
    validate_nonnegative(m.view().into_dyn())?;
    let (rows, cols) = m.dim();
    let max_rank = rows.min(cols);
    if rank == 0 || rank > max_rank {
        return Err(FactorError::RankRange { mode: 0, rank, dim: max_rank });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    let mut w =
        Array2::from_shape_simple_fn((rows, rank), || T::from(rng.gen::<f64>()).unwrap());
    let mut h =
        Array2::from_shape_simple_fn((rank, cols), || T::from(rng.gen::<f64>()).unwrap());

    let norm_m = frobenius(m.view().into_dyn());
    {
        let norm_r = frobenius(w.dot(&h).view().into_dyn());
        let scale = if norm_r > 0.0 { norm_m / norm_r } else { 0.0 };
        let scale = T::from(scale).unwrap();
        h.mapv_inplace(|v| v * scale);
    }

    let reseed_scale = 1e-12 * (norm_m / (m.len() as f64).sqrt()).max(f64::MIN_POSITIVE);
    let mut loss_history = Vec::new();

    for _ in 0..opts.max_outer_iters {
        // W columns against P = M Hᵀ, Q = H Hᵀ.
        let p = m.dot(&h.t());
        let q = h.dot(&h.t());
        hals_pass(&mut w, &p, &q, opts.hals_sweeps, reseed_scale, &mut rng);

        // H rows through the transposed problem: P' = Mᵀ W, Q' = Wᵀ W.
        let p_t = m.t().dot(&w);
        let q_t = w.t().dot(&w);
        let mut h_t = h.t().to_owned();
        hals_pass(&mut h_t, &p_t, &q_t, opts.hals_sweeps, reseed_scale, &mut rng);
        h = h_t.t().to_owned();

        let loss = relative_error(m.view().into_dyn(), w.dot(&h).view().into_dyn());
        let improved = loss_history
            .last()
            .map(|prev| prev - loss >= opts.tolerance)
            .unwrap_or(true);
        loss_history.push(loss);
        if !improved {
            break;
        }
    }

    Ok(NmfFactors { w, h, loss_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Dimension;

    fn random_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen::<f64>())
    }

    /// Reference unfolding straight from the definition: entry
    /// `(i_mode, flat index of the remaining coordinates in original
    /// row-major order)`.
    fn unfold_reference(x: &ArrayD<f64>, mode: usize) -> Array2<f64> {
        let dims = x.shape().to_vec();
        let rows = dims[mode];
        let cols = x.len() / rows;
        let mut out = Array2::zeros((rows, cols));
        for (idx, &v) in x.indexed_iter() {
            let idx = idx.slice();
            let mut col = 0;
            for (axis, &i) in idx.iter().enumerate() {
                if axis != mode {
                    col = col * dims[axis] + i;
                }
            }
            out[(idx[mode], col)] = v;
        }
        out
    }

    #[test]
    fn unfold_matches_the_definition_on_every_mode() {
        let x = random_tensor(&[3, 4, 2, 5], 1);
        for mode in 0..4 {
            let fast = unfold(x.view(), mode);
            let slow = unfold_reference(&x, mode);
            assert_eq!(fast, slow, "mode {mode}");
        }
    }

    #[test]
    fn fold_inverts_unfold() {
        let x = random_tensor(&[4, 3, 5], 2);
        for mode in 0..3 {
            let back = fold(&unfold(x.view(), mode), mode, x.shape());
            assert_eq!(back, x, "mode {mode}");
        }
    }

    #[test]
    fn mode_product_matches_explicit_summation() {
        let x = random_tensor(&[3, 4, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Array2::from_shape_simple_fn((5, 4), || rng.gen::<f64>() - 0.3);
        let y = mode_product(x.view(), &u, 1);
        assert_eq!(y.shape(), &[3, 5, 2]);
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..2 {
                    let mut acc = 0.0;
                    for l in 0..4 {
                        acc += u[(j, l)] * x[[i, l, k]];
                    }
                    assert_abs_diff_eq!(y[[i, j, k]], acc, epsilon = 1e-12);
                }
            }
        }
    }

    /// Reconstruction against the written-out Tucker sum
    /// `x[i,j,k,l] = Σ core[a,b,c,d]·U1[i,a]·U2[j,b]·U3[k,c]·U4[l,d]`.
    #[test]
    fn reconstruct_matches_the_quadruple_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let core = random_tensor(&[2, 3, 2, 2], 6);
        let dims = [3usize, 4, 2, 5];
        let ranks = [2usize, 3, 2, 2];
        let factors: Vec<Array2<f64>> = dims
            .iter()
            .zip(&ranks)
            .map(|(&d, &r)| Array2::from_shape_simple_fn((d, r), || rng.gen::<f64>()))
            .collect();
        let f = NtdFactors { core: core.clone(), factors: factors.clone(), loss_history: vec![] };
        let recon = reconstruct(&f);
        assert_eq!(recon.shape(), &dims);

        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for l in 0..dims[3] {
                        let mut acc = 0.0;
                        for a in 0..ranks[0] {
                            for b in 0..ranks[1] {
                                for c in 0..ranks[2] {
                                    for d in 0..ranks[3] {
                                        acc += core[[a, b, c, d]]
                                            * factors[0][(i, a)]
                                            * factors[1][(j, b)]
                                            * factors[2][(k, c)]
                                            * factors[3][(l, d)];
                                    }
                                }
                            }
                        }
                        assert_abs_diff_eq!(recon[[i, j, k, l]], acc, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_modes_reshapes_without_moving_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || rng.gen::<f64>());
        let (four, map4) = concat_modes(&x, Variant::FourD);
        assert_eq!(four.shape(), &[2, 3, 4, 5]);
        let (three, map3) = concat_modes(&x, Variant::ThreeD);
        assert_eq!(three.shape(), &[2, 12, 5]);
        assert_eq!(three[[1, 7, 2]], x[(1, 1, 3, 2)]);
        let (two, map2) = concat_modes(&x, Variant::TwoD);
        assert_eq!(two.shape(), &[24, 5]);
        assert_eq!(two[[23, 4]], x[(1, 2, 3, 4)]);

        for (t, map) in [(&four, map4), (&three, map3), (&two, map2)] {
            assert_eq!(map.restore(t.view()).unwrap(), x);
        }
        assert!(map2
            .restore(ArrayD::<f64>::zeros(IxDyn(&[3, 5])).view())
            .is_err());
    }

    #[test]
    fn ntd_rejects_invalid_inputs() {
        let opts = FactorizationOptions::default();
        let mut x = random_tensor(&[3, 3, 3], 8);
        assert!(matches!(
            ntd(&x, &[2, 2], &opts),
            Err(FactorError::RankCount { given: 2, modes: 3 })
        ));
        assert!(matches!(
            ntd(&x, &[2, 4, 2], &opts),
            Err(FactorError::RankRange { mode: 1, rank: 4, dim: 3 })
        ));
        assert!(matches!(
            ntd(&x, &[2, 0, 2], &opts),
            Err(FactorError::RankRange { mode: 1, rank: 0, dim: 3 })
        ));
        x[[0, 0, 0]] = -0.5;
        assert!(matches!(ntd(&x, &[2, 2, 2], &opts), Err(FactorError::NegativeInput)));
    }

    #[test]
    fn ntd_loss_history_is_non_increasing_and_deterministic() {
        let x = random_tensor(&[6, 5, 4, 3], 9);
        let opts = FactorizationOptions {
            max_outer_iters: 40,
            tolerance: 0.0,
            rng_seed: 10,
            ..FactorizationOptions::default()
        };
        let f = ntd(&x, &[3, 3, 2, 2], &opts).unwrap();
        assert_eq!(f.loss_history.len(), 40);
        for pair in f.loss_history.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(f.loss_history.last().unwrap() <= &f.loss_history[0]);
        assert!(f.loss_history.last().unwrap() < &0.5, "unreasonably poor fit");
        assert!(f.core.iter().all(|&v| v >= 0.0));
        assert!(f.factors.iter().all(|u| u.iter().all(|&v| v >= 0.0)));

        let again = ntd(&x, &[3, 3, 2, 2], &opts).unwrap();
        assert_eq!(f.core, again.core);
        assert_eq!(f.factors, again.factors);
        assert_eq!(f.loss_history, again.loss_history);
    }

    #[test]
    fn full_rank_ntd_reproduces_the_tensor() {
        let x = random_tensor(&[4, 3, 5], 11);
        let f = ntd(&x, &[4, 3, 5], &FactorizationOptions::default()).unwrap();
        let err = relative_error(x.view(), reconstruct(&f).view());
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rank_one_outer_product_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let vectors: Vec<Vec<f64>> = [4usize, 3, 5, 2]
            .iter()
            .map(|&d| (0..d).map(|_| 0.1 + rng.gen::<f64>()).collect())
            .collect();
        let mut x = ArrayD::zeros(IxDyn(&[4, 3, 5, 2]));
        for (idx, v) in x.indexed_iter_mut() {
            let idx = idx.slice();
            *v = vectors[0][idx[0]] * vectors[1][idx[1]] * vectors[2][idx[2]] * vectors[3][idx[3]];
        }
        let opts = FactorizationOptions {
            max_outer_iters: 500,
            tolerance: 1e-12,
            rng_seed: 21,
            ..FactorizationOptions::default()
        };
        let f = ntd(&x, &[1, 1, 1, 1], &opts).unwrap();
        let err = f.loss_history.last().copied().unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn consistent_permutations_leave_the_reconstruction_unchanged() {
        use ndarray::Axis;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let core = random_tensor(&[2, 3, 2], 23);
        let factors: Vec<Array2<f64>> = [(4usize, 2usize), (5, 3), (3, 2)]
            .iter()
            .map(|&(d, r)| Array2::from_shape_simple_fn((d, r), || rng.gen::<f64>()))
            .collect();
        let f = NtdFactors { core: core.clone(), factors: factors.clone(), loss_history: vec![] };
        let baseline = reconstruct(&f);

        let perms: [Vec<usize>; 3] = [vec![1, 0], vec![2, 0, 1], vec![1, 0]];
        let mut permuted_core = core;
        let mut permuted_factors = factors;
        for (mode, perm) in perms.iter().enumerate() {
            permuted_core = permuted_core.select(Axis(mode), perm);
            permuted_factors[mode] = permuted_factors[mode].select(Axis(1), perm);
        }
        let g = NtdFactors {
            core: permuted_core,
            factors: permuted_factors,
            loss_history: vec![],
        };
        let shuffled = reconstruct(&g);
        for (a, b) in baseline.iter().zip(shuffled.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn planted_low_rank_tensor_is_recovered_well() {
        // Build an exactly rank-(2,2,2) non-negative tensor and factorize
        // at the true ranks.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let core = random_tensor(&[2, 2, 2], 13);
        let factors: Vec<Array2<f64>> = [(5usize, 2usize), (4, 2), (6, 2)]
            .iter()
            .map(|&(d, r)| Array2::from_shape_simple_fn((d, r), || rng.gen::<f64>()))
            .collect();
        let x = reconstruct(&NtdFactors { core, factors, loss_history: vec![] });
        let opts = FactorizationOptions {
            max_outer_iters: 500,
            tolerance: 1e-12,
            rng_seed: 14,
            ..FactorizationOptions::default()
        };
        let f = ntd(&x, &[2, 2, 2], &opts).unwrap();
        let err = f.loss_history.last().copied().unwrap();
        assert!(err < 5e-2, "relative error {err}");
    }

    #[test]
    fn nmf_recovers_an_exact_rank_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = Array2::from_shape_simple_fn((8, 3), || rng.gen::<f64>());
        let h = Array2::from_shape_simple_fn((3, 6), || rng.gen::<f64>());
        let m = w.dot(&h);
        let opts = FactorizationOptions {
            max_outer_iters: 2000,
            tolerance: 1e-15,
            rng_seed: 16,
            ..FactorizationOptions::default()
        };
        let f = nmf(&m, 3, &opts).unwrap();
        for pair in f.loss_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        let err = f.loss_history.last().copied().unwrap();
        assert!(err < 1e-4, "relative error {err}");
        assert!(f.w.iter().all(|&v| v >= 0.0));
        assert!(f.h.iter().all(|&v| v >= 0.0));

        assert!(matches!(
            nmf(&m, 7, &opts),
            Err(FactorError::RankRange { rank: 7, dim: 6, .. })
        ));
    }

    /// Multiplicative-updates NMF, used only as an independent reference.
    fn mu_nmf(m: &Array2<f64>, rank: usize, iters: usize, seed: u64) -> f64 {
        let (rows, cols) = m.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Array2::from_shape_simple_fn((rows, rank), || 0.1 + rng.gen::<f64>());
        let mut h = Array2::from_shape_simple_fn((rank, cols), || 0.1 + rng.gen::<f64>());
        let tiny = 1e-12;
        for _ in 0..iters {
            let num_h = w.t().dot(m);
            let den_h = w.t().dot(&w).dot(&h);
            ndarray::Zip::from(&mut h).and(&num_h).and(&den_h).for_each(|hv, &n, &d| {
                *hv *= n / (d + tiny);
            });
            let num_w = m.dot(&h.t());
            let den_w = w.dot(&h.dot(&h.t()));
            ndarray::Zip::from(&mut w).and(&num_w).and(&den_w).for_each(|wv, &n, &d| {
                *wv *= n / (d + tiny);
            });
        }
        relative_error(m.view().into_dyn(), w.dot(&h).view().into_dyn())
    }

    #[test]
    fn nmf_agrees_with_a_multiplicative_updates_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let m = Array2::from_shape_simple_fn((8, 6), || rng.gen::<f64>());
        let opts = FactorizationOptions {
            max_outer_iters: 1000,
            tolerance: 1e-14,
            rng_seed: 25,
            ..FactorizationOptions::default()
        };
        let hals_err = nmf(&m, 3, &opts).unwrap().loss_history.last().copied().unwrap();
        let mu_err = mu_nmf(&m, 3, 5000, 26);
        assert!(
            (hals_err - mu_err).abs() <= 0.05 * mu_err,
            "hals {hals_err} vs multiplicative updates {mu_err}"
        );
    }

    #[test]
    fn nmf_matches_two_mode_ntd() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let m = Array2::from_shape_simple_fn((7, 5), || rng.gen::<f64>());
        let opts = FactorizationOptions {
            max_outer_iters: 1000,
            tolerance: 1e-14,
            rng_seed: 28,
            ..FactorizationOptions::default()
        };
        let nmf_err = nmf(&m, 2, &opts).unwrap().loss_history.last().copied().unwrap();
        let ntd_err = ntd(&m.clone().into_dyn(), &[2, 2], &opts)
            .unwrap()
            .loss_history
            .last()
            .copied()
            .unwrap();
        let scale = nmf_err.max(ntd_err);
        assert!(
            (nmf_err - ntd_err).abs() <= 0.05 * scale,
            "nmf {nmf_err} vs two-mode ntd {ntd_err}"
        );
    }

    #[test]
    fn hals_updates_satisfy_stationarity_at_convergence() {
        // After convergence every positive entry must have (near) zero
        // partial derivative and every zero entry a non-negative one.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let w_true = Array2::from_shape_simple_fn((7, 2), || rng.gen::<f64>());
        let h_true = Array2::from_shape_simple_fn((2, 5), || rng.gen::<f64>());
        let m = w_true.dot(&h_true);
        let opts = FactorizationOptions {
            max_outer_iters: 600,
            tolerance: 0.0,
            rng_seed: 18,
            ..FactorizationOptions::default()
        };
        let f = nmf(&m, 2, &opts).unwrap();
        let grad = f.w.dot(&f.h.dot(&f.h.t())) - m.dot(&f.h.t());
        let scale = m.iter().fold(0.0f64, |a, &b| a.max(b));
        for (&w, &g) in f.w.iter().zip(grad.iter()) {
            if w > 1e-9 {
                assert!(g.abs() < 1e-5 * scale, "active entry gradient {g}");
            } else {
                assert!(g > -1e-5 * scale, "inactive entry gradient {g}");
            }
        }
    }

    #[test]
    fn relative_error_and_compression_ratio_basics() {
        let x = random_tensor(&[3, 3], 19);
        assert_eq!(relative_error(x.view(), x.view()), 0.0);
        let zeros = ArrayD::<f64>::zeros(IxDyn(&[3, 3]));
        assert_eq!(relative_error(zeros.view(), zeros.view()), 0.0);
        assert_eq!(relative_error(zeros.view(), x.view()), frobenius(x.view()));
        assert_abs_diff_eq!(relative_error(x.view(), zeros.view()), 1.0, epsilon = 1e-12);
        let doubled = &x * 2.0;
        assert_abs_diff_eq!(relative_error(x.view(), doubled.view()), 1.0, epsilon = 1e-12);
        let y = &x * 1.1;
        assert_abs_diff_eq!(relative_error(x.view(), y.view()), 0.1, epsilon = 1e-12);

        assert_abs_diff_eq!(compression_ratio(1000, 100), 10.0, epsilon = 1e-12);
        // Worked parameter count for a batch of activations.
        let f = NtdFactors {
            core: ArrayD::<f64>::zeros(IxDyn(&[10, 4, 8, 5])),
            factors: vec![
                Array2::zeros((100, 10)),
                Array2::zeros((11, 4)),
                Array2::zeros((50, 8)),
                Array2::zeros((32, 5)),
            ],
            loss_history: vec![],
        };
        let expected = (100 * 11 * 50 * 32) as f64
            / (10 * 4 * 8 * 5 + 100 * 10 + 11 * 4 + 50 * 8 + 32 * 5) as f64;
        assert_abs_diff_eq!(
            f.compression_ratio(&[100, 11, 50, 32]),
            expected,
            epsilon = 1e-12
        );
        // Full ranks keep more values than the tensor itself.
        let full = NtdFactors {
            core: ArrayD::<f64>::zeros(IxDyn(&[4, 3])),
            factors: vec![Array2::zeros((4, 4)), Array2::zeros((3, 3))],
            loss_history: vec![],
        };
        assert!(full.compression_ratio(&[4, 3]) < 1.0);
    }

    #[test]
    fn variant_channel_mode_is_always_last() {
        let x = Array4::<f64>::zeros((2, 4, 6, 3));
        for variant in [Variant::FourD, Variant::ThreeD, Variant::TwoD] {
            let (t, _) = concat_modes(&x, variant);
            assert_eq!(t.shape()[variant.channel_mode()], 3);
            assert_eq!(variant.channel_mode(), t.ndim() - 1);
        }
    }
}

//! Convolutional classifier over piano rolls.
//!
//! The architecture is a stack of identical blocks, each a same-padded
//! square convolution followed by ReLU and 2 × 2 max-pooling, finished by
//! global average pooling and one dense layer to class logits. Activations
//! are channels-last `(H, W, C)`; the standard configuration is three
//! blocks with 8, 16 and 32 channels over an 88 × 400 roll, which leaves
//! an 11 × 50 × 32 tensor at the last block.
//!
//! Everything a concept explanation needs is exposed directly: hidden
//! activations at any block ([`Cnn::activations_at`]), the remaining
//! network from a block onward ([`Cnn::head_forward`]) and the gradient of
//! one logit with respect to a block's activations ([`Cnn::grad_head`]).
//!
//! Convolutions are evaluated as matrix products over unrolled patches;
//! training is plain SGD with momentum, coupled weight decay and a single
//! cosine learning-rate cycle. All shuffling and initialization is drawn
//! from explicitly seeded generators, so runs are reproducible.

use crate::prt::{PrtError, PrtTensor};
use crate::roll::Roll;
use crate::Scalar;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input is {actual:?} where the model expects {expected:?}")]
    InputShape { expected: (usize, usize), actual: (usize, usize) },
    #[error("block {layer} out of range: the model has {blocks} blocks")]
    LayerOutOfRange { layer: usize, blocks: usize },
    #[error("activations are {actual:?} where block {layer} produces {expected:?}")]
    ActivationShape { layer: usize, expected: (usize, usize, usize), actual: (usize, usize, usize) },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset holds {inputs} inputs but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("training data holds a single class; at least two are needed")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint tensor {name} is {actual:?} where {expected:?} was expected")]
    CheckpointShape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("checkpoint tensor: {0}")]
    Tensor(#[from] PrtError),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Architecture description; serialized into checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of each block, in order.
    pub conv_channels: Vec<usize>,
    /// Side of the square convolution kernels; must be odd.
    pub kernel_size: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard(2)
    }
}

impl ModelConfig {
    /// The reference architecture: three 3 × 3 blocks of 8, 16 and 32
    /// channels over an 88 × 400 roll.
    pub fn standard(num_classes: usize) -> Self {
        ModelConfig {
            input_height: 88,
            input_width: 400,
            conv_channels: vec![8, 16, 32],
            kernel_size: 3,
            num_classes,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.conv_channels.len()
    }

    /// Index of the block whose activations explanations use by default.
    pub fn last_block(&self) -> usize {
        self.num_blocks() - 1
    }

    /// `(H, W, C)` of the named block's output, after its pooling.
    pub fn block_output_shape(&self, layer: usize) -> (usize, usize, usize) {
        let mut h = self.input_height;
        let mut w = self.input_width;
        for _ in 0..=layer {
            h /= 2;
            w /= 2;
        }
        (h, w, self.conv_channels[layer])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.is_empty() {
            return Err(ModelError::BadConfig("no convolution blocks".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(ModelError::BadConfig(format!(
                "kernel size {} is not odd",
                self.kernel_size
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadConfig("fewer than two classes".into()));
        }
        let (h, w, _) = self.block_output_shape(self.last_block());
        if h == 0 || w == 0 {
            return Err(ModelError::BadConfig(format!(
                "input {} x {} collapses to nothing after {} poolings",
                self.input_height,
                self.input_width,
                self.num_blocks()
            )));
        }
        Ok(())
    }
}

/// One convolution block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    /// Kernel of shape `(k, k, c_in, c_out)`.
    pub kernel: Array4<T>,
    pub bias: Array1<T>,
}

/// The classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn<T> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock<T>>,
    /// Dense layer of shape `(num_classes, c_last)` applied to the pooled
    /// feature vector.
    pub head_weight: Array2<T>,
    pub head_bias: Array1<T>,
}

impl<T: Scalar> Cnn<T> {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights and zero biases,
    /// drawn deterministically from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut c_in = 1;
        for &c_out in &config.conv_channels {
            let bound = 1.0 / ((k * k * c_in) as f64).sqrt();
            let kernel = Array4::from_shape_simple_fn((k, k, c_in, c_out), || {
                T::from((rng.gen::<f64>() * 2.0 - 1.0) * bound).unwrap()
            });
            blocks.push(ConvBlock { kernel, bias: Array1::zeros(c_out) });
            c_in = c_out;
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let head_weight = Array2::from_shape_simple_fn((config.num_classes, c_in), || {
            T::from((rng.gen::<f64>() * 2.0 - 1.0) * bound).unwrap()
        });
        let head_bias = Array1::zeros(config.num_classes);
        Ok(Cnn { config, blocks, head_weight, head_bias })
    }

    fn check_layer(&self, layer: usize) -> Result<(), ModelError> {
        if layer >= self.config.num_blocks() {
            return Err(ModelError::LayerOutOfRange {
                layer,
                blocks: self.config.num_blocks(),
            });
        }
        Ok(())
    }

    fn check_activation(&self, act: &Array3<T>, layer: usize) -> Result<(), ModelError> {
        self.check_layer(layer)?;
        let expected = self.config.block_output_shape(layer);
        if act.dim() != expected {
            return Err(ModelError::ActivationShape { layer, expected, actual: act.dim() });
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<(), ModelError> {
        if class >= self.config.num_classes {
            return Err(ModelError::ClassOutOfRange {
                class,
                num_classes: self.config.num_classes,
            });
        }
        Ok(())
    }

    fn input_tensor(&self, grid: ArrayView2<'_, T>) -> Result<Array3<T>, ModelError> {
        let expected = (self.config.input_height, self.config.input_width);
        if grid.dim() != expected {
            return Err(ModelError::InputShape { expected, actual: grid.dim() });
        }
        Ok(grid.to_owned().insert_axis(Axis(2)))
    }

    /// Runs block `layer` and everything before it; returns that block's
    /// pooled output.
    pub fn activations_at(
        &self,
        grid: ArrayView2<'_, T>,
        layer: usize,
    ) -> Result<Array3<T>, ModelError> {
        self.check_layer(layer)?;
        let mut x = self.input_tensor(grid)?;
        for block in &self.blocks[..=layer] {
            let conv = conv_same(&x, &block.kernel, &block.bias);
            x = maxpool2(&relu(conv)).0;
        }
        Ok(x)
    }

    /// Runs the network from block `layer + 1` onward on stored
    /// activations of block `layer`; returns the logits.
    pub fn head_forward(&self, act: &Array3<T>, layer: usize) -> Result<Array1<T>, ModelError> {
        self.check_activation(act, layer)?;
        let mut x = act.clone();
        for block in &self.blocks[layer + 1..] {
            let conv = conv_same(&x, &block.kernel, &block.bias);
            x = maxpool2(&relu(conv)).0;
        }
        Ok(self.dense(&global_average_pool(&x)))
    }

    /// Full forward pass; logits in class order.
    pub fn forward_grid(&self, grid: ArrayView2<'_, T>) -> Result<Array1<T>, ModelError> {
        let act = self.activations_at(grid, 0)?;
        self.head_forward(&act, 0)
    }

    /// Full forward pass on a piano roll.
    pub fn forward(&self, roll: &Roll<T>) -> Result<Array1<T>, ModelError> {
        self.forward_grid(roll.grid.view())
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict(&self, grid: ArrayView2<'_, T>) -> Result<usize, ModelError> {
        Ok(argmax(&self.forward_grid(grid)?))
    }

    /// Gradient of the logit of `class` with respect to block `layer`'s
    /// activations, holding the weights fixed.
    pub fn grad_head(
        &self,
        act: &Array3<T>,
        layer: usize,
        class: usize,
    ) -> Result<Array3<T>, ModelError> {
        self.check_activation(act, layer)?;
        self.check_class(class)?;

        // Forward through the remaining blocks, keeping what the backward
        // pass needs.
        let mut x = act.clone();
        let mut traces = Vec::new();
        for block in &self.blocks[layer + 1..] {
            let pre_relu = conv_same(&x, &block.kernel, &block.bias);
            let post_relu = relu(pre_relu.clone());
            let (pooled, argmax) = maxpool2(&post_relu);
            traces.push((x, pre_relu, argmax));
            x = pooled;
        }

        // d logit / d pooled-features is one row of the head weights.
        let (h, w, c) = x.dim();
        let row = self.head_weight.row(class);
        let scale = T::from(1.0 / (h * w) as f64).unwrap();
        let mut grad = Array3::zeros((h, w, c));
        for ch in 0..c {
            let g = row[ch] * scale;
            grad.slice_mut(s![.., .., ch]).fill(g);
        }

        for (block, (input, pre_relu, argmax)) in
            self.blocks[layer + 1..].iter().zip(traces).rev()
        {
            let d_post_relu = maxpool2_backward(&grad, pre_relu.dim(), &argmax);
            let d_pre_relu = relu_backward(&d_post_relu, &pre_relu);
            grad = conv_same_backward_input(&d_pre_relu, &block.kernel, input.dim());
        }
        Ok(grad)
    }

    fn dense(&self, features: &Array1<T>) -> Array1<T> {
        self.head_weight.dot(features) + &self.head_bias
    }

    /// Encodes which ReLU units and pooling routes are active downstream
    /// of block `layer` when the network is evaluated from `act`.
    ///
    /// The network after a block is piecewise linear in the block's
    /// activations; two activation tensors with equal signatures lie in
    /// the same linear region, where [`Cnn::head_forward`] is exactly
    /// linear. Useful for validating gradients against finite differences
    /// without stepping over a kink.
    pub fn linear_region_signature(
        &self,
        act: &Array3<T>,
        layer: usize,
    ) -> Result<Vec<u8>, ModelError> {
        self.check_activation(act, layer)?;
        let mut signature = Vec::new();
        let mut x = act.clone();
        for block in &self.blocks[layer + 1..] {
            let pre_relu = conv_same(&x, &block.kernel, &block.bias);
            signature.extend(pre_relu.iter().map(|&v| u8::from(v > T::zero())));
            let (pooled, argmax) = maxpool2(&relu(pre_relu));
            signature.extend_from_slice(&argmax);
            x = pooled;
        }
        Ok(signature)
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax<T: Scalar>(xs: &Array1<T>) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Layer primitives.

/// Same-padded convolution of a channels-last tensor, via an unrolled
/// patch matrix and one matrix product per call.
fn conv_same<T: Scalar>(x: &Array3<T>, kernel: &Array4<T>, bias: &Array1<T>) -> Array3<T> {
    let (h, w, c_in) = x.dim();
    let (k, _, kc_in, c_out) = kernel.dim();
    debug_assert_eq!(c_in, kc_in, "kernel input channels");
    let pad = k / 2;

    let mut patches = Array2::zeros((h * w, k * k * c_in));
    for oh in 0..h {
        for ow in 0..w {
            let row = oh * w + ow;
            for dh in 0..k {
                let ih = oh + dh;
                if ih < pad || ih >= h + pad {
                    continue;
                }
                let ih = ih - pad;
                for dw in 0..k {
                    let iw = ow + dw;
                    if iw < pad || iw >= w + pad {
                        continue;
                    }
                    let iw = iw - pad;
                    let col = (dh * k + dw) * c_in;
                    for ci in 0..c_in {
                        patches[(row, col + ci)] = x[(ih, iw, ci)];
                    }
                }
            }
        }
    }

    let kernel_mat = kernel
        .view()
        .into_shape_with_order((k * k * c_in, c_out))
        .expect("kernel is contiguous");
    let mut out = patches.dot(&kernel_mat);
    out += &bias.view().insert_axis(Axis(0));
    out.into_shape_with_order((h, w, c_out)).expect("conv output shape")
}

/// Gradient of [`conv_same`] with respect to its input.
fn conv_same_backward_input<T: Scalar>(
    d_out: &Array3<T>,
    kernel: &Array4<T>,
    input_dim: (usize, usize, usize),
) -> Array3<T> {
    let (h, w, c_in) = input_dim;
    let (k, _, _, c_out) = kernel.dim();
    let pad = k / 2;
    let d_out_mat = d_out
        .view()
        .into_shape_with_order((h * w, c_out))
        .expect("gradient is contiguous");
    let kernel_mat = kernel
        .view()
        .into_shape_with_order((k * k * c_in, c_out))
        .expect("kernel is contiguous");
    // (H·W, k·k·c_in): gradient with respect to each unrolled patch.
    let d_patches = d_out_mat.dot(&kernel_mat.t());

    let mut dx = Array3::zeros(input_dim);
    for oh in 0..h {
        for ow in 0..w {
            let row = oh * w + ow;
            for dh in 0..k {
                let ih = oh + dh;
                if ih < pad || ih >= h + pad {
                    continue;
                }
                let ih = ih - pad;
                for dw in 0..k {
                    let iw = ow + dw;
                    if iw < pad || iw >= w + pad {
                        continue;
                    }
                    let iw = iw - pad;
                    let col = (dh * k + dw) * c_in;
                    for ci in 0..c_in {
                        dx[(ih, iw, ci)] += d_patches[(row, col + ci)];
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of [`conv_same`] with respect to kernel and bias.
fn conv_same_backward_params<T: Scalar>(
    d_out: &Array3<T>,
    input: &Array3<T>,
    k: usize,
) -> (Array4<T>, Array1<T>) {
    let (h, w, c_in) = input.dim();
    let c_out = d_out.dim().2;
    let pad = k / 2;
    let d_out_mat = d_out
        .view()
        .into_shape_with_order((h * w, c_out))
        .expect("gradient is contiguous");

    let mut d_kernel = Array4::zeros((k, k, c_in, c_out));
    {
        let mut d_kernel_mat = d_kernel
            .view_mut()
            .into_shape_with_order((k * k * c_in, c_out))
            .expect("kernel gradient is contiguous");
        // Rebuild each patch row and accumulate its outer product with the
        // output gradient row.
        let mut patch = vec![T::zero(); k * k * c_in];
        for oh in 0..h {
            for ow in 0..w {
                for p in patch.iter_mut() {
                    *p = T::zero();
                }
                for dh in 0..k {
                    let ih = oh + dh;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for dw in 0..k {
                        let iw = ow + dw;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        let iw = iw - pad;
                        let col = (dh * k + dw) * c_in;
                        for ci in 0..c_in {
                            patch[col + ci] = input[(ih, iw, ci)];
                        }
                    }
                }
                let row = oh * w + ow;
                for (pi, &pv) in patch.iter().enumerate() {
                    if pv != T::zero() {
                        for co in 0..c_out {
                            d_kernel_mat[(pi, co)] += pv * d_out_mat[(row, co)];
                        }
                    }
                }
            }
        }
    }
    let d_bias = d_out_mat.sum_axis(Axis(0));
    (d_kernel, d_bias)
}

fn relu<T: Scalar>(mut x: Array3<T>) -> Array3<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    x
}

fn relu_backward<T: Scalar>(d_out: &Array3<T>, pre_relu: &Array3<T>) -> Array3<T> {
    let mut dx = d_out.clone();
    dx.zip_mut_with(pre_relu, |d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// 2 × 2 max-pooling with stride 2 (odd trailing rows and columns are
/// dropped). Also returns the in-window argmax (0..4, scan order row then
/// column, first maximum wins) for the backward pass.
fn maxpool2<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Vec<u8>) {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((oh, ow, c));
    let mut argmax = vec![0u8; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best = x[(2 * i, 2 * j, ch)];
                let mut best_idx = 0u8;
                for (idx, (di, dj)) in
                    [(0usize, 1usize), (1, 0), (1, 1)].iter().enumerate()
                {
                    let v = x[(2 * i + di, 2 * j + dj, ch)];
                    if v > best {
                        best = v;
                        best_idx = idx as u8 + 1;
                    }
                }
                out[(i, j, ch)] = best;
                argmax[(i * ow + j) * c + ch] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn maxpool2_backward<T: Scalar>(
    d_out: &Array3<T>,
    input_dim: (usize, usize, usize),
    argmax: &[u8],
) -> Array3<T> {
    let (oh, ow, c) = d_out.dim();
    let mut dx = Array3::zeros(input_dim);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let idx = argmax[(i * ow + j) * c + ch] as usize;
                let (di, dj) = (idx / 2, idx % 2);
                dx[(2 * i + di, 2 * j + dj, ch)] += d_out[(i, j, ch)];
            }
        }
    }
    dx
}

fn global_average_pool<T: Scalar>(x: &Array3<T>) -> Array1<T> {
    let (h, w, c) = x.dim();
    let scale = T::from(1.0 / (h * w) as f64).unwrap();
    let mut out = Array1::zeros(c);
    for ch in 0..c {
        out[ch] = x.slice(s![.., .., ch]).sum() * scale;
    }
    out
}

// ---------------------------------------------------------------------------
// Training.

/// Labelled grids ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub inputs: Vec<Array2<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_rolls(rolls: &[Roll<T>], labels: Vec<usize>) -> Self {
        Dataset { inputs: rolls.iter().map(|r| r.grid.clone()).collect(), labels }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            rng_seed: 0,
        }
    }
}

/// Progress of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_val_accuracy: f64,
    pub final_val_macro_f1: f64,
}

struct Grads<T> {
    kernels: Vec<Array4<T>>,
    biases: Vec<Array1<T>>,
    head_weight: Array2<T>,
    head_bias: Array1<T>,
}

impl<T: Scalar> Grads<T> {
    fn zeros_like(model: &Cnn<T>) -> Self {
        Grads {
            kernels: model.blocks.iter().map(|b| Array4::zeros(b.kernel.dim())).collect(),
            biases: model.blocks.iter().map(|b| Array1::zeros(b.bias.len())).collect(),
            head_weight: Array2::zeros(model.head_weight.dim()),
            head_bias: Array1::zeros(model.head_bias.len()),
        }
    }

    fn reset(&mut self) {
        for k in &mut self.kernels {
            k.fill(T::zero());
        }
        for b in &mut self.biases {
            b.fill(T::zero());
        }
        self.head_weight.fill(T::zero());
        self.head_bias.fill(T::zero());
    }
}

/// Numerically stable softmax cross-entropy; returns the loss and the
/// gradient with respect to the logits.
fn cross_entropy<T: Scalar>(logits: &Array1<T>, label: usize) -> (f64, Array1<T>) {
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut exps = logits.mapv(|v| (v - max).exp());
    let sum: T = exps.iter().cloned().sum();
    let lse = max + sum.ln();
    let loss = (lse - logits[label]).to_f64().unwrap();
    exps.mapv_inplace(|v| v / sum);
    exps[label] -= T::one();
    (loss, exps)
}

/// Trains in place with momentum SGD, coupled weight decay and one cosine
/// learning-rate cycle, evaluating on `val` after every epoch.
///
/// Batches are drawn in a freshly shuffled order each epoch, seeded from
/// `cfg.rng_seed`, so equal inputs give bit-equal runs. With zero epochs
/// the weights are untouched and the report holds no epochs.
pub fn train<T: Scalar>(
    model: &mut Cnn<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, ModelError> {
    validate_dataset(model, train_set, true)?;
    validate_dataset(model, val_set, false)?;
    if cfg.batch_size == 0 {
        return Err(ModelError::BadConfig("batch size zero".into()));
    }

    let mut velocity = Grads::zeros_like(model);
    let mut grads = Grads::zeros_like(model);
    let momentum = T::from(cfg.momentum).unwrap();
    let weight_decay = T::from(cfg.weight_decay).unwrap();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr_f64 = 0.5
            * cfg.learning_rate
            * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        let lr = T::from(lr_f64).unwrap();

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::roll::derive_seed(
            cfg.rng_seed,
            epoch as u64,
        ));
        // Fisher-Yates shuffle.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.reset();
            let inv = T::from(1.0 / batch.len() as f64).unwrap();
            for &idx in batch {
                let input = train_set.inputs[idx].view();
                let label = train_set.labels[idx];
                let (loss, logits) =
                    backward_sample(model, input, label, inv, &mut grads)?;
                loss_sum += loss;
                if argmax(&logits) == label {
                    correct += 1;
                }
            }
            // v = m v + (g + wd w); w -= lr v.
            for (i, block) in model.blocks.iter_mut().enumerate() {
                sgd_step(&mut block.kernel, &mut velocity.kernels[i], &grads.kernels[i], lr, momentum, weight_decay);
                sgd_step(&mut block.bias, &mut velocity.biases[i], &grads.biases[i], lr, momentum, weight_decay);
            }
            sgd_step(&mut model.head_weight, &mut velocity.head_weight, &grads.head_weight, lr, momentum, weight_decay);
            sgd_step(&mut model.head_bias, &mut velocity.head_bias, &grads.head_bias, lr, momentum, weight_decay);
        }

        let (val_accuracy, val_macro_f1) = evaluate(model, val_set)?;
        let stats = EpochStats {
            epoch,
            learning_rate: lr_f64,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            val_macro_f1,
        };
        on_epoch(&stats);
        epochs.push(stats);
    }

    let (final_val_accuracy, final_val_macro_f1) = evaluate(model, val_set)?;
    Ok(TrainReport { epochs, final_val_accuracy, final_val_macro_f1 })
}

fn validate_dataset<T: Scalar>(
    model: &Cnn<T>,
    set: &Dataset<T>,
    require_two_classes: bool,
) -> Result<(), ModelError> {
    if set.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if set.inputs.len() != set.labels.len() {
        return Err(ModelError::LabelCount { inputs: set.inputs.len(), labels: set.labels.len() });
    }
    let expected = (model.config.input_height, model.config.input_width);
    for input in &set.inputs {
        if input.dim() != expected {
            return Err(ModelError::InputShape { expected, actual: input.dim() });
        }
    }
    for &label in &set.labels {
        if label >= model.config.num_classes {
            return Err(ModelError::LabelOutOfRange {
                label,
                num_classes: model.config.num_classes,
            });
        }
    }
    if require_two_classes {
        let first = set.labels[0];
        if set.labels.iter().all(|&l| l == first) {
            return Err(ModelError::SingleClass);
        }
    }
    Ok(())
}

/// Forward and backward for one sample; gradient contributions are scaled
/// by `scale` (one over the batch size) and accumulated into `grads`.
fn backward_sample<T: Scalar>(
    model: &Cnn<T>,
    input: ArrayView2<'_, T>,
    label: usize,
    scale: T,
    grads: &mut Grads<T>,
) -> Result<(f64, Array1<T>), ModelError> {
    let mut x = model.input_tensor(input)?;
    let mut traces = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let pre_relu = conv_same(&x, &block.kernel, &block.bias);
        let post_relu = relu(pre_relu.clone());
        let (pooled, argmax) = maxpool2(&post_relu);
        traces.push((x, pre_relu, argmax));
        x = pooled;
    }
    let features = global_average_pool(&x);
    let logits = model.dense(&features);
    let (loss, mut d_logits) = cross_entropy(&logits, label);
    d_logits.mapv_inplace(|v| v * scale);

    // Head.
    for (c, &d) in d_logits.iter().enumerate() {
        grads.head_bias[c] += d;
        for (f, &fv) in features.iter().enumerate() {
            grads.head_weight[(c, f)] += d * fv;
        }
    }
    let d_features = model.head_weight.t().dot(&d_logits);

    // Spread the pooled gradient back over the last block's output.
    let (h, w, c) = x.dim();
    let inv_hw = T::from(1.0 / (h * w) as f64).unwrap();
    let mut grad = Array3::zeros((h, w, c));
    for ch in 0..c {
        grad.slice_mut(s![.., .., ch]).fill(d_features[ch] * inv_hw);
    }

    for (i, (block, (input, pre_relu, argmax))) in
        model.blocks.iter().zip(traces).enumerate().rev()
    {
        let d_post_relu = maxpool2_backward(&grad, pre_relu.dim(), &argmax);
        let d_pre_relu = relu_backward(&d_post_relu, &pre_relu);
        let (d_kernel, d_bias) =
            conv_same_backward_params(&d_pre_relu, &input, model.config.kernel_size);
        grads.kernels[i].scaled_add(T::one(), &d_kernel);
        grads.biases[i].scaled_add(T::one(), &d_bias);
        if i > 0 {
            grad = conv_same_backward_input(&d_pre_relu, &block.kernel, input.dim());
        }
    }
    Ok((loss, logits))
}

fn sgd_step<T: Scalar, D: ndarray::Dimension>(
    weight: &mut ndarray::Array<T, D>,
    velocity: &mut ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    ndarray::Zip::from(weight)
        .and(velocity)
        .and(grad)
        .for_each(|w, v, &g| {
            *v = momentum * *v + g + weight_decay * *w;
            *w = *w - lr * *v;
        });
}

/// Accuracy and macro-averaged F1 over a labelled set.
pub fn evaluate<T: Scalar>(
    model: &Cnn<T>,
    set: &Dataset<T>,
) -> Result<(f64, f64), ModelError> {
    let k = model.config.num_classes;
    let mut confusion = vec![0usize; k * k];
    for (input, &label) in set.inputs.iter().zip(&set.labels) {
        let pred = model.predict(input.view())?;
        confusion[label * k + pred] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c * k + c]).sum();
    let accuracy = correct as f64 / set.len() as f64;

    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = confusion[c * k + c] as f64;
        let fp: f64 = (0..k).filter(|&r| r != c).map(|r| confusion[r * k + c] as f64).sum();
        let fn_: f64 = (0..k).filter(|&p| p != c).map(|p| confusion[c * k + p] as f64).sum();
        if tp + fp + fn_ > 0.0 {
            f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    Ok((accuracy, f1_sum / k as f64))
}

// ---------------------------------------------------------------------------
// Checkpoints.

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl<T: Scalar> Cnn<T> {
    fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..config.num_blocks() {
            names.push(format!("block{i}_kernel"));
            names.push(format!("block{i}_bias"));
        }
        names.push("head_weight".into());
        names.push("head_bias".into());
        names
    }

    /// Writes the model as one `.prt` file per tensor plus a JSON manifest
    /// holding the architecture and caller metadata.
    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        let names = Self::tensor_names(&self.config);
        let mut tensors: Vec<PrtTensor> = Vec::new();
        for block in &self.blocks {
            tensors.push(PrtTensor::from_array(block.kernel.view(), serde_json::Value::Null));
            tensors.push(PrtTensor::from_array(block.bias.view(), serde_json::Value::Null));
        }
        tensors.push(PrtTensor::from_array(self.head_weight.view(), serde_json::Value::Null));
        tensors.push(PrtTensor::from_array(self.head_bias.view(), serde_json::Value::Null));
        for (name, tensor) in names.iter().zip(&tensors) {
            tensor.write_file(&dir.join(format!("{name}.prt")))?;
        }
        let manifest = Manifest { config: self.config.clone(), tensors: names, meta };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint, validating every tensor shape against the
    /// manifest's architecture.
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let manifest: Manifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let config = manifest.config;
        config.validate()?;

        let read = |name: &str, expected: Vec<usize>| -> Result<PrtTensor, ModelError> {
            let t = PrtTensor::read_file(&dir.join(format!("{name}.prt")))?;
            if t.dims != expected {
                return Err(ModelError::CheckpointShape {
                    name: name.into(),
                    expected,
                    actual: t.dims,
                });
            }
            Ok(t)
        };

        let k = config.kernel_size;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut c_in = 1;
        for (i, &c_out) in config.conv_channels.iter().enumerate() {
            let kernel = read(&format!("block{i}_kernel"), vec![k, k, c_in, c_out])?
                .to_array_fixed::<T, ndarray::Ix4>()?;
            let bias = read(&format!("block{i}_bias"), vec![c_out])?
                .to_array_fixed::<T, ndarray::Ix1>()?;
            blocks.push(ConvBlock { kernel, bias });
            c_in = c_out;
        }
        let head_weight = read("head_weight", vec![config.num_classes, c_in])?
            .to_array_fixed::<T, ndarray::Ix2>()?;
        let head_bias = read("head_bias", vec![config.num_classes])?
            .to_array_fixed::<T, ndarray::Ix1>()?;
        Ok(Cnn { config, blocks, head_weight, head_bias })
    }
}

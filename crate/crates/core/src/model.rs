//! The full network: a max-feature-map convolutional base that maps
//! `[N,1,128,128]` to `[N,192,16,16]`, partitioned into four 8x8 local
//! patches plus the global map, each given channel attention and its own
//! classification head. Head predictions combine by mean softmax.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::hflip;
use crate::layers::{eca_kernel_size, mfm, Eca, Head, HeadActivation, ResidualBlock};
use crate::scalar::Scalar;
use crate::tape::{ShapeError, Tape, Variable};
use crate::tensor::Tensor;

/// Channels of the base network's output map.
pub const BASE_CHANNELS: usize = 192;
/// Total spatial downscaling of the base network (three 2x2 poolings).
pub const BASE_REDUCTION: usize = 8;
/// Native input extent.
pub const INPUT_SIZE: usize = 128;

/// Where channel attention sits relative to the patch partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EcaPlacement {
    /// One attention block per local patch plus one for the global map.
    AfterPartition,
    /// A single attention block on the full map, before partitioning; the
    /// global head consumes the same attended map.
    BeforePartition,
}

/// Architecture switches. `Default` is the full model with identity head
/// activation, which lands the parameter count at its published size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub eca_enabled: bool,
    pub eca_placement: EcaPlacement,
    pub global_head: bool,
    /// When false, only the global head exists and is supervised.
    pub ensemble: bool,
    pub head_activation: HeadActivation,
    /// Odd attention kernel size; `None` derives it from the channel count.
    pub eca_kernel_override: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 8,
            feature_dim: 256,
            eca_enabled: true,
            eca_placement: EcaPlacement::AfterPartition,
            global_head: true,
            ensemble: true,
            head_activation: HeadActivation::Identity,
            eca_kernel_override: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        const OP: &str = "config";
        if self.num_classes < 2 {
            return Err(ShapeError::new(OP, format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.feature_dim < 1 {
            return Err(ShapeError::new(OP, "feature_dim must be >= 1"));
        }
        if let Some(k) = self.eca_kernel_override {
            if k % 2 == 0 || k == 0 || k > BASE_CHANNELS {
                return Err(ShapeError::new(
                    OP,
                    format!("eca kernel override must be odd and within 1..={BASE_CHANNELS}, got {k}"),
                ));
            }
        }
        Ok(())
    }

    /// Effective attention kernel size.
    pub fn eca_kernel(&self) -> usize {
        self.eca_kernel_override.unwrap_or_else(|| eca_kernel_size(BASE_CHANNELS))
    }

    /// Head slot names in evaluation order: local quadrants then the global
    /// map. With `ensemble` off only the global head remains.
    pub fn head_slots(&self) -> Vec<String> {
        let mut slots = Vec::new();
        if self.ensemble {
            slots.extend((0..4).map(|i| i.to_string()));
            if self.global_head {
                slots.push("global".into());
            }
        } else {
            slots.push("global".into());
        }
        slots
    }

    /// Attention block names required by this configuration.
    fn eca_slots(&self) -> Vec<String> {
        if !self.eca_enabled {
            return Vec::new();
        }
        match (self.ensemble, self.eca_placement) {
            (true, EcaPlacement::AfterPartition) => {
                let mut slots: Vec<String> = (0..4).map(|i| i.to_string()).collect();
                if self.global_head {
                    slots.push("global".into());
                }
                slots
            }
            // A single full-map block; named "global" because it attends the
            // whole 16x16 map.
            (true, EcaPlacement::BeforePartition) | (false, _) => vec!["global".into()],
        }
    }
}

/// The exact parameter name/shape set a configuration requires. This is the
/// single source of truth shared by initialization, checkpoint validation and
/// the parameter count.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let conv = |name: &str, cout: usize, cin: usize, k: usize| {
        [
            (format!("base.{name}.kernel"), vec![cout, cin, k, k]),
            (format!("base.{name}.bias"), vec![cout]),
        ]
    };
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    shapes.extend(conv("conv1", 96, 1, 5));
    shapes.extend(conv("block2.conv1", 96, 48, 3));
    shapes.extend(conv("block2.conv2", 96, 48, 3));
    shapes.extend(conv("conv2a", 96, 48, 1));
    shapes.extend(conv("conv2", 192, 48, 3));
    shapes.extend(conv("block3a.conv1", 192, 96, 3));
    shapes.extend(conv("block3a.conv2", 192, 96, 3));
    shapes.extend(conv("block3b.conv1", 192, 96, 3));
    shapes.extend(conv("block3b.conv2", 192, 96, 3));
    shapes.extend(conv("conv3a", 192, 96, 1));
    shapes.extend(conv("conv3", 384, 96, 3));

    let k = config.eca_kernel();
    for slot in config.eca_slots() {
        shapes.push((format!("eca.{slot}.kernel"), vec![k]));
    }

    let pre = match config.head_activation {
        HeadActivation::Identity => config.feature_dim,
        HeadActivation::Mfm => 2 * config.feature_dim,
    };
    for slot in config.head_slots() {
        shapes.push((format!("head.{slot}.dense.weight"), vec![BASE_CHANNELS, pre]));
        shapes.push((format!("head.{slot}.dense.bias"), vec![pre]));
        shapes.push((
            format!("head.{slot}.classifier.weight"),
            vec![config.feature_dim, config.num_classes],
        ));
        shapes.push((format!("head.{slot}.classifier.bias"), vec![config.num_classes]));
    }
    shapes
}

/// Named learnable tensors. The name set is exactly determined by the
/// configuration that built it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: String, value: Tensor<f32>) {
        self.map.insert(name, value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<f32>> {
        self.map.remove(name)
    }

    /// Name-sorted iteration (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Converts every tensor to scalar type `T` (shared storage when `T` is
    /// `f32`).
    pub fn lift<T: Scalar>(&self) -> BTreeMap<String, Tensor<T>> {
        self.map
            .iter()
            .map(|(n, t)| (n.clone(), T::lift(t)))
            .collect()
    }
}

/// Deterministic initialization from a seed: conv/dense weights are fan-in
/// scaled uniform, biases zero, attention kernels zero so every gate starts
/// at the neutral 0.5.
pub fn build(config: &ModelConfig, seed: u64) -> Result<ModelParams, ShapeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::default();
    for (name, shape) in param_shapes(config) {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") || name.starts_with("eca.") {
            Tensor::zeros(shape)
        } else {
            // Fan-in: cin*kh*kw for conv kernels [cout,cin,kh,kw], rows for
            // dense weights [d,m].
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[0],
                _ => numel,
            };
            let s = 1.0 / (fan_in as f32).sqrt();
            Tensor::from_vec(shape, (0..numel).map(|_| rng.random_range(-s..s)).collect())
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Per-group parameter totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub base: usize,
    pub eca: usize,
    pub heads: usize,
}

/// Exact element counts of all learnable tensors, split by name prefix.
pub fn count_params(params: &ModelParams) -> ParamCount {
    let mut count = ParamCount {
        total: 0,
        base: 0,
        eca: 0,
        heads: 0,
    };
    for (name, t) in params.iter() {
        let n = t.numel();
        count.total += n;
        if name.starts_with("base.") {
            count.base += n;
        } else if name.starts_with("eca.") {
            count.eca += n;
        } else if name.starts_with("head.") {
            count.heads += n;
        }
    }
    count
}

/// Model parameters bound onto one tape as leaf variables.
pub struct BoundVars<T: Scalar = f32> {
    vars: BTreeMap<String, Variable<T>>,
}

impl<T: Scalar> BoundVars<T> {
    /// Binds every parameter as a leaf; `trainable` leaves retain gradients.
    pub fn bind(tape: &Tape<T>, params: &ModelParams, trainable: bool) -> Self {
        BoundVars {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(T::lift(t), trainable)))
                .collect(),
        }
    }

    /// Binds pre-lifted tensors (used by the 64-bit reference path, where
    /// lifting once outside the tape loop avoids repeated conversion).
    pub fn bind_map(tape: &Tape<T>, map: &BTreeMap<String, Tensor<T>>, trainable: bool) -> Self {
        BoundVars {
            vars: map
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Variable<T>, ShapeError> {
        self.vars
            .get(name)
            .ok_or_else(|| ShapeError::new("model", format!("missing parameter {name}")))
    }

    /// Replaces one bound variable (gradient-check hook).
    pub fn set(&mut self, name: &str, v: Variable<T>) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gradients populated by a backward pass, keyed by parameter name;
    /// parameters that did not participate are absent.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g)))
            .collect()
    }
}

fn residual_from<T: Scalar>(vars: &BoundVars<T>, prefix: &str) -> Result<ResidualBlock<T>, ShapeError> {
    Ok(ResidualBlock {
        conv1_kernel: vars.get(&format!("{prefix}.conv1.kernel"))?.clone(),
        conv1_bias: vars.get(&format!("{prefix}.conv1.bias"))?.clone(),
        conv2_kernel: vars.get(&format!("{prefix}.conv2.kernel"))?.clone(),
        conv2_bias: vars.get(&format!("{prefix}.conv2.bias"))?.clone(),
    })
}

fn eca_from<T: Scalar>(vars: &BoundVars<T>, slot: &str) -> Result<Eca<T>, ShapeError> {
    Ok(Eca {
        channels: BASE_CHANNELS,
        kernel: vars.get(&format!("eca.{slot}.kernel"))?.clone(),
    })
}

fn head_from<T: Scalar>(
    vars: &BoundVars<T>,
    slot: &str,
    activation: HeadActivation,
) -> Result<Head<T>, ShapeError> {
    Ok(Head {
        dense_weight: vars.get(&format!("head.{slot}.dense.weight"))?.clone(),
        dense_bias: vars.get(&format!("head.{slot}.dense.bias"))?.clone(),
        classifier_weight: vars.get(&format!("head.{slot}.classifier.weight"))?.clone(),
        classifier_bias: vars.get(&format!("head.{slot}.classifier.bias"))?.clone(),
        activation,
    })
}

/// Per-stage `(name, output shape)` pairs recorded by [`forward_base_traced`].
pub type StageTrace = Vec<(&'static str, Vec<usize>)>;

/// Runs the convolutional base, returning the final map and every named
/// intermediate shape for conformance checks.
///
/// Accepts any grayscale input whose spatial extents are multiples of
/// [`BASE_REDUCTION`] (the native size is 128x128); smaller inputs exist so
/// the full network remains finite-difference checkable.
pub fn forward_base_traced<T: Scalar>(
    vars: &BoundVars<T>,
    x: &Variable<T>,
) -> Result<(Variable<T>, StageTrace), ShapeError> {
    const OP: &str = "forward_base";
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != 1 {
        return Err(ShapeError::new(OP, format!("input must be [N,1,H,W], got {xs:?}")));
    }
    if xs[2] == 0
        || !xs[2].is_multiple_of(BASE_REDUCTION)
        || xs[3] == 0
        || !xs[3].is_multiple_of(BASE_REDUCTION)
    {
        return Err(ShapeError::new(
            OP,
            format!(
                "spatial dims must be positive multiples of {BASE_REDUCTION}, got {}x{}",
                xs[2], xs[3]
            ),
        ));
    }
    let mut trace: StageTrace = Vec::with_capacity(16);
    let mut record = |name: &'static str, v: &Variable<T>| {
        let shape = v.shape();
        trace.push((name, shape));
    };

    let conv = |v: &Variable<T>, name: &str, pad: usize| -> Result<Variable<T>, ShapeError> {
        v.conv2d(
            vars.get(&format!("base.{name}.kernel"))?,
            vars.get(&format!("base.{name}.bias"))?,
            1,
            pad,
        )
    };

    let c1 = conv(x, "conv1", 2)?;
    record("conv1", &c1);
    let m1 = mfm(&c1)?;
    record("mfm1", &m1);
    let p1 = m1.maxpool2()?;
    record("pool1", &p1);

    let b2 = residual_from(vars, "base.block2")?.forward(&p1)?;
    record("block2", &b2);
    let c2a = conv(&b2, "conv2a", 0)?;
    record("conv2a", &c2a);
    let m2a = mfm(&c2a)?;
    record("mfm2a", &m2a);
    let c2 = conv(&m2a, "conv2", 1)?;
    record("conv2", &c2);
    let m2 = mfm(&c2)?;
    record("mfm2", &m2);
    let p2 = m2.maxpool2()?;
    record("pool2", &p2);

    let b3a = residual_from(vars, "base.block3a")?.forward(&p2)?;
    record("block3a", &b3a);
    let b3b = residual_from(vars, "base.block3b")?.forward(&b3a)?;
    record("block3b", &b3b);
    let c3a = conv(&b3b, "conv3a", 0)?;
    record("conv3a", &c3a);
    let m3a = mfm(&c3a)?;
    record("mfm3a", &m3a);
    let c3 = conv(&m3a, "conv3", 1)?;
    record("conv3", &c3);
    let m3 = mfm(&c3)?;
    record("mfm3", &m3);
    let p3 = m3.maxpool2()?;
    record("pool3", &p3);

    Ok((p3, trace))
}

/// The convolutional base alone: `[N,1,H,W] -> [N,192,H/8,W/8]`.
pub fn forward_base<T: Scalar>(vars: &BoundVars<T>, x: &Variable<T>) -> Result<Variable<T>, ShapeError> {
    forward_base_traced(vars, x).map(|(out, _)| out)
}

/// Splits a feature map into its four non-overlapping quadrants in row-major
/// order: top-left, top-right, bottom-left, bottom-right.
pub fn partition<T: Scalar>(f: &Variable<T>) -> Result<[Variable<T>; 4], ShapeError> {
    const OP: &str = "partition";
    let fs = f.shape();
    if fs.len() != 4 {
        return Err(ShapeError::new(OP, format!("input must be [N,C,H,W], got {fs:?}")));
    }
    let (h, w) = (fs[2], fs[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(ShapeError::new(
            OP,
            format!("spatial dims must be even to partition, got {h}x{w}"),
        ));
    }
    let (h2, w2) = (h / 2, w / 2);
    Ok([
        f.crop_spatial(0, 0, h2, w2)?,
        f.crop_spatial(0, w2, h2, w2)?,
        f.crop_spatial(h2, 0, h2, w2)?,
        f.crop_spatial(h2, w2, h2, w2)?,
    ])
}

/// Reassembles four quadrant tensors (in [`partition`] order) into the full
/// map; the exact inverse of partitioning.
pub fn reassemble<T: Scalar>(quadrants: &[Tensor<T>; 4]) -> Tensor<T> {
    let qs = quadrants[0].shape();
    let (n, c, h2, w2) = (qs[0], qs[1], qs[2], qs[3]);
    for q in quadrants {
        assert_eq!(q.shape(), qs, "quadrant shapes must agree");
    }
    let (h, w) = (2 * h2, 2 * w2);
    let mut full = Tensor::zeros(vec![n, c, h, w]);
    let out = full.data_mut();
    for (qi, q) in quadrants.iter().enumerate() {
        let (y0, x0) = (h2 * (qi / 2), w2 * (qi % 2));
        let qd = q.data();
        for plane in 0..n * c {
            for yy in 0..h2 {
                let dst = plane * h * w + (y0 + yy) * w + x0;
                let src = plane * h2 * w2 + yy * w2;
                out[dst..dst + w2].copy_from_slice(&qd[src..src + w2]);
            }
        }
    }
    full
}

/// Per-head outputs in slot order (four local quadrants, then the global
/// head when enabled; a single global entry when ensembling is off).
pub struct ForwardOutput<T: Scalar = f32> {
    pub logits: Vec<Variable<T>>,
    pub features: Vec<Variable<T>>,
}

/// Full forward pass in the canonical branch order.
pub fn forward<T: Scalar>(
    vars: &BoundVars<T>,
    config: &ModelConfig,
    x: &Variable<T>,
) -> Result<ForwardOutput<T>, ShapeError> {
    forward_ordered(vars, config, x, [0, 1, 2, 3])
}

/// Forward pass with the ensemble branches evaluated in a chosen order:
/// branch `order[j]` (its patch together with its head parameters) runs in
/// slot `j`. The mean-softmax readout makes predictions invariant to this
/// order; the hook exists so that invariance is testable. The global head,
/// when present, always runs last.
pub fn forward_ordered<T: Scalar>(
    vars: &BoundVars<T>,
    config: &ModelConfig,
    x: &Variable<T>,
    order: [usize; 4],
) -> Result<ForwardOutput<T>, ShapeError> {
    config.validate()?;
    {
        let mut seen = [false; 4];
        for &i in &order {
            if i >= 4 || seen[i] {
                return Err(ShapeError::new("forward", format!("invalid branch order {order:?}")));
            }
            seen[i] = true;
        }
    }
    let base = forward_base(vars, x)?;

    // (input map, head slot) pairs in evaluation order.
    let mut branches: Vec<(Variable<T>, String)> = Vec::new();
    if config.ensemble {
        let (patch_src, global_src) = match (config.eca_enabled, config.eca_placement) {
            (true, EcaPlacement::BeforePartition) => {
                let full = eca_from(vars, "global")?.forward(&base)?;
                (full.clone(), full)
            }
            _ => (base.clone(), base),
        };
        let patches = partition(&patch_src)?;
        let attend_patches =
            config.eca_enabled && config.eca_placement == EcaPlacement::AfterPartition;
        for &i in &order {
            let input = if attend_patches {
                eca_from(vars, &i.to_string())?.forward(&patches[i])?
            } else {
                patches[i].clone()
            };
            branches.push((input, i.to_string()));
        }
        if config.global_head {
            let input = if attend_patches {
                eca_from(vars, "global")?.forward(&global_src)?
            } else {
                global_src
            };
            branches.push((input, "global".into()));
        }
    } else {
        let input = if config.eca_enabled {
            eca_from(vars, "global")?.forward(&base)?
        } else {
            base
        };
        branches.push((input, "global".into()));
    }

    let mut output = ForwardOutput {
        logits: Vec::with_capacity(branches.len()),
        features: Vec::with_capacity(branches.len()),
    };
    for (input, slot) in &branches {
        let head = head_from(vars, slot, config.head_activation)?;
        let (features, logits) = head.forward(input)?;
        output.features.push(features);
        output.logits.push(logits);
    }
    Ok(output)
}

/// Softmax of one logit row, computed in f64 with max subtraction.
fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// One single-image forward reduced to class probabilities: softmax per
/// head, mean across heads, accumulated in f64. Keeping the batch at one
/// sample keeps every intermediate map small enough to stay cache-resident
/// between successive ops, which measures faster than batching the mirror
/// pair.
fn run_probs(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor<f32>,
    order: [usize; 4],
) -> Result<Vec<f64>, ShapeError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batch = Tensor::from_vec(vec![1, 1, h, w], image.data().to_vec());
    let tape: Tape<f32> = Tape::new();
    let vars = BoundVars::bind(&tape, params, false);
    let x = tape.leaf(batch, false);
    let output = forward_ordered(&vars, config, &x, order)?;

    let k = config.num_classes;
    let mut acc = vec![0.0f64; k];
    for logits in &output.logits {
        let value = logits.value();
        for (a, p) in acc.iter_mut().zip(softmax_f64(value.data())) {
            *a += p;
        }
    }
    let inv_heads = 1.0 / output.logits.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv_heads);
    Ok(acc)
}

/// Class probabilities for one preprocessed `[1,H,W]` image: softmax per
/// head, mean across heads, and, with `mirror`, averaged with the prediction
/// on the horizontal flip. Sums to 1 within float tolerance.
pub fn predict(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor<f32>,
    mirror: bool,
) -> Result<Vec<f32>, ShapeError> {
    predict_ordered(params, config, image, mirror, [0, 1, 2, 3])
}

/// [`predict`] with an explicit ensemble branch order (see
/// [`forward_ordered`]); the readout is invariant to it.
pub fn predict_ordered(
    params: &ModelParams,
    config: &ModelConfig,
    image: &Tensor<f32>,
    mirror: bool,
    order: [usize; 4],
) -> Result<Vec<f32>, ShapeError> {
    const OP: &str = "predict";
    let is = image.shape();
    if is.len() != 3 || is[0] != 1 {
        return Err(ShapeError::new(OP, format!("image must be [1,H,W], got {is:?}")));
    }
    let mut probs = run_probs(params, config, image, order)?;
    if mirror {
        let flipped = run_probs(params, config, &hflip(image), order)?;
        for (p, f) in probs.iter_mut().zip(flipped) {
            *p = 0.5 * (*p + f);
        }
    }
    Ok(probs.into_iter().map(|p| p as f32).collect())
}

//! Adamax optimization with prefix-routed parameter groups, the summed
//! multi-head classification loss, the epoch loop with flip augmentation and
//! oversampling, and accuracy/confusion evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{hflip, oversample_indices, DataError, Dataset};
use crate::model::{forward, predict, BoundVars, ForwardOutput, ModelConfig, ModelParams};
use crate::tape::{add_n, ShapeError, Tape, Variable};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("missing gradient for parameter {0:?}")]
    MissingGrad(String),
    #[error("parameter {0:?} matches no optimizer group")]
    NoGroup(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Routes parameters to a learning rate and weight decay by name prefix;
/// the first matching group wins.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub prefix: String,
    pub lr: f32,
    pub weight_decay: f32,
}

/// The standard three-group split: the convolutional base at its own rate,
/// attention kernels and heads at the (typically 10x higher) rest rate.
/// Attention kernels are exempt from decay — shrinking a 5-weight kernel
/// toward zero just re-centers every gate at 0.5 and fights training.
pub fn default_groups(lr_base: f32, lr_rest: f32, weight_decay: f32) -> Vec<ParamGroup> {
    vec![
        ParamGroup {
            prefix: "base.".into(),
            lr: lr_base,
            weight_decay,
        },
        ParamGroup {
            prefix: "eca.".into(),
            lr: lr_rest,
            weight_decay: 0.0,
        },
        ParamGroup {
            prefix: "head.".into(),
            lr: lr_rest,
            weight_decay,
        },
    ]
}

/// Adamax accumulators: first moment `m` and infinity-norm `u` per
/// parameter, plus the shared step counter.
pub struct AdamaxState {
    m: BTreeMap<String, Tensor<f32>>,
    u: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamaxState {
    pub fn new() -> Self {
        AdamaxState {
            m: BTreeMap::new(),
            u: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamaxState {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adamax step over every parameter:
/// `m <- b1*m + (1-b1)*g`, `u <- max(b2*u, |g|)`,
/// `theta <- theta - (lr/(1-b1^t)) * m/(u+eps)`, with decoupled weight decay
/// `theta <- theta - lr*wd*theta` applied first. Bias tensors (`.bias`
/// suffix) are never decayed. Requires a gradient for every parameter.
pub fn adamax_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamaxState,
    groups: &[ParamGroup],
) -> Result<(), TrainError> {
    state.t += 1;
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.epsilon);
    // Bias correction in f64; beta1^t underflows gracefully for large t.
    let correction = 1.0 - (beta1 as f64).powi(state.t as i32);
    for (name, theta) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
        let group = groups
            .iter()
            .find(|g| name.starts_with(&g.prefix))
            .ok_or_else(|| TrainError::NoGroup(name.clone()))?;
        let wd = if name.ends_with(".bias") {
            0.0
        } else {
            group.weight_decay
        };
        let lr_t = (group.lr as f64 / correction) as f32;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        let u = state
            .u
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
        let g = grad.data();
        let td = theta.data_mut();
        let md = m.data_mut();
        let ud = u.data_mut();
        for i in 0..td.len() {
            if wd != 0.0 {
                td[i] -= group.lr * wd * td[i];
            }
            md[i] = beta1 * md[i] + (1.0 - beta1) * g[i];
            ud[i] = (beta2 * ud[i]).max(g[i].abs());
            td[i] -= lr_t * md[i] / (ud[i] + eps);
        }
    }
    Ok(())
}

/// How the per-head cross-entropies combine into one training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum over heads (the default; with H heads the effective head rate is
    /// H times the mean's).
    #[default]
    Sum,
    /// Mean over heads.
    Mean,
}

/// How training uses horizontal flips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorTrain {
    /// Each sample is flipped with probability 0.5 (keeps the batch size).
    #[default]
    Augment,
    /// Every batch carries each sample twice, once flipped.
    Double,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_base: f32,
    pub lr_rest: f32,
    pub weight_decay: f32,
    pub oversample: bool,
    pub mirror_train: MirrorTrain,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            seed: 0,
            lr_base: 1e-3,
            lr_rest: 1e-2,
            weight_decay: 4e-5,
            oversample: true,
            mirror_train: MirrorTrain::default(),
            loss_reduction: LossReduction::default(),
        }
    }
}

/// Every head is supervised separately on the same labels; the per-head
/// cross-entropies (each a mean over the batch) combine per `reduction`.
/// With uniform logits and H heads, the `Sum` loss is exactly `H * ln K`.
pub fn ensemble_loss<T: crate::Scalar>(
    output: &ForwardOutput<T>,
    labels: &[usize],
    reduction: LossReduction,
) -> Result<Variable<T>, ShapeError> {
    if output.logits.is_empty() {
        return Err(ShapeError::new("ensemble_loss", "no head outputs"));
    }
    let losses = output
        .logits
        .iter()
        .map(|l| l.softmax_cross_entropy(labels))
        .collect::<Result<Vec<_>, _>>()?;
    let total = add_n(&losses)?;
    Ok(match reduction {
        LossReduction::Sum => total,
        LossReduction::Mean => {
            total.scale_const(T::from_f64(1.0 / losses.len() as f64))
        }
    })
}

/// Stacks `[1,H,W]` images into one `[B,1,H,W]` batch.
fn stack_images(images: &[Tensor<f32>]) -> Tensor<f32> {
    let s = images[0].shape();
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.shape(), s, "all images in a batch share one shape");
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(vec![images.len(), 1, h, w], data)
}

/// One pass over the dataset: oversampled (or shuffled) sample order, flip
/// handling per `mirror_train`, one Adamax step per batch. Returns the
/// sample-weighted mean batch loss. Deterministic given `config.seed` and
/// `epoch`, which together derive this epoch's RNG stream.
pub fn train_epoch(
    params: &mut ModelParams,
    state: &mut AdamaxState,
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    if config.batch_size == 0 {
        return Err(ShapeError::new("train", "batch_size must be >= 1").into());
    }
    let groups = default_groups(config.lr_base, config.lr_rest, config.weight_decay);
    let epoch_seed = config
        .seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let indices: Vec<usize> = if config.oversample {
        oversample_indices(&dataset.labels(), rng.random())?
    } else {
        let mut v: Vec<usize> = (0..dataset.len()).collect();
        v.shuffle(&mut rng);
        v
    };

    let mut loss_sum = 0.0f64;
    let mut sample_count = 0usize;
    for chunk in indices.chunks(config.batch_size) {
        let mut images: Vec<Tensor<f32>> = Vec::with_capacity(2 * chunk.len());
        let mut labels: Vec<usize> = Vec::with_capacity(2 * chunk.len());
        for &i in chunk {
            let (image, label) = &dataset.items[i];
            match config.mirror_train {
                MirrorTrain::Augment => {
                    let flip = rng.random_bool(0.5);
                    images.push(if flip { hflip(image) } else { image.clone() });
                    labels.push(*label);
                }
                MirrorTrain::Double => {
                    images.push(image.clone());
                    labels.push(*label);
                    images.push(hflip(image));
                    labels.push(*label);
                }
                MirrorTrain::Off => {
                    images.push(image.clone());
                    labels.push(*label);
                }
            }
        }
        let batch = stack_images(&images);
        // The tape (and with it every borrowed parameter buffer) is dropped
        // before the optimizer mutates parameters in place.
        let (loss_value, grads) = {
            let tape: Tape<f32> = Tape::new();
            let vars = BoundVars::bind(&tape, params, true);
            let x = tape.leaf(batch, false);
            let output = forward(&vars, model_config, &x)?;
            let loss = ensemble_loss(&output, &labels, config.loss_reduction)?;
            loss.backward()?;
            (loss.value().item() as f64, vars.grads())
        };
        adamax_step(params, &grads, state, &groups)?;
        loss_sum += loss_value * labels.len() as f64;
        sample_count += labels.len();
    }
    Ok(loss_sum / sample_count as f64)
}

/// Evaluation metrics: overall accuracy, a K by K confusion matrix (rows are
/// true classes, columns predictions), and per-class accuracy (0 for classes
/// absent from the set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<f64>,
}

/// Argmax-of-`predict` evaluation; prediction ties break to the lowest class
/// index.
pub fn evaluate(
    params: &ModelParams,
    model_config: &ModelConfig,
    dataset: &Dataset,
    mirror: bool,
) -> Result<EvalReport, TrainError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let k = model_config.num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    for (image, label) in &dataset.items {
        if *label >= k {
            return Err(ShapeError::new(
                "evaluate",
                format!("label {label} out of range for {k} classes"),
            )
            .into());
        }
        let probs = predict(params, model_config, image, mirror)?;
        let mut pred = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[pred] {
                pred = i;
            }
        }
        confusion[*label][pred] += 1;
    }
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let row_sum: u64 = row.iter().sum();
            if row_sum == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / row_sum as f64
            }
        })
        .collect();
    Ok(EvalReport {
        accuracy: trace as f64 / total as f64,
        confusion,
        per_class,
    })
}

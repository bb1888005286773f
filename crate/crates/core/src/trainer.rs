//! Alternating training: each mini-batch performs one supervised update on
//! labeled images, then one α-weighted hint update on freshly sampled
//! virtual examples. Both updates share one model and one optimizer state.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::generators::SamplerHandle;
use crate::image::{HintTransformSpec, RasterImage};
use crate::losses::{self, HintLossConfig, Logits, LossVariant};
use crate::metrics;
use crate::seed::{self, stream};
use crate::task::Dataset;
use crate::tensor::{Padding, Tape, Tensor, Var};

const HIDDEN: usize = 8;
const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense.weight",
    "dense.bias",
];
/// Images per forward chunk when evaluating large sets.
const EVAL_CHUNK: usize = 256;

/// conv(1→8, 3×3, same) → relu → conv(8→8, 3×3, valid) → relu → global
/// average pool → dense(8→classes).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    tensors: Vec<Tensor>,
    num_classes: usize,
    image_side: usize,
}

impl ClassifierParams {
    /// He-normal convolutions, scaled-normal dense head, zero biases.
    pub fn init(num_classes: usize, image_side: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || image_side < 3 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs >= 2 classes and side >= 3, got {num_classes}/{image_side}"
            )));
        }
        let mut rng = seed::rng(&[seed, stream::INIT]);
        let mut normal = |shape: Vec<usize>, std: f64| {
            let n = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("std is positive");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Tensor::new(shape, data, true).expect("finite init")
        };
        let tensors = vec![
            normal(vec![HIDDEN, 1, 3, 3], (2.0f64 / 9.0).sqrt()),
            Tensor::zeros(vec![HIDDEN]).with_requires_grad(true),
            normal(vec![HIDDEN, HIDDEN, 3, 3], (2.0 / (9.0 * HIDDEN as f64)).sqrt()),
            Tensor::zeros(vec![HIDDEN]).with_requires_grad(true),
            normal(vec![HIDDEN, num_classes], (1.0 / HIDDEN as f64).sqrt()),
            Tensor::zeros(vec![num_classes]).with_requires_grad(true),
        ];
        Ok(Self {
            tensors,
            num_classes,
            image_side,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zero_head(&mut self) {
        for t in &mut self.tensors[4..] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Replaces each parameter's gradient with the one accumulated on `tape`.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            t.clear_grad();
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "genhints-model v1\nnum_classes={}\nimage_side={}\n",
            self.num_classes, self.image_side
        );
        for (name, t) in PARAM_NAMES.iter().zip(&self.tensors) {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{name} {} {}", shape.join(","), values.join(" ")).expect("String write");
        }
        out
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        if lines.next() != Some("genhints-model v1") {
            return Err("missing `genhints-model v1` header".into());
        }
        let mut field = |key: &str| -> std::result::Result<usize, String> {
            let line = lines.next().ok_or(format!("missing {key}"))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or(format!("bad {key} line {line:?}"))
        };
        let num_classes = field("num_classes")?;
        let image_side = field("image_side")?;
        let expected = Self::init(num_classes, image_side, 0).map_err(|e| e.to_string())?;
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for (name, want) in PARAM_NAMES.iter().zip(&expected.tensors) {
            let line = lines.next().ok_or(format!("missing parameter {name}"))?;
            let mut parts = line.split(' ');
            if parts.next() != Some(*name) {
                return Err(format!("expected parameter {name}"));
            }
            let shape: Vec<usize> = parts
                .next()
                .unwrap_or("")
                .split(',')
                .map(|d| d.parse().map_err(|_| format!("bad shape for {name}")))
                .collect::<std::result::Result<_, _>>()?;
            if shape != want.shape() {
                return Err(format!("{name} has shape {shape:?}, expected {:?}", want.shape()));
            }
            let data: Vec<f64> = parts
                .map(|v| v.parse().map_err(|_| format!("bad value {v:?} in {name}")))
                .collect::<std::result::Result<_, _>>()?;
            tensors.push(Tensor::new(shape, data, true).map_err(|e| format!("{name}: {e}"))?);
        }
        Ok(Self {
            tensors,
            num_classes,
            image_side,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|m| Error::format(path, m))
    }
}

fn batch_tensor(side: usize, batch: &[RasterImage]) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Empty("image batch"));
    }
    if let Some(bad) = batch.iter().find(|i| i.height() != side || i.width() != side) {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: vec![side, side],
            right: vec![bad.height(), bad.width()],
        });
    }
    let data = batch.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    Tensor::new(vec![batch.len(), 1, side, side], data, false)
}

/// Records the classifier on `tape`, returning `[N, classes]` logits.
pub fn forward_on_tape(tape: &mut Tape, params: &ClassifierParams, vars: &[Var], batch: &[RasterImage]) -> Result<Var> {
    let x = batch_tensor(params.image_side, batch)?;
    let x = tape.leaf(&x);
    let h = tape.conv2d(x, vars[0], vars[1], Padding::Same)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, vars[2], vars[3], Padding::Valid)?;
    let h = tape.relu(h);
    let pooled = tape.spatial_mean(h)?;
    let z = tape.matmul(pooled, vars[4])?;
    tape.add_row_bias(z, vars[5])
}

/// Logits for every image, evaluated in fixed-size chunks.
pub fn forward(params: &ClassifierParams, batch: &[RasterImage]) -> Result<Vec<Logits>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let z = forward_on_tape(&mut tape, params, &vars, chunk)?;
        for row in tape.value(z).chunks_exact(params.num_classes) {
            out.push(Logits::new(row.to_vec())?);
        }
    }
    Ok(out)
}

pub fn predict(params: &ClassifierParams, images: &[RasterImage]) -> Result<Vec<usize>> {
    Ok(forward(params, images)?.iter().map(Logits::argmax).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam with decoupled weight decay (`p -= lr·wd·p` first).
pub fn adam_step(params: &mut [Tensor], state: &mut OptimizerState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::InvalidArgument(format!("parameter {i} has no gradient")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        let decay = 1.0 - lr * weight_decay;
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            *w = *w * decay - lr * update;
        }
    }
    Ok(())
}

/// `base·½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    Constant,
    Cosine,
}

impl Scheduler {
    pub fn name(self) -> &'static str {
        match self {
            Scheduler::Constant => "constant",
            Scheduler::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Scheduler::Constant),
            "cosine" => Ok(Scheduler::Cosine),
            other => Err(Error::Config(format!("unknown scheduler {other:?}"))),
        }
    }

    pub fn lr(self, step: usize, total: usize, base: f64) -> Result<f64> {
        match self {
            Scheduler::Constant => Ok(base),
            Scheduler::Cosine => cosine_lr(step, total, base),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub train_temperature: f64,
    pub eval_temperature: f64,
    pub hint_spec: HintTransformSpec,
    pub aug_spec: HintTransformSpec,
    pub loss_variant: LossVariant,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub checkpoint_count: usize,
    /// Images per fixed evaluation slice used at each checkpoint.
    pub eval_size: usize,
    /// Disables classification updates; only hint updates run.
    pub hint_only: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            alpha: 50.0,
            train_temperature: 0.8,
            eval_temperature: 1.0,
            hint_spec: HintTransformSpec {
                flip_probability: 1.0,
                max_translate_fraction: 0.05,
                max_rotate_degrees: 18.0,
                seed_stream: 1,
            },
            aug_spec: HintTransformSpec {
                flip_probability: 0.5,
                max_translate_fraction: 0.05,
                max_rotate_degrees: 18.0,
                seed_stream: 2,
            },
            loss_variant: LossVariant::SymmetricKl,
            scheduler: Scheduler::Cosine,
            seed: 0,
            checkpoint_count: 120,
            eval_size: 256,
            hint_only: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail("training.epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return fail("training.batch_size must be >= 1".into());
        }
        if self.checkpoint_count < 2 {
            return fail("training.checkpoint_count must be >= 2".into());
        }
        if self.eval_size < 1 {
            return fail("training.eval_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("training.learning_rate must be >= 0".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("training.weight_decay must be >= 0".into());
        }
        self.hint_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.eval_temperature.is_finite() && self.eval_temperature > 0.0) {
            return fail("training.eval_temperature must be > 0".into());
        }
        self.hint_spec.validate().map_err(|e| Error::Config(format!("hint: {e}")))?;
        self.aug_spec.validate().map_err(|e| Error::Config(format!("aug: {e}")))
    }

    pub fn hint_config(&self) -> HintLossConfig {
        HintLossConfig {
            temperature: self.train_temperature,
            variant: self.loss_variant,
            alpha: self.alpha,
        }
    }
}

fn classification_loss(tape: &mut Tape, variant: LossVariant, logits: Var, labels: &[usize]) -> Result<Var> {
    match variant {
        LossVariant::SymmetricKl => losses::cross_entropy(tape, logits, labels),
        LossVariant::Mse => losses::mse_classification(tape, logits, labels),
    }
}

/// One supervised update on an augmented labeled batch. Returns the loss
/// before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step_classification(
    params: &mut ClassifierParams,
    state: &mut OptimizerState,
    images: &[RasterImage],
    labels: &[usize],
    aug_spec: &HintTransformSpec,
    config: &TrainingConfig,
    lr: f64,
    step: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let augmented = losses::transform_set(images, aug_spec, seed::derive(&[config.seed, stream::AUGMENT, step]))?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let logits = forward_on_tape(&mut tape, params, &vars, &augmented)?;
    let loss = classification_loss(&mut tape, config.loss_variant, logits, labels)?;
    tape.backward(loss)?;
    params.pull_grads(&tape, &vars)?;
    adam_step(params.tensors_mut(), state, lr, config.weight_decay)?;
    Ok(tape.scalar(loss))
}

/// One hint update on `config.batch_size` fresh virtual examples.
///
/// Takes no labels. Returns the unweighted hint loss before the update. When
/// the weighted gradient is identically zero (α = 0, or an identity hint
/// transform) the optimizer is not stepped, so neither the parameters nor the
/// moment buffers change.
pub fn train_step_hint(
    params: &mut ClassifierParams,
    state: &mut OptimizerState,
    sampler: &SamplerHandle,
    hint_spec: &HintTransformSpec,
    config: &TrainingConfig,
    lr: f64,
    step: u64,
) -> Result<f64> {
    let virt = sampler.sample(config.batch_size, &mut seed::rng(&[config.seed, stream::VIRTUAL, step]))?;
    let shifted = losses::transform_set(&virt, hint_spec, seed::derive(&[config.seed, stream::HINT, step]))?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let ya = forward_on_tape(&mut tape, params, &vars, &virt)?;
    let yb = forward_on_tape(&mut tape, params, &vars, &shifted)?;
    let loss = losses::hint_loss(&mut tape, config.loss_variant, ya, yb, config.train_temperature)?;
    let value = tape.scalar(loss);
    if config.alpha == 0.0 {
        return Ok(value);
    }
    let weighted = tape.scale(loss, config.alpha);
    tape.backward(weighted)?;
    params.pull_grads(&tape, &vars)?;
    let all_zero = params
        .tensors()
        .iter()
        .all(|t| t.grad().is_some_and(|g| g.iter().all(|&v| v == 0.0)));
    if !all_zero {
        adam_step(params.tensors_mut(), state, lr, config.weight_decay)?;
    }
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRow {
    pub step: usize,
    pub lr: f64,
    pub class_loss: f64,
    pub hint_loss_virtual: f64,
    pub hint_loss_real: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<CheckpointRow>,
}

pub const RUN_RECORD_HEADER: &str = "step,lr,class_loss,hint_loss_virtual,hint_loss_real,test_accuracy";

/// Ten significant digits in scientific notation.
pub fn fmt_sig10(v: f64) -> String {
    format!("{v:.9e}")
}

impl RunRecord {
    /// CSV body: header plus one row per checkpoint.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{RUN_RECORD_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                fmt_sig10(r.lr),
                fmt_sig10(r.class_loss),
                fmt_sig10(r.hint_loss_virtual),
                fmt_sig10(r.hint_loss_real),
                fmt_sig10(r.test_accuracy)
            )
            .expect("String write");
        }
        out
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(RUN_RECORD_HEADER) {
            return Err(format!("expected header `{RUN_RECORD_HEADER}`"));
        }
        let rows = lines
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 6 {
                    return Err(format!("bad row {line:?}"));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?}"));
                Ok(CheckpointRow {
                    step: f[0].parse().map_err(|_| format!("bad step {:?}", f[0]))?,
                    lr: num(f[1])?,
                    class_loss: num(f[2])?,
                    hint_loss_virtual: num(f[3])?,
                    hint_loss_real: num(f[4])?,
                    test_accuracy: num(f[5])?,
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Final model and end-of-run metrics on the full sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOutcome {
    pub record: RunRecord,
    pub params: ClassifierParams,
    pub final_test_accuracy: f64,
    pub final_train_accuracy: f64,
    /// Hint loss at the evaluation temperature on the held-out test images.
    pub final_hint_loss_real: f64,
    /// Hint loss at the evaluation temperature on the fixed virtual set.
    pub final_hint_loss_virtual: f64,
}

/// `count` evenly spaced step indices from 0 to `total` inclusive.
pub fn checkpoint_steps(total: usize, count: usize) -> Vec<usize> {
    let span = count.saturating_sub(1).max(1);
    (0..count).map(|i| (i * total + span / 2) / span).collect()
}

struct Evaluator<'a> {
    config: &'a TrainingConfig,
    real: &'a [RasterImage],
    real_labels: &'a [usize],
    virt: Vec<RasterImage>,
    test: &'a [RasterImage],
    test_labels: &'a [usize],
    hint_seed: u64,
}

impl Evaluator<'_> {
    fn hint_loss(&self, params: &ClassifierParams, images: &[RasterImage]) -> Result<f64> {
        losses::evaluate_hint_loss_on_set(
            |b| forward(params, b),
            images,
            &self.config.hint_spec,
            &self.config.hint_config(),
            self.config.eval_temperature,
            self.hint_seed,
        )
    }

    fn row(&self, params: &ClassifierParams, step: usize, lr: f64) -> Result<CheckpointRow> {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let z = forward_on_tape(&mut tape, params, &vars, self.real)?;
        let cl = classification_loss(&mut tape, self.config.loss_variant, z, self.real_labels)?;
        Ok(CheckpointRow {
            step,
            lr,
            class_loss: tape.scalar(cl),
            hint_loss_virtual: self.hint_loss(params, &self.virt)?,
            hint_loss_real: self.hint_loss(params, self.real)?,
            test_accuracy: metrics::accuracy(&predict(params, self.test)?, self.test_labels)?,
        })
    }
}

/// Runs the alternating loop for `config.epochs` passes over `train`.
///
/// Checkpoint metrics use fixed slices of `eval_size` images: the first
/// training images (classification loss and real hint loss), a virtual set
/// drawn once from `sampler`, and the first test images.
pub fn run_training(
    config: &TrainingConfig,
    train: &Dataset,
    sampler: &SamplerHandle,
    test: &Dataset,
) -> Result<TrainingOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let side = train.images[0].height();
    let num_classes = train.labels.iter().chain(&test.labels).max().map_or(2, |&m| (m + 1).max(2));
    let init = ClassifierParams::init(num_classes, side, config.seed)?;
    run_training_from(config, init, train, sampler, test)
}

/// [`run_training`] starting from given parameters and a fresh optimizer.
pub fn run_training_from(
    config: &TrainingConfig,
    init: ClassifierParams,
    train: &Dataset,
    sampler: &SamplerHandle,
    test: &Dataset,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty("training or test set"));
    }
    let side = init.image_side;
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&l| l >= init.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for a {}-class model",
            init.num_classes
        )));
    }
    if sampler.shape() != (side, side) {
        return Err(Error::InvalidArgument(format!(
            "sampler shape {:?} does not match {side}x{side} training images",
            sampler.shape()
        )));
    }
    let mut params = init;
    let mut state = OptimizerState::new(params.tensors());

    let n_real = config.eval_size.min(train.len());
    let n_test = config.eval_size.min(test.len());
    let eval = Evaluator {
        config,
        real: &train.images[..n_real],
        real_labels: &train.labels[..n_real],
        virt: sampler.sample(config.eval_size, &mut seed::rng(&[config.seed, stream::EVAL_VIRTUAL]))?,
        test: &test.images[..n_test],
        test_labels: &test.labels[..n_test],
        hint_seed: seed::derive(&[config.seed, stream::EVAL_HINT]),
    };

    let per_epoch = train.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let marks = checkpoint_steps(total, config.checkpoint_count);
    let mut next_mark = 0;
    let mut record = RunRecord::default();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut checkpoint = |params: &ClassifierParams, step: usize, record: &mut RunRecord| -> Result<()> {
        while next_mark < marks.len() && marks[next_mark] == step {
            let lr = config.scheduler.lr(step, total, config.learning_rate)?;
            record.rows.push(eval.row(params, step, lr)?);
            next_mark += 1;
        }
        Ok(())
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(&[config.seed, stream::SHUFFLE, epoch as u64]));
        for batch in order.chunks(config.batch_size) {
            checkpoint(&params, step, &mut record)?;
            let lr = config.scheduler.lr(step, total, config.learning_rate)?;
            if !config.hint_only {
                let images: Vec<RasterImage> = batch.iter().map(|&i| train.images[i].clone()).collect();
                let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
                train_step_classification(
                    &mut params,
                    &mut state,
                    &images,
                    &labels,
                    &config.aug_spec,
                    config,
                    lr,
                    step as u64,
                )?;
            }
            train_step_hint(&mut params, &mut state, sampler, &config.hint_spec, config, lr, step as u64)?;
            if !params.is_finite() {
                let last = record.rows.last().map(|r| format!("{r:?}")).unwrap_or_default();
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite parameters; last checkpoint {last}"),
                });
            }
            step += 1;
        }
    }
    checkpoint(&params, step, &mut record)?;
    params.clear_grads();

    let final_hint_loss_real = eval.hint_loss(&params, &test.images)?;
    let final_hint_loss_virtual = eval.hint_loss(&params, &eval.virt)?;
    let final_test_accuracy = metrics::accuracy(&predict(&params, &test.images)?, &test.labels)?;
    let final_train_accuracy = metrics::accuracy(&predict(&params, &train.images)?, &train.labels)?;
    Ok(TrainingOutcome {
        record,
        params,
        final_test_accuracy,
        final_train_accuracy,
        final_hint_loss_real,
        final_hint_loss_virtual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::SyntheticTaskSpec;

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            epochs: 1,
            batch_size: 8,
            checkpoint_count: 3,
            eval_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
        assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.5).unwrap().abs() < 1e-15);
        assert!(cosine_lr(101, 100, 0.5).is_err());
    }

    #[test]
    fn checkpoints_are_evenly_spaced() {
        assert_eq!(checkpoint_steps(10, 3), vec![0, 5, 10]);
        assert_eq!(checkpoint_steps(7, 2), vec![0, 7]);
        let s = checkpoint_steps(1250, 120);
        assert_eq!((s[0], s[119], s.len()), (0, 1250, 120));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr·g/(|g| + eps) per coordinate.
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5], true).unwrap()];
        p[0].accumulate_grad(&[0.3, -4.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, 0.1, 0.0).unwrap();
        let want = [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p[0].data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn adam_decoupled_decay() {
        let mut p = vec![Tensor::new(vec![1], vec![2.0], true).unwrap()];
        p[0].accumulate_grad(&[0.0]).unwrap();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &mut st, 0.1, 0.5).unwrap();
        assert!((p[0].data()[0] - 2.0 * 0.95).abs() < 1e-15);
        let mut bare = vec![Tensor::new(vec![1], vec![2.0], true).unwrap()];
        assert!(adam_step(&mut bare, &mut st, 0.1, 0.5).is_err());
    }

    #[test]
    fn model_text_roundtrip() {
        let p = ClassifierParams::init(4, 16, 7).unwrap();
        let back = ClassifierParams::from_text(&p.to_text()).unwrap();
        assert_eq!(p, back);
        assert!(ClassifierParams::from_text("nope").is_err());
        let truncated: String = p.to_text().lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(ClassifierParams::from_text(&truncated).is_err());
    }

    #[test]
    fn forward_shapes_and_chunking() {
        let spec = SyntheticTaskSpec::default();
        let (train, _) = spec.synth_dataset(300, 4, 0).unwrap();
        let p = ClassifierParams::init(4, 16, 1).unwrap();
        let all = forward(&p, &train.images).unwrap();
        assert_eq!(all.len(), 300);
        let one = forward(&p, &train.images[299..]).unwrap();
        assert_eq!(one[0], all[299]);
        let wrong = RasterImage::zeros(8, 8);
        assert!(forward(&p, &[wrong]).is_err());
    }

    #[test]
    fn zero_alpha_hint_step_changes_nothing() {
        let spec = SyntheticTaskSpec::default();
        let sampler = SamplerHandle::true_distribution(spec, 3).unwrap();
        let cfg = TrainingConfig {
            alpha: 0.0,
            ..small_config()
        };
        let mut p = ClassifierParams::init(4, 16, 1).unwrap();
        let mut st = OptimizerState::new(p.tensors());
        let (before, st_before) = (p.clone(), st.clone());
        let loss = train_step_hint(&mut p, &mut st, &sampler, &cfg.hint_spec, &cfg, 1e-3, 0).unwrap();
        assert!(loss > 0.0);
        assert_eq!(p, before);
        assert_eq!(st, st_before);
    }

    #[test]
    fn identity_hint_has_zero_loss_and_no_update() {
        let sampler = SamplerHandle::noise(16, 16, 3).unwrap();
        let cfg = small_config();
        let mut p = ClassifierParams::init(4, 16, 1).unwrap();
        let mut st = OptimizerState::new(p.tensors());
        let before = p.clone();
        let loss = train_step_hint(&mut p, &mut st, &sampler, &HintTransformSpec::identity(), &cfg, 1e-3, 0).unwrap();
        assert_eq!(loss, 0.0);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn hint_step_reduces_hint_loss() {
        let sampler = SamplerHandle::true_distribution(SyntheticTaskSpec::default(), 3).unwrap();
        let cfg = TrainingConfig {
            batch_size: 32,
            ..small_config()
        };
        let mut p = ClassifierParams::init(4, 16, 1).unwrap();
        let mut st = OptimizerState::new(p.tensors());
        let first = train_step_hint(&mut p, &mut st, &sampler, &cfg.hint_spec, &cfg, 1e-2, 0).unwrap();
        for _ in 0..20 {
            train_step_hint(&mut p, &mut st, &sampler, &cfg.hint_spec, &cfg, 1e-2, 0).unwrap();
        }
        let last = train_step_hint(&mut p, &mut st, &sampler, &cfg.hint_spec, &cfg, 1e-2, 0).unwrap();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn run_records_checkpoints_and_is_deterministic() {
        let spec = SyntheticTaskSpec::default();
        let (train, test) = spec.synth_dataset(32, 16, 0).unwrap();
        let sampler = SamplerHandle::true_distribution(spec, 9).unwrap();
        let cfg = small_config();
        let a = run_training(&cfg, &train, &sampler, &test).unwrap();
        let b = run_training(&cfg, &train, &sampler, &test).unwrap();
        assert_eq!(a, b);
        let steps: Vec<usize> = a.record.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4]);
        assert_eq!(RunRecord::from_csv(&a.record.to_csv()).unwrap().rows.len(), 3);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = SyntheticTaskSpec::default();
        let (train, test) = spec.synth_dataset(16, 8, 0).unwrap();
        let sampler = SamplerHandle::true_distribution(spec, 9).unwrap();
        let cfg = TrainingConfig {
            learning_rate: 1e300,
            ..small_config()
        };
        match run_training(&cfg, &train, &sampler, &test) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

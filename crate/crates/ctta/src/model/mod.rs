//! The split network and its training machinery.
//!
//! A model is a feature extractor followed by a single linear head: the
//! extractor runs every layer up to and including the penultimate feature
//! layer, the head maps features to pre-softmax logits. Keeping the head
//! linear gives the directional-derivative probe a well-defined feature
//! interface.
//!
//! Hidden layers are linear -> batch standardization -> ReLU; the feature
//! layer is a bare linear map. Standardization is parameter-free, so the
//! trainable parameter count depends only on the layer widths. Running
//! column statistics are carried alongside the parameters for eval-mode
//! forward passes.

mod checkpoint;
mod optim;
mod pretrain;

pub use checkpoint::{CheckpointMeta, SourceCheckpoint};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{compute_prototypes, pretrain_source, source_accuracy, PretrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Tape, STANDARDIZE_EPSILON};
use crate::child_seed;
use crate::datastream::apply_rotation;
use crate::error::{CttaError, Result};

/// Layer-width descriptor. `hidden` may be empty, in which case the extractor
/// is a single linear map into feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_standardize")]
    pub standardize: bool,
}

fn default_standardize() -> bool {
    true
}

impl Arch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, feature_dim: usize, num_classes: usize) -> Self {
        Arch { input_dim, hidden, feature_dim, num_classes, standardize: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(CttaError::invalid("arch", "zero-width layer"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(CttaError::invalid("arch", "zero-width hidden layer"));
        }
        if self.num_classes < 2 {
            return Err(CttaError::invalid("arch", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Widths of the extractor linears: input, hidden..., feature.
    pub fn extractor_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.feature_dim);
        w
    }

    /// Trainable parameter count: `sum(in*out + out)` over all linears.
    pub fn param_count(&self) -> usize {
        let widths = self.extractor_widths();
        let mut count = 0;
        for pair in widths.windows(2) {
            count += pair[0] * pair[1] + pair[1];
        }
        count + self.feature_dim * self.num_classes + self.num_classes
    }

    /// Number of standardization layers (one after each hidden linear).
    pub fn num_norm_layers(&self) -> usize {
        if self.standardize {
            self.hidden.len()
        } else {
            0
        }
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered trainable-parameter store. Order is fixed by the architecture so
/// optimizer moments, EMA sweeps and serialization all agree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    pub entries: Vec<ParamEntry>,
}

impl Params {
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.values.len()).collect()
    }

    /// Register every entry as a gradient-receiving tape leaf, in order.
    pub fn leaves(&self, tape: &mut Tape) -> Result<Vec<DiffTensor>> {
        self.entries.iter().map(|e| tape.leaf(e.values.clone(), &e.shape)).collect()
    }

    pub fn constants(&self) -> Result<Vec<DiffTensor>> {
        self.entries.iter().map(|e| DiffTensor::constant(e.values.clone(), &e.shape)).collect()
    }
}

/// Running column statistics for one standardization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl NormStats {
    fn fresh(width: usize) -> Self {
        NormStats { mean: vec![0.0; width], var: vec![1.0; width] }
    }
}

/// Momentum for the running-statistics update during source training.
pub const NORM_MOMENTUM: f64 = 0.9;

/// Which statistics a standardization layer uses in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training and test-time adaptation).
    Batch,
    /// Frozen running statistics from source training (eval mode).
    Running,
}

/// Extractor plus head with deterministic seeded initialization.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub arch: Arch,
    pub params: Params,
    pub norm_stats: Vec<NormStats>,
    pub seed: u64,
}

/// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases zero.
pub fn init_model(arch: &Arch, seed: u64) -> Result<SplitModel> {
    arch.validate()?;
    let widths = arch.extractor_widths();
    let mut entries = Vec::new();
    let mut linear = |name: String, fan_in: usize, fan_out: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, &format!("init:{name}")));
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        entries.push(ParamEntry { name: format!("{name}.w"), shape: vec![fan_in, fan_out], values });
        entries.push(ParamEntry {
            name: format!("{name}.b"),
            shape: vec![fan_out],
            values: vec![0.0; fan_out],
        });
    };
    for (i, pair) in widths.windows(2).enumerate() {
        linear(format!("g{i}"), pair[0], pair[1]);
    }
    linear("h".to_string(), arch.feature_dim, arch.num_classes);
    let norm_stats = (0..arch.num_norm_layers()).map(|i| NormStats::fresh(arch.hidden[i])).collect();
    Ok(SplitModel { arch: arch.clone(), params: Params { entries }, norm_stats, seed })
}

impl SplitModel {
    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Index of the head weight entry in the parameter order.
    pub fn head_weight_index(&self) -> usize {
        self.params.entries.len() - 2
    }

    /// Constant-parameter forward returning `(features, logits)`.
    pub fn forward_const(
        &self,
        inputs: &[f64],
        n: usize,
        mode: NormMode,
    ) -> Result<(DiffTensor, DiffTensor)> {
        let mut tape = Tape::new();
        let x = DiffTensor::constant(inputs.to_vec(), &[n, self.arch.input_dim])?;
        let tensors = self.params.constants()?;
        let ctx = ForwardContext::new(&self.arch, &tensors, &self.norm_stats);
        let (z, _) = ctx.features(&mut tape, &x, mode)?;
        let logits = ctx.logits(&mut tape, &z)?;
        Ok((z, logits))
    }
}

/// Forward passes over an explicit tensor view of the parameters, so the same
/// code runs with tape leaves (training) and constants (inference).
pub struct ForwardContext<'a> {
    arch: &'a Arch,
    tensors: &'a [DiffTensor],
    norm_stats: &'a [NormStats],
}

impl<'a> ForwardContext<'a> {
    pub fn new(arch: &'a Arch, tensors: &'a [DiffTensor], norm_stats: &'a [NormStats]) -> Self {
        ForwardContext { arch, tensors, norm_stats }
    }

    fn linear(&self, tape: &mut Tape, idx: usize, x: &DiffTensor) -> Result<DiffTensor> {
        let w = &self.tensors[2 * idx];
        let b = &self.tensors[2 * idx + 1];
        let y = tape.matmul(x, w)?;
        tape.add_row(&y, b)
    }

    /// Extractor pass. Returns the features and, in batch mode, the column
    /// statistics observed at each standardization layer (for running-stat
    /// updates during source training).
    pub fn features(
        &self,
        tape: &mut Tape,
        x: &DiffTensor,
        mode: NormMode,
    ) -> Result<(DiffTensor, Vec<NormStats>)> {
        let num_linears = self.arch.hidden.len() + 1;
        let mut h = x.clone();
        let mut observed = Vec::new();
        for i in 0..num_linears {
            h = self.linear(tape, i, &h)?;
            let is_hidden = i < self.arch.hidden.len();
            if is_hidden {
                if self.arch.standardize {
                    match mode {
                        NormMode::Batch => {
                            observed.push(batch_column_stats(&h));
                            h = tape.standardize(&h)?;
                        }
                        NormMode::Running => {
                            h = standardize_with(tape, &h, &self.norm_stats[i])?;
                        }
                    }
                }
                h = tape.relu(&h)?;
            }
        }
        Ok((h, observed))
    }

    /// Head pass: features to logits.
    pub fn logits(&self, tape: &mut Tape, z: &DiffTensor) -> Result<DiffTensor> {
        let head_idx = self.arch.hidden.len() + 1;
        self.linear(tape, head_idx, z)
    }

    /// Monolithic forward, identical to `logits(features(x))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &DiffTensor,
        mode: NormMode,
    ) -> Result<(DiffTensor, DiffTensor)> {
        let (z, _) = self.features(tape, x, mode)?;
        let logits = self.logits(tape, &z)?;
        Ok((z, logits))
    }
}

fn batch_column_stats(x: &DiffTensor) -> NormStats {
    let shape = x.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            mean[j] += x.values()[i * cols + j];
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            let d = x.values()[i * cols + j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= rows as f64;
    }
    NormStats { mean, var }
}

/// Eval-mode standardization as a constant affine map per column.
fn standardize_with(tape: &mut Tape, x: &DiffTensor, stats: &NormStats) -> Result<DiffTensor> {
    let shape = x.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut scale = Vec::with_capacity(rows * cols);
    let mut shift = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for j in 0..cols {
            let s = 1.0 / (stats.var[j].sqrt() + STANDARDIZE_EPSILON);
            scale.push(s);
            shift.push(-stats.mean[j] * s);
        }
    }
    let scale = DiffTensor::constant(scale, shape)?;
    let shift = DiffTensor::constant(shift, shape)?;
    let scaled = tape.mul(x, &scale)?;
    tape.add(&scaled, &shift)
}

/// Blend running statistics toward the observed batch statistics.
pub fn update_norm_stats(stats: &mut [NormStats], observed: &[NormStats]) {
    for (run, obs) in stats.iter_mut().zip(observed) {
        for (r, o) in run.mean.iter_mut().zip(&obs.mean) {
            *r = NORM_MOMENTUM * *r + (1.0 - NORM_MOMENTUM) * o;
        }
        for (r, o) in run.var.iter_mut().zip(&obs.var) {
            *r = NORM_MOMENTUM * *r + (1.0 - NORM_MOMENTUM) * o;
        }
    }
}

/// Row-wise argmax with ties broken toward the lowest index.
pub fn argmax_rows(t: &DiffTensor) -> Vec<usize> {
    let shape = t.shape();
    let (rows, cols) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
    (0..rows)
        .map(|r| {
            let row = &t.values()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Teacher/student pair
// ---------------------------------------------------------------------------

/// Student plus its weight-averaged teacher. The teacher is never updated by
/// gradients, only by [`ema_update`].
#[derive(Debug, Clone)]
pub struct TeacherStudent {
    pub student: SplitModel,
    pub teacher: SplitModel,
    pub ema_alpha: f64,
}

impl TeacherStudent {
    pub fn new(model: SplitModel, ema_alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_alpha) {
            return Err(CttaError::invalid("teacher_student", "ema_alpha outside [0,1]"));
        }
        Ok(TeacherStudent { teacher: model.clone(), student: model, ema_alpha })
    }
}

fn ema_scalar(teacher: f64, student: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        student
    } else if alpha == 1.0 {
        teacher
    } else {
        // Lerp form is exact at teacher == student; clamping pins the result
        // inside the interval even under rounding.
        let r = teacher + (1.0 - alpha) * (student - teacher);
        r.clamp(teacher.min(student), teacher.max(student))
    }
}

/// `teacher <- alpha*teacher + (1-alpha)*student`, per parameter. Running
/// statistics are shared with the source model and stay frozen.
pub fn ema_update(pair: &mut TeacherStudent) {
    let alpha = pair.ema_alpha;
    for (t, s) in pair.teacher.params.entries.iter_mut().zip(&pair.student.params.entries) {
        for (tv, sv) in t.values.iter_mut().zip(&s.values) {
            *tv = ema_scalar(*tv, *sv, alpha);
        }
    }
}

// ---------------------------------------------------------------------------
// Student-side input perturbation
// ---------------------------------------------------------------------------

/// Additive Gaussian noise plus a small random rotation of coordinate pairs.
/// Strength zero is the exact identity; a fixed seed fixes the output.
pub fn perturb(inputs: &DiffTensor, seed: u64, strength: f64) -> Result<DiffTensor> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(CttaError::invalid("perturb", "strength must be >= 0"));
    }
    if strength == 0.0 {
        return Ok(inputs.detached());
    }
    let shape = inputs.shape();
    if shape.len() != 2 {
        return Err(CttaError::shape("perturb", format!("expected matrix, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "perturb"));
    let mut out = inputs.values().to_vec();

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng);
    for pair in order.chunks_exact(2) {
        let theta = rng.random_range(-strength..=strength);
        apply_rotation(&mut out, n, d, &[(pair[0], pair[1])], theta);
    }
    let sigma = strength / (d as f64).sqrt();
    for v in &mut out {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * g;
    }
    DiffTensor::constant(out, shape)
}

//! Synthetic source data and corrupted target-domain streams.
//!
//! The source distribution is a set of seeded Gaussian blobs, one per class.
//! Target domains are the same blobs pushed through vector-space analogs of
//! image corruptions, each with five strictly increasing severity levels.
//! Streams are pure functions of `(spec, settings, seed)`: the same seed
//! always yields the same stage list and the same batch contents.
//!
//! Labels ride along with every batch but are consumed only by evaluation
//! code; the adaptation loop receives inputs alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::child_seed;
use crate::error::{CttaError, Result};

/// Source-domain dataset shape: class count, dimensionality, blob geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    /// Scale of the seeded class centers.
    pub spread: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            num_classes: 10,
            input_dim: 8,
            per_class: 200,
            spread: 6.0,
            noise: 1.0,
            seed: 7,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CttaError::invalid("source_spec", "need at least 2 classes"));
        }
        if self.input_dim == 0 || self.per_class == 0 {
            return Err(CttaError::invalid("source_spec", "empty dimensions"));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() || !self.spread.is_finite() {
            return Err(CttaError::invalid("source_spec", "noise must be positive and finite"));
        }
        Ok(())
    }

    /// Seeded class centers, `num_classes x input_dim`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(self.seed, "centers"));
        (0..self.num_classes)
            .map(|_| (0..self.input_dim).map(|_| self.spread * sample_normal(&mut rng)).collect())
            .collect()
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Row-major labeled sample matrix.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_samples: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Draw the full source dataset: `per_class` samples around each center.
pub fn make_source(spec: &SourceSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let centers = spec.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(spec.seed, "samples"));
    let n = spec.num_classes * spec.per_class;
    let mut inputs = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &mu in center {
                inputs.push(mu + spec.noise * sample_normal(&mut rng));
            }
            labels.push(c);
        }
    }
    Ok(LabeledDataset {
        inputs,
        labels,
        num_samples: n,
        input_dim: spec.input_dim,
        num_classes: spec.num_classes,
    })
}

// ---------------------------------------------------------------------------
// Corruptions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionType {
    GaussianNoise,
    UniformNoise,
    FeatureBlur,
    ContrastScale,
    Rotation,
    FeatureDropout,
    OffsetShift,
}

impl CorruptionType {
    pub const ALL: [CorruptionType; 7] = [
        CorruptionType::GaussianNoise,
        CorruptionType::UniformNoise,
        CorruptionType::FeatureBlur,
        CorruptionType::ContrastScale,
        CorruptionType::Rotation,
        CorruptionType::FeatureDropout,
        CorruptionType::OffsetShift,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian_noise",
            CorruptionType::UniformNoise => "uniform_noise",
            CorruptionType::FeatureBlur => "feature_blur",
            CorruptionType::ContrastScale => "contrast_scale",
            CorruptionType::Rotation => "rotation",
            CorruptionType::FeatureDropout => "feature_dropout",
            CorruptionType::OffsetShift => "offset_shift",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CorruptionType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| CttaError::invalid("corruption", format!("unknown type '{name}'")))
    }
}

fn check_severity(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(CttaError::invalid("corrupt", format!("severity {severity} outside 1..=5")))
    }
}

/// The single magnitude knob per corruption type, strictly monotone in
/// severity.
pub fn severity_magnitude(ty: CorruptionType, severity: u8) -> Result<f64> {
    let idx = check_severity(severity)?;
    let table: [f64; 5] = match ty {
        CorruptionType::GaussianNoise => [0.5, 1.0, 1.6, 2.3, 3.1],
        CorruptionType::UniformNoise => [0.8, 1.6, 2.6, 3.8, 5.2],
        CorruptionType::FeatureBlur => [0.18, 0.34, 0.52, 0.70, 0.90],
        // Contrast factor kappa; distortion grows as kappa leaves 1.
        CorruptionType::ContrastScale => [0.82, 0.66, 0.50, 0.35, 0.20],
        CorruptionType::Rotation => [0.12, 0.25, 0.42, 0.62, 0.85],
        CorruptionType::FeatureDropout => [0.10, 0.20, 0.30, 0.40, 0.50],
        CorruptionType::OffsetShift => [1.0, 2.0, 3.2, 4.5, 6.0],
    };
    Ok(table[idx])
}

/// Structural part of a corruption, fixed for a whole domain: rotation plane
/// pairing, offset direction. Noise draws are kept separate so batches within
/// one domain share structure but not noise.
#[derive(Debug, Clone)]
pub struct CorruptionPlan {
    ty: CorruptionType,
    dim: usize,
    pairs: Vec<(usize, usize)>,
    direction: Vec<f64>,
}

impl CorruptionPlan {
    pub fn new(ty: CorruptionType, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "plan"));
        let mut order: Vec<usize> = (0..dim).collect();
        order.shuffle(&mut rng);
        let pairs = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut direction: Vec<f64> = (0..dim).map(|_| sample_normal(&mut rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut direction {
                *v /= norm;
            }
        } else {
            direction[0] = 1.0;
        }
        CorruptionPlan { ty, dim, pairs, direction }
    }

    /// Corrupt `n` row-major samples at the given severity. `draw_seed`
    /// controls the stochastic part only.
    pub fn apply(&self, inputs: &[f64], n: usize, severity: u8, draw_seed: u64) -> Result<Vec<f64>> {
        let mag = severity_magnitude(self.ty, severity)?;
        let d = self.dim;
        if inputs.len() != n * d {
            return Err(CttaError::shape("corrupt", format!("{} values for {n}x{d}", inputs.len())));
        }
        let mut out = inputs.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(draw_seed, "draw"));
        match self.ty {
            CorruptionType::GaussianNoise => {
                for v in &mut out {
                    *v += mag * sample_normal(&mut rng);
                }
            }
            CorruptionType::UniformNoise => {
                for v in &mut out {
                    *v += rng.random_range(-mag..=mag);
                }
            }
            CorruptionType::FeatureBlur => {
                apply_blur(&mut out, n, d, mag);
            }
            CorruptionType::ContrastScale => {
                apply_contrast(&mut out, n, d, mag);
            }
            CorruptionType::Rotation => {
                apply_rotation(&mut out, n, d, &self.pairs, mag);
            }
            CorruptionType::FeatureDropout => {
                for i in 0..n {
                    for j in 0..d {
                        if rng.random_bool(mag) {
                            out[i * d + j] = 0.0;
                        }
                    }
                }
            }
            CorruptionType::OffsetShift => {
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] += mag * self.direction[j];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One-shot corruption with structure and draws derived from one seed.
pub fn corrupt(
    inputs: &[f64],
    n: usize,
    dim: usize,
    ty: CorruptionType,
    severity: u8,
    seed: u64,
) -> Result<Vec<f64>> {
    CorruptionPlan::new(ty, dim, seed).apply(inputs, n, severity, seed)
}

/// Rotate each listed coordinate pair of every sample by `theta` radians.
pub fn apply_rotation(values: &mut [f64], n: usize, d: usize, pairs: &[(usize, usize)], theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for i in 0..n {
        let row = &mut values[i * d..(i + 1) * d];
        for &(p, q) in pairs {
            let (a, b) = (row[p], row[q]);
            row[p] = cos * a - sin * b;
            row[q] = sin * a + cos * b;
        }
    }
}

/// Rescale each sample around its own coordinate mean: `mu + kappa*(x - mu)`.
/// `kappa == 1` is the exact identity.
pub fn apply_contrast(values: &mut [f64], n: usize, d: usize, kappa: f64) {
    if kappa == 1.0 {
        return;
    }
    for i in 0..n {
        let row = &mut values[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        for v in row {
            *v = mu + kappa * (*v - mu);
        }
    }
}

/// Blend each coordinate toward the mean of its radius-2 neighborhood
/// (reflected at the boundary) with weight `alpha`.
fn apply_blur(values: &mut [f64], n: usize, d: usize, alpha: f64) {
    let last = (d - 1) as isize;
    let reflect = |idx: isize| -> usize {
        let mut k = idx;
        if k < 0 {
            k = -k;
        }
        if k > last {
            k = 2 * last - k;
        }
        k.clamp(0, last) as usize
    };
    let mut smoothed = vec![0.0; d];
    for i in 0..n {
        let row = &mut values[i * d..(i + 1) * d];
        for j in 0..d as isize {
            let mut acc = 0.0;
            for off in -2..=2 {
                acc += row[reflect(j + off)];
            }
            smoothed[j as usize] = acc / 5.0;
        }
        for j in 0..d {
            row[j] = (1.0 - alpha) * row[j] + alpha * smoothed[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamProtocol {
    Standard,
    Gradual,
    Loop,
    Random,
}

impl StreamProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            StreamProtocol::Standard => "standard",
            StreamProtocol::Gradual => "gradual",
            StreamProtocol::Loop => "loop",
            StreamProtocol::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(StreamProtocol::Standard),
            "gradual" => Ok(StreamProtocol::Gradual),
            "loop" => Ok(StreamProtocol::Loop),
            "random" => Ok(StreamProtocol::Random),
            other => Err(CttaError::invalid("protocol", format!("unknown protocol '{other}'"))),
        }
    }
}

/// How many cycles the loop protocol replays the standard sequence.
pub const LOOP_CYCLES: usize = 10;
/// How many permuted sequences the random protocol concatenates.
pub const RANDOM_SEQUENCES: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    pub protocol: StreamProtocol,
    pub seed: u64,
    pub types: Vec<CorruptionType>,
    pub batches_per_stage: usize,
    pub batch_size: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings {
            protocol: StreamProtocol::Standard,
            seed: 11,
            types: CorruptionType::ALL.to_vec(),
            batches_per_stage: 25,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainStage {
    pub corruption: CorruptionType,
    pub severity: u8,
    pub batches: usize,
    pub batch_size: usize,
    /// Repetition this stage belongs to (loop cycle or random sequence);
    /// 0 for single-pass protocols.
    pub cycle: usize,
}

/// Ordered corruption stages plus everything needed to draw their batches.
#[derive(Debug, Clone, Serialize)]
pub struct DomainStream {
    pub protocol: StreamProtocol,
    pub seed: u64,
    pub source: SourceSpec,
    pub stages: Vec<DomainStage>,
}

/// One labeled batch. Labels are for evaluation only; the adaptation loop
/// never sees them.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub size: usize,
    pub dim: usize,
}

pub fn build_stream(source: &SourceSpec, settings: &StreamSettings) -> Result<DomainStream> {
    source.validate()?;
    if settings.types.is_empty() {
        return Err(CttaError::invalid("build_stream", "no corruption types"));
    }
    if settings.batch_size == 0 || settings.batches_per_stage == 0 {
        return Err(CttaError::invalid("build_stream", "empty stages"));
    }
    let stage = |corruption, severity, cycle| DomainStage {
        corruption,
        severity,
        batches: settings.batches_per_stage,
        batch_size: settings.batch_size,
        cycle,
    };
    let mut stages = Vec::new();
    match settings.protocol {
        StreamProtocol::Standard => {
            for &ty in &settings.types {
                stages.push(stage(ty, 5, 0));
            }
        }
        StreamProtocol::Gradual => {
            // Severity rises 1..5 then falls back to 1, so each type hands
            // over to the next at the lowest severity.
            for &ty in &settings.types {
                for &sev in &[1u8, 2, 3, 4, 5, 4, 3, 2, 1] {
                    stages.push(stage(ty, sev, 0));
                }
            }
        }
        StreamProtocol::Loop => {
            for cycle in 0..LOOP_CYCLES {
                for &ty in &settings.types {
                    stages.push(stage(ty, 5, cycle));
                }
            }
        }
        StreamProtocol::Random => {
            for (sequence, order) in
                distinct_permutations(&settings.types, settings.seed, RANDOM_SEQUENCES)
                    .into_iter()
                    .enumerate()
            {
                for ty in order {
                    stages.push(stage(ty, 5, sequence));
                }
            }
        }
    }
    Ok(DomainStream {
        protocol: settings.protocol,
        seed: settings.seed,
        source: source.clone(),
        stages,
    })
}

/// Seeded pairwise-distinct permutations of the type order. Duplicates are
/// redrawn, so the guarantee holds even for short type lists.
pub fn distinct_permutations(
    types: &[CorruptionType],
    seed: u64,
    count: usize,
) -> Vec<Vec<CorruptionType>> {
    let mut seen: Vec<Vec<CorruptionType>> = Vec::new();
    let mut attempt = 0u64;
    while seen.len() < count {
        let mut order = types.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(
            child_seed(seed, "random-order"),
            &attempt.to_string(),
        ));
        order.shuffle(&mut rng);
        // A single type admits only one permutation; accept repeats then.
        if !seen.contains(&order) || types.len() < 2 {
            seen.push(order);
        }
        attempt += 1;
    }
    seen
}

impl DomainStream {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Deterministically draw one corrupted batch.
    pub fn batch(&self, stage_idx: usize, batch_idx: usize) -> Result<Batch> {
        let stage = self
            .stages
            .get(stage_idx)
            .ok_or_else(|| CttaError::invalid("stream", format!("stage {stage_idx} out of range")))?;
        if batch_idx >= stage.batches {
            return Err(CttaError::invalid("stream", format!("batch {batch_idx} out of range")));
        }
        let d = self.source.input_dim;
        let b = stage.batch_size;
        let centers = self.source.centers();
        let tag = format!("{stage_idx}:{batch_idx}");
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(child_seed(self.seed, "data"), &tag));
        let mut inputs = Vec::with_capacity(b * d);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let c = rng.random_range(0..self.source.num_classes);
            for &mu in &centers[c] {
                inputs.push(mu + self.source.noise * sample_normal(&mut rng));
            }
            labels.push(c);
        }
        // Structure (rotation planes, offset direction) is stable per
        // corruption type; only the noise draw varies with the batch.
        let plan = CorruptionPlan::new(
            stage.corruption,
            d,
            child_seed(self.seed, stage.corruption.name()),
        );
        let inputs = plan.apply(
            &inputs,
            b,
            stage.severity,
            child_seed(child_seed(self.seed, "corrupt-draw"), &tag),
        )?;
        Ok(Batch { inputs, labels, size: b, dim: d })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

//! Versioned JSON checkpoint for the pretrained source model.
//!
//! Layout:
//!
//! ```json
//! {
//!   "version": 1,
//!   "arch": { ... },
//!   "params": { "g0.w": {"shape": [..], "values": [..]}, ... },
//!   "class_prototypes": [[..], ..],
//!   "domain_prototype": [..],
//!   "metadata": { ... }
//! }
//! ```
//!
//! Running normalization statistics are carried in the `params` map under
//! `norm{i}.mean` / `norm{i}.var`; they are state, not trainable parameters.
//! Every float is written with 17 significant digits so a parse-and-rewrite
//! round trip is lossless and byte-identical.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CttaError, Result};

use super::{Arch, NormStats, ParamEntry, Params, SplitModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model_seed: u64,
    pub pretrain_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub source_accuracy: f64,
}

/// Trained source model plus its prototype bank.
#[derive(Debug, Clone)]
pub struct SourceCheckpoint {
    pub model: SplitModel,
    /// Per-class source prototypes, `num_classes x feature_dim`.
    pub class_prototypes: Vec<Vec<f64>>,
    /// Unweighted mean of the class prototypes.
    pub domain_prototype: Vec<f64>,
    pub metadata: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    arch: Arch,
    params: BTreeMap<String, TensorDoc>,
    class_prototypes: Vec<Vec<f64>>,
    domain_prototype: Vec<f64>,
    metadata: CheckpointMeta,
}

/// JSON formatter writing every f64 with 17 significant digits
/// (`{:.16e}`), which uniquely identifies the bit pattern.
struct SciFloatFormatter;

impl serde_json::ser::Formatter for SciFloatFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "non-finite float"));
        }
        write!(writer, "{value:.16e}")
    }
}

impl SourceCheckpoint {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut params = BTreeMap::new();
        for entry in &self.model.params.entries {
            params.insert(
                entry.name.clone(),
                TensorDoc { shape: entry.shape.clone(), values: entry.values.clone() },
            );
        }
        for (i, stats) in self.model.norm_stats.iter().enumerate() {
            params.insert(
                format!("norm{i}.mean"),
                TensorDoc { shape: vec![stats.mean.len()], values: stats.mean.clone() },
            );
            params.insert(
                format!("norm{i}.var"),
                TensorDoc { shape: vec![stats.var.len()], values: stats.var.clone() },
            );
        }
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            arch: self.model.arch.clone(),
            params,
            class_prototypes: self.class_prototypes.clone(),
            domain_prototype: self.domain_prototype.clone(),
            metadata: self.metadata.clone(),
        };
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFloatFormatter);
        doc.serialize(&mut ser)?;
        buf.push(b'\n');
        Ok(buf)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_slice(bytes)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(CttaError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        doc.arch.validate().map_err(|e| CttaError::Checkpoint(e.to_string()))?;

        let mut params = doc.params;
        let mut take = |name: &str| -> Result<TensorDoc> {
            params
                .remove(name)
                .ok_or_else(|| CttaError::Checkpoint(format!("missing tensor '{name}'")))
        };

        let widths = doc.arch.extractor_widths();
        let mut entries = Vec::new();
        let mut expect_linear = |name: String, fan_in: usize, fan_out: usize, take: &mut dyn FnMut(&str) -> Result<TensorDoc>| -> Result<()> {
            let w = take(&format!("{name}.w"))?;
            if w.shape != [fan_in, fan_out] || w.values.len() != fan_in * fan_out {
                return Err(CttaError::Checkpoint(format!("bad shape for {name}.w")));
            }
            let b = take(&format!("{name}.b"))?;
            if b.shape != [fan_out] || b.values.len() != fan_out {
                return Err(CttaError::Checkpoint(format!("bad shape for {name}.b")));
            }
            entries.push(ParamEntry { name: format!("{name}.w"), shape: w.shape, values: w.values });
            entries.push(ParamEntry { name: format!("{name}.b"), shape: b.shape, values: b.values });
            Ok(())
        };
        for (i, pair) in widths.windows(2).enumerate() {
            expect_linear(format!("g{i}"), pair[0], pair[1], &mut take)?;
        }
        expect_linear("h".to_string(), doc.arch.feature_dim, doc.arch.num_classes, &mut take)?;

        let mut norm_stats = Vec::new();
        for i in 0..doc.arch.num_norm_layers() {
            let mean = take(&format!("norm{i}.mean"))?;
            let var = take(&format!("norm{i}.var"))?;
            let width = doc.arch.hidden[i];
            if mean.values.len() != width || var.values.len() != width {
                return Err(CttaError::Checkpoint(format!("bad shape for norm{i}")));
            }
            norm_stats.push(NormStats { mean: mean.values, var: var.values });
        }
        if !params.is_empty() {
            let stray: Vec<&String> = params.keys().collect();
            return Err(CttaError::Checkpoint(format!("unexpected tensors {stray:?}")));
        }

        let c = doc.arch.num_classes;
        let d = doc.arch.feature_dim;
        if doc.class_prototypes.len() != c
            || doc.class_prototypes.iter().any(|p| p.len() != d)
            || doc.domain_prototype.len() != d
        {
            return Err(CttaError::Checkpoint("prototype dimensions disagree with arch".into()));
        }
        let all_finite = doc
            .class_prototypes
            .iter()
            .flatten()
            .chain(&doc.domain_prototype)
            .chain(entries.iter().flat_map(|e| &e.values))
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(CttaError::Checkpoint("non-finite value in checkpoint".into()));
        }

        Ok(SourceCheckpoint {
            model: SplitModel {
                arch: doc.arch,
                params: Params { entries },
                norm_stats,
                seed: doc.metadata.model_seed,
            },
            class_prototypes: doc.class_prototypes,
            domain_prototype: doc.domain_prototype,
            metadata: doc.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json_bytes(&bytes)
    }
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::raw::RawTensor;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pool::argmax;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for categories absent from the evaluated set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub count: usize,
}

impl EvalReport {
    /// Builds the report from `(actual, predicted)` pairs.
    pub fn from_predictions(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        let mut count = 0;
        for (actual, predicted) in pairs {
            if actual >= num_classes || predicted >= num_classes {
                return Err(Error::Input(format!("label pair ({actual}, {predicted}) outside {num_classes} classes")));
            }
            confusion[actual][predicted] += 1;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("cannot evaluate an empty test set".into()));
        }
        let correct: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[k] as f64 / n as f64)
            })
            .collect();
        Ok(Self { accuracy: correct as f64 / count as f64, per_class_accuracy, confusion, count })
    }
}

/// Arg-max classification of every sample in evaluation mode.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, test: &DomainDataset<T>) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Input("cannot evaluate an empty test set".into()));
    }
    if test.num_classes() != params.num_classes() {
        return Err(Error::Dimension(format!(
            "test set has {} categories, the model {}",
            test.num_classes(),
            params.num_classes()
        )));
    }
    let logits = params.logits_eval(&test.images())?;
    let pairs = test.samples().iter().enumerate().map(|(i, s)| {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        (s.label, argmax(&row).0)
    });
    EvalReport::from_predictions(params.num_classes(), pairs.collect::<Vec<_>>())
}

/// Sidecar describing the rows of an exported feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub count: usize,
    pub embed_dim: usize,
    pub categories: Vec<String>,
    pub labels: Vec<usize>,
    pub domains: Vec<String>,
    pub paths: Vec<Option<String>>,
}

/// Writes evaluation-mode features as a raw tensor file (`count = N`,
/// `height = 1`, `width = embed_dim`) plus `<path>.json`.
pub fn export_embeddings<T: Scalar>(params: &ModelParams<T>, dataset: &DomainDataset<T>, path: &Path) -> Result<EmbeddingSidecar> {
    let feats = params.features_eval(&dataset.images())?;
    let d = params.embed_dim();
    let raw = RawTensor::new(dataset.len(), 1, d, feats.data().iter().map(|v| v.as_f64() as f32).collect())?;
    raw.write(path)?;
    let sidecar = EmbeddingSidecar {
        count: dataset.len(),
        embed_dim: d,
        categories: dataset.categories().to_vec(),
        labels: dataset.labels(),
        domains: dataset.samples().iter().map(|s| s.domain.as_str().to_string()).collect(),
        paths: dataset.samples().iter().map(|s| s.meta.path.clone()).collect(),
    };
    let side_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side_path, text).map_err(|e| Error::io(&side_path, e))?;
    Ok(sidecar)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::step::TrainState;
use super::trainer::MetricRecord;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::serialize::{pack, unpack, ManifestEntry};
use crate::model::{ModelParams, OptimState, Tensor};
use crate::pool::{AugmentationPool, PoolEntry, Provenance};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const PAYLOAD_FILE: &str = "state.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolEntryMeta {
    label: usize,
    provenance: Provenance,
    confidence: f64,
    added_iter: u64,
    tensor: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolMeta {
    capacity_per_class: usize,
    sigma: f64,
    inserted: u64,
    evicted: u64,
    entries: Vec<Vec<PoolEntryMeta>>,
}

/// Every random stream is a pure function of the run seed and the
/// iteration index, so these two numbers are the complete generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    dtype: String,
    rng: RngState,
    config: TrainConfig,
    tensors: Vec<ManifestEntry>,
    pools: PoolMeta,
    history: Vec<MetricRecord>,
}

/// Restored run contents.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    pub history: Vec<MetricRecord>,
    pub rng: RngState,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &TrainConfig,
    state: &TrainState<T>,
    history: &[MetricRecord],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let h = config.model.image_size;
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    for p in state.params.params() {
        named.push((format!("param/{}", p.name), p.value.clone()));
    }
    for b in state.params.buffers() {
        named.push((format!("buffer/{}", b.name), b.value.clone()));
    }
    for (p, m) in state.params.params().iter().zip(&state.optim.momentum_buffers) {
        named.push((format!("momentum/{}", p.name), m.clone()));
    }
    let mut entries = Vec::new();
    for (k, list) in state.pools.classes().iter().enumerate() {
        let mut metas = Vec::new();
        for (i, e) in list.iter().enumerate() {
            let tensor = format!("pool/{k}/{i}");
            named.push((tensor.clone(), Tensor::new(vec![h, h], e.image.pixels().to_vec())?));
            metas.push(PoolEntryMeta {
                label: e.label,
                provenance: e.provenance,
                confidence: e.confidence,
                added_iter: e.added_iter,
                tensor,
            });
        }
        entries.push(metas);
    }
    let (tensors, payload) = pack(named.iter().map(|(n, t)| (n.clone(), t)));
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        rng: RngState { seed: config.seed, next_iteration: state.iteration },
        config: config.clone(),
        tensors,
        pools: PoolMeta {
            capacity_per_class: state.pools.capacity_per_class(),
            sigma: state.pools.sigma(),
            inserted: state.pools.inserted(),
            evicted: state.pools.evicted(),
            entries,
        },
        history: history.to_vec(),
    };
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, payload).map_err(|e| Error::io(&payload_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string(&manifest).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format version {}", m.format_version)));
    }
    if m.dtype != T::DTYPE {
        return Err(Error::format(&manifest_path, format!("checkpoint holds {} values, expected {}", m.dtype, T::DTYPE)));
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let get = |name: &str| unpack::<T>(&m.tensors, &bytes, name).map_err(|e| e.context(payload_path.display().to_string()));

    let mut params = ModelParams::<T>::zeros(&m.config.model)?;
    for p in params.params_mut() {
        p.value = checked(get(&format!("param/{}", p.name))?, &p.value, &p.name)?;
    }
    for b in params.buffers_mut() {
        b.value = checked(get(&format!("buffer/{}", b.name))?, &b.value, &b.name)?;
    }
    let mut optim = OptimState::new(&params, m.config.sgd());
    for (p, buf) in params.params().iter().zip(optim.momentum_buffers.iter_mut()) {
        *buf = checked(get(&format!("momentum/{}", p.name))?, buf, &p.name)?;
    }
    let h = m.config.model.image_size;
    let mut classes = Vec::with_capacity(m.pools.entries.len());
    for list in &m.pools.entries {
        let mut out = Vec::with_capacity(list.len());
        for e in list {
            let t = get(&e.tensor)?;
            out.push(PoolEntry {
                image: GrayImage::new(h, h, t.into_data())?,
                label: e.label,
                provenance: e.provenance,
                confidence: e.confidence,
                added_iter: e.added_iter,
            });
        }
        classes.push(out);
    }
    let pools = AugmentationPool::from_parts(classes, m.pools.capacity_per_class, m.pools.sigma, m.pools.inserted, m.pools.evicted)?;
    Ok(Checkpoint {
        state: TrainState { params, optim, pools, iteration: m.rng.next_iteration },
        config: m.config,
        history: m.history,
        rng: m.rng,
    })
}

fn checked<T: Scalar>(loaded: Tensor<T>, like: &Tensor<T>, name: &str) -> Result<Tensor<T>> {
    if loaded.shape() != like.shape() {
        return Err(Error::State(format!("{name} has shape {:?} in the checkpoint, expected {:?}", loaded.shape(), like.shape())));
    }
    Ok(loaded)
}

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DataSource, TrainConfig};
use super::eval::{evaluate, EvalReport};
use super::step::{stream_rng, train_step, StepBatch, Stream, TrainState};
use crate::data::{generate_synthetic, load_dataset, make_split, Domain, DomainDataset, Manifest};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{ModelParams, OptimState};
use crate::pool::AugmentationPool;
use crate::scalar::Scalar;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Completed steps after this record.
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub pool_sizes: Vec<usize>,
    pub pool_inserted: u64,
    pub pool_evicted: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Source set plus the target split.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub source: DomainDataset<T>,
    pub labeled: DomainDataset<T>,
    pub unlabeled: DomainDataset<T>,
    pub test: DomainDataset<T>,
}

impl<T: Scalar> TrainData<T> {
    /// Loads or generates the configured data and splits the target domain.
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let (source, target) = match &config.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec)?,
            DataSource::Directory { root, manifest } => {
                let manifest = match manifest {
                    Some(path) => Manifest::from_file(path)?,
                    None => Manifest::sar_ten_class(config.model.image_size),
                };
                let all = load_dataset(root, &manifest)?;
                (all.domain(Domain::Source), all.domain(Domain::Target))
            }
        };
        let split = make_split(&target, &config.split)?;
        Ok(Self { source, labeled: split.labeled, unlabeled: split.unlabeled, test: split.test })
    }

    fn check(&self, config: &TrainConfig) -> Result<()> {
        let c = config.model.num_classes;
        let s = config.model.image_size;
        for (name, ds) in [("source", &self.source), ("labeled", &self.labeled), ("unlabeled", &self.unlabeled), ("test", &self.test)] {
            if ds.num_classes() != c {
                return Err(Error::Config(format!("{name} data has {} categories, model.num_classes is {c}", ds.num_classes())));
            }
            if let Some(shape) = ds.image_shape() {
                if shape != (s, s) {
                    return Err(Error::Config(format!("{name} images are {shape:?}, model.image_size is {s}")));
                }
            }
        }
        if self.source.is_empty() || self.labeled.is_empty() {
            return Err(Error::Config("source and labeled target sets must not be empty".into()));
        }
        Ok(())
    }
}

/// Fresh random order of `len` items per epoch; position `p` of the
/// infinite stream is item `perm(p / len)[p % len]`.
#[derive(Debug, Clone)]
struct EpochSampler {
    len: usize,
    seed: u64,
    stream: Stream,
    cache: Option<(u64, Vec<usize>)>,
}

impl EpochSampler {
    fn new(len: usize, seed: u64, stream: Stream) -> Self {
        Self { len, seed, stream, cache: None }
    }

    fn take(&mut self, start: u64, count: usize) -> Vec<usize> {
        (0..count as u64)
            .map(|j| {
                let p = start + j;
                let epoch = p / self.len as u64;
                if self.cache.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..self.len).collect();
                    perm.shuffle(&mut stream_rng(self.seed, self.stream, epoch));
                    self.cache = Some((epoch, perm));
                }
                self.cache.as_ref().unwrap().1[(p % self.len as u64) as usize]
            })
            .collect()
    }
}

/// Owns a run: data, state, metric history and optional output directory.
pub struct Trainer<T> {
    config: TrainConfig,
    data: TrainData<T>,
    state: TrainState<T>,
    history: Vec<MetricRecord>,
    source_order: EpochSampler,
    unlabeled_order: Option<EpochSampler>,
    out_dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, data: TrainData<T>) -> Result<Self> {
        config.validate()?;
        data.check(&config)?;
        let init_seed = stream_rng(config.seed, Stream::Init, 0).next_u64();
        let params = ModelParams::init(&config.model, init_seed)?;
        let optim = OptimState::new(&params, config.sgd());
        let pools = AugmentationPool::init(&data.labeled.labeled_pairs(), config.model.num_classes, config.pool_capacity, config.sigma)?;
        let state = TrainState { params, optim, pools, iteration: 0 };
        Ok(Self::assemble(config, data, state, Vec::new()))
    }

    /// Continues the run stored in `checkpoint_dir`. The stored config wins
    /// except for `iterations` and `eval_every`, which may be changed.
    pub fn resume(config: TrainConfig, data: TrainData<T>, checkpoint_dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint::<T>(checkpoint_dir)?;
        let mut stored = ckpt.config.clone();
        stored.iterations = config.iterations;
        stored.eval_every = config.eval_every;
        if stored != config {
            return Err(Error::Config(format!(
                "config differs from the one stored in {}; only iterations and eval_every may change",
                checkpoint_dir.display()
            )));
        }
        data.check(&config)?;
        Ok(Self::assemble(config, data, ckpt.state, ckpt.history))
    }

    fn assemble(config: TrainConfig, data: TrainData<T>, state: TrainState<T>, history: Vec<MetricRecord>) -> Self {
        let source_order = EpochSampler::new(data.source.len(), config.seed, Stream::SourceOrder);
        let unlabeled_order = (config.uses_unlabeled() && !data.unlabeled.is_empty())
            .then(|| EpochSampler::new(data.unlabeled.len(), config.seed, Stream::UnlabeledOrder));
        Self { config, data, state, history, source_order, unlabeled_order, out_dir: None, metrics: None }
    }

    /// Streams metrics to `<dir>/metrics.jsonl` (rewritten from the current
    /// history) and writes checkpoints under `<dir>/checkpoints`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.history {
            write_record(&mut w, rec).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.metrics = Some(w);
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn data(&self) -> &TrainData<T> {
        &self.data
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn history(&self) -> &[MetricRecord] {
        &self.history
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    fn batch_indices(&mut self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let bs = self.config.batch_size;
        let start = self.state.iteration * bs as u64;
        let src = self.source_order.take(start, bs);
        let n_lab = self.data.labeled.len() as u64;
        let lab = (0..bs as u64).map(|j| ((start + j) % n_lab) as usize).collect();
        let unl = self.unlabeled_order.as_mut().map(|s| s.take(start, bs)).unwrap_or_default();
        (src, lab, unl)
    }

    /// Runs one iteration and returns its metric record.
    pub fn step(&mut self) -> Result<&MetricRecord> {
        let (src, lab, unl) = self.batch_indices();
        let s = self.data.source.samples();
        let l = self.data.labeled.samples();
        let u = self.data.unlabeled.samples();
        let batch = StepBatch {
            source: src.iter().map(|&i| (&s[i].image, s[i].label)).collect(),
            labeled: lab.iter().map(|&i| (&l[i].image, l[i].label)).collect(),
            unlabeled: unl.iter().map(|&i| &u[i].image).collect(),
        };
        let loss = train_step(&mut self.state, &self.config, &batch).map_err(|e| match self.history.last() {
            Some(last) => e.context(format!(
                "training aborted; last breakdown {}",
                serde_json::to_string(&last.loss).unwrap_or_default()
            )),
            None => e.context("training aborted at the first iteration"),
        })?;
        let it = self.state.iteration;
        let eval_now = it == self.config.iterations || (self.config.eval_every > 0 && it % self.config.eval_every == 0);
        let eval = if eval_now && !self.data.test.is_empty() {
            Some(evaluate(&self.state.params, &self.data.test)?)
        } else {
            None
        };
        self.history.push(MetricRecord {
            iteration: it,
            loss,
            pool_sizes: self.state.pools.sizes(),
            pool_inserted: self.state.pools.inserted(),
            pool_evicted: self.state.pools.evicted(),
            eval,
        });
        let rec = self.history.last().unwrap();
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.out_dir.as_ref()) {
            let path = dir.join(METRICS_FILE);
            write_record(w, rec).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
            if eval_now {
                let ckpt = dir.join(CHECKPOINT_DIR).join(format!("iter_{it:06}"));
                save_checkpoint(&ckpt, &self.config, &self.state, &self.history)?;
                log::info!("checkpoint written to {}", ckpt.display());
            }
        }
        if let Some(e) = &rec.eval {
            log::info!("iteration {it}: loss {:.4}, test accuracy {:.4}", rec.loss.total, e.accuracy);
        } else {
            log::debug!("iteration {it}: loss {:.4}", rec.loss.total);
        }
        Ok(self.history.last().unwrap())
    }

    /// Steps until `iteration` completed steps (capped at the configured
    /// total).
    pub fn run_until(&mut self, iteration: u64) -> Result<()> {
        while self.state.iteration < iteration.min(self.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.config, &self.state, &self.history)
    }

    /// Latest evaluation in the history.
    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.history.iter().rev().find_map(|r| r.eval.as_ref())
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.state.params, &self.data.test)
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }
}

fn write_record(w: &mut impl Write, rec: &MetricRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

//! Training loop: SGD with momentum, weight decay, and global-norm gradient
//! clipping; step learning-rate decay; deterministic per-epoch shuffling;
//! checkpointing with bit-exact resume.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{assign_targets, TargetMap};
use crate::config::ModelConfig;
use crate::data::{load_image, DatasetIndex};
use crate::error::{Error, Result};
use crate::loss::detection_loss;
use crate::model::{hflip, Model};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_ctr: f64,
    pub total: f64,
    pub num_pos: usize,
}

pub struct TrainSession {
    pub model: Model,
    pub store: ParamStore,
    momentum: BTreeMap<String, Vec<f64>>,
    pub state: TrainState,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing so per-epoch and per-sample streams are
    // independent of each other and of the init stream
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainSession {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(cfg)?;
        let store = model.init_params(seed)?;
        let momentum = store
            .iter()
            .map(|(n, p)| (n.to_string(), vec![0.0; p.value.numel()]))
            .collect();
        Ok(Self {
            model,
            store,
            momentum,
            state: TrainState { epoch: 0, step: 0, seed },
        })
    }

    /// Effective learning rate for an epoch under step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let cfg = &self.model.cfg;
        let drops = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        cfg.lr * cfg.decay_factor.powi(drops as i32)
    }

    /// Sample order for one epoch; depends only on (seed, epoch).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.state.seed, epoch as u64, 0x0EDE2));
        order.shuffle(&mut rng);
        order
    }

    /// Whether a sample is mirrored this epoch; depends only on
    /// (seed, epoch, index).
    pub fn flip_coin(&self, epoch: usize, index: usize) -> bool {
        self.model.cfg.hflip
            && ChaCha8Rng::seed_from_u64(mix(self.state.seed, epoch as u64, index as u64 | 1 << 40))
                .gen_bool(0.5)
    }

    /// One optimizer step on a prepared batch. Returns the loss terms.
    pub fn train_step(
        &mut self,
        images: &Tensor,
        targets: &[Vec<TargetMap>],
        lr: f64,
    ) -> Result<StepMetrics> {
        let cfg = self.model.cfg.clone();
        let mut tape = Tape::new(self.model.precision());
        let x = tape.leaf(images.clone(), false);
        let out = self.model.forward(&mut tape, &self.store, x)?;
        let terms = detection_loss(&mut tape, &out, targets, &cfg)?;

        let metrics = StepMetrics {
            step: self.state.step,
            l_cls: tape.value(terms.cls).item()?,
            l_reg: tape.value(terms.reg).item()?,
            l_ctr: tape.value(terms.ctr).item()?,
            total: tape.value(terms.total).item()?,
            num_pos: terms.num_pos,
        };
        if !metrics.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: cls {} reg {} ctr {}",
                metrics.step, metrics.l_cls, metrics.l_reg, metrics.l_ctr
            )));
        }

        self.store.zero_grads();
        let grads = tape.backward(terms.total)?;
        self.store.accumulate(&tape, &grads)?;

        // weight decay folded into the gradient before clipping
        if cfg.weight_decay != 0.0 {
            for (_, p) in self.store.iter_mut() {
                for (g, w) in p.grad.iter_mut().zip(p.value.data()) {
                    *g += cfg.weight_decay * w;
                }
            }
        }
        let norm = self.store.grad_global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {}",
                metrics.step
            )));
        }
        let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };

        for (name, p) in self.store.iter_mut() {
            let v = self.momentum.get_mut(name).expect("momentum buffer");
            let mut data = p.value.data().to_vec();
            for i in 0..data.len() {
                v[i] = cfg.momentum * v[i] + scale * p.grad[i];
                data[i] -= lr * v[i];
            }
            p.value = Tensor::new(p.value.shape().to_vec(), data)?;
        }
        self.state.step += 1;
        Ok(metrics)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join("params"))?;
        let mdir = dir.join("momentum");
        std::fs::create_dir_all(&mdir)?;
        for (name, v) in &self.momentum {
            Tensor::from_vec(v.clone()).save(&mdir.join(format!("{}.ten", name)))?;
        }
        let f = std::fs::File::create(dir.join("state.json"))?;
        serde_json::to_writer_pretty(f, &self.state)?;
        Ok(())
    }

    pub fn resume(cfg: &ModelConfig, dir: &Path) -> Result<Self> {
        let model = Model::new(cfg)?;
        let store = ParamStore::load(&dir.join("params"))?;
        // shape-check against a freshly initialized store
        model.init_params(0)?.check_compatible(&store)?;
        let f = std::fs::File::open(dir.join("state.json"))?;
        let state: TrainState = serde_json::from_reader(f)?;
        let mut momentum = BTreeMap::new();
        for (name, p) in store.iter() {
            let t = Tensor::load(&dir.join("momentum").join(format!("{}.ten", name)))?;
            if t.numel() != p.value.numel() {
                return Err(Error::Format(format!(
                    "momentum buffer {} has {} entries, parameter has {}",
                    name,
                    t.numel(),
                    p.value.numel()
                )));
            }
            momentum.insert(name.to_string(), t.data().to_vec());
        }
        Ok(Self { model, store, momentum, state })
    }

    /// Load one batch of dataset records as a stacked image tensor plus
    /// per-image target maps.
    pub fn prepare_batch(&self, dataset: &DatasetIndex, indices: &[usize], epoch: usize) -> Result<(Tensor, Vec<Vec<TargetMap>>)> {
        let cfg = &self.model.cfg;
        let sizes: Vec<(usize, usize)> = self.model.level_sizes().to_vec();
        let ranges = cfg.level_ranges();
        let mut data = Vec::new();
        let mut targets = Vec::new();
        let mut shape = None;
        for &i in indices {
            let rec = &dataset.records[i];
            let img = load_image(&rec.path, &cfg.pixel_mean, &cfg.pixel_std)?;
            let (img, boxes) = if self.flip_coin(epoch, i) {
                hflip(&img, &rec.boxes, rec.width as f64)?
            } else {
                (img, rec.boxes.clone())
            };
            let sh = img.shape().to_vec();
            if let Some(prev) = &shape {
                if *prev != sh {
                    return Err(Error::Shape("mixed image sizes in one batch".into()));
                }
            } else {
                shape = Some(sh.clone());
            }
            data.extend_from_slice(img.data());
            targets.push(assign_targets(&boxes, &cfg.strides, &sizes, &ranges, cfg.num_classes)?);
        }
        let sh = shape.ok_or_else(|| Error::Input("empty batch".into()))?;
        let images = Tensor::new(vec![indices.len(), sh[1], sh[2], sh[3]], data)?;
        Ok((images, targets))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub final_ap50: f64,
}

/// Full training run over a dataset. Appends per-step metrics to
/// `<out>/metrics.csv` and per-epoch scores to `<out>/epochs.csv`, saves a
/// checkpoint per epoch under `<out>/checkpoint`, and dumps diagnostics on
/// numeric failure.
pub fn train(session: &mut TrainSession, dataset: &DatasetIndex, out: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out)?;
    let metrics_path = out.join("metrics.csv");
    let epochs_path = out.join("epochs.csv");
    if !metrics_path.exists() {
        std::fs::write(&metrics_path, "step,l_cls,l_reg,l_ctr,total\n")?;
    }
    if !epochs_path.exists() {
        std::fs::write(&epochs_path, "epoch,ap,ap50,ap75,ar100\n")?;
    }
    let cfg = session.model.cfg.clone();
    let mut last_loss = f64::NAN;
    for epoch in session.state.epoch..cfg.epochs {
        let lr = session.lr_at(epoch);
        let order = session.epoch_order(dataset.records.len(), epoch);
        let mut mf = std::fs::OpenOptions::new().append(true).open(&metrics_path)?;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, targets) = session.prepare_batch(dataset, chunk, epoch)?;
            let m = match session.train_step(&images, &targets, lr) {
                Ok(m) => m,
                Err(e) => {
                    // leave enough state behind to investigate the failure
                    let dump = out.join("diagnostic-dump");
                    session.save_checkpoint(&dump)?;
                    let _ = std::fs::write(
                        dump.join("failure.txt"),
                        format!("epoch {} batch {:?}: {}\n", epoch, chunk, e),
                    );
                    return Err(e);
                }
            };
            writeln!(mf, "{},{},{},{},{}", m.step, m.l_cls, m.l_reg, m.l_ctr, m.total)?;
            last_loss = m.total;
        }
        session.state.epoch = epoch + 1;
        let s = session.model.evaluate_dataset(&session.store, dataset)?;
        let mut ef = std::fs::OpenOptions::new().append(true).open(&epochs_path)?;
        writeln!(ef, "{},{},{},{},{}", epoch, s.ap, s.ap50, s.ap75, s.ar100)?;
        session.save_checkpoint(&out.join("checkpoint"))?;
    }
    let s = session.model.evaluate_dataset(&session.store, dataset)?;
    Ok(TrainReport {
        steps: session.state.step,
        final_loss: last_loss,
        final_ap50: s.ap50,
    })
}

/// Configure the global rayon pool from the environment; call once at
/// process start. Returns the thread count in use.
pub fn configure_threads(env_value: Option<&str>) -> Result<usize> {
    if let Some(v) = env_value {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("thread count {:?} is not a number", v)))?;
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("rayon pool: {}", e)))?;
        Ok(n)
    } else {
        Ok(rayon::current_num_threads())
    }
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

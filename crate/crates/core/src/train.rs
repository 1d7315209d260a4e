//! Alternating D / G training, CSV logging, checkpointing and sampling.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{BatchSampler, DatasetKind, DatasetSpec, ImageSet};
use crate::error::{Error, Result};
use crate::fregan::{
    d_objective, g_objective, hfa_loss, hfd_d_loss, hfd_g_loss, hinge_d_loss, hinge_g_loss,
    recon_loss, Ablation, FeatureTaps, HfdHeads, LossReport, TapSource, HFD_GENERATOR_SIGN,
};
use crate::models::{Discriminator, Generator, ModelConfig};
use crate::nn::ParamSet;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_FILE: &str = "metrics.csv";
/// Images generated per forward pass when sampling.
pub const SAMPLE_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub iterations: u64,
    pub adam: AdamConfig,
    pub ablation: Ablation,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    /// Directory for the metrics log and checkpoints; `None` keeps everything in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub log_interval: u64,
    /// 0 means only the final checkpoint.
    pub checkpoint_interval: u64,
    pub hfd_g_sign: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: 8,
            iterations: 2000,
            adam: AdamConfig::default(),
            ablation: Ablation::FULL,
            dataset: DatasetSpec {
                kind: DatasetKind::SinusoidMix { frequency: None },
                n: 16,
                size: 64,
                seed: 0,
            },
            model: ModelConfig::default(),
            out_dir: None,
            log_interval: 1,
            checkpoint_interval: 0,
            hfd_g_sign: HFD_GENERATOR_SIGN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch must be >= 2, got {}", self.batch)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.log_interval < 1 {
            return Err(Error::Config("log interval must be >= 1".into()));
        }
        if self.dataset.size != crate::models::IMAGE_SIZE {
            return Err(Error::Config(format!(
                "the networks work on {0}x{0} images; dataset size is {1}",
                crate::models::IMAGE_SIZE,
                self.dataset.size
            )));
        }
        if self.batch > self.dataset.n {
            return Err(Error::Config(format!(
                "batch {} exceeds dataset size {}",
                self.batch, self.dataset.n
            )));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        self.dataset.validate()?;
        self.model.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Which parameter groups held gradients during the last step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradFlow {
    pub generator_in_d_step: bool,
    pub discriminator_in_d_step: bool,
    pub discriminator_in_g_step: bool,
    pub hfd_in_g_step: bool,
    pub generator_in_g_step: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: u64,
    g_adam_step: u64,
    d_adam_step: u64,
    hfd_adam_step: u64,
    config: TrainConfig,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub hfd: HfdHeads,
    pub g_adam: AdamState,
    pub d_adam: AdamState,
    pub hfd_adam: AdamState,
    iteration: u64,
    data: ImageSet,
    sampler: BatchSampler,
    last_flow: GradFlow,
}

fn finite(term: &'static str, iteration: u64, tape: &Tape, v: Var) -> Result<f32> {
    let value = tape.value(v).item()?;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term,
            iteration,
            value,
        })
    }
}

pub fn latent(seed: u64, stream: Stream, index: u64, n: usize, dim: usize) -> Tensor {
    Tensor::randn([n, dim, 1, 1], 1.0, &mut stream_rng(seed, stream, index))
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = config.dataset.build()?;
        Self::with_data(config, data)
    }

    /// Build with an already materialised image set.
    pub fn with_data(config: TrainConfig, data: ImageSet) -> Result<Self> {
        config.validate()?;
        if data.size() != config.dataset.size || data.len() < config.batch {
            return Err(Error::Config(format!(
                "image set ({} images of {}px) does not fit batch {} at {}px",
                data.len(),
                data.size(),
                config.batch,
                config.dataset.size
            )));
        }
        let mut rng = stream_rng(config.seed, Stream::Init, 0);
        let generator = Generator::new(&config.model, &mut rng);
        let discriminator = Discriminator::new(&config.model, &mut rng);
        let hfd = HfdHeads::new(&config.model.d_tap_channels(), config.model.hfd_width, &mut rng);
        let g_adam = AdamState::new(&generator.params, config.adam);
        let d_adam = AdamState::new(&discriminator.params, config.adam);
        let hfd_adam = AdamState::new(&hfd.params, config.adam);
        let sampler = BatchSampler::new(data.len(), config.batch, config.seed)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            hfd,
            g_adam,
            d_adam,
            hfd_adam,
            iteration: 0,
            data,
            sampler,
            last_flow: GradFlow::default(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn data(&self) -> &ImageSet {
        &self.data
    }

    pub fn last_grad_flow(&self) -> GradFlow {
        self.last_flow
    }

    /// Draw the next batch and run one D update followed by one G update.
    pub fn step(&mut self) -> Result<LossReport> {
        let idx = self.sampler.next_indices();
        let real = self.data.gather(&idx)?;
        self.step_on(&real)
    }

    /// One training step on an explicit real batch.
    pub fn step_on(&mut self, real: &Tensor) -> Result<LossReport> {
        let it = self.iteration;
        let n = real.shape().n;
        if n < 2 {
            return Err(Error::invalid("a training batch needs at least 2 images"));
        }
        let ab = self.config.ablation;
        let dim = self.generator.latent_dim();
        let mut report = LossReport {
            iteration: it,
            ..Default::default()
        };

        // discriminator update
        let z = latent(self.config.seed, Stream::LatentD, it, n, dim);
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, false);
        let db = self.discriminator.params.bind(&mut tape, true);
        let hb = self.hfd.params.bind(&mut tape, true);
        let zv = tape.constant(z);
        let fake = self.generator.forward(&mut tape, &gb, zv, ab.fsc)?.image;
        let fake = tape.detach(fake);
        let xv = tape.constant(real.clone());
        let d_real = self.discriminator.forward(&mut tape, &db, xv, true)?;
        let d_fake = self.discriminator.forward(&mut tape, &db, fake, false)?;
        let l_d = hinge_d_loss(&mut tape, d_real.score, d_fake.score);
        let l_recons = recon_loss(&mut tape, d_real.recon.expect("requested"), xv)?;
        let l_d_hf = if ab.hfd {
            let rs = self.hfd.scores(&mut tape, &hb, &d_real.taps)?;
            let fs = self.hfd.scores(&mut tape, &hb, &d_fake.taps)?;
            let (total, per_scale) = hfd_d_loss(&mut tape, &rs, &fs)?;
            for (s, v) in per_scale {
                report.d_hf_per_scale.insert(s, finite("l_d_hf", it, &tape, v)?);
            }
            Some(total)
        } else {
            None
        };
        report.l_d = finite("l_d", it, &tape, l_d)?;
        report.l_recons = finite("l_recons", it, &tape, l_recons)?;
        if let Some(v) = l_d_hf {
            report.l_d_hf = finite("l_d_hf", it, &tape, v)?;
        }
        let d_total = d_objective(&mut tape, l_d, l_recons, l_d_hf, ab)?;
        tape.backward(d_total)?;
        let mut flow = GradFlow {
            generator_in_d_step: gb.any_grad(&tape),
            discriminator_in_d_step: db.any_grad(&tape),
            ..Default::default()
        };
        let real_taps: Vec<_> = d_real
            .taps
            .iter()
            .map(|(s, v)| (s, tape.value(v).clone()))
            .collect();
        self.d_adam.update(&mut self.discriminator.params, &db.grads(&tape))?;
        if ab.hfd {
            self.hfd_adam.update(&mut self.hfd.params, &hb.grads(&tape))?;
        }
        drop(tape);

        // generator update
        let z = latent(self.config.seed, Stream::LatentG, it, n, dim);
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, true);
        let db = self.discriminator.params.bind(&mut tape, false);
        let hb = self.hfd.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let g_out = self.generator.forward(&mut tape, &gb, zv, ab.fsc)?;
        let d_fake = self.discriminator.forward(&mut tape, &db, g_out.image, false)?;
        let l_g = hinge_g_loss(&mut tape, d_fake.score);
        let l_g_hf = if ab.hfd {
            let fs = self.hfd.scores(&mut tape, &hb, &d_fake.taps)?;
            Some(hfd_g_loss(&mut tape, &fs, self.config.hfd_g_sign)?)
        } else {
            None
        };
        let l_align = if ab.hfa {
            let mut cached = FeatureTaps::new(TapSource::Discriminator);
            for (scale, value) in real_taps {
                let v = tape.constant(value);
                cached.insert(&tape, scale, v)?;
            }
            let hfa = hfa_loss(&mut tape, &cached, &g_out.taps)?;
            for (s, v) in hfa.per_scale {
                report.align_per_scale.insert(s, finite("l_align", it, &tape, v)?);
            }
            Some(hfa.total)
        } else {
            None
        };
        report.l_g = finite("l_g", it, &tape, l_g)?;
        if let Some(v) = l_g_hf {
            report.l_g_hf = finite("l_g_hf", it, &tape, v)?;
        }
        if let Some(v) = l_align {
            report.l_align = finite("l_align", it, &tape, v)?;
        }
        let g_total = g_objective(&mut tape, l_g, l_g_hf, l_align, ab)?;
        tape.backward(g_total)?;
        flow.generator_in_g_step = gb.any_grad(&tape);
        flow.discriminator_in_g_step = db.any_grad(&tape);
        flow.hfd_in_g_step = hb.any_grad(&tape);
        self.g_adam.update(&mut self.generator.params, &gb.grads(&tape))?;

        self.last_flow = flow;
        self.iteration += 1;
        Ok(report)
    }

    /// Discriminator objective on `real` against fakes from latent `z`, without updating.
    pub fn d_objective_value(&self, real: &Tensor, z: &Tensor) -> Result<f64> {
        let ab = self.config.ablation;
        let mut tape = Tape::new();
        let gb = self.generator.params.bind(&mut tape, false);
        let db = self.discriminator.params.bind(&mut tape, false);
        let hb = self.hfd.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let fake = self.generator.forward(&mut tape, &gb, zv, ab.fsc)?.image;
        let xv = tape.constant(real.clone());
        let d_real = self.discriminator.forward(&mut tape, &db, xv, true)?;
        let d_fake = self.discriminator.forward(&mut tape, &db, fake, false)?;
        let l_d = hinge_d_loss(&mut tape, d_real.score, d_fake.score);
        let l_recons = recon_loss(&mut tape, d_real.recon.expect("requested"), xv)?;
        let l_d_hf = if ab.hfd {
            let rs = self.hfd.scores(&mut tape, &hb, &d_real.taps)?;
            let fs = self.hfd.scores(&mut tape, &hb, &d_fake.taps)?;
            Some(hfd_d_loss(&mut tape, &rs, &fs)?.0)
        } else {
            None
        };
        let total = d_objective(&mut tape, l_d, l_recons, l_d_hf, ab)?;
        tape.scalar(total)
    }

    // ---- persistence ----------------------------------------------------------

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            iteration: self.iteration,
            g_adam_step: self.g_adam.step,
            d_adam_step: self.d_adam.step,
            hfd_adam_step: self.hfd_adam.step,
            config: self.config.clone(),
        };
        let meta = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut entries = Vec::new();
        for (params, adam, tag) in [
            (&self.generator.params, &self.g_adam, "g"),
            (&self.discriminator.params, &self.d_adam, "d"),
            (&self.hfd.params, &self.hfd_adam, "hfd"),
        ] {
            for (i, (name, value)) in params.iter().enumerate() {
                entries.push((format!("param/{name}"), value.clone()));
                entries.push((format!("adam.{tag}.m/{name}"), adam.m[i].clone()));
                entries.push((format!("adam.{tag}.v/{name}"), adam.v[i].clone()));
            }
        }
        Ok(Checkpoint { meta, entries })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::skeleton(ck)?;
        t.restore(ck)?;
        Ok(t)
    }

    fn skeleton(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            toml::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        Trainer::new(meta.config)
    }

    /// Load parameters, optimizer state and counters from `ck`.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let meta: CheckpointMeta =
            toml::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let fetch = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = ck
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {key} has shape {}, expected {}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        for (params, adam, tag, step) in [
            (&mut self.generator.params, &mut self.g_adam, "g", meta.g_adam_step),
            (&mut self.discriminator.params, &mut self.d_adam, "d", meta.d_adam_step),
            (&mut self.hfd.params, &mut self.hfd_adam, "hfd", meta.hfd_adam_step),
        ] {
            let names: Vec<String> = params.names().to_vec();
            for (i, name) in names.iter().enumerate() {
                let p = fetch(format!("param/{name}"), &params.values()[i])?;
                adam.m[i] = fetch(format!("adam.{tag}.m/{name}"), &adam.m[i])?;
                adam.v[i] = fetch(format!("adam.{tag}.v/{name}"), &adam.v[i])?;
                params.values_mut()[i] = p;
            }
            adam.step = step;
        }
        self.iteration = meta.iteration;
        self.sampler.seek(meta.iteration * self.config.batch as u64);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Result of [`train_loop`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub generator: ParamSet,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:06}.bin"))
}

/// Run (or continue) training until `config.iterations` steps are done.
pub fn train_loop(trainer: &mut Trainer) -> Result<TrainOutcome> {
    let config = trainer.config.clone();
    let mut log = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let fresh = trainer.iteration() == 0 || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{}", LossReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            }
            Some((path, w))
        }
        None => None,
    };
    let mut reports = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.iteration() < config.iterations {
        let report = trainer.step()?;
        let done = trainer.iteration();
        if let Some((path, w)) = log.as_mut() {
            if report.iteration % config.log_interval == 0 || done == config.iterations {
                writeln!(w, "{}", report.csv_row()).map_err(|e| Error::io(&*path, e))?;
            }
        }
        if done.is_multiple_of(100) {
            info!(
                "iter {done}: l_d={:.4} l_g={:.4} l_d_hf={:.4} l_g_hf={:.4} l_align={:.4} l_recons={:.4}",
                report.l_d, report.l_g, report.l_d_hf, report.l_g_hf, report.l_align, report.l_recons
            );
        }
        reports.push(report);
        if let Some(dir) = &config.out_dir {
            let periodic = config.checkpoint_interval > 0 && done.is_multiple_of(config.checkpoint_interval);
            if periodic || done == config.iterations {
                if let Some((path, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(&*path, e))?;
                }
                let path = checkpoint_path(dir, done);
                trainer.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    let log_path = match log {
        Some((path, mut w)) => {
            w.flush().map_err(|e| Error::io(&path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        reports,
        checkpoints,
        log_path,
        generator: trainer.generator.params.clone(),
    })
}

/// Generate `n` images in fixed chunks so results do not depend on `n`'s split.
pub fn sample_images(generator: &Generator, n: usize, seed: u64, fsc: bool) -> Result<Option<ImageSet>> {
    if n == 0 {
        return Ok(None);
    }
    let mut parts = Vec::new();
    for (chunk, start) in (0..n).step_by(SAMPLE_CHUNK).enumerate() {
        let z = latent(seed, Stream::Sample, chunk as u64, SAMPLE_CHUNK, generator.latent_dim());
        let take = (n - start).min(SAMPLE_CHUNK);
        let mut tape = Tape::new();
        let bound = generator.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let img = generator.forward(&mut tape, &bound, zv, fsc)?.image;
        let value = tape.value(img);
        let len = value.shape().sample_len();
        let s = value.shape();
        parts.push(Tensor::new([take, s.c, s.h, s.w], value.data()[..take * len].to_vec())?);
    }
    ImageSet::new(Tensor::stack(&parts.iter().collect::<Vec<_>>())?).map(Some)
}

/// Load a checkpoint and write `n` PNGs named `sample_XXXX.png` into `out_dir`.
pub fn sample_to_dir(checkpoint: &Path, n: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let meta: CheckpointMeta =
        toml::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut rng = stream_rng(meta.config.seed, Stream::Init, 0);
    let mut generator = Generator::new(&meta.config.model, &mut rng);
    let names: Vec<String> = generator.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let key = format!("param/{name}");
        let t = ck
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
        if t.shape() != generator.params.values()[i].shape() {
            return Err(Error::Checkpoint(format!("entry {key} has the wrong shape")));
        }
        generator.params.values_mut()[i] = t.clone();
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match sample_images(&generator, n, seed, meta.config.ablation.fsc)? {
        Some(set) => set.save_pngs(out_dir, "sample_"),
        None => Ok(Vec::new()),
    }
}

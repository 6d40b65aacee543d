//! Corpus loading, crop scheduling, the AdamW loop and resumable runs.
//!
//! One epoch is one pass over the corpus with one random crop per
//! utterance. The utterance order and crop offsets of epoch `e` come from a
//! ChaCha8 stream keyed by `(seed, e)`, so a run is fully described by its
//! seed and the `(epoch, batch_in_epoch)` position; resuming a checkpoint
//! replays exactly the batches an uninterrupted run would have seen.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Header, Progress};
use crate::error::{Error, Result};
use crate::io::{read_wav, write_phsc};
use crate::losses::{loss_with_grad, LossBreakdown, LossConfig};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig};
use crate::spectral::{amplitude, log_amplitude, phase_of, StftConfig, StftProcessor, LOG_AMPLITUDE_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    /// Utterances scored once per epoch for monitoring only.
    pub val_dir: Option<PathBuf>,
    pub lr_init: f64,
    pub lr_decay_per_epoch: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub max_epochs: u64,
    /// Optional cap on optimizer steps across the whole run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data/train"),
            val_dir: None,
            lr_init: 2e-4,
            lr_decay_per_epoch: 0.999,
            adam_beta1: 0.8,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            segment_samples: 8000,
            max_epochs: 3100,
            max_steps: None,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stft: &StftConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return bad(format!("lr_decay_per_epoch must be in (0, 1], got {}", self.lr_decay_per_epoch));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return bad(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.segment_samples == 0 || !self.segment_samples.is_multiple_of(stft.hop_length) {
            return bad(format!(
                "segment_samples {} is not a positive multiple of the hop {}",
                self.segment_samples, stft.hop_length
            ));
        }
        if stft.frame_count(self.segment_samples) < 2 {
            return bad("segments must span at least two frames".into());
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate used throughout epoch `epoch`: `lr_init · decayᵉᵖᵒᶜʰ`.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr_init * self.lr_decay_per_epoch.powf(epoch as f64)
    }
}

/// Everything a run needs, as read from one TOML file with `[stft]`,
/// `[model]`, `[loss]` and `[train]` tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.stft)?;
        if self.model.input_bins != self.stft.bins() {
            return Err(Error::Config(format!(
                "model.input_bins {} does not match the {} STFT bins",
                self.model.input_bins,
                self.stft.bins()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken from the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.train.data_dir = base.join(&cfg.train.data_dir);
        cfg.train.val_dir = cfg.train.val_dir.map(|d| base.join(d));
        Ok(cfg)
    }
}

/// WAV files in `dir` sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Decoded training utterances, each at least one segment long.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub names: Vec<String>,
    pub signals: Vec<Vec<f64>>,
    /// Which files were shorter than a segment and got zero-padded.
    pub padded: Vec<bool>,
}

impl Corpus {
    pub fn load(dir: &Path, stft: &StftConfig, segment_samples: usize) -> Result<Self> {
        let files = list_wavs(dir)?;
        if files.is_empty() {
            return Err(Error::Empty(format!("no WAV files in {}", dir.display())));
        }
        let mut corpus = Corpus {
            names: Vec::new(),
            signals: Vec::new(),
            padded: Vec::new(),
        };
        for path in files {
            let mut x = read_wav(&path, stft.sample_rate)?.into_samples();
            let short = x.len() < segment_samples;
            if short {
                warn!(
                    "{} has {} samples, zero-padded to {segment_samples}",
                    path.display(),
                    x.len()
                );
                x.resize(segment_samples, 0.0);
            }
            corpus.names.push(path.file_name().unwrap().to_string_lossy().into_owned());
            corpus.signals.push(x);
            corpus.padded.push(short);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }
}

/// One crop: utterance index and hop-aligned start sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub utterance: usize,
    pub start: usize,
}

/// The shuffled crops of epoch `epoch`.
pub fn epoch_plan(corpus: &Corpus, segment_samples: usize, hop: usize, seed: u64, epoch: u64) -> Vec<Crop> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|u| {
            let slots = (corpus.signals[u].len() - segment_samples) / hop;
            Crop {
                utterance: u,
                start: hop * rng.random_range(0..=slots),
            }
        })
        .collect()
}

/// Network input and target for one segment: `(log A, P)`, both `F × N`.
pub fn features(stft: &StftProcessor, samples: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
    let spec = stft.forward_samples(samples)?;
    let log_amp = log_amplitude(&amplitude(&spec), LOG_AMPLITUDE_FLOOR)?;
    Ok((log_amp, phase_of(&spec).into_values()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        epoch: u64,
        step: u64,
        lr: f64,
        ip: f64,
        gd: f64,
        iaf: f64,
        total: f64,
    },
    Epoch {
        epoch: u64,
        steps: u64,
        lr: f64,
        train: LossBreakdown,
        val: Option<LossBreakdown>,
    },
}

/// Outcome of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epoch: u64,
    /// Steps completed including this one.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Present when this step finished an epoch.
    pub epoch_summary: Option<LogRecord>,
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<LossBreakdown>,
    pub progress: Progress,
    pub final_checkpoint: PathBuf,
}

pub struct Trainer {
    cfg: ExperimentConfig,
    model: Model<f32>,
    optimizer: AdamW,
    progress: Progress,
    corpus: Corpus,
    val: Option<Corpus>,
    stft: StftProcessor,
    out_dir: PathBuf,
    grads: ModelParams<f32>,
    /// Losses of the current epoch so far, for the epoch summary.
    epoch_losses: Vec<LossBreakdown>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.nspp";

impl Trainer {
    /// A fresh run with parameters initialized from the training seed.
    pub fn new(cfg: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
        let optimizer = AdamW::new(cfg.train.adam(), &cfg.model)?;
        let progress = Progress {
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            seed: cfg.train.seed,
        };
        Self::assemble(cfg, out_dir.into(), model, optimizer, progress)
    }

    /// Continues from a checkpoint written by an earlier run. The model and
    /// STFT settings must match; the seed recorded in the checkpoint wins.
    pub fn resume(cfg: ExperimentConfig, out_dir: impl Into<PathBuf>, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        let ck = Checkpoint::load(checkpoint)?;
        if ck.header.model != cfg.model {
            return Err(Error::Incompatible(format!(
                "{} was trained with a different model configuration",
                checkpoint.display()
            )));
        }
        if ck.header.stft.as_ref().is_some_and(|s| *s != cfg.stft) {
            return Err(Error::Incompatible(format!(
                "{} was trained with different STFT settings",
                checkpoint.display()
            )));
        }
        let progress = ck.header.progress.ok_or_else(|| {
            Error::Incompatible(format!("{} holds no training progress", checkpoint.display()))
        })?;
        if progress.seed != cfg.train.seed {
            warn!(
                "config seed {} differs from checkpoint seed {}; keeping the checkpoint's",
                cfg.train.seed, progress.seed
            );
        }
        let optimizer = match ck.optimizer {
            Some(mut o) => {
                o.config = cfg.train.adam();
                o
            }
            None => {
                warn!("{} has no optimizer state; moments start from zero", checkpoint.display());
                AdamW::new(cfg.train.adam(), &cfg.model)?
            }
        };
        let model = Model::new(ck.header.model, ck.params)?;
        Self::assemble(cfg, out_dir.into(), model, optimizer, progress)
    }

    fn assemble(
        cfg: ExperimentConfig,
        out_dir: PathBuf,
        model: Model<f32>,
        optimizer: AdamW,
        progress: Progress,
    ) -> Result<Self> {
        let corpus = Corpus::load(&cfg.train.data_dir, &cfg.stft, cfg.train.segment_samples)?;
        let val = match &cfg.train.val_dir {
            Some(d) => Some(Corpus::load(d, &cfg.stft, cfg.train.segment_samples)?),
            None => None,
        };
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        info!(
            "{} training utterances, {} parameters, starting at epoch {} step {}",
            corpus.len(),
            model.params().parameter_count(),
            progress.epoch,
            progress.step
        );
        Ok(Self {
            stft: StftProcessor::new(&cfg.stft)?,
            grads: ModelParams::zeros(&cfg.model),
            cfg,
            model,
            optimizer,
            progress,
            corpus,
            val,
            out_dir,
            epoch_losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn lr(&self) -> f64 {
        self.cfg.train.lr_at(self.progress.epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: Header {
                model: self.cfg.model.clone(),
                stft: Some(self.cfg.stft.clone()),
                loss: Some(self.cfg.loss.clone()),
                progress: Some(self.progress),
                optimizer: None,
            },
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    fn finished(&self) -> bool {
        self.progress.epoch >= self.cfg.train.max_epochs
            || self.cfg.train.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// Trains until the epoch or step budget is spent, appending to the log
    /// and writing periodic and final checkpoints into the output directory.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let log_path = self.out_dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut emit = |rec: &LogRecord| -> Result<()> {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))
        };

        let mut steps = Vec::new();
        while !self.finished() {
            let report = self.train_step()?;
            let b = report.loss;
            steps.push(b);
            emit(&LogRecord::Step {
                epoch: report.epoch,
                step: report.step,
                lr: report.lr,
                ip: b.ip,
                gd: b.gd,
                iaf: b.iaf,
                total: b.total,
            })?;
            if let Some(summary) = report.epoch_summary {
                if let LogRecord::Epoch { epoch, train, val, .. } = &summary {
                    info!(
                        "epoch {epoch} step {} loss {:.4} val {}",
                        report.step,
                        train.total,
                        val.map_or("-".to_string(), |v| format!("{:.4}", v.total))
                    );
                }
                emit(&summary)?;
            }
            let every = self.cfg.train.checkpoint_every;
            if every > 0 && self.progress.step.is_multiple_of(every) {
                let path = self.out_dir.join(format!("step_{:08}.nspp", self.progress.step));
                self.checkpoint().save(&path)?;
            }
        }
        let final_checkpoint = self.out_dir.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&final_checkpoint)?;
        Ok(TrainSummary {
            steps,
            progress: self.progress,
            final_checkpoint,
        })
    }

    /// The crops making up the next batch.
    fn next_batch(&self) -> Vec<Crop> {
        let t = &self.cfg.train;
        let plan = epoch_plan(
            &self.corpus,
            t.segment_samples,
            self.cfg.stft.hop_length,
            self.progress.seed,
            self.progress.epoch,
        );
        let start = self.progress.batch_in_epoch as usize * t.batch_size;
        plan[start..(start + t.batch_size).min(plan.len())].to_vec()
    }

    /// One optimizer update on the next batch. Closes the epoch when the
    /// batch was its last.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let seg = self.cfg.train.segment_samples;
        let crops = self.next_batch();
        let items = crops
            .iter()
            .map(|c| features(&self.stft, &self.corpus.signals[c.utterance][c.start..c.start + seg]))
            .collect::<Result<Vec<_>>>()?;

        for (_, g) in self.grads.tensors_mut() {
            g.fill(0.0);
        }
        let scale = 1.0 / items.len() as f64;
        let mut losses = Vec::with_capacity(items.len());
        for (log_amp, phase) in &items {
            let (out, cache) = self.model.forward_train(log_amp.view())?;
            let (breakdown, grad) = loss_with_grad(out.phase.view(), phase.view(), &self.cfg.loss)?;
            losses.push(breakdown);
            if !breakdown.is_finite() {
                break;
            }
            self.model.backward(&cache, (grad * scale).view(), &mut self.grads);
        }
        let mean = LossBreakdown::mean(&losses);
        if !mean.is_finite() || !self.grads.is_finite() {
            return Err(self.dump_batch(&crops, &items));
        }
        let lr = self.lr();
        self.optimizer.update(self.model.params_mut(), &self.grads, lr);
        self.progress.step += 1;
        self.progress.batch_in_epoch += 1;
        self.epoch_losses.push(mean);

        let mut report = StepReport {
            epoch: self.progress.epoch,
            step: self.progress.step,
            lr,
            loss: mean,
            epoch_summary: None,
        };
        let batches = self.corpus.len().div_ceil(self.cfg.train.batch_size) as u64;
        if self.progress.batch_in_epoch == batches {
            report.epoch_summary = Some(LogRecord::Epoch {
                epoch: self.progress.epoch,
                steps: batches,
                lr,
                train: LossBreakdown::mean(&self.epoch_losses),
                val: self.validate()?,
            });
            self.epoch_losses.clear();
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
        }
        Ok(report)
    }

    fn dump_batch(&self, crops: &[Crop], items: &[(Array2<f64>, Array2<f64>)]) -> Error {
        let dir = self
            .out_dir
            .join(format!("nonfinite_epoch{}_step{}", self.progress.epoch, self.progress.step));
        let written = (|| -> Result<()> {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut manifest = String::new();
            for (i, (crop, (log_amp, phase))) in crops.iter().zip(items).enumerate() {
                write_phsc(dir.join(format!("item{i:02}_logamp.phsc")), log_amp)?;
                write_phsc(dir.join(format!("item{i:02}_phase.phsc")), phase)?;
                manifest.push_str(&format!(
                    "item{i:02} {} start {}\n",
                    self.corpus.names[crop.utterance], crop.start
                ));
            }
            let path = dir.join("batch.txt");
            File::create(&path)
                .and_then(|mut f| f.write_all(manifest.as_bytes()))
                .map_err(|e| Error::io(&path, e))
        })();
        if let Err(e) = written {
            warn!("could not dump the offending batch: {e}");
        }
        Error::NonFinite {
            epoch: self.progress.epoch as usize,
            step: self.progress.step as usize,
            dump: dir,
        }
    }

    /// Mean loss over whole validation utterances.
    fn validate(&self) -> Result<Option<LossBreakdown>> {
        let Some(val) = &self.val else {
            return Ok(None);
        };
        let losses = val
            .signals
            .iter()
            .map(|x| {
                let (log_amp, phase) = features(&self.stft, x)?;
                let out = self.model.forward(log_amp.view())?;
                Ok(loss_with_grad(out.phase.view(), phase.view(), &self.cfg.loss)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(LossBreakdown::mean(&losses)))
    }
}

/// Mean loss of `model` over whole utterances, without gradients.
pub fn evaluate_loss(
    model: &Model<f32>,
    signals: &[Vec<f64>],
    stft: &StftConfig,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let proc = StftProcessor::new(stft)?;
    let losses = signals
        .iter()
        .map(|x| {
            let (log_amp, phase) = features(&proc, x)?;
            let out = model.forward(log_amp.view())?;
            Ok(loss_with_grad(out.phase.view(), phase.view(), loss)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&losses))
}

//! Mini-batch training with Adam, a per-step CSV log and epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::{config_path, save_checkpoint};
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::frontend::FeaturePair;
use crate::heads::{batch_loss, LossConfig, LossTerms, Targets};
use crate::model::{stream_rng, Model};
use crate::nn::Ctx;
use crate::numerics::{Adam, Graph, Optimizer};

pub const LOG_HEADER: &str = "step,total,l_f,l_reg,l_inter,l_intra";
pub const CHECKPOINT_FILE: &str = "checkpoint.mlvg";
pub const LOG_FILE: &str = "train_log.csv";

const STREAM_SHUFFLE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: u64,
    pub terms: LossTerms<f64>,
    pub no_foreground: usize,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let t = &self.terms;
        format!("{},{},{},{},{},{}", self.step, t.total, t.l_f, t.l_reg, t.l_inter, t.l_intra)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub loss: LossConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Samples seen without any foreground clip.
    pub no_foreground: u64,
}

pub fn loss_config(cfg: &crate::data::RunConfig) -> LossConfig {
    LossConfig {
        weights: cfg.loss,
        margin: cfg.margin,
        temperature: cfg.temperature,
    }
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        Self {
            opt: Adam::new(model.cfg.lr),
            loss: loss_config(&model.cfg),
            model,
            step: 0,
            epoch: 0,
            no_foreground: 0,
        }
    }

    /// Sample order of `epoch`, a pure function of the seed and the epoch.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.model.cfg.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), STREAM_SHUFFLE);
        order.shuffle(&mut rng);
        order
    }

    /// Loss of one batch at the current weights, with the dropout masks the
    /// next training step would use.
    pub fn batch_terms(&self, batch: &[&GroundingSample]) -> Result<LossTerms<f64>> {
        let mut g = Graph::no_grad();
        let (terms, _) = self.forward_batch(&mut g, batch)?;
        Ok(terms.values(&g))
    }

    fn forward_batch(&self, g: &mut Graph, batch: &[&GroundingSample]) -> Result<(LossTerms<crate::numerics::Var>, usize)> {
        let cfg = &self.model.cfg;
        let mut heads = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (k, s) in batch.iter().enumerate() {
            self.model.check_sample(s)?;
            let pair = FeaturePair::new(s.video.clone(), s.query.clone())?;
            let mut ctx = Ctx::train(cfg.dropout, cfg.seed, self.step, k as u64);
            heads.push(self.model.forward(g, &pair, &mut ctx)?.heads);
            targets.push(Targets {
                spans: s.spans.clone(),
                saliency: s.saliency.clone(),
            });
        }
        let refs: Vec<&Targets> = targets.iter().collect();
        let loss = batch_loss(g, &heads, &refs, &self.loss)?;
        Ok((loss.terms, loss.no_foreground))
    }

    pub fn train_step(&mut self, batch: &[&GroundingSample]) -> Result<StepRecord> {
        let mut g = Graph::new();
        let (terms, no_fg) = self.forward_batch(&mut g, batch)?;
        let values = terms.values(&g);
        let step = self.step + 1;
        if !values.total.is_finite() {
            return Err(Error::Numeric {
                what: "training loss".into(),
                step: step as usize,
            });
        }
        g.backward(terms.total)?;
        let grads = g.param_grads();
        if !grads.is_finite() {
            return Err(Error::Numeric {
                what: "gradients".into(),
                step: step as usize,
            });
        }
        self.opt.step(&mut self.model.store, &grads);
        self.step = step;
        self.no_foreground += no_fg as u64;
        Ok(StepRecord {
            step,
            terms: values,
            no_foreground: no_fg,
        })
    }

    pub fn run_epoch(&mut self, data: &[GroundingSample], mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid("empty training set".into()));
        }
        let order = self.epoch_order(data.len(), self.epoch);
        for chunk in order.chunks(self.model.cfg.batch_size) {
            let batch: Vec<&GroundingSample> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = self.train_step(&batch)?;
            on_step(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// First batch of the next epoch, in training order.
    pub fn next_batch<'a>(&self, data: &'a [GroundingSample]) -> Vec<&'a GroundingSample> {
        let order = self.epoch_order(data.len(), self.epoch);
        order.iter().take(self.model.cfg.batch_size).map(|&i| &data[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub log: PathBuf,
}

/// Trains until `epochs` epochs are complete, writing `checkpoint.mlvg` (plus
/// its config) before the first step and after every epoch, and appending
/// every step to `train_log.csv`. The frozen block is verified after each
/// epoch. On any error the last written checkpoint stays in place.
///
/// `after_epoch` runs once a checkpoint has been written.
pub fn run_training(
    trainer: &mut Trainer,
    data: &[GroundingSample],
    out_dir: &Path,
    epochs: u64,
    mut after_epoch: impl FnMut(&mut Trainer) -> Result<()>,
) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let log = out_dir.join(LOG_FILE);
    let resuming = trainer.step > 0 && log.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(resuming)
        .write(true)
        .truncate(!resuming)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    if !resuming {
        writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(&log, e))?;
    }
    if trainer.epoch == 0 || !checkpoint.exists() {
        save_checkpoint(&checkpoint, trainer)?;
    }
    while trainer.epoch < epochs {
        let mut lines = String::new();
        let result = trainer.run_epoch(data, |r| {
            lines.push_str(&r.csv_line());
            lines.push('\n');
            Ok(())
        });
        file.write_all(lines.as_bytes()).map_err(|e| Error::io(&log, e))?;
        result?;
        if !trainer.model.verify_frozen() {
            return Err(Error::Invalid(format!(
                "frozen block changed during epoch {}",
                trainer.epoch
            )));
        }
        save_checkpoint(&checkpoint, trainer)?;
        after_epoch(trainer)?;
    }
    Ok(TrainOutputs {
        config: config_path(&checkpoint),
        checkpoint,
        log,
    })
}

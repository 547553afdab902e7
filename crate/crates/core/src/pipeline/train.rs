//! Seeded, resumable training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::TrainConfig;
use super::data::{augment, SegSample};
use super::model::{organ_prompts, pooled_text, PgSeg};
use crate::autodiff::Real;
use crate::error::{ensure, Error, Result};
use crate::losses_metrics::{combined_loss_graph, downsample_labels, evaluate_case, target_ids};
use crate::nn::{AdamW, Ctx, ParamStore};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const SNAPSHOT_DIR: &str = "nan_snapshot";
const AUGMENT_DEGREES: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub ce_low: f64,
    pub dice_low: f64,
    pub ce_high: f64,
    pub dice_high: f64,
    pub lr: f64,
    pub val_mdice: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub loss: f64,
    pub terms: [f64; 4],
    pub lr: f64,
}

/// Batches stacked for the graph.
pub fn stack_images(samples: &[&SegSample]) -> ArrayD<f32> {
    let (h, w) = samples[0].size();
    let mut out = ArrayD::zeros(IxDyn(&[samples.len(), 1, h, w]));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(&s.image);
    }
    out
}

pub fn stack_labels(samples: &[&SegSample]) -> Array3<u8> {
    let (h, w) = samples[0].size();
    let mut out = Array3::zeros((samples.len(), h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&s.label);
    }
    out
}

/// Model, parameters and optimizer state of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: PgSeg,
    pub store: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, text: &Array1<f64>) -> Result<Self> {
        config.validate()?;
        let (model, store) = PgSeg::new(&config.model, config.ablation, text, config.seed)?;
        let optimizer = AdamW::new(config.optimizer.clone(), store.len());
        Ok(Self { config, model, store, optimizer, epoch: 0, history: Vec::new() })
    }

    /// Fresh run with the prompt embedding chosen by the config.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let prompts = organ_prompts(config.model.prompts, None)?;
        let text = pooled_text(&prompts, config.model.text_dim)?;
        Self::new(config, &text)
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint<f32>) -> Self {
        Self {
            config: ck.config,
            model: ck.model,
            store: ck.store,
            optimizer: ck.optimizer,
            epoch: ck.epoch,
            history: ck.history,
        }
    }

    pub fn check_sample(&self, s: &SegSample) -> Result<()> {
        let n = self.config.model.image_size();
        ensure!(
            s.size() == (n, n),
            Error::Shape(format!("sample {} is {:?}, model expects {n}x{n}", s.case_id, s.size()))
        );
        Ok(())
    }

    /// One optimizer update on a batch. A non-finite loss or gradient is
    /// returned as a numeric error before any parameter changes.
    pub fn step(&mut self, batch: &[&SegSample]) -> Result<StepLog> {
        ensure!(!batch.is_empty(), Error::Argument("empty batch".into()));
        for s in batch {
            self.check_sample(s)?;
        }
        let labels = stack_labels(batch);
        let classes = self.config.model.classes;
        let low_t = target_ids(&downsample_labels(&labels, self.config.loss.low_res)?, classes)?;
        let high_t = target_ids(&labels, classes)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.g.constant(stack_images(batch));
        let out = self.model.forward(&mut ctx, x)?;
        let (loss, terms) = combined_loss_graph(&mut ctx.g, out.low, out.high, &low_t, &high_t, self.config.loss.lambda_loss);
        let loss_v = ctx.g.scalar(loss).as_f64();
        let terms = terms.map(|t| ctx.g.scalar(t).as_f64());
        ensure!(loss_v.is_finite(), Error::Numeric(format!("loss is {loss_v} at step {}", self.optimizer.step)));
        let mut grads = ctx.g.backward(loss);
        let mut updates = Vec::new();
        for (id, var) in ctx.bound().collect::<Vec<_>>() {
            if !self.store.get(id).trainable {
                continue;
            }
            if let Some(g) = grads.take(var) {
                ensure!(
                    g.iter().all(|v| v.is_finite()),
                    Error::Numeric(format!("non-finite gradient for {} at step {}", self.store.get(id).name, self.optimizer.step))
                );
                updates.push((id, g));
            }
        }
        drop(ctx);
        let lr = self.optimizer.learning_rate(self.optimizer.step);
        self.optimizer.step(&mut self.store, updates);
        Ok(StepLog { loss: loss_v, terms, lr })
    }

    /// Mean per-case mDice of the model on `samples`.
    pub fn mean_mdice(&self, samples: &[SegSample]) -> Result<f64> {
        ensure!(!samples.is_empty(), Error::Argument("no samples".into()));
        let mut total = 0.0;
        for chunk in samples.chunks(self.config.batch_size) {
            let refs: Vec<&SegSample> = chunk.iter().collect();
            let pred = self.model.predict(&self.store, &stack_images(&refs))?;
            for (i, s) in chunk.iter().enumerate() {
                total += evaluate_case(&s.case_id, pred.labels.index_axis(Axis(0), i), s.label.view())?.mdice;
            }
        }
        Ok(total / samples.len() as f64)
    }

    /// Slices used for training: all of them, or a seeded subset when
    /// `train_fraction < 1`.
    pub fn training_subset<'a>(&self, dataset: &'a [SegSample]) -> Vec<&'a SegSample> {
        let mut refs: Vec<&SegSample> = dataset.iter().collect();
        if self.config.train_fraction < 1.0 {
            let keep = ((dataset.len() as f64 * self.config.train_fraction).ceil() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(u64::MAX);
            refs.shuffle(&mut rng);
            refs.truncate(keep);
            refs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        }
        refs
    }

    /// Runs epochs until `config.epochs` or `max_steps`. With `out`, each
    /// epoch appends to `metrics.jsonl` and rewrites the checkpoint there.
    pub fn fit(&mut self, dataset: &[SegSample], val: &[SegSample], out: Option<&Path>) -> Result<&[EpochLog]> {
        ensure!(!dataset.is_empty(), Error::Argument("training set is empty".into()));
        for s in dataset.iter().chain(val) {
            self.check_sample(s)?;
        }
        let train = self.training_subset(dataset);
        let bs = self.config.batch_size;
        while self.epoch < self.config.epochs && !self.budget_spent() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(self.epoch as u64 + 1);
            let mut order = train.clone();
            order.shuffle(&mut rng);
            let (mut sums, mut n) = ([0.0f64; 5], 0usize);
            let mut lr = 0.0;
            for chunk in order.chunks(bs) {
                if self.budget_spent() {
                    break;
                }
                let augmented: Vec<SegSample>;
                let batch: Vec<&SegSample> = if self.config.augment {
                    augmented = chunk.iter().map(|s| augment(s, &mut rng, AUGMENT_DEGREES)).collect();
                    augmented.iter().collect()
                } else {
                    chunk.to_vec()
                };
                let log = match self.step(&batch) {
                    Err(Error::Numeric(msg)) => return Err(self.abort(out, &batch, msg)),
                    other => other?,
                };
                sums[0] += log.loss;
                for (s, t) in sums[1..].iter_mut().zip(log.terms) {
                    *s += t;
                }
                lr = log.lr;
                n += 1;
            }
            self.epoch += 1;
            let every = self.config.eval_every;
            let val_mdice = if !val.is_empty() && every > 0 && self.epoch % every == 0 {
                Some(self.mean_mdice(val)?)
            } else {
                None
            };
            let k = n.max(1) as f64;
            let entry = EpochLog {
                epoch: self.epoch,
                step: self.optimizer.step,
                loss: sums[0] / k,
                ce_low: sums[1] / k,
                dice_low: sums[2] / k,
                ce_high: sums[3] / k,
                dice_high: sums[4] / k,
                lr,
                val_mdice,
            };
            log::info!(
                "epoch {} step {} loss {:.5} val mDice {}",
                entry.epoch,
                entry.step,
                entry.loss,
                val_mdice.map_or("-".into(), |v| format!("{v:.4}"))
            );
            if let Some(dir) = out {
                append_log(&dir.join(METRICS_LOG), &entry)?;
            }
            self.history.push(entry);
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(&self.history)
    }

    fn budget_spent(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.optimizer.step >= m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.config, &self.model, &self.store, &self.optimizer, self.epoch, &self.history)
    }

    /// Writes the current parameters and a diagnostic JSON next to the run,
    /// then returns the numeric error.
    fn abort(&self, out: Option<&Path>, batch: &[&SegSample], msg: String) -> Error {
        let Some(dir) = out else { return Error::Numeric(msg) };
        let snap = dir.join(SNAPSHOT_DIR);
        let written = self.save(&snap).and_then(|_| {
            let nonfinite: Vec<&str> = self
                .store
                .iter()
                .filter(|(_, p)| p.value.iter().any(|v| !v.is_finite()))
                .map(|(_, p)| p.name.as_str())
                .collect();
            let diag = serde_json::json!({
                "error": msg,
                "step": self.optimizer.step,
                "epoch": self.epoch,
                "batch": batch.iter().map(|s| s.case_id.as_str()).collect::<Vec<_>>(),
                "nonfinite_params": nonfinite,
            });
            let path = snap.join("diagnostic.json");
            fs::write(&path, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::io(&path, e))
        });
        match written {
            Ok(()) => Error::Numeric(format!("{msg}; snapshot written to {}", snap.display())),
            Err(e) => Error::Numeric(format!("{msg}; snapshot failed: {e}")),
        }
    }
}

fn append_log(path: &PathBuf, entry: &EpochLog) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(path, e))
}

/// Starts a run in `out`, or resumes the checkpoint already there. Resuming
/// under a config whose hash differs from the stored one is refused.
pub fn train(config: TrainConfig, dataset: &[SegSample], val: &[SegSample], out: &Path) -> Result<Trainer> {
    config.validate()?;
    let mut trainer = if checkpoint::exists(out) {
        let manifest = checkpoint::read_manifest(out)?;
        ensure!(
            manifest.config_hash == config.hash(),
            Error::Config(format!(
                "{} holds a run with config hash {}, this config hashes to {}; refusing to resume",
                out.display(),
                manifest.config_hash,
                config.hash()
            ))
        );
        let mut t = Trainer::from_checkpoint(checkpoint::load(out)?);
        t.config.epochs = config.epochs;
        t.config.max_steps = config.max_steps;
        t.config.eval_every = config.eval_every;
        t
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Trainer::from_config(config)?
    };
    trainer.fit(dataset, val, Some(out))?;
    Ok(trainer)
}

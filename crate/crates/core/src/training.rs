//! Optimization: Noam schedule, Adam, clipping, batching and the fit loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::format::{mask_for_pretraining, SymbolSequence};
use crate::model::{Checkpoint, Model, ModelInput};
use crate::numerics::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Share of general and rhyme positions revealed in the format channel while pretraining.
    pub reveal_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub lr_factor: f64,
    /// Width used by the schedule; the model width when `None`.
    pub schedule_d_model: Option<usize>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Finetune,
            reveal_rate: 0.2,
            batch_size: 16,
            max_steps: 2000,
            warmup_steps: 400,
            lr_factor: 1.0,
            schedule_d_model: None,
            seed: 0,
            checkpoint_every: 500,
            eval_every: 100,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reveal_rate) {
            return Err(Error::Config("reveal_rate must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, eval_every and checkpoint_every must be positive".into()));
        }
        if self.clip_norm <= 0.0 || self.lr_factor <= 0.0 {
            return Err(Error::Config("clip_norm and lr_factor must be positive".into()));
        }
        Ok(())
    }
}

/// `factor · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 - step) as f32;
            }
        }
    }

    fn tensors(&self, names: &[String]) -> Vec<(String, Tensor<f32>)> {
        let m = names.iter().zip(&self.m).map(|(n, t)| (format!("optim.m.{n}"), t.clone()));
        let v = names.iter().zip(&self.v).map(|(n, t)| (format!("optim.v.{n}"), t.clone()));
        m.chain(v).collect()
    }

    fn from_checkpoint(ck: &Checkpoint, model: &Model) -> Result<Self> {
        let mut adam = Self::new(model);
        adam.t = header_num(ck, "optim_t")?;
        for (i, name) in model.names().iter().enumerate() {
            for (kind, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("optim.{kind}.{name}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(adam)
    }
}

fn header_num<T: FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.header
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("missing or bad `{key}` in header")))
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grads(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Random stream for one purpose at one step; resuming needs no saved RNG state.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(purpose));
    rng
}

const MASK_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

/// Padded model input and targets for a batch of sequences.
pub fn batch_input(
    batch: &[&SymbolSequence],
    reveals: Option<&[Vec<Option<TokenId>>]>,
) -> Result<(ModelInput, Vec<TokenId>)> {
    let inputs: Vec<Vec<TokenId>> = batch.iter().map(|s| s.inputs()).collect();
    let streams: Vec<_> = batch.iter().map(|s| s.streams()).collect();
    let none: Vec<Vec<Option<TokenId>>> = match reveals {
        Some(_) => vec![],
        None => batch.iter().map(|s| vec![None; s.len()]).collect(),
    };
    let reveals = reveals.unwrap_or(&none);
    let items: Vec<_> = (0..batch.len())
        .map(|i| (inputs[i].as_slice(), &streams[i], reveals[i].as_slice()))
        .collect();
    let input = ModelInput::new(&items)?;
    let mut targets = vec![PAD_ID; input.batch * input.q_len];
    for (b, s) in batch.iter().enumerate() {
        targets[b * input.q_len..][..s.len()].copy_from_slice(&s.y);
    }
    Ok((input, targets))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// Summed token NLL and token count over `seqs`, without dropout or reveals.
pub fn corpus_nll(model: &Model, seqs: &[SymbolSequence], batch_size: usize) -> Result<(f64, usize)> {
    let mut order: Vec<&SymbolSequence> = seqs.iter().collect();
    order.sort_by_key(|s| s.len());
    let (mut total, mut count) = (0.0, 0);
    for chunk in order.chunks(batch_size.max(1)) {
        let (input, targets) = batch_input(chunk, None)?;
        let logits = model.logits(&input)?;
        let n = targets.iter().filter(|&&t| t != PAD_ID).count();
        total += crate::model::nll(&logits, &targets)? * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// `exp` of the mean token NLL.
pub fn perplexity(model: &Model, seqs: &[SymbolSequence], batch_size: usize) -> Result<f64> {
    let (total, count) = corpus_nll(model, seqs, batch_size)?;
    if count == 0 {
        return Err(Error::EmptyMean);
    }
    Ok((total / count as f64).exp())
}

/// Length-sorted batches visited in a per-epoch shuffled order.
#[derive(Debug, Clone)]
pub struct Batcher {
    batches: Vec<Vec<usize>>,
    seed: u64,
}

impl Batcher {
    pub fn new(seqs: &[SymbolSequence], batch_size: usize, seed: u64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut idx: Vec<usize> = (0..seqs.len()).collect();
        idx.sort_by_key(|&i| (seqs[i].len(), i));
        let batches = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        Ok(Self { batches, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Indices used at `step` (1-based).
    pub fn batch_for_step(&self, step: u64) -> &[usize] {
        let n = self.batches.len() as u64;
        let epoch = (step - 1) / n;
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        order.shuffle(&mut step_rng(self.seed, epoch, ORDER_STREAM));
        &self.batches[order[((step - 1) % n) as usize]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub dev_ppl: Option<f64>,
}

impl std::fmt::Display for LogLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} loss {:.6} lr {:.6e} dev_ppl ", self.step, self.loss, self.lr)?;
        match self.dev_ppl {
            Some(p) => write!(f, "{p:.6}"),
            None => write!(f, "nan"),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub steps: Vec<StepStats>,
    pub log: Vec<LogLine>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Model, optimizer state and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: u64,
    pub best_dev_ppl: f64,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train.log";

impl Trainer {
    pub fn new(model: Model) -> Self {
        let adam = Adam::new(&model);
        Self {
            model,
            adam,
            step: 0,
            best_dev_ppl: f64::INFINITY,
        }
    }

    /// Continues a run saved by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let model = Model::from_checkpoint(&ck)?;
        let adam = Adam::from_checkpoint(&ck, &model)?;
        Ok(Self {
            step: header_num(&ck, "step")?,
            best_dev_ppl: header_num(&ck, "best_dev_ppl")?,
            model,
            adam,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(&[
            ("step", self.step.to_string()),
            ("best_dev_ppl", self.best_dev_ppl.to_string()),
            ("optim_t", self.adam.t.to_string()),
        ]);
        ck.tensors.extend(self.adam.tensors(self.model.names()));
        ck
    }

    /// Writes the checkpoint and, when given, the vocabulary beside it.
    pub fn save(&self, path: &Path, vocab: Option<&Vocab>) -> Result<()> {
        self.checkpoint().save(path)?;
        if let Some(v) = vocab {
            v.save(vocab_path(path))?;
        }
        Ok(())
    }

    /// One optimizer update on `batch`, using the step after the current one.
    pub fn train_step(&mut self, batch: &[&SymbolSequence], cfg: &TrainConfig) -> Result<StepStats> {
        let step = self.step + 1;
        let reveals: Option<Vec<Vec<Option<TokenId>>>> = match cfg.phase {
            Phase::Pretrain => {
                let mut rng = step_rng(cfg.seed, step, MASK_STREAM);
                Some(batch.iter().map(|s| mask_for_pretraining(s, cfg.reveal_rate, &mut rng)).collect())
            }
            Phase::Finetune => None,
        };
        let (input, targets) = batch_input(batch, reveals.as_deref())?;

        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let mut drop_rng = step_rng(cfg.seed, step, DROPOUT_STREAM);
        let rng: Option<&mut dyn rand::RngCore> = (self.model.config.dropout > 0.0).then_some(&mut drop_rng);
        let out = self.model.forward(&mut tape, &vars, &input, None, rng)?;
        let loss = tape.cross_entropy(out.logits, &targets, Some(PAD_ID))?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
        let grad_norm = clip_grads(&mut g, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient" });
        }
        let d = cfg.schedule_d_model.unwrap_or(self.model.config.d_model);
        let lr = noam_lr(step, d, cfg.warmup_steps, cfg.lr_factor)?;
        self.adam.update(self.model.params_mut(), &g, lr);
        self.step = step;
        Ok(StepStats {
            step,
            loss: loss_value,
            grad_norm,
            clipped_norm: global_norm(&g),
            lr,
        })
    }

    /// Trains until `cfg.max_steps`, logging and checkpointing into `out_dir` when given.
    pub fn fit(
        &mut self,
        train: &[SymbolSequence],
        dev: &[SymbolSequence],
        cfg: &TrainConfig,
        out_dir: Option<&Path>,
        vocab: Option<&Vocab>,
    ) -> Result<FitReport> {
        cfg.validate()?;
        let batcher = Batcher::new(train, cfg.batch_size, cfg.seed)?;
        let mut report = FitReport::default();
        let last = out_dir.map(|d| d.join(LAST_CHECKPOINT));
        let best = out_dir.map(|d| d.join(BEST_CHECKPOINT));
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if self.step >= cfg.max_steps {
            if let Some(path) = &last {
                self.save(path, vocab)?;
                report.last_checkpoint = Some(path.clone());
            }
            return Ok(report);
        }
        let (mut window_loss, mut window_n) = (0.0, 0usize);
        while self.step < cfg.max_steps {
            let batch: Vec<&SymbolSequence> =
                batcher.batch_for_step(self.step + 1).iter().map(|&i| &train[i]).collect();
            let stats = self.train_step(&batch, cfg)?;
            report.steps.push(stats);
            window_loss += stats.loss;
            window_n += 1;

            let done = self.step == cfg.max_steps;
            if self.step.is_multiple_of(cfg.eval_every) || done {
                let dev_ppl = if dev.is_empty() {
                    None
                } else {
                    Some(perplexity(&self.model, dev, cfg.batch_size)?)
                };
                let line = LogLine {
                    step: self.step,
                    loss: window_loss / window_n as f64,
                    lr: stats.lr,
                    dev_ppl,
                };
                info!("{line}");
                if let Some(dir) = out_dir {
                    append_line(&dir.join(LOG_FILE), &line.to_string())?;
                }
                report.log.push(line);
                (window_loss, window_n) = (0.0, 0);
                if let Some(p) = dev_ppl {
                    if p < self.best_dev_ppl {
                        self.best_dev_ppl = p;
                        if let Some(path) = &best {
                            self.save(path, vocab)?;
                            report.best_checkpoint = Some(path.clone());
                        }
                    }
                }
            }
            if self.step.is_multiple_of(cfg.checkpoint_every) || done {
                if let Some(path) = &last {
                    self.save(path, vocab)?;
                    report.last_checkpoint = Some(path.clone());
                }
            }
        }
        if report.best_checkpoint.is_none() {
            report.best_checkpoint = best.filter(|p| p.exists());
        }
        Ok(report)
    }
}

/// Where the vocabulary of a checkpoint lives.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

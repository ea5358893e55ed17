use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adam_step, global_grad_norm, AdamConfig, OptimizerState};
use super::{noam_lr, ScheduleConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::frontend::{prepare_features, FeatureSpec, Utterance};
use crate::kv::KeyValues;
use crate::model::{build_model, teacher_forcing, Checkpoint, Dropout, Model, ModelConfig, Net, BOS, EOS};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.log";
pub const TIMING_FILE: &str = "timing.log";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Utterances per step.
    pub batch_size: usize,
    pub max_steps: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip threshold.
    pub clip_norm: f64,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_steps: 1000,
            label_smoothing: 0.1,
            seed: 1,
            checkpoint_every: 0,
            clip_norm: 5.0,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.schedule.validate()
    }

    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "max_steps",
        "label_smoothing",
        "seed",
        "checkpoint_every",
        "clip_norm",
    ];
    pub const SCHEDULE_KEYS: &'static [&'static str] = &["d_model", "warmup_n", "k"];

    /// Reads `train.*` and `schedule.*` sections.
    pub fn update_from_kv(mut self, train: &KeyValues, schedule: &KeyValues) -> Result<Self> {
        train.reject_unknown(Self::KEYS, "train")?;
        schedule.reject_unknown(Self::SCHEDULE_KEYS, "schedule")?;
        train.read_into("batch_size", &mut self.batch_size)?;
        train.read_into("max_steps", &mut self.max_steps)?;
        train.read_into("label_smoothing", &mut self.label_smoothing)?;
        train.read_into("seed", &mut self.seed)?;
        train.read_into("checkpoint_every", &mut self.checkpoint_every)?;
        train.read_into("clip_norm", &mut self.clip_norm)?;
        schedule.read_into("d_model", &mut self.schedule.d_model)?;
        schedule.read_into("warmup_n", &mut self.schedule.warmup_n)?;
        schedule.read_into("k", &mut self.schedule.k)?;
        self.validate()?;
        Ok(self)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.max_steps", self.max_steps);
        kv.set("train.label_smoothing", format!("{:?}", self.label_smoothing));
        kv.set("train.seed", self.seed);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        kv.set("train.clip_norm", format!("{:?}", self.clip_norm));
        kv.set("schedule.d_model", self.schedule.d_model);
        kv.set("schedule.warmup_n", self.schedule.warmup_n);
        kv.set("schedule.k", format!("{:?}", self.schedule.k));
        kv
    }
}

/// One training example: stacked features and token ids (no BOS/EOS).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub feats: Tensor,
    pub tokens: Vec<usize>,
}

pub fn prepare_examples(utts: &[Utterance], spec: &FeatureSpec) -> Result<Vec<Example>> {
    utts.iter()
        .map(|u| {
            Ok(Example {
                feats: prepare_features(&u.feats, spec)?,
                tokens: u.tokens.clone(),
            })
        })
        .collect()
}

/// One line of the metrics log:
/// `step=<n> loss=<f64> lr=<f64> grad_norm=<f64> tokens=<n>`.
/// Floats use Rust's shortest round-trip formatting, so identical runs give
/// identical logs. Throughput goes to the separate timing log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} loss={:?} lr={:?} grad_norm={:?} tokens={}",
            self.step, self.loss, self.lr, self.grad_norm, self.tokens
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let kv = KeyValues::parse(&line.split_whitespace().collect::<Vec<_>>().join("\n"))?;
        let need = |k: &str| -> Result<String> {
            kv.get_str(k)
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("metrics line lacks {k}: {line:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            need(k)?
                .parse()
                .map_err(|_| Error::Config(format!("metrics line: bad {k} in {line:?}")))
        };
        Ok(MetricRecord {
            step: num("step")? as usize,
            loss: num("loss")?,
            lr: num("lr")?,
            grad_norm: num("grad_norm")?,
            tokens: num("tokens")? as usize,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricRecord>,
}

/// Shuffled, length-bucketed batches for one pass over the data.
fn epoch_batches(lengths: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch * 8) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Teacher-forced loss of a batch on `tape`; returns the mean-per-token loss
/// node, the parameter leaves and the token count.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[&Example],
    smoothing: f64,
    drop: &mut Dropout,
) -> Result<(crate::autodiff::Var, Vec<crate::autodiff::Var>, usize)> {
    let mut net = Net::bind(tape, &model.cfg, &model.params);
    let mut total = None;
    let mut tokens = 0;
    for ex in batch {
        let z = net.encode(tape, &ex.feats, drop)?;
        let (input, target) = teacher_forcing(&ex.tokens, BOS, EOS);
        let logits = net.decode(tape, z, &input, drop)?;
        let l = tape.smoothed_ce_sum(logits, &target, smoothing)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
        tokens += target.len();
    }
    let total = total.ok_or_else(|| Error::DegenerateBatch("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / tokens as f64);
    Ok((loss, net.vars().to_vec(), tokens))
}

struct Sink {
    dir: PathBuf,
    meta: KeyValues,
    metrics: fs::File,
    timing: fs::File,
}

impl Sink {
    fn open(dir: &Path, meta: &KeyValues) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        Ok(Sink {
            dir: dir.to_path_buf(),
            meta: meta.clone(),
            metrics: create(METRICS_FILE)?,
            timing: create(TIMING_FILE)?,
        })
    }

    fn log(&mut self, rec: &MetricRecord, tokens_per_s: f64) -> Result<()> {
        writeln!(self.metrics, "{}", rec.to_line()).map_err(|e| Error::io(self.dir.join(METRICS_FILE), e))?;
        writeln!(self.timing, "step={} tokens_per_s={tokens_per_s:.1}", rec.step)
            .map_err(|e| Error::io(self.dir.join(TIMING_FILE), e))
    }

    fn checkpoint(&self, model: &Model, opt: &OptimizerState) -> Result<()> {
        Checkpoint {
            cfg: model.cfg.clone(),
            params: model.params.clone(),
            optimizer: Some(opt.clone()),
            meta: self.meta.clone(),
        }
        .save(&self.dir.join(CHECKPOINT_FILE))
    }
}

/// Trains from a fresh initialization seeded by `cfg.seed`. With `out`,
/// writes the metrics and timing logs and checkpoints (carrying `meta` in
/// the header) into the directory. Single-threaded and deterministic.
///
/// A non-finite loss or gradient stops training with
/// [`Error::Divergence`]; the last checkpoint on disk is left untouched.
pub fn train(
    model_cfg: &ModelConfig,
    data: &[Example],
    cfg: &TrainConfig,
    out: Option<(&Path, &KeyValues)>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateBatch("no training data".into()));
    }
    let mut model = Model {
        cfg: model_cfg.clone(),
        params: build_model(model_cfg, cfg.seed)?,
    };
    let mut opt = OptimizerState::new(model.params.tensors());
    let mut sink = match out {
        Some((dir, meta)) => Some(Sink::open(dir, meta)?),
        None => None,
    };

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba7c_4e5);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd509_0u64);
    let lengths: Vec<usize> = data.iter().map(|e| e.feats.rows()).collect();
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.max_steps);

    for step in 1..=cfg.max_steps {
        if queue.is_empty() {
            queue = epoch_batches(&lengths, cfg.batch_size, &mut batch_rng);
            queue.reverse();
        }
        let idx = queue.pop().expect("non-empty epoch");
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let started = Instant::now();

        let mut tape = Tape::new();
        let mut dropout = Dropout::on(model.cfg.dropout, &mut drop_rng);
        let (loss, vars, tokens) = batch_loss(&mut tape, &model, &batch, cfg.label_smoothing, &mut dropout)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
        let norm = global_grad_norm(&g);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("gradient norm is {norm}"),
            });
        }
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for t in &mut g {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let lr = noam_lr(step, &cfg.schedule)?;
        adam_step(model.params.tensors_mut(), &g, &mut opt, lr, &cfg.adam).map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;

        let rec = MetricRecord {
            step,
            loss: loss_value,
            lr,
            grad_norm: norm,
            tokens,
        };
        if let Some(s) = sink.as_mut() {
            let secs = started.elapsed().as_secs_f64().max(1e-9);
            s.log(&rec, tokens as f64 / secs)?;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                s.checkpoint(&model, &opt)?;
            }
        }
        metrics.push(rec);
    }
    if let Some(s) = sink.as_ref() {
        s.checkpoint(&model, &opt)?;
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        metrics,
    })
}

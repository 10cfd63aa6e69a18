//! The training loop for one curriculum phase.
//!
//! One optimizer step consumes `grad_accum` micro-batches of `batch_size`
//! draws. Each micro-batch draws from its own RNG stream, indexed by the
//! global micro-batch number, so resuming from a checkpoint replays exactly
//! the draws an uninterrupted run would have made.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Tensor};
use convseg_core::rle_decode;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, LossStats};
use crate::curriculum::{Curriculum, DataGroup, DrawCategory, Phase};
use crate::error::{NetError, Result};
use crate::loss::segmentation_loss_tensor;
use crate::model::SegModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::preprocess::{load_rgb, mask_to_tensor, prepare_target, PreparedImage};
use crate::schedule::LrSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lambda_dice: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub erode_kernel: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            lr_peak: 1e-4,
            lr_min: 1e-6,
            warmup_steps: 1000,
            total_steps: 100_000,
            batch_size: 6,
            grad_accum: 8,
            lambda_dice: 0.25,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            erode_kernel: 5,
            checkpoint_every: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::Training(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be smaller than total_steps");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be positive");
        }
        if self.lambda_dice.is_nan() || self.lambda_dice < 0.0 {
            return bad("lambda_dice must be non-negative");
        }
        if !(self.lr_peak >= self.lr_min && self.lr_min >= 0.0) {
            return bad("learning rates must satisfy 0 <= lr_min <= lr_peak");
        }
        if self.erode_kernel.is_multiple_of(2) {
            return bad("erode_kernel must be odd");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            min: self.lr_min,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the loss log. Each step writes an `all` row followed by one
/// row per category drawn in that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    pub category: String,
}

pub const LOSS_LOG_HEADER: &str = "step,lr,loss,bce,dice,category";

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e},{:e},{}", r.step, r.lr, r.loss, r.bce, r.dice, r.category);
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `loss_log.csv` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Base directory for relative image URIs.
    pub image_root: Option<PathBuf>,
    /// Phase-1 weights to start phase 2 from.
    pub init: Option<Checkpoint>,
    /// Mid-run checkpoint of this phase to continue from.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed steps (the schedule still spans `total_steps`).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

struct Example {
    image: Arc<PreparedImage>,
    target: Tensor,
}

/// Lazily loaded, preprocessed training examples keyed by sample id.
struct ExampleCache {
    images: HashMap<String, Arc<PreparedImage>>,
    examples: HashMap<String, Arc<Example>>,
    root: Option<PathBuf>,
}

impl ExampleCache {
    fn get(&mut self, model: &SegModel, sample: &convseg_core::Sample, erode_kernel: usize) -> Result<Arc<Example>> {
        if let Some(e) = self.examples.get(&sample.sample_id) {
            return Ok(e.clone());
        }
        let image = match self.images.get(&sample.image.uri) {
            Some(i) => i.clone(),
            None => {
                let path = resolve(self.root.as_deref(), &sample.image.uri);
                let rgb = load_rgb(&path)?;
                let prepared = Arc::new(model.prepare(&rgb));
                self.images.insert(sample.image.uri.clone(), prepared.clone());
                prepared
            }
        };
        let gt = rle_decode(&sample.mask)?;
        if gt.dims() != (image.orig_h, image.orig_w) {
            return Err(NetError::Training(format!(
                "sample {}: mask {:?} does not match image {}x{}",
                sample.sample_id,
                gt.dims(),
                image.orig_h,
                image.orig_w
            )));
        }
        let target = prepare_target(&gt, model.config().image_size, erode_kernel)?;
        let e = Arc::new(Example {
            image,
            target: mask_to_tensor(&target, model.dtype(), model.device())?,
        });
        self.examples.insert(sample.sample_id.clone(), e.clone());
        Ok(e)
    }
}

pub(crate) fn resolve(root: Option<&Path>, uri: &str) -> PathBuf {
    let p = PathBuf::from(uri);
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p,
    }
}

fn micro_rng(seed: u64, micro_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(micro_index);
    rng
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    loss: f64,
    bce: f64,
    dice: f64,
}

impl Acc {
    fn add(&mut self, loss: f64, bce: f64, dice: f64) {
        self.n += 1;
        self.loss += loss;
        self.bce += bce;
        self.dice += dice;
    }

    fn row(&self, step: usize, lr: f64, category: &str) -> LossRow {
        let n = self.n.max(1) as f64;
        LossRow {
            step,
            lr,
            loss: self.loss / n,
            bce: self.bce / n,
            dice: self.dice / n,
            category: category.to_string(),
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Runs (or continues) one phase and returns the final checkpoint and the
/// loss rows produced by this call.
pub fn train_phase(model: &SegModel, cfg: &TrainConfig, groups: &[DataGroup], opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let curriculum = Curriculum::new(cfg.phase, groups)?;
    let scale = model.config().scale;
    let mut optimizer = AdamW::new(model.params().trainable(scale), cfg.adamw())?;
    let mut step = 0usize;
    let mut stats = LossStats::default();

    if let Some(ck) = &opts.resume {
        if ck.meta.phase != Some(cfg.phase) {
            return Err(NetError::Training("resume checkpoint belongs to a different phase".into()));
        }
        if ck.meta.model != *model.config() {
            return Err(NetError::Training("resume checkpoint has a different model configuration".into()));
        }
        ck.load_params(model)?;
        ck.restore_optimizer(&mut optimizer)?;
        step = ck.meta.step;
        stats = ck.meta.loss_stats;
    } else if cfg.phase == Phase::Conversational {
        let init = opts
            .init
            .as_ref()
            .ok_or_else(|| NetError::Training("phase 2 must be initialized from a phase-1 checkpoint".into()))?;
        if init.meta.phase != Some(Phase::Pretrain) {
            return Err(NetError::Training("initial checkpoint is not from phase 1".into()));
        }
        init.load_params(model)?;
    } else if let Some(init) = &opts.init {
        init.load_params(model)?;
    }

    // frozen image encoder: embeddings can be cached across steps
    model.set_embedding_cache(!crate::params::ParamGroup::ImageEncoder.is_trainable(scale));

    let schedule = cfg.schedule();
    let mut cache = ExampleCache {
        images: HashMap::new(),
        examples: HashMap::new(),
        root: opts.image_root.clone(),
    };
    let per_step = (cfg.batch_size * cfg.grad_accum) as f64;
    let end = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    let mut log = Vec::new();
    let vars: Vec<_> = optimizer.vars().to_vec();

    while step < end {
        let lr = schedule.lr_at_step(step)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; vars.len()];
        let mut all = Acc::default();
        let mut per_cat: Vec<(DrawCategory, Acc)> = Vec::new();
        for micro in 0..cfg.grad_accum {
            let mut rng = micro_rng(cfg.seed, (step * cfg.grad_accum + micro) as u64);
            let mut batch_loss: Option<Tensor> = None;
            for _ in 0..cfg.batch_size {
                let draw = curriculum.draw(&mut rng);
                let ex = cache.get(model, draw.sample, cfg.erode_kernel)?;
                let pred = model.forward(&ex.image, &draw.sample.prompt)?;
                let l = segmentation_loss_tensor(&pred.probabilities, &ex.target, cfg.lambda_dice)?;
                let (lv, bv, dv) = (scalar(&l.total)?, scalar(&l.bce)?, scalar(&l.dice)?);
                if !lv.is_finite() {
                    return Err(NetError::NonFiniteLoss {
                        step,
                        detail: format!("sample {} (bce {bv}, dice {dv})", draw.sample.sample_id),
                    });
                }
                all.add(lv, bv, dv);
                match per_cat.iter_mut().find(|(c, _)| *c == draw.category) {
                    Some((_, a)) => a.add(lv, bv, dv),
                    None => {
                        let mut a = Acc::default();
                        a.add(lv, bv, dv);
                        per_cat.push((draw.category, a));
                    }
                }
                batch_loss = Some(match batch_loss {
                    Some(b) => (b + l.total)?,
                    None => l.total,
                });
            }
            let batch_loss = batch_loss.expect("batch_size > 0");
            let g = (batch_loss / per_step)?.backward()?;
            for (slot, var) in grads.iter_mut().zip(&vars) {
                if let Some(gv) = g.get(var.as_tensor()) {
                    *slot = Some(match slot.take() {
                        Some(acc) => (acc + gv)?,
                        None => gv.clone(),
                    });
                }
            }
        }
        optimizer.step(&grads, lr)?;
        step += 1;
        let row = all.row(step, lr, "all");
        stats.record(row.loss);
        log.push(row);
        per_cat.sort_by_key(|(c, _)| c.as_str());
        for (c, a) in &per_cat {
            log.push(a.row(step, lr, c.as_str()));
        }
        if step.is_multiple_of(10) || step == end {
            info!("phase {} step {step}/{} lr {lr:.3e} loss {:.5}", cfg.phase.number(), cfg.total_steps, stats.last);
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) && step < end {
                let ck = snapshot(model, &optimizer, cfg, step, stats)?;
                ck.save(&dir.join(format!("checkpoint-{step:07}.ckpt")))?;
            }
        }
    }

    let checkpoint = snapshot(model, &optimizer, cfg, step, stats)?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
        checkpoint.save(&dir.join("final.ckpt"))?;
        append_log(&dir.join("loss_log.csv"), &log, opts.resume.is_some())?;
    }
    model.set_embedding_cache(false);
    Ok(TrainOutcome { checkpoint, log })
}

fn snapshot(model: &SegModel, optimizer: &AdamW, cfg: &TrainConfig, step: usize, stats: LossStats) -> Result<Checkpoint> {
    Checkpoint::capture(
        model,
        Some(optimizer),
        CheckpointMeta {
            model: model.config().clone(),
            train: Some(cfg.clone()),
            phase: Some(cfg.phase),
            step,
            optimizer_steps: optimizer.steps(),
            loss_stats: stats,
        },
    )
}

fn append_log(path: &Path, rows: &[LossRow], append: bool) -> Result<()> {
    let csv = loss_log_csv(rows);
    if append && path.exists() {
        let body: String = csv.lines().skip(1).map(|l| format!("{l}\n")).collect();
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| NetError::io(path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| NetError::io(path, e))
    } else {
        std::fs::write(path, csv).map_err(|e| NetError::io(path, e))
    }
}

//! Round-robin multi-task training of one shared encoder.
//!
//! Micro-step `i` draws a batch for task `i mod T`, adds the gradient of that task's
//! mean loss into the parameter store, and every `accumulation` micro-steps the summed
//! gradient is applied with one AdamW step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{invalid, Error, Result};
use crate::heads::{
    argmax_mask, decode_detections, mask_dice, recall_counts, ClassificationHead, DetectionHead, SegmentationHead,
    SharedDecoder,
};
use crate::nn::{Ctx, Group, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive, rng_from, tag, Rng, RngState};
use crate::synthetic::{gen_patch, BoxAnnotation, CenterProfile, SyntheticPatch, TaskKind, DEFAULT_TEXTURE_CLASSES, PATCH_SIZE};
use crate::tensor::Tensor;

const RUNNING_MEAN_DECAY: f64 = 0.95;

fn default_train_size() -> usize {
    256
}

fn default_val_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Label count; defaults to the texture classes, 2 mask classes, or 1 box class.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    #[serde(default)]
    pub center: CenterProfile,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(name: &str, kind: TaskKind) -> Self {
        Self {
            name: name.into(),
            kind,
            classes: None,
            train_size: default_train_size(),
            val_size: default_val_size(),
            center: CenterProfile::default(),
            seed: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.unwrap_or(match self.kind {
            TaskKind::Classification => DEFAULT_TEXTURE_CLASSES,
            TaskKind::Segmentation => 2,
            TaskKind::Detection => 1,
        })
    }

    /// Texture bands painted into the patches; only classification labels come from them.
    pub fn texture_classes(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.num_classes(),
            _ => DEFAULT_TEXTURE_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub backbone: BackboneConfig,
    /// Decoder output channels; `embed_dim / 4` when absent.
    pub decoder_dim: Option<usize>,
    pub tasks: Vec<TaskSpec>,
    pub optimizer: AdamWConfig,
    pub accumulation: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Minimum detection score counted as a prediction during evaluation.
    pub score_threshold: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder_dim: None,
            tasks: TaskKind::ALL.iter().map(|&k| TaskSpec::new(k.as_str(), k)).collect(),
            optimizer: AdamWConfig::default(),
            accumulation: 128,
            batch_size: 8,
            seed: 0,
            freeze_encoder: false,
            score_threshold: 0.3,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.input_size > PATCH_SIZE {
            return Err(invalid!("input_size {} exceeds the patch size {PATCH_SIZE}", self.backbone.input_size));
        }
        if self.tasks.is_empty() {
            return Err(invalid!("at least one task is required"));
        }
        if self.accumulation == 0 || self.batch_size == 0 {
            return Err(invalid!("accumulation and batch_size must be at least 1"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(invalid!("duplicate task name `{}`", t.name));
            }
            if t.train_size == 0 || t.val_size == 0 {
                return Err(invalid!("task `{}` needs non-empty train and validation sets", t.name));
            }
            let k = t.num_classes();
            let min = if t.kind == TaskKind::Detection { 1 } else { 2 };
            if k < min {
                return Err(invalid!("task `{}` needs at least {min} classes, got {k}", t.name));
            }
        }
        Ok(())
    }

    pub fn decoder_dim(&self) -> usize {
        self.decoder_dim.unwrap_or((self.backbone.embed_dim / 4).max(1))
    }
}

/// One prepared sample at the encoder's input size.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, S, S]` planar pixels.
    pub image: Vec<f32>,
    pub label: usize,
    pub mask: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
}

fn prepare(patch: SyntheticPatch, side: usize) -> Sample {
    let SyntheticPatch { pixels, cls_label, seg_mask, boxes } = patch;
    if side == PATCH_SIZE {
        return Sample { image: pixels.to_chw().into_data(), label: cls_label, mask: seg_mask, boxes };
    }
    let crop = pixels.crop(0, 0, side, side).expect("crop inside patch");
    let mask = (0..side).flat_map(|y| seg_mask[y * PATCH_SIZE..y * PATCH_SIZE + side].iter().copied()).collect();
    let s = side as f32;
    let boxes = boxes
        .into_iter()
        .map(|b| BoxAnnotation { x_max: b.x_max.min(s), y_max: b.y_max.min(s), ..b })
        .filter(|b| b.width() >= 2.0 && b.height() >= 2.0)
        .collect();
    Sample { image: crop.to_chw().into_data(), label: cls_label, mask, boxes }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalSplit {
    Train,
    Val,
}

/// Lazily generated, memoized train and validation patches of one task.
#[derive(Clone, Debug)]
struct TaskData {
    train: Vec<Option<Sample>>,
    val: Vec<Option<Sample>>,
}

impl TaskData {
    fn new(spec: &TaskSpec) -> Self {
        Self { train: alloc::vec![None; spec.train_size], val: alloc::vec![None; spec.val_size] }
    }
}

fn split_seed(spec: &TaskSpec, split: EvalSplit) -> u64 {
    match split {
        EvalSplit::Train => spec.seed,
        EvalSplit::Val => derive(&[spec.seed, tag("validation")]),
    }
}

/// Position of a task in its shuffled training order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

#[derive(Clone, Debug)]
pub enum TaskHead {
    Classification(ClassificationHead),
    Segmentation(SegmentationHead),
    Detection(DetectionHead),
}

#[derive(Clone, Debug)]
pub struct MtlModel {
    pub backbone: Backbone,
    pub seg_decoder: Option<SharedDecoder>,
    pub det_decoder: Option<SharedDecoder>,
    pub heads: Vec<TaskHead>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Row-major `[B, S, S]`.
    pub masks: Vec<usize>,
    pub boxes: Vec<Vec<BoxAnnotation>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub task_id: usize,
    pub task: String,
    pub loss: f64,
    pub wall_time: f64,
    pub running_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub kind: TaskKind,
    pub split: EvalSplit,
    pub n_samples: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Callbacks supplied by the caller: time source, logging, checkpoint persistence.
pub trait TrainHooks {
    fn now_secs(&mut self) -> f64 {
        0.0
    }

    fn record(&mut self, _rec: &TrainLogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &MtlState) -> Result<()> {
        Ok(())
    }

    /// Polled after every optimizer step; returning true ends training early.
    fn should_stop(&mut self) -> bool {
        false
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlSnapshot {
    pub config: TrainerConfig,
    pub micro_step: u64,
    pub optimizer_steps: u64,
    pub cursors: Vec<Cursor>,
    pub rng: RngState,
    pub running: Vec<Option<f64>>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    pub adam_steps: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct MtlState {
    pub cfg: TrainerConfig,
    pub model: MtlModel,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub micro_step: u64,
    pub optimizer_steps: u64,
    cursors: Vec<Cursor>,
    rng: Rng,
    running: Vec<Option<f64>>,
    data: Vec<TaskData>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub micro_steps: u64,
    pub optimizer_steps: u64,
    pub fingerprint: u64,
}

impl MtlState {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store)?;
        let mut rng = rng_from(&[cfg.seed, tag("heads")]);
        let ch = cfg.backbone.channels();
        let d = cfg.decoder_dim();
        let has = |k: TaskKind| cfg.tasks.iter().any(|t| t.kind == k);
        let seg_decoder = has(TaskKind::Segmentation).then(|| SharedDecoder::new(&mut store, "seg_decoder", ch, d, &mut rng));
        let det_decoder = has(TaskKind::Detection).then(|| SharedDecoder::new(&mut store, "det_decoder", ch, d, &mut rng));
        let heads = cfg
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let name = format!("head.{}", t.name);
                let g = Group::Task(i);
                let k = t.num_classes();
                match t.kind {
                    TaskKind::Classification => {
                        TaskHead::Classification(ClassificationHead::new(&mut store, &name, cfg.backbone.embed_dim, k, g, &mut rng))
                    }
                    TaskKind::Segmentation => TaskHead::Segmentation(SegmentationHead::new(&mut store, &name, d, k, g, &mut rng)),
                    TaskKind::Detection => TaskHead::Detection(DetectionHead::new(&mut store, &name, d, k, g, &mut rng)),
                }
            })
            .collect();
        let model = MtlModel { backbone, seg_decoder, det_decoder, heads };
        if cfg.freeze_encoder {
            store.set_span_frozen(model.backbone.span(), true);
        }
        let opt = AdamW::new(cfg.optimizer, &store);
        let t = cfg.tasks.len();
        let data = cfg.tasks.iter().map(TaskData::new).collect();
        Ok(Self {
            rng: rng_from(&[cfg.seed, tag("dropout")]),
            cfg,
            model,
            store,
            opt,
            micro_step: 0,
            optimizer_steps: 0,
            cursors: alloc::vec![Cursor::default(); t],
            running: alloc::vec![None; t],
            data,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.cfg.tasks.len()
    }

    pub fn cursors(&self) -> &[Cursor] {
        &self.cursors
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.num_tasks() {
            return Err(invalid!("unknown task id {task}; this run has {} tasks", self.num_tasks()));
        }
        Ok(())
    }

    fn sample(&mut self, task: usize, split: EvalSplit, index: usize) -> &Sample {
        let spec = &self.cfg.tasks[task];
        let side = self.cfg.backbone.input_size;
        let slot = match split {
            EvalSplit::Train => &mut self.data[task].train[index],
            EvalSplit::Val => &mut self.data[task].val[index],
        };
        slot.get_or_insert_with(|| {
            let patch = gen_patch(spec.kind, index, spec.texture_classes(), &spec.center, split_seed(spec, split));
            prepare(patch, side)
        })
    }

    fn epoch_order(&self, task: usize, epoch: u64) -> Vec<usize> {
        let n = self.cfg.tasks[task].train_size;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(&[self.cfg.seed, tag("order"), task as u64, epoch]));
        order
    }

    fn collate(&mut self, task: usize, split: EvalSplit, indices: &[usize]) -> Batch {
        let s = self.cfg.backbone.input_size;
        let mut images = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(indices.len());
        let mut masks = Vec::with_capacity(indices.len() * s * s);
        let mut boxes = Vec::with_capacity(indices.len());
        for &i in indices {
            let smp = self.sample(task, split, i);
            images.extend_from_slice(&smp.image);
            labels.push(smp.label);
            masks.extend(smp.mask.iter().map(|&m| m as usize));
            boxes.push(smp.boxes.clone());
        }
        let images = Tensor::from_vec(&[indices.len(), 3, s, s], images).expect("batch shape");
        Batch { images, labels, masks, boxes }
    }

    /// Next training batch of `task`; the shuffled order restarts with a new epoch when exhausted.
    pub fn draw_batch(&mut self, task: usize) -> Result<Batch> {
        self.check_task(task)?;
        let b = self.cfg.batch_size;
        let mut indices = Vec::with_capacity(b);
        let mut cur = self.cursors[task];
        let mut order = self.epoch_order(task, cur.epoch);
        while indices.len() < b {
            if cur.pos == order.len() {
                cur = Cursor { epoch: cur.epoch + 1, pos: 0 };
                order = self.epoch_order(task, cur.epoch);
            }
            indices.push(order[cur.pos]);
            cur.pos += 1;
        }
        self.cursors[task] = cur;
        Ok(self.collate(task, EvalSplit::Train, &indices))
    }

    /// Records the mean loss of `task` on `batch` and returns its node.
    pub fn task_loss(&self, ctx: &mut Ctx<'_, f32>, task: usize, batch: &Batch) -> Result<Var> {
        let m = &self.model;
        let x = ctx.input(batch.images.clone());
        let pyramid = m.backbone.forward_pyramid(ctx, x)?;
        let side = self.cfg.backbone.input_size;
        Ok(match &m.heads[task] {
            TaskHead::Classification(h) => h.forward_loss(ctx, pyramid.pooled, &batch.labels)?.0,
            TaskHead::Segmentation(h) => {
                let d = m.seg_decoder.as_ref().expect("segmentation decoder").forward(ctx, &pyramid);
                h.forward_loss(ctx, d, &batch.masks, side)?.0
            }
            TaskHead::Detection(h) => {
                let d = m.det_decoder.as_ref().expect("detection decoder").forward(ctx, &pyramid);
                h.forward_loss(ctx, d, &batch.boxes)?.0
            }
        })
    }

    /// Draws a batch for `task`, adds the gradient of its loss into the store, and
    /// returns the loss. No optimizer step is taken.
    pub fn accumulate_task(&mut self, task: usize) -> Result<f64> {
        let batch = self.draw_batch(task)?;
        let mut rng = self.rng.clone();
        let (loss, tape, grads) = {
            let mut ctx = Ctx::training(&self.store, &mut rng);
            let l = self.task_loss(&mut ctx, task, &batch)?;
            let value = ctx.tape.item(l) as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("task `{}` produced loss {value}", self.cfg.tasks[task].name)));
            }
            let grads = ctx.tape.backward(l);
            (value, ctx.tape, grads)
        };
        self.rng = rng;
        self.store.accumulate(&tape, &grads);
        let r = &mut self.running[task];
        *r = Some(match *r {
            None => loss,
            Some(prev) => RUNNING_MEAN_DECAY * prev + (1.0 - RUNNING_MEAN_DECAY) * loss,
        });
        Ok(loss)
    }

    /// One pass over all tasks in order; returns the per-task losses. Gradients are
    /// accumulated but no optimizer step is taken.
    pub fn accumulation_cycle(&mut self) -> Result<Vec<f64>> {
        (0..self.num_tasks()).map(|t| self.accumulate_task(t)).collect()
    }

    /// Sum of task losses over one cycle.
    pub fn mtl_accumulation_cycle(&mut self) -> Result<f64> {
        Ok(self.accumulation_cycle()?.iter().sum())
    }

    /// Reference for one cycle: all task losses on a single tape, summed there and
    /// differentiated once, gradients added into the store. Draws the same batches and
    /// randomness as `accumulation_cycle`; returns the per-task losses.
    pub fn joint_cycle(&mut self) -> Result<Vec<f64>> {
        let batches: Vec<Batch> = (0..self.num_tasks()).map(|t| self.draw_batch(t)).collect::<Result<_>>()?;
        let mut rng = self.rng.clone();
        let (values, tape, grads) = {
            let mut ctx = Ctx::training(&self.store, &mut rng);
            let mut losses = Vec::with_capacity(batches.len());
            for (t, b) in batches.iter().enumerate() {
                losses.push(self.task_loss(&mut ctx, t, b)?);
            }
            let values: Vec<f64> = losses.iter().map(|&l| ctx.tape.item(l) as f64).collect();
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = ctx.tape.add(total, l);
            }
            let grads = ctx.tape.backward(total);
            (values, ctx.tape, grads)
        };
        self.rng = rng;
        self.store.accumulate(&tape, &grads);
        Ok(values)
    }

    /// One round-robin micro-step; steps the optimizer at accumulation boundaries.
    pub fn micro_step(&mut self, hooks: &mut dyn TrainHooks) -> Result<bool> {
        let task = (self.micro_step % self.num_tasks() as u64) as usize;
        let loss = self.accumulate_task(task)?;
        let rec = TrainLogRecord {
            step: self.micro_step,
            task_id: task,
            task: self.cfg.tasks[task].name.clone(),
            loss,
            wall_time: hooks.now_secs(),
            running_mean: self.running[task].unwrap_or(loss),
        };
        hooks.record(&rec)?;
        self.micro_step += 1;
        if self.micro_step % self.cfg.accumulation as u64 == 0 {
            self.opt.step(&mut self.store);
            self.optimizer_steps += 1;
            return Ok(true);
        }
        Ok(false)
    }

    /// Runs micro-steps until `total_steps` have been taken in this run (counting any
    /// before a resume). `checkpoint_every` counts optimizer steps; 0 disables it.
    pub fn train(&mut self, total_steps: u64, checkpoint_every: u64, hooks: &mut dyn TrainHooks) -> Result<TrainSummary> {
        if total_steps < self.cfg.accumulation as u64 {
            return Err(invalid!(
                "total_steps {total_steps} is below the accumulation window of {}",
                self.cfg.accumulation
            ));
        }
        while self.micro_step < total_steps {
            if self.micro_step(hooks)? {
                if checkpoint_every > 0 && self.optimizer_steps % checkpoint_every == 0 {
                    hooks.checkpoint(self)?;
                }
                if hooks.should_stop() {
                    break;
                }
            }
        }
        Ok(TrainSummary {
            micro_steps: self.micro_step,
            optimizer_steps: self.optimizer_steps,
            fingerprint: self.store.fingerprint(),
        })
    }

    /// Inference-mode metrics on the first `limit` samples of a split (all when `None`).
    pub fn evaluate_task(&mut self, task: usize, split: EvalSplit, limit: Option<usize>) -> Result<TaskMetrics> {
        self.check_task(task)?;
        let spec = self.cfg.tasks[task].clone();
        let size = match split {
            EvalSplit::Train => spec.train_size,
            EvalSplit::Val => spec.val_size,
        };
        let n = limit.map_or(size, |l| l.min(size));
        let side = self.cfg.backbone.input_size;
        let mut correct = 0usize;
        let mut truth = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        let mut dice_sum = 0.0;
        let (mut hit, mut total) = (0usize, 0usize);
        let indices: Vec<usize> = (0..n).collect();
        for chunk in indices.chunks(self.cfg.batch_size) {
            let batch = self.collate(task, split, chunk);
            let mut ctx = Ctx::inference(&self.store);
            let x = ctx.input(batch.images.clone());
            let m = &self.model;
            let pyramid = m.backbone.forward_pyramid(&mut ctx, x)?;
            match &m.heads[task] {
                TaskHead::Classification(h) => {
                    let logits = h.logits(&mut ctx, pyramid.pooled);
                    let lv = ctx.tape.value(logits);
                    let k = lv.shape()[1];
                    for (row, &y) in lv.data().chunks_exact(k).zip(&batch.labels) {
                        let p = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                        correct += usize::from(p == y);
                        truth.push(y);
                        preds.push(p);
                    }
                }
                TaskHead::Segmentation(h) => {
                    let d = m.seg_decoder.as_ref().expect("segmentation decoder").forward(&mut ctx, &pyramid);
                    let logits = h.logits(&mut ctx, d, side);
                    let lv = ctx.tape.value(logits);
                    for bi in 0..chunk.len() {
                        let pred = argmax_mask(lv, bi);
                        dice_sum += mask_dice(&pred, &batch.masks[bi * side * side..(bi + 1) * side * side]);
                    }
                }
                TaskHead::Detection(h) => {
                    let d = m.det_decoder.as_ref().expect("detection decoder").forward(&mut ctx, &pyramid);
                    let out = h.forward(&mut ctx, d);
                    let (cls, ctr, ltrb) = (ctx.tape.value(out.cls), ctx.tape.value(out.ctr), ctx.tape.value(out.ltrb));
                    for (bi, gt) in batch.boxes.iter().enumerate() {
                        let found: Vec<BoxAnnotation> =
                            decode_detections(cls, ctr, ltrb, bi, self.cfg.score_threshold).into_iter().map(|(b, _)| b).collect();
                        let (h_, t_) = recall_counts(gt, &found, 0.5);
                        hit += h_;
                        total += t_;
                    }
                }
            }
        }
        let mut metrics = BTreeMap::new();
        match spec.kind {
            TaskKind::Classification => {
                let r = crate::evaluation::classification_metrics(&truth, &preds, None)?;
                metrics.insert("accuracy".to_string(), correct as f64 / n as f64);
                metrics.insert("macro_f1".to_string(), r.macro_f1);
                metrics.insert("weighted_f1".to_string(), r.weighted_f1);
            }
            TaskKind::Segmentation => {
                metrics.insert("dice".to_string(), dice_sum / n as f64);
            }
            TaskKind::Detection => {
                let recall = if total == 0 { 1.0 } else { hit as f64 / total as f64 };
                metrics.insert("recall_iou50".to_string(), recall);
            }
        }
        Ok(TaskMetrics { task: spec.name, kind: spec.kind, split, n_samples: n, metrics })
    }

    pub fn snapshot(&self) -> MtlSnapshot {
        MtlSnapshot {
            config: self.cfg.clone(),
            micro_step: self.micro_step,
            optimizer_steps: self.optimizer_steps,
            cursors: self.cursors.clone(),
            rng: RngState::capture(&self.rng),
            running: self.running.clone(),
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
            adam_steps: self.opt.steps.clone(),
        }
    }

    /// Rebuilds a state from a snapshot. Pending (unstepped) gradients are not part of
    /// a snapshot, so snapshots should be taken at optimizer-step boundaries.
    pub fn restore(snap: MtlSnapshot) -> Result<Self> {
        let mut s = Self::new(snap.config)?;
        let t = s.num_tasks();
        if snap.cursors.len() != t || snap.running.len() != t {
            return Err(Error::State(format!("snapshot holds state for {} tasks, config has {t}", snap.cursors.len())));
        }
        s.store.load_values(&snap.params)?;
        let n = s.store.len();
        if snap.adam_m.len() != n || snap.adam_v.len() != n || snap.adam_steps.len() != n {
            return Err(Error::State(format!("optimizer state covers {} parameters, model has {n}", snap.adam_m.len())));
        }
        for (i, (_, p)) in s.store.iter().enumerate() {
            if snap.adam_m[i].shape() != p.value.shape() || snap.adam_v[i].shape() != p.value.shape() {
                return Err(Error::State(format!("optimizer moment shape mismatch for `{}`", p.name)));
            }
        }
        s.opt.m = snap.adam_m;
        s.opt.v = snap.adam_v;
        s.opt.steps = snap.adam_steps;
        s.micro_step = snap.micro_step;
        s.optimizer_steps = snap.optimizer_steps;
        s.cursors = snap.cursors;
        s.rng = snap.rng.restore();
        s.running = snap.running;
        Ok(s)
    }

    /// The shared encoder with its current weights, detached from the heads.
    pub fn export_encoder(&self) -> crate::backbone::Encoder<f32> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&self.cfg.backbone, &mut store).expect("validated config");
        // the backbone is registered first in both stores, so ids line up
        for id in self.model.backbone.span().ids() {
            store.get_mut(id).value = self.store.get(id).value.clone();
        }
        crate::backbone::Encoder { backbone, store }
    }
}

#[cfg(test)]
mod tests;

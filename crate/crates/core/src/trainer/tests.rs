use super::*;
use alloc::vec;

fn toy_config(accumulation: usize) -> TrainerConfig {
    let mut tasks: Vec<TaskSpec> = TaskKind::ALL.iter().map(|&k| TaskSpec::new(k.as_str(), k)).collect();
    for (i, t) in tasks.iter_mut().enumerate() {
        t.train_size = 5;
        t.val_size = 3;
        t.seed = 40 + i as u64;
    }
    TrainerConfig {
        backbone: BackboneConfig { embed_dim: 16, depths: [1, 1, 1, 1], input_size: 32, ..BackboneConfig::default() },
        tasks,
        optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        accumulation,
        batch_size: 2,
        seed: 9,
        ..TrainerConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    records: Vec<TrainLogRecord>,
    checkpoints: Vec<u64>,
}

impl TrainHooks for Recorder {
    fn record(&mut self, rec: &TrainLogRecord) -> Result<()> {
        self.records.push(rec.clone());
        Ok(())
    }

    fn checkpoint(&mut self, state: &MtlState) -> Result<()> {
        self.checkpoints.push(state.optimizer_steps);
        Ok(())
    }
}

fn grads(store: &ParamStore<f32>) -> Vec<Tensor<f32>> {
    store.iter().map(|(_, p)| p.grad.clone()).collect()
}

#[test]
fn cycle_gradient_matches_joint_backward() {
    let mut a = MtlState::new(toy_config(3)).unwrap();
    let mut b = a.clone();
    a.accumulation_cycle().unwrap();

    // one tape holding all three losses, summed, differentiated once
    let batches: Vec<Batch> = (0..3).map(|t| b.draw_batch(t).unwrap()).collect();
    let mut rng = b.rng.clone();
    let mut ctx = Ctx::training(&b.store, &mut rng);
    let losses: Vec<Var> = batches.iter().enumerate().map(|(t, bt)| b.task_loss(&mut ctx, t, bt).unwrap()).collect();
    let s01 = ctx.tape.add(losses[0], losses[1]);
    let total = ctx.tape.add(s01, losses[2]);
    let g = ctx.tape.backward(total);
    let tape = ctx.tape;
    b.store.accumulate(&tape, &g);

    let mut worst = 0.0f32;
    for (ga, gb) in grads(&a.store).iter().zip(grads(&b.store).iter()) {
        worst = worst.max(ga.max_abs_diff(gb));
    }
    assert!(worst <= 1e-6, "max abs gradient difference {worst}");
    assert!(grads(&a.store).iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn cycle_total_is_sum_of_task_losses() {
    let mut a = MtlState::new(toy_config(3)).unwrap();
    let mut b = a.clone();
    let total = a.mtl_accumulation_cycle().unwrap();
    let parts = b.joint_cycle().unwrap();
    assert_eq!(parts.len(), 3);
    let sum: f64 = parts.iter().sum();
    assert!((total - sum).abs() <= 1e-9 * sum.abs(), "{total} vs {sum}");
    let worst = grads(&a.store).iter().zip(grads(&b.store).iter()).map(|(x, y)| x.max_abs_diff(y)).fold(0.0f32, f32::max);
    assert!(worst <= 1e-6, "max abs gradient difference {worst}");
}

#[test]
fn round_robin_schedule_and_step_count() {
    let mut s = MtlState::new(toy_config(4)).unwrap();
    let mut rec = Recorder::default();
    let summary = s.train(12, 1, &mut rec).unwrap();
    assert_eq!(summary.micro_steps, 12);
    assert_eq!(summary.optimizer_steps, 3);
    let ids: Vec<usize> = rec.records.iter().map(|r| r.task_id).collect();
    assert_eq!(ids, (0..12).map(|i| i % 3).collect::<Vec<_>>());
    assert_eq!(rec.checkpoints, vec![1, 2, 3]);
    assert!(rec.records.iter().all(|r| r.loss.is_finite() && r.running_mean.is_finite()));
    assert_eq!(rec.records[4].task, "segmentation");
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut s = MtlState::new(toy_config(3)).unwrap();
        s.train(6, 0, &mut NoHooks).unwrap().fingerprint
    };
    let before = MtlState::new(toy_config(3)).unwrap().store.fingerprint();
    let a = run();
    assert_eq!(a, run());
    assert_ne!(a, before);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full = MtlState::new(toy_config(3)).unwrap();
    full.train(9, 0, &mut NoHooks).unwrap();

    let mut first = MtlState::new(toy_config(3)).unwrap();
    first.train(3, 0, &mut NoHooks).unwrap();
    let snap = first.snapshot();
    drop(first);
    let mut resumed = MtlState::restore(snap).unwrap();
    let summary = resumed.train(9, 0, &mut NoHooks).unwrap();
    assert_eq!(summary.micro_steps, 9);
    assert_eq!(summary.fingerprint, full.store.fingerprint());
    assert_eq!(resumed.opt, full.opt);
    assert_eq!(resumed.cursors(), full.cursors());
}

#[test]
fn restore_rejects_mismatched_tasks() {
    let s = MtlState::new(toy_config(3)).unwrap();
    let mut snap = s.snapshot();
    snap.cursors.pop();
    assert!(matches!(MtlState::restore(snap), Err(Error::State(_))));
}

#[test]
fn frozen_encoder_only_heads_move() {
    let mut cfg = toy_config(3);
    cfg.freeze_encoder = true;
    let mut s = MtlState::new(cfg).unwrap();
    let span = s.model.backbone.span();
    let before: Vec<Tensor<f32>> = span.ids().map(|id| s.store.get(id).value.clone()).collect();
    let head_id = s.store.find("head.classification.linear.weight").or_else(|| {
        s.store.iter().find(|(_, p)| p.name.starts_with("head.classification")).map(|(id, _)| id)
    });
    let head_before = s.store.get(head_id.unwrap()).value.clone();
    s.train(3, 0, &mut NoHooks).unwrap();
    for (id, b) in span.ids().zip(&before) {
        assert_eq!(&s.store.get(id).value, b);
    }
    assert_ne!(s.store.get(head_id.unwrap()).value, head_before);
}

#[test]
fn one_task_step_leaves_other_heads_alone() {
    let mut s = MtlState::new(toy_config(1)).unwrap();
    let other: Vec<(ParamId, Tensor<f32>)> = s
        .store
        .iter()
        .filter(|(_, p)| p.group != Group::Shared && p.group != Group::Task(0))
        .map(|(id, p)| (id, p.value.clone()))
        .collect();
    assert!(!other.is_empty());
    s.micro_step(&mut NoHooks).unwrap();
    assert_eq!(s.optimizer_steps, 1);
    for (id, v) in &other {
        assert_eq!(&s.store.get(*id).value, v);
    }
}

use crate::nn::ParamId;

#[test]
fn non_finite_loss_names_the_task() {
    let mut s = MtlState::new(toy_config(3)).unwrap();
    let id = s.store.iter().find(|(_, p)| p.name.starts_with("head.classification")).unwrap().0;
    s.store.get_mut(id).value.data_mut().fill(f32::NAN);
    let err = s.accumulate_task(0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(err.to_string().contains("classification"), "{err}");
}

#[test]
fn total_steps_below_window_rejected() {
    let mut s = MtlState::new(toy_config(4)).unwrap();
    assert!(s.train(3, 0, &mut NoHooks).is_err());
    assert_eq!(s.micro_step, 0);
}

#[test]
fn config_validation() {
    let mut cfg = toy_config(3);
    cfg.tasks[1].name = cfg.tasks[0].name.clone();
    assert!(MtlState::new(cfg).is_err());
    let mut cfg = toy_config(3);
    cfg.tasks.clear();
    assert!(MtlState::new(cfg).is_err());
    let mut cfg = toy_config(3);
    cfg.backbone.input_size = 256;
    assert!(MtlState::new(cfg).is_err());
    let mut cfg = toy_config(0);
    cfg.accumulation = 0;
    assert!(MtlState::new(cfg).is_err());
    let mut cfg = toy_config(3);
    cfg.tasks[0].classes = Some(1);
    assert!(MtlState::new(cfg).is_err());
}

#[test]
fn epochs_visit_every_sample_once() {
    let mut s = MtlState::new(toy_config(3)).unwrap();
    let a = s.epoch_order(0, 0);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..5).collect::<Vec<_>>());
    assert_ne!(a, s.epoch_order(0, 1));
    for _ in 0..3 {
        s.draw_batch(0).unwrap();
    }
    // 6 samples drawn from an epoch of 5
    assert_eq!(s.cursors()[0], Cursor { epoch: 1, pos: 1 });
}

#[test]
fn cropping_keeps_annotations_inside() {
    let patch = gen_patch(TaskKind::Detection, 2, 4, &CenterProfile::neutral(), 5);
    let full = patch.boxes.len();
    let smp = prepare(patch, 96);
    assert_eq!(smp.image.len(), 3 * 96 * 96);
    assert_eq!(smp.mask.len(), 96 * 96);
    assert!(smp.boxes.len() <= full);
    for b in &smp.boxes {
        assert!(b.x_max <= 96.0 && b.y_max <= 96.0 && b.area() > 0.0);
    }
    let seg = gen_patch(TaskKind::Segmentation, 0, 2, &CenterProfile::neutral(), 5);
    let smp = prepare(seg.clone(), 64);
    assert_eq!(smp.mask[63], seg.seg_mask[63]);
    assert_eq!(smp.mask[64], seg.seg_mask[PATCH_SIZE]);
}

#[test]
fn evaluation_reports_task_metrics() {
    let mut s = MtlState::new(toy_config(3)).unwrap();
    let cls = s.evaluate_task(0, EvalSplit::Val, None).unwrap();
    assert_eq!(cls.n_samples, 3);
    let acc = cls.metrics["accuracy"];
    assert!((0.0..=1.0).contains(&acc));
    let seg = s.evaluate_task(1, EvalSplit::Train, Some(2)).unwrap();
    assert_eq!(seg.n_samples, 2);
    assert!((0.0..=1.0).contains(&seg.metrics["dice"]));
    let det = s.evaluate_task(2, EvalSplit::Val, None).unwrap();
    assert!((0.0..=1.0).contains(&det.metrics["recall_iou50"]));
    assert!(s.evaluate_task(3, EvalSplit::Val, None).is_err());
    // evaluation does not move the data cursors
    assert_eq!(s.cursors()[0], Cursor::default());
}

#[test]
fn exported_encoder_matches_trained_backbone() {
    let mut s = MtlState::new(toy_config(3)).unwrap();
    s.train(3, 0, &mut NoHooks).unwrap();
    let enc = s.export_encoder();
    for id in s.model.backbone.span().ids() {
        assert_eq!(enc.store.get(id).value, s.store.get(id).value);
        assert_eq!(enc.store.get(id).name, s.store.get(id).name);
    }
    assert_eq!(enc.store.len(), s.model.backbone.span().len());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = toy_config(3);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: TrainerConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    let err = serde_json::from_str::<TrainerConfig>(r#"{"accumulaton": 4}"#).unwrap_err();
    assert!(err.to_string().contains("accumulaton"));
}


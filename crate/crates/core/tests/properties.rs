use std::collections::BTreeSet;

use proptest::prelude::*;

use tc_core::autograd::DiceFocalConfig;
use tc_core::backbone::BackboneConfig;
use tc_core::evaluation::{auc_roc, classification_metrics, make_split, Partition, SlideRecord, SplitMode};
use tc_core::heads::{dice_focal_loss, smoothed_cross_entropy};
use tc_core::latent::extract_patch_grid;
use tc_core::mil::{augment_latent, AugmentOp, MilHeadConfig, MilHeadKind, MilModel};
use tc_core::nn::Ctx;
use tc_core::optim::AdamWConfig;
use tc_core::synthetic::{gen_patch_task_dataset_with, CenterProfile, TaskKind};
use tc_core::trainer::{MtlState, TaskSpec, TrainHooks, TrainLogRecord, TrainerConfig};
use tc_core::Tensor;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor<f32> {
    Tensor::from_vec(shape, data).unwrap()
}

fn brute_auc(y: &[bool], s: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn labelled_scores() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (2usize..50).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(0u8..6, n))).prop_map(
        |(mut y, s)| {
            y[0] = true;
            y[1] = false;
            (y, s.into_iter().map(|v| v as f64 / 5.0).collect())
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_equals_pairwise_ranking((y, s) in labelled_scores()) {
        let a = auc_roc(&y, &s).unwrap();
        prop_assert!((a - brute_auc(&y, &s)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn metrics_are_bounded_and_permutation_invariant(
        rows in prop::collection::vec((0usize..3, 0usize..3, 0.0f64..1.0), 4..40),
        seed in any::<u64>(),
    ) {
        let mut rows = rows;
        rows[0].0 = 0;
        rows[1].0 = 1;
        rows[2].0 = 2;
        let split = |r: &[(usize, usize, f64)]| {
            let y: Vec<usize> = r.iter().map(|t| t.0).collect();
            let p: Vec<usize> = r.iter().map(|t| t.1).collect();
            let s: Vec<Vec<f64>> = r.iter().map(|t| vec![t.2, (1.0 - t.2) / 2.0, (1.0 - t.2) / 2.0]).collect();
            (y, p, s)
        };
        let (y, p, s) = split(&rows);
        let a = classification_metrics(&y, &p, Some(&s)).unwrap();
        for v in [a.accuracy, a.balanced_accuracy, a.weighted_f1, a.macro_f1, a.auc.unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }

        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut rng = tc_core::rng::rng_from(&[seed]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled: Vec<_> = order.iter().map(|&i| rows[i]).collect();
        let (y2, p2, s2) = split(&shuffled);
        let b = classification_metrics(&y2, &p2, Some(&s2)).unwrap();
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert_eq!(a.balanced_accuracy, b.balanced_accuracy);
        prop_assert_eq!(a.weighted_f1, b.weighted_f1);
        prop_assert_eq!(a.macro_f1, b.macro_f1);
        prop_assert_eq!(a.auc, b.auc);
    }

    #[test]
    fn smoothed_ce_never_below_its_optimum(
        logits in prop::collection::vec(-8.0f64..8.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
        eps in 0.0f64..0.5,
    ) {
        let k = 4.0;
        let hi = 1.0 - eps + eps / k;
        let lo = eps / k;
        let entropy = -(hi * hi.ln() + if lo > 0.0 { 3.0 * lo * lo.ln() } else { 0.0 });
        let l = smoothed_cross_entropy(&Tensor::from_vec(&[3, 4], logits).unwrap(), &labels, eps).unwrap();
        prop_assert!(l >= entropy - 1e-6, "{l} < {entropy}");
    }

    #[test]
    fn dice_focal_is_non_negative_and_zero_at_one_hot(
        target in prop::collection::vec(0usize..3, 2 * 5 * 5),
        raw in prop::collection::vec(0.01f64..1.0, 2 * 3 * 5 * 5),
    ) {
        let (b, k, hw) = (2, 3, 25);
        let mut probs = raw.clone();
        for bi in 0..b {
            for s in 0..hw {
                let z: f64 = (0..k).map(|c| raw[(bi * k + c) * hw + s]).sum();
                for c in 0..k {
                    probs[(bi * k + c) * hw + s] /= z;
                }
            }
        }
        let cfg = DiceFocalConfig::default();
        let l = dice_focal_loss(&Tensor::from_vec(&[2, 3, 5, 5], probs).unwrap(), &target, &cfg).unwrap();
        prop_assert!(l >= 0.0);

        let mut onehot = vec![0.0f64; b * k * hw];
        for bi in 0..b {
            for s in 0..hw {
                onehot[(bi * k + target[bi * hw + s]) * hw + s] = 1.0;
            }
        }
        let zero = dice_focal_loss(&Tensor::from_vec(&[2, 3, 5, 5], onehot).unwrap(), &target, &cfg).unwrap();
        prop_assert_eq!(zero, 0.0);
    }

    #[test]
    fn patch_grid_windows_stay_inside(h in 1usize..2000, w in 1usize..2000, p in 1usize..300, s in 1usize..300) {
        match extract_patch_grid(h, w, p, s) {
            Err(_) => prop_assert!(h < p || w < p),
            Ok(g) => {
                prop_assert_eq!(g.grid_h, (h - p) / s + 1);
                prop_assert_eq!(g.grid_w, (w - p) / s + 1);
                let (y, x) = g.window(g.grid_h - 1, g.grid_w - 1);
                prop_assert!(y + p <= h && x + p <= w);
                prop_assert!(y + s + p > h && x + s + p > w);
            }
        }
    }

    #[test]
    fn splits_partition_every_slide(
        per_center in prop::collection::vec(4usize..12, 2..4),
        mode_pick in 0usize..3,
        seed in any::<u64>(),
    ) {
        let mut slides = Vec::new();
        for (c, &n) in per_center.iter().enumerate() {
            for k in 0..n {
                slides.push(SlideRecord { slide_id: format!("C{c}-{k}"), center_id: format!("C{c}"), label: k % 2 });
            }
        }
        let mode = match mode_pick {
            0 => SplitMode::CrossCenter { train_centers: vec!["C0".into()] },
            1 => SplitMode::KFold { k: 3 },
            _ => SplitMode::Holdout { test_fraction: 0.2 },
        };
        let plans = make_split(&slides, &mode, seed).unwrap();
        let mut tested = BTreeSet::new();
        for plan in &plans {
            prop_assert_eq!(plan.assignment.len(), slides.len());
            for s in &slides {
                prop_assert!(plan.assignment.contains_key(&s.slide_id));
            }
            prop_assert!(plan.count(Partition::Train) > 0 && plan.count(Partition::Test) > 0);
            for id in plan.ids(Partition::Test) {
                prop_assert!(tested.insert(id.to_string()), "{id} tested twice");
            }
            if mode_pick == 0 {
                let test = plan.centers_of(Partition::Test);
                prop_assert!(plan.centers_of(Partition::Train).is_disjoint(&test));
                prop_assert!(plan.centers_of(Partition::Val).is_disjoint(&test));
            }
        }
        if mode_pick == 1 {
            prop_assert_eq!(tested.len(), slides.len());
        }
    }

    #[test]
    fn abmil_attention_is_a_distribution(h in 4usize..14, w in 4usize..14, scale in 0.01f32..20.0, seed in any::<u64>()) {
        let m = MilModel::new(&MilHeadConfig::new(MilHeadKind::Abmil, 8, 8, 2)).unwrap();
        let mut rng = tc_core::rng::rng_from(&[seed]);
        let x = tensor(&[8, h, w], (0..8 * h * w).map(|_| scale * tc_core::rng::normal(&mut rng) as f32).collect());
        let att = m.infer(&x).unwrap().1.unwrap();
        let sum: f64 = att.data().iter().map(|&a| a as f64).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(att.data().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn max_pooling_ignores_spatial_order(cells in 2usize..20, seed in any::<u64>()) {
        let m = MilModel::new(&MilHeadConfig::new(MilHeadKind::MaxPool, 8, 8, 2)).unwrap();
        let mut rng = tc_core::rng::rng_from(&[seed]);
        let data: Vec<f32> = (0..64 * cells).map(|_| tc_core::rng::normal(&mut rng) as f32).collect();
        let mut order: Vec<usize> = (0..cells).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted: Vec<f32> = (0..64).flat_map(|c| order.iter().map(move |&j| (c, j))).map(|(c, j)| data[c * cells + j]).collect();
        let logits = |d: Vec<f32>| {
            let mut ctx = Ctx::inference(&m.store);
            let h = ctx.input(tensor(&[1, 64, 1, cells], d));
            let (pooled, _) = m.head.pool(&mut ctx, h);
            let out = m.head.classify(&mut ctx, pooled);
            ctx.tape.value(out).data().to_vec()
        };
        prop_assert_eq!(logits(data), logits(permuted));
    }

    #[test]
    fn flips_are_involutions_and_resize_is_square(c in 1usize..4, h in 1usize..12, w in 1usize..12, s in 32usize..80) {
        let x = tensor(&[c, h, w], (0..c * h * w).map(|i| i as f32).collect());
        for op in [AugmentOp::HFlip, AugmentOp::VFlip] {
            let twice = augment_latent(&augment_latent(&x, op).unwrap(), op).unwrap();
            prop_assert_eq!(&twice, &x);
        }
        let r = augment_latent(&x, AugmentOp::Resize(s)).unwrap();
        prop_assert_eq!(r.shape(), &[c, s, s]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_classification_sets_are_balanced_and_deterministic(n in 1usize..40, classes in 2usize..6, seed in any::<u64>()) {
        let center = CenterProfile::neutral();
        let a = gen_patch_task_dataset_with(TaskKind::Classification, n, classes, &center, seed).unwrap();
        let mut counts = vec![0usize; classes];
        for p in &a {
            counts[p.cls_label] += 1;
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let b = gen_patch_task_dataset_with(TaskKind::Classification, n, classes, &center, seed).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.pixels.data(), y.pixels.data());
            prop_assert_eq!(x.cls_label, y.cls_label);
        }
    }

    #[test]
    fn every_task_is_visited_equally(rounds in 1u64..4, accumulation in 1usize..5, seed in any::<u64>()) {
        let mut tasks: Vec<TaskSpec> = TaskKind::ALL.iter().map(|&k| TaskSpec::new(k.as_str(), k)).collect();
        for t in &mut tasks {
            t.train_size = 4;
            t.val_size = 2;
        }
        let cfg = TrainerConfig {
            backbone: BackboneConfig { embed_dim: 8, depths: [1, 1, 1, 1], input_size: 32, ..BackboneConfig::default() },
            tasks,
            optimizer: AdamWConfig::default(),
            accumulation,
            batch_size: 1,
            seed,
            ..TrainerConfig::default()
        };
        struct Visits(Vec<usize>);
        impl TrainHooks for Visits {
            fn record(&mut self, r: &TrainLogRecord) -> tc_core::Result<()> {
                self.0.push(r.task_id);
                Ok(())
            }
        }
        let mut state = MtlState::new(cfg).unwrap();
        let steps = 3 * rounds * accumulation.max(1) as u64;
        let mut v = Visits(Vec::new());
        state.train(steps.max(3 * accumulation as u64), 0, &mut v).unwrap();
        let m = v.0.len() / 3;
        for t in 0..3 {
            prop_assert_eq!(v.0.iter().filter(|&&x| x == t).count(), m);
        }
        for win in v.0.chunks(3) {
            prop_assert_eq!(win, &[0, 1, 2][..]);
        }
    }
}

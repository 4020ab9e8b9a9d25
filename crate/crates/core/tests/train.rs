mod common;

use proptest::prelude::*;
use uniseg::data::{generate_volume, preset_task_specs, VolumeSample};
use uniseg::harness::load_checkpoint;
use uniseg::net::{Model, ModelConfig, TaskDescriptor, TaskRegistry, Variant, HEAD_PREFIX};
use uniseg::train::{
    crop, dice_ce_loss, deep_supervision_loss, downsample_labels, ds_weights, finetune, iteration_rng,
    periodic_checkpoint_name, sample_task_batch, sgd_poly_step, train_iteration, train_loop,
    OptimizerState, TaskBatch, TrainConfig, TrainOutputs, DICE_EPS, FINAL_CHECKPOINT,
};
use uniseg::{Error, Graph, ParamStore, Tensor};

use common::random;

fn scalar(g: &Graph<f64>, v: uniseg::Var) -> f64 {
    g.value(v).data()[0]
}

/// Tasks with 1, 2 and 4 channels on 16^3 volumes.
fn small_data(tasks: usize, per_task: u64) -> (TaskRegistry, Vec<Vec<VolumeSample>>) {
    let specs: Vec<_> = preset_task_specs(tasks, 3)
        .into_iter()
        .map(|mut s| {
            s.dims = [16, 16, 16];
            s
        })
        .collect();
    let reg = TaskRegistry::from_specs(specs.iter().map(|s| (s.name.clone(), s.in_channels, s.num_classes))).unwrap();
    let data = specs
        .iter()
        .enumerate()
        .map(|(t, s)| (0..per_task).map(|i| generate_volume(s, i, t).unwrap()).collect())
        .collect();
    (reg, data)
}

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        base_channels: 2,
        channel_cap: 8,
        patch: [8, 16, 16],
        ..ModelConfig::toy()
    }
    .with_variant(variant)
}

fn short_cfg(iters: usize) -> TrainConfig {
    TrainConfig {
        max_iterations: iters,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn saturated_correct_logits_give_tiny_loss() {
    let labels: Vec<u8> = (0..8).map(|i| (i % 3) as u8).collect();
    let logits = Tensor::from_fn(&[3, 2, 2, 2], |i| if i / 8 == labels[i % 8] as usize { 50.0 } else { 0.0 });
    let mut g = Graph::<f64>::new();
    let x = g.input(logits);
    let parts = dice_ce_loss(&mut g, x, &labels, 3).unwrap();
    assert!(scalar(&g, parts.total) < 1e-3);
}

#[test]
fn uniform_logits_match_hand_evaluation() {
    let labels = [0u8, 0, 0, 0, 1, 1, 1, 1];
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 2, 2, 2]));
    let parts = dice_ce_loss(&mut g, x, &labels, 2).unwrap();
    let ce = std::f64::consts::LN_2;
    let dice = 1.0 - (2.0 * (4.0 * 0.5) + DICE_EPS) / (8.0 * 0.5 + 4.0 + DICE_EPS);
    assert!((scalar(&g, parts.ce) - ce).abs() < 1e-12);
    assert!((scalar(&g, parts.dice) - dice).abs() < 1e-12);
    assert!((dice - 0.5).abs() < 1e-5);
    assert!((scalar(&g, parts.total) - ce - dice).abs() < 1e-12);
}

#[test]
fn channels_beyond_task_classes_get_zero_gradient() {
    let labels: Vec<u8> = (0..27).map(|i| (i % 3) as u8).collect();
    let mut g = Graph::<f64>::new();
    let x = g.variable(random(&[5, 3, 3, 3], 4));
    let parts = dice_ce_loss(&mut g, x, &labels, 3).unwrap();
    let grads = g.backward(parts.total).unwrap();
    let gx = grads.wrt(x).unwrap();
    assert!(gx[..3 * 27].iter().any(|&v| v != 0.0));
    assert!(gx[3 * 27..].iter().all(|&v| v == 0.0));
}

#[test]
fn label_out_of_range_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[3, 1, 1, 2]));
    let err = dice_ce_loss(&mut g, x, &[0, 2], 2).unwrap_err();
    assert!(matches!(err, Error::Label(_)), "{err}");
}

#[test]
fn ds_weights_halve_per_scale() {
    let w = ds_weights(4, 0.5);
    for (a, b) in w.iter().zip([8.0 / 15.0, 4.0 / 15.0, 2.0 / 15.0, 1.0 / 15.0]) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(ds_weights(1, 0.5), vec![1.0]);
}

#[test]
fn deep_supervision_single_scale_equals_dice_ce() {
    let labels: Vec<u8> = (0..64).map(|i| (i * 7 % 3) as u8).collect();
    let logits = random(&[4, 4, 4, 4], 9);
    let mut g1 = Graph::<f64>::new();
    let x1 = g1.input(logits.clone());
    let direct = dice_ce_loss(&mut g1, x1, &labels, 3).unwrap();
    let mut g2 = Graph::<f64>::new();
    let x2 = g2.input(logits);
    let (total, rep) = deep_supervision_loss(&mut g2, &[x2], &[labels], 3, &[1.0]).unwrap();
    assert_eq!(scalar(&g1, direct.total).to_bits(), scalar(&g2, total).to_bits());
    assert_eq!(rep.total.to_bits(), scalar(&g2, total).to_bits());
}

#[test]
fn deep_supervision_two_scales_is_weighted_sum() {
    let fine: Vec<u8> = (0..64).map(|i| (i * 5 % 3) as u8).collect();
    let coarse = downsample_labels(&fine, [4, 4, 4], [2, 2, 2]).unwrap();
    let (l0, l1) = (random(&[3, 4, 4, 4], 1), random(&[3, 2, 2, 2], 2));
    let single = |t: &Tensor<f64>, lab: &[u8]| {
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let p = dice_ce_loss(&mut g, x, lab, 3).unwrap();
        scalar(&g, p.total)
    };
    let expected = 2.0 / 3.0 * single(&l0, &fine) + 1.0 / 3.0 * single(&l1, &coarse);
    let mut g = Graph::new();
    let (a, b) = (g.input(l0), g.input(l1));
    let (total, rep) = deep_supervision_loss(&mut g, &[a, b], &[fine, coarse], 3, &[2.0 / 3.0, 1.0 / 3.0]).unwrap();
    assert!((scalar(&g, total) - expected).abs() < 1e-12);
    let recomposed: f64 = rep.per_scale.iter().zip([2.0 / 3.0, 1.0 / 3.0]).map(|(l, w)| w * l).sum();
    assert!((rep.total - recomposed).abs() < 1e-9);
    assert!((rep.total - rep.dice - rep.ce).abs() < 1e-9);
}

#[test]
fn deep_supervision_rejects_scale_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[2, 1, 1, 1]));
    assert!(deep_supervision_loss(&mut g, &[x], &[vec![0]], 2, &[0.5, 0.5]).is_err());
}

#[test]
fn nearest_downsampling_takes_corner_voxels() {
    let labels: Vec<u8> = (0..16).map(|i| i as u8).collect();
    assert_eq!(downsample_labels(&labels, [1, 4, 4], [1, 2, 2]).unwrap(), vec![0, 2, 8, 10]);
}

#[test]
fn lr_schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 0.01);
    assert_eq!(cfg.lr_at(cfg.max_iterations), 0.0);
}

proptest! {
    #[test]
    fn lr_is_non_increasing(max in 1usize..5000, power in 0.1f64..3.0) {
        let cfg = TrainConfig { max_iterations: max, poly_power: power, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for it in 0..=max {
            let lr = cfg.lr_at(it);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert_eq!(prev, 0.0);
    }
}

fn one_param_store() -> (ParamStore<f64>, uniseg::autodiff::ParamId) {
    let mut store = ParamStore::new();
    let id = store
        .add("w", random(&[2, 3], 5), uniseg::autodiff::ParamKind::Weight)
        .unwrap();
    (store, id)
}

#[test]
fn step_before_backward_is_usage_error() {
    let (mut store, _) = one_param_store();
    let mut opt = OptimizerState::new(&store);
    let err = sgd_poly_step(&mut store, &mut opt, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn zero_gradient_step_is_a_fixed_point() {
    let (mut store, id) = one_param_store();
    let before = store.get(id).value.clone();
    let mut opt = OptimizerState::new(&store);
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let z = g.scale(p, 0.0);
    let loss = g.sum(z);
    g.backward_into(loss, &mut store, 1.0).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    sgd_poly_step(&mut store, &mut opt, &cfg).unwrap();
    assert!(store.get(id).value.bitwise_eq(&before));
    assert_eq!(opt.iteration, 1);
}

#[test]
fn nesterov_step_matches_hand_update() {
    let (mut store, id) = one_param_store();
    let w0 = store.get(id).value.data().to_vec();
    let mut opt = OptimizerState::new(&store);
    let cfg = TrainConfig::default();
    // loss = sum(w) has gradient 1 everywhere
    for step in 0..2 {
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let loss = g.sum(p);
        g.backward_into(loss, &mut store, 1.0).unwrap();
        let lr = sgd_poly_step(&mut store, &mut opt, &cfg).unwrap();
        assert_eq!(lr, cfg.lr_at(step));
    }
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for (i, &w) in w0.iter().enumerate() {
        let mut w = w;
        let mut b = 0.0;
        for step in 0..2 {
            let g = 1.0 + wd * w;
            b = mu * b + g;
            w -= cfg.lr_at(step) * (g + mu * b);
        }
        assert!((store.get(id).value.data()[i] - w).abs() < 1e-15);
    }
}

#[test]
fn single_task_batches_are_task_zero() {
    let (_, data) = small_data(1, 2);
    let cfg = TrainConfig::default();
    let mut rng = iteration_rng(0, 0);
    for _ in 0..20 {
        let b = sample_task_batch::<f32, _>(&data, [8, 16, 16], &cfg, &mut rng).unwrap();
        assert_eq!(b.task_id, 0);
        assert_eq!(b.images.len(), 2);
    }
}

#[test]
fn task_frequencies_are_uniform() {
    let specs = preset_task_specs(4, 1);
    let data: Vec<Vec<VolumeSample>> = specs
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut s = s.clone();
            s.dims = [16, 16, 16];
            vec![generate_volume(&s, 0, t).unwrap()]
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut rng = iteration_rng(42, 0);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[sample_task_batch::<f32, _>(&data, [4, 4, 4], &cfg, &mut rng).unwrap().task_id] += 1;
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((0.22..=0.28).contains(&f), "{counts:?}");
    }
}

#[test]
fn sampler_is_deterministic_and_homogeneous() {
    let (_, data) = small_data(3, 3);
    let cfg = TrainConfig::default();
    let draw = |seed| {
        let mut rng = iteration_rng(seed, 0);
        (0..10)
            .map(|_| {
                let b = sample_task_batch::<f32, _>(&data, [8, 16, 16], &cfg, &mut rng).unwrap();
                for img in &b.images {
                    assert_eq!(img.channels(), data[b.task_id][0].channels());
                    assert_eq!(img.spatial(), [8, 16, 16]);
                }
                (b.task_id, b.offsets)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn oversized_patch_is_padded() {
    let (_, data) = small_data(1, 1);
    let b = sample_task_batch::<f32, _>(&data, [32, 16, 16], &TrainConfig::default(), &mut iteration_rng(0, 0)).unwrap();
    assert_eq!(b.images[0].spatial(), [32, 16, 16]);
    assert_eq!(b.labels[0].len(), 32 * 256);
}

#[test]
fn first_iteration_loss_is_finite_for_every_variant() {
    let (reg, data) = small_data(3, 1);
    let cfg = short_cfg(1);
    for v in Variant::ALL {
        let mut model = Model::<f32>::build(small_config(v), reg.clone(), 0).unwrap();
        let mut opt = OptimizerState::new(model.params());
        for t in 0..3 {
            let (img, lab) = crop::<f32>(&data[t][0], [8, 16, 16], [4, 0, 0]);
            let batch = TaskBatch {
                task_id: t,
                num_classes: reg.get(t).unwrap().num_classes,
                images: vec![img],
                labels: vec![lab],
                volumes: vec![0],
                offsets: vec![[4, 0, 0]],
            };
            let r = train_iteration(&mut model, &batch, &cfg, &mut opt).unwrap();
            assert!(r.total.is_finite() && r.total > 0.0, "{v} task {t}");
            opt.iteration = 0;
        }
    }
}

#[test]
fn overfits_one_batch() {
    let (reg, data) = small_data(1, 2);
    let mut model = Model::<f32>::build(small_config(Variant::UniSeg), reg, 0).unwrap();
    let mut opt = OptimizerState::new(model.params());
    let cfg = short_cfg(200);
    let batch = sample_task_batch::<f32, _>(&data, [8, 16, 16], &cfg, &mut iteration_rng(0, 0)).unwrap();
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..200 {
        let r = train_iteration(&mut model, &batch, &cfg, &mut opt).unwrap();
        first.get_or_insert(r.total);
        last = r.total;
    }
    let first = first.unwrap();
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

fn trace_bits(trace: &[uniseg::train::LossReport]) -> Vec<[u64; 4]> {
    trace
        .iter()
        .map(|r| [r.total.to_bits(), r.dice.to_bits(), r.ce.to_bits(), r.lr.to_bits()])
        .collect()
}

#[test]
fn identical_seeds_give_bitwise_identical_traces() {
    let (reg, data) = small_data(3, 2);
    let run = || {
        let mut model = Model::<f64>::build(small_config(Variant::UniSeg), reg.clone(), 5).unwrap();
        let mut opt = OptimizerState::new(model.params());
        trace_bits(&train_loop(&mut model, &mut opt, &data, &short_cfg(4), &TrainOutputs::default(), |_| {}).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn zero_iterations_leave_model_unchanged() {
    let (reg, data) = small_data(3, 1);
    let mut model = Model::<f64>::build(small_config(Variant::UniSeg), reg, 5).unwrap();
    let before = model.params().clone();
    let mut opt = OptimizerState::new(model.params());
    let trace = train_loop(&mut model, &mut opt, &data, &short_cfg(0), &TrainOutputs::default(), |_| {}).unwrap();
    assert!(trace.is_empty());
    for ((_, a), (_, b)) in before.iter().zip(model.params().iter()) {
        assert!(a.value.bitwise_eq(&b.value));
    }
}

#[test]
fn resume_from_checkpoint_reproduces_trace() {
    let (reg, data) = small_data(3, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        ..short_cfg(6)
    };
    let mut model = Model::<f64>::build(small_config(Variant::UniSeg), reg, 5).unwrap();
    let mut opt = OptimizerState::new(model.params());
    let outputs = TrainOutputs {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        trace_path: Some(dir.path().join("trace.csv")),
    };
    let full = train_loop(&mut model, &mut opt, &data, &cfg, &outputs, |_| {}).unwrap();

    let ck = load_checkpoint::<f64>(dir.path().join(periodic_checkpoint_name(3))).unwrap();
    assert_eq!(ck.optimizer.iteration, 3);
    assert_eq!(ck.run.train, cfg);
    let (mut resumed, mut ropt) = (ck.model, ck.optimizer);
    let tail = train_loop(&mut resumed, &mut ropt, &data, &cfg, &TrainOutputs::default(), |_| {}).unwrap();
    assert_eq!(trace_bits(&tail), trace_bits(&full[3..]));
    for ((_, a), (_, b)) in model.params().iter().zip(resumed.params().iter()) {
        assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
    }

    let fin = load_checkpoint::<f64>(dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(fin.optimizer.iteration, 6);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("iteration,task_id,lr,total,dice,ce\n"));
}

#[test]
fn finetune_without_iterations_keeps_trunk_and_redraws_heads() {
    let (reg, data) = small_data(3, 1);
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Variant::UniSeg);
    let mut model = Model::<f64>::build(config.clone(), reg, 5).unwrap();
    let mut opt = OptimizerState::new(model.params());
    let outputs = TrainOutputs {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        trace_path: None,
    };
    train_loop(&mut model, &mut opt, &data, &short_cfg(2), &outputs, |_| {}).unwrap();

    let task = TaskDescriptor::new(0, "tumor-ft", 2, 3).unwrap();
    let ckpt = dir.path().join(FINAL_CHECKPOINT);
    let out = finetune::<f64>(&ckpt, &config, &task, &data[1], &short_cfg(0), &TrainOutputs::default(), |_| {}).unwrap();
    assert!(out.trace.is_empty());
    let mut heads = 0;
    for (_, p) in out.model.params().iter() {
        let up = model.params().by_name(&p.name).unwrap();
        if p.name.starts_with(HEAD_PREFIX) {
            heads += 1;
            assert!(!p.value.bitwise_eq(&up.value) || p.value.shape() != up.value.shape(), "{}", p.name);
        } else {
            assert!(p.value.bitwise_eq(&up.value), "{}", p.name);
        }
    }
    assert!(heads > 0);
    assert_eq!(out.transfer.reinitialized.len(), heads);
    assert_eq!(out.model.registry().len(), 1);

    let mut other = config.clone();
    other.strides = vec![[1, 1, 1], [2, 2, 2], [1, 2, 2], [2, 2, 2]];
    let err = finetune::<f64>(&ckpt, &other, &task, &data[1], &short_cfg(0), &TrainOutputs::default(), |_| {}).unwrap_err();
    assert!(err.to_string().contains("strides"), "{err}");
}

use rcp_core::adapter::{apply_repair, build_conditioning, film_correction};
use rcp_core::backbone::{Backbone, BackboneConfig, ForwardMode, NoHooks};
use rcp_core::harness::*;
use rcp_core::objectives::average_retention;
use rcp_core::params::ParamStore;
use rcp_core::rcp::*;
use rcp_core::{Rng, Tape, Tensor};

fn small_task() -> TaskConfig {
    TaskConfig {
        n_vision: 12,
        k_informative: 4,
        ..TaskConfig::default()
    }
}

fn setup(seed: u64) -> (TaskConfig, BackboneConfig, Backbone, RcpModel) {
    let task = small_task();
    let cfg = task.backbone_config(8, 16, 2, 32);
    let backbone = Backbone::new(cfg.clone(), seed).unwrap();
    let model = RcpModel::new(RcpConfig::for_backbone(&cfg, 0.33, Variant::Full), &cfg, seed).unwrap();
    (task, cfg, backbone, model)
}

/// Random pruning biases and non-zero adapter outputs so masks and repairs are non-trivial.
fn perturb(model: &mut RcpModel, seed: u64) {
    let mut rng = Rng::new(seed);
    let stages: Vec<_> = model.stages().iter().map(|s| s.bias).collect();
    let adapters: Vec<_> = model.adapters().iter().flat_map(|a| [a.up, a.w_gamma, a.w_beta]).collect();
    let store = model.store_mut();
    for id in stages {
        *store.get_mut(id) = Tensor::scalar(rng.normal() * 1.5);
    }
    for id in adapters {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rng.normal_tensor(&shape, 0.5);
    }
}

#[test]
fn masked_and_gathered_passes_agree() {
    let (task, _, backbone, mut model) = setup(2);
    for trial in 0..40u64 {
        perturb(&mut model, trial);
        let ex = generate_example(&task, 9, Split::Eval, trial).unwrap();
        let tape = Tape::new();
        let bb = backbone.bind(&tape, false);
        let vars = model.store().bind(&tape, false);
        let run = |mode| {
            student_forward(&model, &backbone, &bb, &vars, &ex.tokens, &ex.layout, mode, PassSettings::infer(0.33)).unwrap()
        };
        let (m, g) = (run(ForwardMode::Masked), run(ForwardMode::Gathered));
        assert_eq!(m.mask, g.mask);
        for (l, rec) in g.out.trace.layers.iter().enumerate() {
            let a = m.out.trace.rows_at(l, &rec.positions).unwrap();
            assert!(a.value().max_abs_diff(&rec.hidden.value()) <= 1e-9, "layer {l}");
        }
        let ans = |p: &StudentPass| argmax_rows(&p.out.answer_logits(&ex.layout).unwrap().value());
        assert_eq!(ans(&m), ans(&g));
    }
}

#[test]
fn dense_masks_and_fresh_adapters_reproduce_the_teacher_bitwise() {
    let (task, _, backbone, mut model) = setup(3);
    let ids: Vec<_> = model.stages().iter().map(|s| s.bias).collect();
    for id in ids {
        *model.store_mut().get_mut(id) = Tensor::scalar(1e3);
    }
    for i in 0..5 {
        let ex = generate_example(&task, 1, Split::Train, i).unwrap();
        let tape = Tape::new();
        let bb = backbone.bind(&tape, false);
        let vars = model.store().bind(&tape, false);
        let teacher = backbone.forward(&bb, &ex.tokens, &ex.layout, ForwardMode::Teacher, &mut NoHooks).unwrap();
        let s = student_forward(&model, &backbone, &bb, &vars, &ex.tokens, &ex.layout, ForwardMode::Masked, PassSettings::infer(1.0)).unwrap();
        assert_eq!(s.out.logits.value().data(), teacher.logits.value().data());
        assert_eq!(s.mask.kept(), ex.layout.n_vision);
    }
}

#[test]
fn repair_only_moves_answer_rows() {
    let (task, cfg, _, mut model) = setup(4);
    perturb(&mut model, 11);
    let ex = generate_example(&task, 1, Split::Train, 0).unwrap();
    let gate = ex.layout.build_gate().unwrap();
    let mut rng = Rng::new(5);
    let tape = Tape::new();
    let vars = model.store().bind(&tape, false);
    let x = tape.constant(rng.normal_tensor(&[ex.layout.total(), cfg.d_model], 1.0));
    let ctx = model.context().unwrap();
    let n = ex.layout.n_vision;
    let m = tape.constant(Tensor::vector((0..n).map(|i| (i % 2) as f64).collect()));
    let pv = tape.constant(rng.normal_tensor(&[n, cfg.d_model], 1.0));
    let w = m.affine(-1.0, 1.0);
    let c = rcp_core::adapter::encode_context(&vars, ctx, &m, &pv, &pv, &w, 0).unwrap();
    let ap = &model.adapters()[0];
    let cond = build_conditioning(&x, &[c], &vars, ap).unwrap();
    let dh = film_correction(&x, &cond, &vars, ap).unwrap();
    let out = apply_repair(&x, &dh, &gate).unwrap();
    let (xv, ov) = (x.value(), out.value());
    let mut moved = 0;
    for r in 0..ex.layout.total() {
        if ex.layout.is_answer(r) {
            moved += usize::from(xv.row(r) != ov.row(r));
        } else {
            assert_eq!(xv.row(r), ov.row(r));
        }
    }
    assert!(moved > 0);
}

#[test]
fn task_labels_match_the_oracle() {
    let task = TaskConfig::default();
    for ex in generate_batch(&task, 4, Split::Train, 0, 10_000).unwrap() {
        let vision = &ex.tokens[ex.layout.vision_span()];
        assert_eq!(oracle_answer(&task, vision, ex.query_type), Some(ex.answer_value));
        let lo = task.object_token(0, 0);
        let copies: Vec<usize> = vision.iter().filter(|&&t| t >= lo && (t - lo) / task.n_values == ex.query_type).copied().collect();
        assert!(copies.iter().all(|&t| t == task.object_token(ex.query_type, ex.answer_value)));
        assert!(ex.layout.q_effective >= 1);
    }
    assert_eq!(
        generate_batch(&task, 4, Split::Eval, 3, 20).unwrap(),
        generate_batch(&task, 4, Split::Eval, 3, 20).unwrap()
    );
}

#[test]
fn informative_positions_spread_over_the_grid() {
    let task = TaskConfig::default();
    let mut hits = vec![0usize; task.n_vision];
    for ex in generate_batch(&task, 8, Split::Train, 0, 4000).unwrap() {
        for i in ex.informative {
            hits[i] += 1;
        }
    }
    let mean = 4000.0 * task.k_informative as f64 / task.n_vision as f64;
    assert!(hits.iter().all(|&h| (h as f64 - mean).abs() < 0.2 * mean), "{hits:?}");
}

#[test]
fn training_leaves_the_backbone_untouched_and_moves_plugins() {
    let (task, cfg, backbone, model) = setup(6);
    let before = backbone.digest();
    let start = model.store().digest();
    let tc = TrainConfig::one_epoch(12, 4, 0.33, 1e-2, 1);
    let mut tr = Trainer::new(&backbone, model, task.clone(), tc).unwrap();
    let log = tr.run(|_| {}).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log[0].update_norm > 0.0);
    assert_eq!(backbone.digest(), before);
    assert_ne!(tr.into_model().store().digest(), start);

    let model = RcpModel::new(RcpConfig::for_backbone(&cfg, 0.33, Variant::Full), &cfg, 6).unwrap();
    let mut tc = TrainConfig::one_epoch(8, 4, 0.33, 0.0, 1);
    tc.schedules.lr_floor = 0.0;
    let mut tr = Trainer::new(&backbone, model, task, tc).unwrap();
    let m = tr.train_step().unwrap();
    assert!(m.total.is_finite());
    assert_eq!(tr.into_model().store().digest(), start);
}

#[test]
fn evaluation_modes_agree_and_retention_recounts() {
    let (task, _, backbone, mut model) = setup(7);
    perturb(&mut model, 3);
    let ex = generate_batch(&task, 2, Split::Eval, 0, 30).unwrap();
    let m = evaluate(&backbone, Some(&model), &ex, ForwardMode::Masked, 0.33).unwrap();
    let g = evaluate(&backbone, Some(&model), &ex, ForwardMode::Gathered, 0.33).unwrap();
    assert_eq!(m.predictions, g.predictions);
    let mut recount = vec![0.0; 8];
    for mask in &g.masks {
        for (l, r) in mask.per_layer_retention(8).into_iter().enumerate() {
            recount[l] += r / g.masks.len() as f64;
        }
    }
    for (a, b) in recount.iter().zip(&g.per_layer_retention) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!((average_retention(&recount) - g.r_bar).abs() <= 1e-12);
    assert!(g.drift.iter().take(model.config().pruner_layers[0]).all(|&d| d == 0.0));
}

#[test]
fn same_seed_gives_same_backbone() {
    let cfg = small_task().backbone_config(2, 8, 2, 16);
    let a = Backbone::new(cfg.clone(), 5).unwrap();
    let b = Backbone::new(cfg, 5).unwrap();
    assert_eq!(a.digest(), b.digest());
    let store: &ParamStore = a.store();
    assert!(store.len() > 0);
}

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use rcp_bench::fixture;
use rcp_core::backbone::{ForwardMode, NoHooks};
use rcp_core::harness::{batch_loss, LossSettings};
use rcp_core::metrics::{flops_total, CostModel};
use rcp_core::objectives::LossWeights;
use rcp_core::rcp::{student_forward, PassSettings};
use rcp_core::Tape;

fn forward(c: &mut Criterion) {
    let f = fixture(1);
    let ex = &f.batch[0];
    c.bench_function("teacher_forward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bb = f.backbone.bind(&tape, false);
            black_box(f.backbone.forward(&bb, &ex.tokens, &ex.layout, ForwardMode::Teacher, &mut NoHooks).unwrap());
        })
    });
    for mode in [ForwardMode::Masked, ForwardMode::Gathered] {
        c.bench_function(&format!("student_forward_{mode:?}").to_lowercase(), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let bb = f.backbone.bind(&tape, false);
                let vars = f.model.store().bind(&tape, false);
                black_box(
                    student_forward(&f.model, &f.backbone, &bb, &vars, &ex.tokens, &ex.layout, mode, PassSettings::infer(0.11))
                        .unwrap(),
                );
            })
        });
    }
}

fn train_step(c: &mut Criterion) {
    let f = fixture(4);
    let ls = LossSettings { tau: 1.0, r_star: 0.11, weights: LossWeights::default(), seed: 1, step: 0 };
    c.bench_function("loss_and_backward_batch4", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let vars = f.model.store().bind(&tape, true);
            let parts = batch_loss(&tape, &f.backbone, &f.model, &vars, &f.batch, &ls).unwrap();
            black_box(tape.backward(parts.total).unwrap());
        })
    });
}

fn cost(c: &mut Criterion) {
    let m = CostModel { n_layers: 32, d_model: 4096, n_heads: 32, d_ff: 11008, bytes_per_element: 2, seq_lens: vec![640; 32] };
    c.bench_function("flops_total_32_layers", |b| b.iter(|| black_box(flops_total(black_box(&m)))));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, train_step, cost
}
criterion_main!(benches);

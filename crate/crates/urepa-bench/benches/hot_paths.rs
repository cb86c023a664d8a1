//! Wall-time benchmarks for the paths a training run spends its life in:
//! one transformer block (forward, then forward plus backward), the two
//! alignment losses, the stage resamplers, a full optimizer step, and one
//! sampler velocity evaluation.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use urepa_bench::{block_fixture, desk_model, desk_trainer, loss_grids, randn};
use urepa_core::alignment::{manifold_loss, repa_loss};
use urepa_core::autodiff::Tape;
use urepa_core::blocks::{
    bind_all, downsample_build, downsample_stage, transformer_block, upsample_build,
    upsample_stage,
};
use urepa_core::geometry::GridVar;
use urepa_core::numerics::SeededRng;
use urepa_core::params::ParamBuilder;

fn bench_block(c: &mut Criterion) {
    let f = block_fixture();
    let mut g = c.benchmark_group("block");
    g.sample_size(20);

    g.bench_function("forward", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new_inference();
            let vars = bind_all(&tape, &f.set);
            let bv = f.block.bind(&vars);
            let x = tape.constant(f.x.clone());
            let cond = tape.constant(f.cond.clone());
            let out =
                transformer_block(&tape, x, cond, &bv, f.heads, Some((&f.rope, f.grid, f.grid)));
            black_box(tape.value(out).as_ptr());
        })
    });

    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new();
            let vars = bind_all(&tape, &f.set);
            let bv = f.block.bind(&vars);
            let x = tape.leaf(f.x.clone());
            let cond = tape.constant(f.cond.clone());
            let out =
                transformer_block(&tape, x, cond, &bv, f.heads, Some((&f.rope, f.grid, f.grid)));
            let loss = tape.mean_all(out);
            let mut grads = tape.backward(loss);
            black_box(grads.take(x).is_some());
        })
    });
    g.finish();
}

fn bench_losses(c: &mut Criterion) {
    let (y_star, y) = loss_grids();
    let mut g = c.benchmark_group("alignment");
    g.sample_size(30);

    g.bench_function("repa_loss", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new_inference();
            let pv = tape.constant(y.clone().into_dyn());
            black_box(tape.scalar(repa_loss(&tape, &y_star, pv).unwrap()));
        })
    });

    g.bench_function("manifold_loss", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new_inference();
            let pv = tape.constant(y.clone().into_dyn());
            black_box(tape.scalar(manifold_loss(&tape, &y_star, pv).unwrap()));
        })
    });
    g.finish();
}

fn bench_resample(c: &mut Criterion) {
    let channels = 128usize;
    let grid = 16usize;
    let mut build_rng = SeededRng::new(3, 0);
    let mut pb = ParamBuilder::<f32>::new(&mut build_rng);
    let down = downsample_build(&mut pb, "down", channels);
    let up = upsample_build(&mut pb, "up", channels);
    let set = pb.finish();
    let mut rng = SeededRng::new(4, 0);
    let x = randn(&mut rng, &[32, grid * grid, channels]);

    let mut g = c.benchmark_group("resample");
    g.sample_size(30);
    g.bench_function("down_up_round_trip", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new_inference();
            let vars = bind_all(&tape, &set);
            let gv = GridVar { var: tape.constant(x.clone()), height: grid, width: grid };
            let small = downsample_stage(&tape, gv, channels, &down.bind(&vars));
            let big = upsample_stage(&tape, small, channels, &up.bind(&vars));
            black_box(tape.value(big.var).as_ptr());
        })
    });
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut trainer = desk_trainer();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.measurement_time(Duration::from_secs(12));
    g.bench_function("step_default_config", |b| {
        b.iter(|| black_box(trainer.step().unwrap().velocity_loss))
    });
    g.finish();
}

fn bench_sampler_eval(c: &mut Criterion) {
    let (model, set) = desk_model();
    let mc = *model.config();
    let mut rng = SeededRng::new(5, 0);
    let z = randn(&mut rng, &[4, mc.input_channels, mc.input_size, mc.input_size])
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap();
    let t = vec![0.5f64; 4];
    let labels = vec![Some(1), Some(2), None, Some(7)];

    let mut g = c.benchmark_group("sampler");
    g.sample_size(10);
    g.bench_function("velocity_eval_batch4", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new_inference();
            let vars = bind_all(&tape, &set);
            let out = model.forward(&tape, &vars, &z, &t, &labels).unwrap();
            black_box(tape.value(out.velocity).as_ptr());
        })
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_block,
    bench_losses,
    bench_resample,
    bench_train_step,
    bench_sampler_eval
);
criterion_main!(benches);

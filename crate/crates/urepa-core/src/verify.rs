//! Runtime gradient verification: a registry that checks every
//! differentiable tape operation and the loss composites against central
//! finite differences, in f64, with small probe tensors.
//!
//! The registry backs both the `gradcheck` CLI command and the acceptance
//! gate, so entries must stay cheap: cost grows as 2 evaluations per input
//! coordinate.

use crate::alignment::{
    combined_loss, manifold_loss, project, repa_loss, AlignmentSpec, Placement,
    ProjectorLayout, ScheduleKind,
};
use crate::autodiff::{Tape, Var};
use crate::blocks::{downsample_stage, skip_merge, transformer_block, upsample_stage, BlockP};
use crate::flow::velocity_loss;
use crate::geometry::{GridVar, RopeTable};
use crate::model::{depth_to_stage, Model, ModelConfig, ModelLayout};
use crate::numerics::{finite_difference_grad, GradReport, Scalar, SeededRng};
use crate::params::{ParamBuilder, ParamSet};
use ndarray::{Array4, ArrayD, IxDyn};
use std::sync::Arc;

/// Central-difference step. 1e-3 is fine for single ops but its O(eps^2)
/// truncation error reaches ~2e-4 against the 1e-4 tolerance on sharp
/// composites (softmax curvature inside attention), while f64 roundoff at
/// 1e-5 is still only ~1e-11. Verified by sweeping eps: worst-case error
/// scales quadratically, confirming truncation rather than gradient bugs.
pub const DEFAULT_FD_EPS: f64 = 1e-5;
pub const DEFAULT_FD_TOL: f64 = 1e-4;
pub const DEFAULT_SEED_COUNT: usize = 10;

type GraphFn<'a> = dyn Fn(&Tape<f64>, &[Var]) -> Var + 'a;

/// Compare analytic and finite-difference gradients of `build` with respect
/// to every entry of `inputs`, returning the worst coordinate overall.
pub fn check_graph(inputs: &[ArrayD<f64>], build: &GraphFn<'_>, eps: f64) -> GradReport {
    let tape = Tape::<f64>::new();
    let leafs: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &leafs);
    let store = tape.backward(out);
    let mut merged: Option<GradReport> = None;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = store
            .grad(leafs[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
        let mut f = |probe: &ArrayD<f64>| -> f64 {
            let t2 = Tape::<f64>::new_inference();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, xj)| t2.leaf(if j == i { probe.clone() } else { xj.clone() }))
                .collect();
            Scalar::to_f64(t2.scalar(build(&t2, &vars)))
        };
        let numeric =
            finite_difference_grad(&mut f, x, eps).expect("fd probe stayed finite");
        merged = Some(merge(merged, GradReport::compare(&analytic, &numeric)));
    }
    merged.expect("at least one input")
}

fn merge(acc: Option<GradReport>, next: GradReport) -> GradReport {
    match acc {
        None => next,
        Some(a) => {
            let coords = a.coords_checked + next.coords_checked;
            let mut worst = if next.max_rel_err > a.max_rel_err { next } else { a };
            worst.coords_checked = coords;
            worst
        }
    }
}

fn randn(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<f64> {
    let mut a = ArrayD::zeros(IxDyn(shape));
    rng.fill_normal(&mut a, 1.0);
    a
}

/// Random parameter values matching the shapes of a built set, so zero-init
/// schemes do not hide gradient paths from the checker. `scale` keeps deep
/// compositions in a numerically sane range: unit-scale weights through many
/// layers inflate the loss to ~1e5, which pushes central differences onto
/// their f64 roundoff floor regardless of step size.
fn randomized_params(rng: &mut SeededRng, set: &ParamSet<f64>, scale: f64) -> Vec<ArrayD<f64>> {
    (0..set.len())
        .map(|i| {
            let mut a = ArrayD::zeros(IxDyn(set.value_at(i).shape()));
            rng.fill_normal(&mut a, scale);
            a
        })
        .collect()
}

/// Weighted mean reduction: random fixed weights break the symmetry that a
/// plain mean would give to permutation-type gradient bugs.
fn reduce(tape: &Tape<f64>, v: Var, weights: &ArrayD<f64>) -> Var {
    let w = tape.constant(weights.clone());
    tape.mean_all(tape.mul(v, w))
}

pub struct CheckEntry {
    pub name: &'static str,
    /// Seeds beyond this count are skipped for expensive composites.
    pub max_seeds: usize,
    run: Box<dyn Fn(&mut SeededRng, f64) -> GradReport>,
}

impl CheckEntry {
    pub fn run(&self, rng: &mut SeededRng, eps: f64) -> GradReport {
        (self.run)(rng, eps)
    }
}

fn entry(
    name: &'static str,
    max_seeds: usize,
    run: impl Fn(&mut SeededRng, f64) -> GradReport + 'static,
) -> CheckEntry {
    CheckEntry { name, max_seeds, run: Box::new(run) }
}

/// One check per differentiable tape op, then the loss composites. Names are
/// unique; the registry is the authority on what "fully checked" means.
pub fn registry() -> Vec<CheckEntry> {
    let many = DEFAULT_SEED_COUNT;
    let mut v: Vec<CheckEntry> = Vec::new();

    v.push(entry("add", many, |rng, eps| {
        let (a, b, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a, b], &|t, x| reduce(t, t.add(x[0], x[1]), &w), eps)
    }));
    v.push(entry("sub", many, |rng, eps| {
        let (a, b, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a, b], &|t, x| reduce(t, t.sub(x[0], x[1]), &w), eps)
    }));
    v.push(entry("mul", many, |rng, eps| {
        let (a, b, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a, b], &|t, x| reduce(t, t.mul(x[0], x[1]), &w), eps)
    }));
    v.push(entry("neg", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a], &|t, x| reduce(t, t.neg(x[0]), &w), eps)
    }));
    v.push(entry("scale", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a], &|t, x| reduce(t, t.scale(x[0], 1.7), &w), eps)
    }));
    v.push(entry("add_scalar", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a], &|t, x| reduce(t, t.add_scalar(x[0], 0.37), &w), eps)
    }));
    v.push(entry("offset_tokens", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 4, 3]), randn(rng, &[2, 4, 3]));
        let c = Arc::new(randn(rng, &[4, 3]));
        check_graph(&[a], &|t, x| reduce(t, t.offset_tokens(x[0], c.clone()), &w), eps)
    }));
    v.push(entry("matmul", many, |rng, eps| {
        let (a, b, w) = (randn(rng, &[3, 4]), randn(rng, &[4, 5]), randn(rng, &[3, 5]));
        check_graph(&[a, b], &|t, x| reduce(t, t.matmul(x[0], x[1]), &w), eps)
    }));
    v.push(entry("bmm", many, |rng, eps| {
        // All four transpose combinations share the backward code paths.
        let mut rep: Option<GradReport> = None;
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
            let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
            let (a, b, w) = (randn(rng, &a_shape), randn(rng, &b_shape), randn(rng, &[2, 3, 5]));
            let r = check_graph(
                &[a, b],
                &|t, x| reduce(t, t.bmm(x[0], x[1], ta, tb, 0.7), &w),
                eps,
            );
            rep = Some(merge(rep, r));
        }
        rep.unwrap()
    }));
    v.push(entry("linear", many, |rng, eps| {
        let (x, wgt, b) = (randn(rng, &[2, 3, 5]), randn(rng, &[5, 4]), randn(rng, &[4]));
        let w = randn(rng, &[2, 3, 4]);
        check_graph(&[x, wgt, b], &|t, v| reduce(t, t.linear(v[0], v[1], Some(v[2])), &w), eps)
    }));
    v.push(entry("reshape", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 12]));
        check_graph(&[a], &|t, x| reduce(t, t.reshape(x[0], &[2, 12]), &w), eps)
    }));
    v.push(entry("permute", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[4, 2, 3]));
        check_graph(&[a], &|t, x| reduce(t, t.permute(x[0], &[2, 0, 1]), &w), eps)
    }));
    v.push(entry("gather", many, |rng, eps| {
        // Repeated indices exercise the scatter-add backward.
        let (a, w) = (randn(rng, &[2, 4, 3]), randn(rng, &[2, 2, 2]));
        let idx = Arc::new(vec![0usize, 5, 5, 2]);
        check_graph(&[a], &|t, x| reduce(t, t.gather(x[0], idx.clone(), &[2, 2]), &w), eps)
    }));
    v.push(entry("concat_last", many, |rng, eps| {
        let (a, b, w) = (randn(rng, &[2, 3, 2]), randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 6]));
        check_graph(&[a, b], &|t, x| reduce(t, t.concat_last(x[0], x[1]), &w), eps)
    }));
    v.push(entry("slice_last", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 6]), randn(rng, &[2, 3, 3]));
        check_graph(&[a], &|t, x| reduce(t, t.slice_last(x[0], 1, 3), &w), eps)
    }));
    v.push(entry("scale_tokens", many, |rng, eps| {
        let (a, s, w) = (randn(rng, &[2, 4, 3]), randn(rng, &[2, 3]), randn(rng, &[2, 4, 3]));
        check_graph(&[a, s], &|t, x| reduce(t, t.scale_tokens(x[0], x[1]), &w), eps)
    }));
    v.push(entry("shift_tokens", many, |rng, eps| {
        let (a, s, w) = (randn(rng, &[2, 4, 3]), randn(rng, &[2, 3]), randn(rng, &[2, 4, 3]));
        check_graph(&[a, s], &|t, x| reduce(t, t.shift_tokens(x[0], x[1]), &w), eps)
    }));
    v.push(entry("silu", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a], &|t, x| reduce(t, t.silu(x[0]), &w), eps)
    }));
    v.push(entry("gelu", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a], &|t, x| reduce(t, t.gelu(x[0]), &w), eps)
    }));
    v.push(entry("softmax_last", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 5]), randn(rng, &[2, 3, 5]));
        check_graph(&[a], &|t, x| reduce(t, t.softmax_last(x[0]), &w), eps)
    }));
    v.push(entry("layer_norm_last", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 6]), randn(rng, &[2, 3, 6]));
        check_graph(&[a], &|t, x| reduce(t, t.layer_norm_last(x[0], 1e-6), &w), eps)
    }));
    v.push(entry("l2_normalize_last", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 5]), randn(rng, &[2, 3, 5]));
        check_graph(&[a], &|t, x| reduce(t, t.l2_normalize_last(x[0], 1e-8), &w), eps)
    }));
    v.push(entry("sum_last", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3]));
        check_graph(&[a], &|t, x| reduce(t, t.sum_last(x[0]), &w), eps)
    }));
    v.push(entry("mean_all", many, |rng, eps| {
        let a = randn(rng, &[2, 3, 4]);
        check_graph(&[a], &|t, x| t.mean_all(x[0]), eps)
    }));
    v.push(entry("mse", many, |rng, eps| {
        let (a, b) = (randn(rng, &[2, 3, 4]), randn(rng, &[2, 3, 4]));
        check_graph(&[a, b], &|t, x| t.mse(x[0], x[1]), eps)
    }));
    v.push(entry("embedding", many, |rng, eps| {
        // Repeated ids exercise row-level gradient accumulation.
        let (table, w) = (randn(rng, &[5, 4]), randn(rng, &[4, 4]));
        let ids = Arc::new(vec![0usize, 3, 3, 1]);
        check_graph(&[table], &|t, x| reduce(t, t.embedding(x[0], ids.clone()), &w), eps)
    }));
    v.push(entry("rope", many, |rng, eps| {
        let table = RopeTable::<f64>::new(4, 8).unwrap();
        let (a, w) = (randn(rng, &[4, 4, 8]), randn(rng, &[4, 4, 8]));
        let (cos, sin) = (table.cos(), table.sin());
        check_graph(
            &[a],
            &|t, x| reduce(t, t.rope(x[0], cos.clone(), sin.clone(), 2, 2), &w),
            eps,
        )
    }));
    v.push(entry("split_heads", many, |rng, eps| {
        let (a, w) = (randn(rng, &[2, 4, 6]), randn(rng, &[4, 4, 3]));
        check_graph(&[a], &|t, x| reduce(t, t.split_heads(x[0], 2), &w), eps)
    }));
    v.push(entry("merge_heads", many, |rng, eps| {
        let (a, w) = (randn(rng, &[4, 4, 3]), randn(rng, &[2, 4, 6]));
        check_graph(&[a], &|t, x| reduce(t, t.merge_heads(x[0], 2), &w), eps)
    }));

    // ---- composites ----

    v.push(entry("velocity_loss", many, |rng, eps| {
        let pred = randn(rng, &[2, 3, 4, 4]);
        let target = randn(rng, &[2, 3, 4, 4]);
        check_graph(&[pred], &|t, x| velocity_loss(t, x[0], &target), eps)
    }));
    v.push(entry("repa_loss", many, |rng, eps| {
        let proj = randn(rng, &[2, 4, 5]);
        let y = randn(rng, &[2, 4, 5]).into_dimensionality::<ndarray::Ix3>().unwrap();
        check_graph(&[proj], &|t, x| repa_loss(t, &y, x[0]).unwrap(), eps)
    }));
    v.push(entry("manifold_loss", many, |rng, eps| {
        let proj = randn(rng, &[2, 4, 5]);
        let y = randn(rng, &[2, 4, 5]).into_dimensionality::<ndarray::Ix3>().unwrap();
        check_graph(&[proj], &|t, x| manifold_loss(t, &y, x[0]).unwrap(), eps)
    }));

    for (name, placement) in [
        ("projector_upscale_before_mlp", Placement::UpscaleBeforeMlp),
        ("projector_upscale_in_mlp", Placement::UpscaleInMlp),
        ("projector_upscale_after_mlp", Placement::UpscaleAfterMlp),
    ] {
        v.push(entry(name, 5, move |rng, eps| {
            projector_check(rng, eps, placement, false)
        }));
    }
    v.push(entry("projector_time_modulation", 5, |rng, eps| {
        projector_check(rng, eps, Placement::UpscaleAfterMlp, true)
    }));

    v.push(entry("transformer_block_swiglu", 5, |rng, eps| {
        block_check(rng, eps, true, false)
    }));
    v.push(entry("transformer_block_gelu", 5, |rng, eps| {
        block_check(rng, eps, false, false)
    }));
    v.push(entry("transformer_block_rope", 5, |rng, eps| {
        block_check(rng, eps, true, true)
    }));

    v.push(entry("skip_merge", many, |rng, eps| {
        let (deep, shallow) = (randn(rng, &[2, 4, 6]), randn(rng, &[2, 4, 6]));
        let (mw, mb) = (randn(rng, &[12, 6]), randn(rng, &[6]));
        let w = randn(rng, &[2, 4, 6]);
        check_graph(
            &[deep, shallow, mw, mb],
            &|t, x| {
                let lv = crate::blocks::LinearVars { w: x[2], b: Some(x[3]) };
                reduce(t, skip_merge(t, x[0], x[1], &lv), &w)
            },
            eps,
        )
    }));
    v.push(entry("downsample_stage", many, |rng, eps| {
        let x = randn(rng, &[2, 16, 3]);
        let (pw, pb) = (randn(rng, &[12, 3]), randn(rng, &[3]));
        let w = randn(rng, &[2, 4, 3]);
        check_graph(
            &[x, pw, pb],
            &|t, v| {
                let g = GridVar { var: v[0], height: 4, width: 4 };
                let lv = crate::blocks::LinearVars { w: v[1], b: Some(v[2]) };
                reduce(t, downsample_stage(t, g, 3, &lv).var, &w)
            },
            eps,
        )
    }));
    v.push(entry("upsample_stage", many, |rng, eps| {
        let x = randn(rng, &[2, 4, 3]);
        let (pw, pb) = (randn(rng, &[3, 12]), randn(rng, &[12]));
        let w = randn(rng, &[2, 16, 3]);
        check_graph(
            &[x, pw, pb],
            &|t, v| {
                let g = GridVar { var: v[0], height: 2, width: 2 };
                let lv = crate::blocks::LinearVars { w: v[1], b: Some(v[2]) };
                reduce(t, upsample_stage(t, g, 3, &lv).var, &w)
            },
            eps,
        )
    }));

    v.push(entry("model_with_alignment", 2, model_check));

    v
}

fn projector_check(rng: &mut SeededRng, eps: f64, placement: Placement, time_aware: bool) -> GradReport {
    let (c, d, r) = (6, 5, 2);
    let mut build_rng = SeededRng::new(rng.next_u64(), 0);
    let (layout, set) =
        ProjectorLayout::build::<f64>(c, d, r, placement, time_aware, &mut build_rng).unwrap();
    let mut inputs = vec![randn(rng, &[2, 4, c])];
    inputs.extend(randomized_params(rng, &set, 1.0));
    let t = [0.3, 0.8];
    let y = randn(rng, &[2, 16, d]).into_dimensionality::<ndarray::Ix3>().unwrap();
    check_graph(
        &inputs,
        &|tape, vars| {
            let tap = GridVar { var: vars[0], height: 2, width: 2 };
            let out = project(tape, &layout, &vars[1..], tap, &t).unwrap();
            repa_loss(tape, &y, out.var).unwrap()
        },
        eps,
    )
}

fn block_check(rng: &mut SeededRng, eps: f64, swiglu: bool, use_rope: bool) -> GradReport {
    let (c, heads, n) = (8, 2, 4);
    let mut build_rng = SeededRng::new(rng.next_u64(), 0);
    let mut pb = ParamBuilder::<f64>::new(&mut build_rng);
    let hidden = if swiglu { 2 * c } else { 4 * c };
    let block = BlockP::build(&mut pb, "blk", c, hidden, swiglu);
    let set = pb.finish();
    let rope = if use_rope { Some(RopeTable::<f64>::new(2, c / heads).unwrap()) } else { None };
    let mut inputs = vec![randn(rng, &[2, n, c]), randn(rng, &[2, c])];
    inputs.extend(randomized_params(rng, &set, 1.0));
    let w = randn(rng, &[2, n, c]);
    check_graph(
        &inputs,
        &|tape, vars| {
            let bv = block.bind(&vars[2..]);
            let rope_arg = rope.as_ref().map(|rt| (rt, 2, 2));
            let out = transformer_block(tape, vars[0], vars[1], &bv, heads, rope_arg);
            reduce(tape, out, &w)
        },
        eps,
    )
}

/// Tiny full pipeline: hierarchical forward, projector, and the combined
/// objective, differentiated with respect to every parameter tensor.
fn model_check(rng: &mut SeededRng, eps: f64) -> GradReport {
    let config = ModelConfig {
        input_size: 4,
        input_channels: 2,
        patch_size: 2,
        channels: 8,
        heads: 2,
        blocks_per_stage: [1, 1, 1],
        ..Default::default()
    };
    let mut build_rng = SeededRng::new(rng.next_u64(), 0);
    let (layout, set) = ModelLayout::build::<f64>(&config, &mut build_rng).unwrap();
    let model = Model::<f64>::from_layout(config, layout).unwrap();
    let tap = depth_to_stage(&config, config.resolved_tap()).unwrap();
    let r = config.grid_size() / tap.height;
    let (proj, pset) = ProjectorLayout::build::<f64>(
        config.channels,
        5,
        r,
        Placement::UpscaleAfterMlp,
        false,
        &mut build_rng,
    )
    .unwrap();
    let model_len = set.len();

    let mut z = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 4, 4]));
    rng.fill_normal(&mut z, 1.0);
    let z: Array4<f64> = z.into_dimensionality().unwrap();
    let target = randn(rng, &[2, 2, 4, 4]);
    let y = randn(rng, &[2, config.tokens(), 5])
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let t = [0.3, 0.7];
    let labels = [Some(1usize), None];
    let spec = AlignmentSpec {
        lambda: 0.5,
        w: 3.0,
        schedule: ScheduleKind::SchedC,
        ..Default::default()
    };

    let mut inputs = randomized_params(rng, &set, 0.2);
    inputs.extend(randomized_params(rng, &pset, 0.2));
    check_graph(
        &inputs,
        &|tape, vars| {
            let out = model.forward(tape, &vars[..model_len], &z, &t, &labels).unwrap();
            let vloss = velocity_loss(tape, out.velocity, &target);
            let projected = project(tape, &proj, &vars[model_len..], out.tap, &t).unwrap();
            let repa = repa_loss(tape, &y, projected.var).unwrap();
            let mani = manifold_loss(tape, &y, projected.var).unwrap();
            combined_loss(tape, vloss, repa, mani, &spec, &t)
        },
        eps,
    )
}

// ---- running the registry ----

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradReport,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifySummary {
    pub results: Vec<CheckResult>,
    pub eps: f64,
    pub tol: f64,
    pub seed_count: usize,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

/// Run every registry entry over the given seeds (capped per entry), keeping
/// the worst report per entry.
pub fn run_all(seeds: &[u64], eps: f64, tol: f64) -> VerifySummary {
    let entries = registry();
    let mut results = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut worst: Option<GradReport> = None;
        for &seed in seeds.iter().take(e.max_seeds) {
            let mut rng = SeededRng::new(seed, 0);
            worst = Some(merge(worst, e.run(&mut rng, eps)));
        }
        let report = worst.expect("at least one seed");
        let passed = report.passes(tol);
        results.push(CheckResult { name: e.name, report, passed });
    }
    VerifySummary { results, eps, tol, seed_count: seeds.len() }
}

pub fn default_seeds() -> Vec<u64> {
    (0..DEFAULT_SEED_COUNT as u64).collect()
}

/// One line per op: name, worst relative error, coords, verdict.
pub fn format_summary(s: &VerifySummary) -> String {
    let mut out = String::new();
    let width = s.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &s.results {
        out.push_str(&format!(
            "{:width$}  max_rel_err {:>10.3e}  coords {:>6}  {}\n",
            r.name,
            r.report.max_rel_err,
            r.report.coords_checked,
            if r.passed { "pass" } else { "FAIL" },
        ));
    }
    out.push_str(&format!(
        "{} checks, eps {:e}, tol {:e}, {} seeds: {}\n",
        s.results.len(),
        s.eps,
        s.tol,
        s.seed_count,
        if s.all_passed() { "all passed" } else { "FAILURES PRESENT" }
    ));
    out
}

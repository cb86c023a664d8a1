//! Representation alignment: a projector MLP that lifts tapped hidden states
//! into teacher feature space (with three choices of where the spatial
//! upscale happens), the token-wise cosine loss, the manifold loss on
//! intra-sample similarity matrices, weight schedules over time, and the
//! combined objective.

use crate::autodiff::{bmm_raw, Tape, Var};
use crate::blocks::{linear, LinearP, LinearVars};
use crate::error::{Error, Result};
use crate::geometry::{nearest_upsample_map, pixel_shuffle_map, GridVar};
use crate::model::{time_embedding, TIME_FREQ_DIM};
use crate::numerics::{InitScheme, Scalar, SeededRng};
use crate::params::{ParamBuilder, ParamSet, ShapeCounter};
use ndarray::{Array3, ArrayD};
use std::sync::Arc;

/// Norm clamp used inside every cosine.
pub const COSINE_EPS: f64 = 1e-8;

const NORMAL: InitScheme = InitScheme::Normal { std: crate::blocks::INIT_STD };

/// Where the spatial upscale sits relative to the projector MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Nearest-neighbor upsample, then the MLP.
    UpscaleBeforeMlp,
    /// MLP whose last layer widens to `D·r²`, then pixel shuffle.
    UpscaleInMlp,
    /// MLP to `D`, then nearest-neighbor upsample.
    UpscaleAfterMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    SchedA,
    SchedB,
    SchedC,
}

/// Alignment-loss weight as a function of time.
pub fn schedule_weight(kind: ScheduleKind, t: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&t), "schedule time outside [0,1]");
    match kind {
        ScheduleKind::Constant => 1.0,
        ScheduleKind::SchedA => (t + 0.5).max(1.0),
        ScheduleKind::SchedB => (-t + 1.5).max(1.0),
        ScheduleKind::SchedC => (-2.0 * t + 1.5).max(2.0 * t - 0.5).min(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSpec {
    /// Weight of the whole alignment term.
    pub lambda: f64,
    /// Weight of the manifold loss inside the alignment term.
    pub w: f64,
    pub schedule: ScheduleKind,
    pub placement: Placement,
    pub time_aware: bool,
    /// Overrides the model's tap when set.
    pub tap_depth: Option<usize>,
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        AlignmentSpec {
            lambda: 0.5,
            w: 3.0,
            schedule: ScheduleKind::Constant,
            placement: Placement::UpscaleAfterMlp,
            time_aware: false,
            tap_depth: None,
        }
    }
}

impl AlignmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("w must be finite and >= 0, got {}", self.w)));
        }
        Ok(())
    }
}

// ---- projector ----

/// 3-layer SiLU MLP (hidden width = input width) from tapped hidden states to
/// teacher feature space, with the configured upscale placement and an
/// optional time-modulation head producing channel-wise `gamma(t)`, `beta(t)`.
#[derive(Debug, Clone)]
pub struct ProjectorLayout {
    pub placement: Placement,
    /// Spatial upscale factor from tap grid to teacher grid.
    pub r: usize,
    pub teacher_dim: usize,
    pub fc1: LinearP,
    pub fc2: LinearP,
    pub fc3: LinearP,
    /// Zero-init weights with bias 1 (gamma) and 0 (beta), so a fresh
    /// time-aware projector equals the plain one.
    pub time_gamma: Option<LinearP>,
    pub time_beta: Option<LinearP>,
}

impl ProjectorLayout {
    pub fn build<T: Scalar>(
        in_channels: usize,
        teacher_dim: usize,
        r: usize,
        placement: Placement,
        time_aware: bool,
        rng: &mut SeededRng,
    ) -> Result<(ProjectorLayout, ParamSet<T>)> {
        if in_channels == 0 || teacher_dim == 0 || r == 0 {
            return Err(Error::Config("projector dims and factor must be positive".into()));
        }
        let hidden = in_channels;
        let out_dim = match placement {
            Placement::UpscaleInMlp => teacher_dim * r * r,
            _ => teacher_dim,
        };
        let mut pb = ParamBuilder::<T>::new(rng);
        let fc1 = LinearP::build(&mut pb, "proj.fc1", in_channels, hidden, NORMAL, Some(InitScheme::Zeros));
        let fc2 = LinearP::build(&mut pb, "proj.fc2", hidden, hidden, NORMAL, Some(InitScheme::Zeros));
        let fc3 = LinearP::build(&mut pb, "proj.fc3", hidden, out_dim, NORMAL, Some(InitScheme::Zeros));
        let (time_gamma, time_beta) = if time_aware {
            (
                Some(LinearP::build(
                    &mut pb,
                    "proj.time_gamma",
                    TIME_FREQ_DIM,
                    teacher_dim,
                    InitScheme::Zeros,
                    Some(InitScheme::Ones),
                )),
                Some(LinearP::build(
                    &mut pb,
                    "proj.time_beta",
                    TIME_FREQ_DIM,
                    teacher_dim,
                    InitScheme::Zeros,
                    Some(InitScheme::Zeros),
                )),
            )
        } else {
            (None, None)
        };
        let layout = ProjectorLayout { placement, r, teacher_dim, fc1, fc2, fc3, time_gamma, time_beta };
        Ok((layout, pb.finish()))
    }

    pub fn count(
        sc: &mut ShapeCounter,
        in_channels: usize,
        teacher_dim: usize,
        r: usize,
        placement: Placement,
        time_aware: bool,
    ) {
        let hidden = in_channels;
        let out_dim = match placement {
            Placement::UpscaleInMlp => teacher_dim * r * r,
            _ => teacher_dim,
        };
        LinearP::count(sc, "proj.fc1", in_channels, hidden, true);
        LinearP::count(sc, "proj.fc2", hidden, hidden, true);
        LinearP::count(sc, "proj.fc3", hidden, out_dim, true);
        if time_aware {
            LinearP::count(sc, "proj.time_gamma", TIME_FREQ_DIM, teacher_dim, true);
            LinearP::count(sc, "proj.time_beta", TIME_FREQ_DIM, teacher_dim, true);
        }
    }

    /// Token count the pipeline produces from a tap with `n` tokens.
    pub fn output_tokens(&self, tap_tokens: usize) -> usize {
        tap_tokens * self.r * self.r
    }
}

fn mlp<T: Scalar>(tape: &Tape<T>, x: Var, fc1: &LinearVars, fc2: &LinearVars, fc3: &LinearVars) -> Var {
    let h = tape.silu(linear(tape, x, fc1));
    let h = tape.silu(linear(tape, h, fc2));
    linear(tape, h, fc3)
}

/// Run the projector over a tapped hidden grid. `vars` are the tape bindings
/// of the projector's own parameter set (see [`crate::blocks::bind_all`]).
pub fn project<T: Scalar>(
    tape: &Tape<T>,
    layout: &ProjectorLayout,
    vars: &[Var],
    tap: GridVar,
    t: &[f64],
) -> Result<GridVar> {
    let r = layout.r;
    let fc1 = layout.fc1.bind(vars);
    let fc2 = layout.fc2.bind(vars);
    let fc3 = layout.fc3.bind(vars);
    let in_c = tape.shape(tap.var)[2];
    if tape.shape(vars[layout.fc1.w.0])[0] != in_c {
        return Err(Error::ShapeMismatch(format!(
            "projector expects {} input channels, tap has {in_c}",
            tape.shape(vars[layout.fc1.w.0])[0]
        )));
    }

    let mut out = match layout.placement {
        Placement::UpscaleBeforeMlp => {
            let g = upsample_nearest(tape, tap, r);
            GridVar { var: mlp(tape, g.var, &fc1, &fc2, &fc3), ..g }
        }
        Placement::UpscaleInMlp => {
            let wide = mlp(tape, tap.var, &fc1, &fc2, &fc3);
            if r == 1 {
                GridVar { var: wide, ..tap }
            } else {
                let (idx, shape) =
                    pixel_shuffle_map(tap.height, tap.width, layout.teacher_dim * r * r, r);
                GridVar {
                    var: tape.gather(wide, Arc::new(idx), &shape),
                    height: tap.height * r,
                    width: tap.width * r,
                }
            }
        }
        Placement::UpscaleAfterMlp => {
            let narrow = GridVar { var: mlp(tape, tap.var, &fc1, &fc2, &fc3), ..tap };
            upsample_nearest(tape, narrow, r)
        }
    };

    if let (Some(gp), Some(bp)) = (&layout.time_gamma, &layout.time_beta) {
        let emb = tape.constant(time_embedding::<T>(t));
        let act = tape.silu(emb);
        let gamma = linear(tape, act, &gp.bind(vars));
        let beta = linear(tape, act, &bp.bind(vars));
        let scaled = tape.scale_tokens(out.var, gamma);
        out.var = tape.shift_tokens(scaled, beta);
    }
    Ok(out)
}

fn upsample_nearest<T: Scalar>(tape: &Tape<T>, g: GridVar, r: usize) -> GridVar {
    if r == 1 {
        return g;
    }
    let c = tape.shape(g.var)[2];
    let (idx, shape) = nearest_upsample_map(g.height, g.width, c, r);
    GridVar {
        var: tape.gather(g.var, Arc::new(idx), &shape),
        height: g.height * r,
        width: g.width * r,
    }
}

// ---- losses ----

fn check_grids<T: Scalar>(tape: &Tape<T>, y_star: &Array3<T>, projected: Var) -> Result<()> {
    let ps = tape.shape(projected);
    if y_star.shape() != ps.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs projected {:?}",
            y_star.shape(),
            ps
        )));
    }
    Ok(())
}

/// Negative mean token-wise cosine similarity between frozen teacher features
/// `[B, N, D]` and the projected grid. Range [-1, 1], lower is better.
pub fn repa_loss<T: Scalar>(tape: &Tape<T>, y_star: &Array3<T>, projected: Var) -> Result<Var> {
    check_grids(tape, y_star, projected)?;
    let yn = normalize_rows(y_star);
    let yv = tape.constant(yn.into_dyn());
    let pn = tape.l2_normalize_last(projected, COSINE_EPS);
    let prod = tape.mul(yv, pn);
    let cos = tape.sum_last(prod);
    let mean = tape.mean_all(cos);
    Ok(tape.neg(mean))
}

/// Mean squared discrepancy between the two intra-sample token-cosine
/// matrices: mean over the batch of `|S* - S|_F^2 / N^2`.
pub fn manifold_loss<T: Scalar>(tape: &Tape<T>, y_star: &Array3<T>, projected: Var) -> Result<Var> {
    check_grids(tape, y_star, projected)?;
    let yn = normalize_rows(y_star).into_dyn();
    let s_star = bmm_raw(&yn, false, &yn, true, T::one());
    let sv = tape.constant(s_star.into_dyn());
    let pn = tape.l2_normalize_last(projected, COSINE_EPS);
    let s = tape.bmm(pn, pn, false, true, T::one());
    Ok(tape.mse(sv, s))
}

/// Full objective: `velocity + mean_b(schedule(t_b)) · lambda · (repa + w · manifold)`.
/// With `lambda = 0` the velocity node is returned untouched.
pub fn combined_loss<T: Scalar>(
    tape: &Tape<T>,
    velocity_loss: Var,
    repa: Var,
    manifold: Var,
    spec: &AlignmentSpec,
    t_batch: &[f64],
) -> Var {
    if spec.lambda == 0.0 {
        return velocity_loss;
    }
    assert!(!t_batch.is_empty(), "combined_loss needs at least one time");
    let sched: f64 =
        t_batch.iter().map(|&t| schedule_weight(spec.schedule, t)).sum::<f64>() / t_batch.len() as f64;
    let align = if spec.w == 0.0 {
        repa
    } else {
        let wm = tape.scale(manifold, T::from_f64(spec.w));
        tape.add(repa, wm)
    };
    let scaled = tape.scale(align, T::from_f64(spec.lambda * sched));
    tape.add(velocity_loss, scaled)
}

/// Probe metric: mean token-wise cosine between two plain grids; equals the
/// negated [`repa_loss`] by definition.
pub fn mean_tokenwise_similarity<T: Scalar>(y_star: &Array3<T>, projected: &Array3<T>) -> f64 {
    assert_eq!(y_star.shape(), projected.shape(), "similarity needs matching grids");
    let yn = normalize_rows(y_star);
    let pn = normalize_rows(projected);
    let (b, n, _) = yn.dim();
    let mut acc = 0.0f64;
    for bi in 0..b {
        for ni in 0..n {
            let mut dot = T::zero();
            for (a, c) in yn
                .index_axis(ndarray::Axis(0), bi)
                .row(ni)
                .iter()
                .zip(pn.index_axis(ndarray::Axis(0), bi).row(ni).iter())
            {
                dot = dot + *a * *c;
            }
            acc += dot.to_f64();
        }
    }
    acc / (b * n) as f64
}

/// Tokens whose norm falls at or below the cosine clamp; reported in metrics.
pub fn count_zero_norm_tokens<T: Scalar>(x: &ArrayD<T>) -> usize {
    let c = *x.shape().last().expect("token grid");
    let rows = x.len() / c;
    let xs = x.as_slice().expect("standard layout");
    let eps = T::from_f64(COSINE_EPS);
    (0..rows)
        .filter(|row| {
            let mut sq = T::zero();
            for &v in &xs[row * c..(row + 1) * c] {
                sq = sq + v * v;
            }
            !(sq.sqrt() > eps)
        })
        .count()
}

fn normalize_rows<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let mut out = x.clone();
    let eps = T::from_f64(COSINE_EPS);
    for mut row in out.rows_mut() {
        let mut sq = T::zero();
        for &v in row.iter() {
            sq = sq + v * v;
        }
        let norm = sq.sqrt();
        let d = if norm > eps { norm } else { eps };
        let inv = T::one() / d;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

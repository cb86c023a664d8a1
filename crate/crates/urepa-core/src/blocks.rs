//! Transformer building blocks: attention with optional 2D rotary encoding,
//! SwiGLU or GELU feed-forward, adaptive layer-norm conditioning with
//! zero-initialized gates, skip merges, and stage-transition resamplers.
//!
//! Layout structs (`*P`) hold parameter ids; `bind`ing them against the
//! per-step leaf vars produces the `*Vars` twins the forward functions take.

use crate::autodiff::{Tape, Var};
use crate::geometry::{pixel_shuffle_map, pixel_unshuffle_map, GridVar, RopeTable};
use crate::numerics::{InitScheme, Scalar};
use crate::params::{ParamBuilder, ParamSet, PId, ShapeCounter};
use std::sync::Arc;

/// Initialization std for general weight matrices.
pub const INIT_STD: f64 = 0.02;
/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-6;
/// Spatial scale factor of one stage transition.
pub const STAGE_FACTOR: usize = 2;

const NORMAL: InitScheme = InitScheme::Normal { std: INIT_STD };

// ---- linear layers ----

#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: PId,
    pub b: Option<PId>,
}

impl LinearP {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_scheme: InitScheme,
        bias: Option<InitScheme>,
    ) -> LinearP {
        let w = pb.tensor(format!("{name}.w"), &[d_in, d_out], w_scheme);
        let b = bias.map(|s| pb.tensor(format!("{name}.b"), &[d_out], s));
        LinearP { w, b }
    }

    pub fn count(sc: &mut ShapeCounter, name: &str, d_in: usize, d_out: usize, bias: bool) {
        sc.tensor(format!("{name}.w"), &[d_in, d_out]);
        if bias {
            sc.tensor(format!("{name}.b"), &[d_out]);
        }
    }

    pub fn bind(&self, vars: &[Var]) -> LinearVars {
        LinearVars { w: vars[self.w.0], b: self.b.map(|id| vars[id.0]) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
}

pub fn linear<T: Scalar>(tape: &Tape<T>, x: Var, l: &LinearVars) -> Var {
    tape.linear(x, l.w, l.b)
}

/// Put every parameter of `set` on the tape as a leaf, in set order.
pub fn bind_all<T: Scalar>(tape: &Tape<T>, set: &ParamSet<T>) -> Vec<Var> {
    (0..set.len()).map(|i| tape.leaf(set.value_at(i).clone())).collect()
}

// ---- transformer block ----

#[derive(Debug, Clone)]
pub enum FfnP {
    SwiGlu { gate: LinearP, up: LinearP, down: LinearP },
    Gelu { fc1: LinearP, fc2: LinearP },
}

#[derive(Debug, Clone)]
pub struct BlockP {
    pub wq: LinearP,
    pub wk: LinearP,
    pub wv: LinearP,
    pub wo: LinearP,
    /// Conditioning map `[C] -> [6C]`: (shift, scale, gate) for the attention
    /// branch then the FFN branch. Zero-initialized so a fresh block is the
    /// identity.
    pub modulation: LinearP,
    pub ffn: FfnP,
}

impl BlockP {
    pub fn build<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: usize,
        ffn_hidden: usize,
        use_swiglu: bool,
    ) -> BlockP {
        let wq = LinearP::build(pb, &format!("{prefix}.attn.q"), channels, channels, NORMAL, None);
        let wk = LinearP::build(pb, &format!("{prefix}.attn.k"), channels, channels, NORMAL, None);
        let wv = LinearP::build(pb, &format!("{prefix}.attn.v"), channels, channels, NORMAL, None);
        let wo = LinearP::build(pb, &format!("{prefix}.attn.o"), channels, channels, NORMAL, None);
        let modulation = LinearP::build(
            pb,
            &format!("{prefix}.adaln"),
            channels,
            6 * channels,
            InitScheme::Zeros,
            Some(InitScheme::Zeros),
        );
        let ffn = if use_swiglu {
            FfnP::SwiGlu {
                gate: LinearP::build(pb, &format!("{prefix}.ffn.gate"), channels, ffn_hidden, NORMAL, None),
                up: LinearP::build(pb, &format!("{prefix}.ffn.up"), channels, ffn_hidden, NORMAL, None),
                down: LinearP::build(pb, &format!("{prefix}.ffn.down"), ffn_hidden, channels, NORMAL, None),
            }
        } else {
            FfnP::Gelu {
                fc1: LinearP::build(
                    pb,
                    &format!("{prefix}.ffn.fc1"),
                    channels,
                    ffn_hidden,
                    NORMAL,
                    Some(InitScheme::Zeros),
                ),
                fc2: LinearP::build(
                    pb,
                    &format!("{prefix}.ffn.fc2"),
                    ffn_hidden,
                    channels,
                    NORMAL,
                    Some(InitScheme::Zeros),
                ),
            }
        };
        BlockP { wq, wk, wv, wo, modulation, ffn }
    }

    pub fn count(
        sc: &mut ShapeCounter,
        prefix: &str,
        channels: usize,
        ffn_hidden: usize,
        use_swiglu: bool,
    ) {
        LinearP::count(sc, &format!("{prefix}.attn.q"), channels, channels, false);
        LinearP::count(sc, &format!("{prefix}.attn.k"), channels, channels, false);
        LinearP::count(sc, &format!("{prefix}.attn.v"), channels, channels, false);
        LinearP::count(sc, &format!("{prefix}.attn.o"), channels, channels, false);
        LinearP::count(sc, &format!("{prefix}.adaln"), channels, 6 * channels, true);
        if use_swiglu {
            LinearP::count(sc, &format!("{prefix}.ffn.gate"), channels, ffn_hidden, false);
            LinearP::count(sc, &format!("{prefix}.ffn.up"), channels, ffn_hidden, false);
            LinearP::count(sc, &format!("{prefix}.ffn.down"), ffn_hidden, channels, false);
        } else {
            LinearP::count(sc, &format!("{prefix}.ffn.fc1"), channels, ffn_hidden, true);
            LinearP::count(sc, &format!("{prefix}.ffn.fc2"), ffn_hidden, channels, true);
        }
    }

    pub fn bind(&self, vars: &[Var]) -> BlockVars {
        BlockVars {
            wq: self.wq.bind(vars),
            wk: self.wk.bind(vars),
            wv: self.wv.bind(vars),
            wo: self.wo.bind(vars),
            modulation: self.modulation.bind(vars),
            ffn: match &self.ffn {
                FfnP::SwiGlu { gate, up, down } => FfnVars::SwiGlu {
                    gate: gate.bind(vars),
                    up: up.bind(vars),
                    down: down.bind(vars),
                },
                FfnP::Gelu { fc1, fc2 } => {
                    FfnVars::Gelu { fc1: fc1.bind(vars), fc2: fc2.bind(vars) }
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FfnVars {
    SwiGlu { gate: LinearVars, up: LinearVars, down: LinearVars },
    Gelu { fc1: LinearVars, fc2: LinearVars },
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub modulation: LinearVars,
    pub ffn: FfnVars,
}

/// `x · (1 + scale) + shift` with per-sample `[B, C]` shift/scale.
pub fn modulate<T: Scalar>(tape: &Tape<T>, x: Var, shift: Var, scale: Var) -> Var {
    let one_plus = tape.add_scalar(scale, T::one());
    let scaled = tape.scale_tokens(x, one_plus);
    tape.shift_tokens(scaled, shift)
}

/// Multi-head self-attention over `[B, N, C]`, optionally rotating q/k by a
/// 2D rotary table for an `h×w` token grid.
pub fn attention<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    heads: usize,
    wq: &LinearVars,
    wk: &LinearVars,
    wv: &LinearVars,
    wo: &LinearVars,
    rope: Option<(&RopeTable<T>, usize, usize)>,
) -> Var {
    let c = tape.shape(x)[2];
    assert_eq!(c % heads, 0, "channels must divide by heads");
    let dh = c / heads;
    let q = linear(tape, x, wq);
    let k = linear(tape, x, wk);
    let v = linear(tape, x, wv);
    let mut qh = tape.split_heads(q, heads);
    let mut kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(v, heads);
    if let Some((table, h, w)) = rope {
        qh = table.apply_var(tape, qh, h, w);
        kh = table.apply_var(tape, kh, h, w);
    }
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let scores = tape.bmm(qh, kh, false, true, scale);
    let probs = tape.softmax_last(scores);
    let ctx = tape.bmm(probs, vh, false, false, T::one());
    let merged = tape.merge_heads(ctx, heads);
    linear(tape, merged, wo)
}

fn feed_forward<T: Scalar>(tape: &Tape<T>, x: Var, ffn: &FfnVars) -> Var {
    match ffn {
        FfnVars::SwiGlu { gate, up, down } => {
            let g = linear(tape, x, gate);
            let u = linear(tape, x, up);
            let act = tape.silu(g);
            let prod = tape.mul(act, u);
            linear(tape, prod, down)
        }
        FfnVars::Gelu { fc1, fc2 } => {
            let h = linear(tape, x, fc1);
            let act = tape.gelu(h);
            linear(tape, act, fc2)
        }
    }
}

/// Pre-norm residual block with adaptive conditioning:
/// `x + gate_a ⊙ attn(modulate(ln(x))) + gate_f ⊙ ffn(modulate(ln(·)))`.
/// `cond` is the per-sample conditioning vector `[B, C]`.
pub fn transformer_block<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    cond: Var,
    vars: &BlockVars,
    heads: usize,
    rope: Option<(&RopeTable<T>, usize, usize)>,
) -> Var {
    let c = tape.shape(x)[2];
    let m = linear(tape, cond, &vars.modulation);
    debug_assert_eq!(tape.shape(m)[1], 6 * c);
    let shift_a = tape.slice_last(m, 0, c);
    let scale_a = tape.slice_last(m, c, c);
    let gate_a = tape.slice_last(m, 2 * c, c);
    let shift_f = tape.slice_last(m, 3 * c, c);
    let scale_f = tape.slice_last(m, 4 * c, c);
    let gate_f = tape.slice_last(m, 5 * c, c);

    let h = tape.layer_norm_last(x, LN_EPS);
    let hm = modulate(tape, h, shift_a, scale_a);
    let att = attention(tape, hm, heads, &vars.wq, &vars.wk, &vars.wv, &vars.wo, rope);
    let x1 = {
        let gated = tape.scale_tokens(att, gate_a);
        tape.add(x, gated)
    };

    let h2 = tape.layer_norm_last(x1, LN_EPS);
    let h2m = modulate(tape, h2, shift_f, scale_f);
    let ff = feed_forward(tape, h2m, &vars.ffn);
    let gated = tape.scale_tokens(ff, gate_f);
    tape.add(x1, gated)
}

// ---- skip merge ----

/// Concatenate `[deep, shallow]` along channels and project `2C -> C`.
pub fn skip_merge<T: Scalar>(tape: &Tape<T>, deep: Var, shallow: Var, merge: &LinearVars) -> Var {
    assert_eq!(tape.shape(deep), tape.shape(shallow), "skip merge operands must match");
    let cat = tape.concat_last(deep, shallow);
    linear(tape, cat, merge)
}

pub fn skip_merge_build<T: Scalar>(
    pb: &mut ParamBuilder<'_, T>,
    name: &str,
    channels: usize,
) -> LinearP {
    LinearP::build(pb, name, 2 * channels, channels, NORMAL, Some(InitScheme::Zeros))
}

// ---- stage resamplers ----

/// Halve the spatial extent: pixel-unshuffle(2) then a learned `4C -> C` map.
pub fn downsample_stage<T: Scalar>(
    tape: &Tape<T>,
    g: GridVar,
    channels: usize,
    proj: &LinearVars,
) -> GridVar {
    assert!(
        g.height % STAGE_FACTOR == 0 && g.width % STAGE_FACTOR == 0,
        "downsample needs even grid extents, got {}x{}",
        g.height,
        g.width
    );
    let (idx, out_shape) = pixel_unshuffle_map(g.height, g.width, channels, STAGE_FACTOR);
    let gathered = tape.gather(g.var, Arc::new(idx), &out_shape);
    let projected = linear(tape, gathered, proj);
    GridVar {
        var: projected,
        height: g.height / STAGE_FACTOR,
        width: g.width / STAGE_FACTOR,
    }
}

/// Double the spatial extent: learned `C -> 4C` map then pixel-shuffle(2).
pub fn upsample_stage<T: Scalar>(
    tape: &Tape<T>,
    g: GridVar,
    channels: usize,
    proj: &LinearVars,
) -> GridVar {
    let expanded = linear(tape, g.var, proj);
    let factor_sq = STAGE_FACTOR * STAGE_FACTOR;
    let (idx, out_shape) = pixel_shuffle_map(g.height, g.width, channels * factor_sq, STAGE_FACTOR);
    let shuffled = tape.gather(expanded, Arc::new(idx), &out_shape);
    GridVar {
        var: shuffled,
        height: g.height * STAGE_FACTOR,
        width: g.width * STAGE_FACTOR,
    }
}

pub fn downsample_build<T: Scalar>(
    pb: &mut ParamBuilder<'_, T>,
    name: &str,
    channels: usize,
) -> LinearP {
    let f = STAGE_FACTOR * STAGE_FACTOR;
    LinearP::build(pb, name, f * channels, channels, NORMAL, Some(InitScheme::Zeros))
}

pub fn upsample_build<T: Scalar>(
    pb: &mut ParamBuilder<'_, T>,
    name: &str,
    channels: usize,
) -> LinearP {
    let f = STAGE_FACTOR * STAGE_FACTOR;
    LinearP::build(pb, name, channels, f * channels, NORMAL, Some(InitScheme::Zeros))
}

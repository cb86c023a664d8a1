//! Three-stage hierarchical diffusion transformer: patch embedding, encoder
//! blocks, one downsample/upsample transition around a middle stage, skip
//! merges into the decoder, and an adaptive final layer, with a hidden-state
//! tap at a configurable global block depth for alignment.
//!
//! Depths count transformer blocks only, 1-indexed, in execution order
//! encoder -> middle -> decoder; resamplers and skip merges do not advance
//! the depth counter.

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    downsample_build, downsample_stage, modulate, skip_merge, skip_merge_build, transformer_block,
    upsample_build, upsample_stage, BlockP, LinearP,
};
use crate::error::{Error, Result};
use crate::geometry::{apply_sample_map, patchify_map, unpatchify_map, GridVar, RopeTable};
use crate::numerics::{InitScheme, Scalar, SeededRng};
use crate::params::{ParamBuilder, ParamSet, PId, ShapeCounter};
use ndarray::{Array4, ArrayD, IxDyn};
use std::sync::Arc;

/// Width of the raw sinusoidal time embedding fed to the conditioning MLP.
pub const TIME_FREQ_DIM: usize = 256;
/// Times in [0,1] are stretched by this factor before the sinusoid, so the
/// frequency table spans the same range as integer-step diffusion models.
const TIME_SCALE: f64 = 1000.0;
pub(crate) const MAX_PERIOD: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input spatial extent (images are square).
    pub input_size: usize,
    pub input_channels: usize,
    pub patch_size: usize,
    /// Token width, constant across all three stages.
    pub channels: usize,
    pub heads: usize,
    /// Block counts for [encoder, middle, decoder].
    pub blocks_per_stage: [usize; 3],
    pub use_skips: bool,
    pub use_downsampling: bool,
    pub use_rope: bool,
    pub use_swiglu: bool,
    /// Global block index whose output is exposed for alignment;
    /// `None` resolves to [`default_tap`].
    pub tap_depth: Option<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 16,
            input_channels: 3,
            patch_size: 2,
            channels: 128,
            heads: 4,
            blocks_per_stage: [2, 2, 2],
            use_skips: true,
            use_downsampling: true,
            use_rope: true,
            use_swiglu: true,
            tap_depth: None,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.input_size == 0 || self.input_channels == 0 {
            return err("input_size, input_channels, patch_size must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return err(format!(
                "patch_size {} must divide input_size {}",
                self.patch_size, self.input_size
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return err(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            ));
        }
        if self.use_rope && self.head_dim() % 4 != 0 {
            return err(format!(
                "2D rotary encoding needs head_dim divisible by 4, got {}",
                self.head_dim()
            ));
        }
        if !self.use_rope && self.channels % 4 != 0 {
            return err(format!(
                "2D sin-cos positions need channels divisible by 4, got {}",
                self.channels
            ));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return err("every stage needs at least one block".into());
        }
        if self.use_downsampling && self.grid_size() % 2 != 0 {
            return err(format!(
                "downsampling needs an even token grid, got {0}x{0}",
                self.grid_size()
            ));
        }
        if self.use_skips && self.blocks_per_stage[0] != self.blocks_per_stage[2] {
            return err(format!(
                "symmetric skips need equal encoder/decoder block counts, got {} and {}",
                self.blocks_per_stage[0], self.blocks_per_stage[2]
            ));
        }
        if let Some(tap) = self.tap_depth {
            if tap < 1 || tap > self.total_blocks() {
                return err(format!(
                    "tap_depth {tap} outside [1, {}]",
                    self.total_blocks()
                ));
            }
        }
        if self.num_classes == 0 {
            return err("num_classes must be positive".into());
        }
        Ok(())
    }

    /// Token grid extent at full resolution.
    pub fn grid_size(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Token count at full resolution.
    pub fn tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        if self.use_swiglu {
            2 * self.channels
        } else {
            4 * self.channels
        }
    }

    pub fn resolved_tap(&self) -> usize {
        self.tap_depth.unwrap_or_else(|| default_tap(self))
    }
}

/// Middle block of the middle stage: `encoder + ceil(middle / 2)`.
pub fn default_tap(config: &ModelConfig) -> usize {
    config.blocks_per_stage[0] + config.blocks_per_stage[1].div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthInfo {
    /// 0 encoder, 1 middle, 2 decoder.
    pub stage: usize,
    pub height: usize,
    pub width: usize,
}

/// Map a 1-indexed global block depth to its stage and token-grid extent.
pub fn depth_to_stage(config: &ModelConfig, depth: usize) -> Result<DepthInfo> {
    let [e, m, d] = config.blocks_per_stage;
    if depth < 1 || depth > e + m + d {
        return Err(Error::OutOfRange(format!(
            "depth {depth} outside [1, {}]",
            e + m + d
        )));
    }
    let g = config.grid_size();
    let stage = if depth <= e {
        0
    } else if depth <= e + m {
        1
    } else {
        2
    };
    let extent = if stage == 1 && config.use_downsampling { g / 2 } else { g };
    Ok(DepthInfo { stage, height: extent, width: extent })
}

// ---- parameter layout ----

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub patch_embed: LinearP,
    pub time_fc1: LinearP,
    pub time_fc2: LinearP,
    /// `[num_classes + 1, C]`; the last row is the unconditional (null) class.
    pub class_table: PId,
    pub enc: Vec<BlockP>,
    pub down: Option<LinearP>,
    pub mid: Vec<BlockP>,
    pub up: Option<LinearP>,
    /// One merge per decoder block when skips are enabled.
    pub skips: Vec<LinearP>,
    pub dec: Vec<BlockP>,
    pub final_mod: LinearP,
    pub final_proj: LinearP,
}

const NORMAL: InitScheme = InitScheme::Normal { std: crate::blocks::INIT_STD };

impl ModelLayout {
    pub fn build<T: Scalar>(
        config: &ModelConfig,
        rng: &mut SeededRng,
    ) -> Result<(ModelLayout, ParamSet<T>)> {
        config.validate()?;
        let c = config.channels;
        let k = config.patch_size * config.patch_size * config.input_channels;
        let hidden = config.ffn_hidden();
        let mut pb = ParamBuilder::<T>::new(rng);
        let patch_embed =
            LinearP::build(&mut pb, "patch_embed", k, c, NORMAL, Some(InitScheme::Zeros));
        let time_fc1 = LinearP::build(
            &mut pb,
            "time_mlp.fc1",
            TIME_FREQ_DIM,
            c,
            NORMAL,
            Some(InitScheme::Zeros),
        );
        let time_fc2 =
            LinearP::build(&mut pb, "time_mlp.fc2", c, c, NORMAL, Some(InitScheme::Zeros));
        let class_table =
            pb.tensor("class_table", &[config.num_classes + 1, c], NORMAL);
        let [e, m, d] = config.blocks_per_stage;
        let enc = (0..e)
            .map(|i| BlockP::build(&mut pb, &format!("enc{i}"), c, hidden, config.use_swiglu))
            .collect();
        let down = config
            .use_downsampling
            .then(|| downsample_build(&mut pb, "down", c));
        let mid = (0..m)
            .map(|i| BlockP::build(&mut pb, &format!("mid{i}"), c, hidden, config.use_swiglu))
            .collect();
        let up = config
            .use_downsampling
            .then(|| upsample_build(&mut pb, "up", c));
        let skips = if config.use_skips {
            (0..d)
                .map(|i| skip_merge_build(&mut pb, &format!("skip{i}"), c))
                .collect()
        } else {
            Vec::new()
        };
        let dec = (0..d)
            .map(|i| BlockP::build(&mut pb, &format!("dec{i}"), c, hidden, config.use_swiglu))
            .collect();
        let final_mod = LinearP::build(
            &mut pb,
            "final.mod",
            c,
            2 * c,
            InitScheme::Zeros,
            Some(InitScheme::Zeros),
        );
        let final_proj = LinearP::build(
            &mut pb,
            "final.proj",
            c,
            k,
            InitScheme::Zeros,
            Some(InitScheme::Zeros),
        );
        let layout = ModelLayout {
            patch_embed,
            time_fc1,
            time_fc2,
            class_table,
            enc,
            down,
            mid,
            up,
            skips,
            dec,
            final_mod,
            final_proj,
        };
        Ok((layout, pb.finish()))
    }

    /// Mirror of [`ModelLayout::build`] over a [`ShapeCounter`]; kept in sync
    /// by a test comparing against built parameters.
    pub fn count(config: &ModelConfig, sc: &mut ShapeCounter) {
        let c = config.channels;
        let k = config.patch_size * config.patch_size * config.input_channels;
        let hidden = config.ffn_hidden();
        LinearP::count(sc, "patch_embed", k, c, true);
        LinearP::count(sc, "time_mlp.fc1", TIME_FREQ_DIM, c, true);
        LinearP::count(sc, "time_mlp.fc2", c, c, true);
        sc.tensor("class_table", &[config.num_classes + 1, c]);
        let [e, m, d] = config.blocks_per_stage;
        for i in 0..e {
            BlockP::count(sc, &format!("enc{i}"), c, hidden, config.use_swiglu);
        }
        if config.use_downsampling {
            LinearP::count(sc, "down", 4 * c, c, true);
        }
        for i in 0..m {
            BlockP::count(sc, &format!("mid{i}"), c, hidden, config.use_swiglu);
        }
        if config.use_downsampling {
            LinearP::count(sc, "up", c, 4 * c, true);
        }
        if config.use_skips {
            for i in 0..d {
                LinearP::count(sc, &format!("skip{i}"), 2 * c, c, true);
            }
        }
        for i in 0..d {
            BlockP::count(sc, &format!("dec{i}"), c, hidden, config.use_swiglu);
        }
        LinearP::count(sc, "final.mod", c, 2 * c, true);
        LinearP::count(sc, "final.proj", c, k, true);
    }

    pub fn param_count(config: &ModelConfig) -> usize {
        let mut sc = ShapeCounter::new();
        Self::count(config, &mut sc);
        sc.total()
    }
}

// ---- fixed embeddings ----

/// Sinusoidal embedding of per-sample times, `[B, TIME_FREQ_DIM]`,
/// computed in f64 and cast once.
pub fn time_embedding<T: Scalar>(t: &[f64]) -> ArrayD<T> {
    let half = TIME_FREQ_DIM / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[t.len(), TIME_FREQ_DIM]));
    for (bi, &tv) in t.iter().enumerate() {
        for kf in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * kf as f64 / half as f64).exp();
            let arg = tv * TIME_SCALE * freq;
            out[[bi, kf]] = T::from_f64(arg.cos());
            out[[bi, half + kf]] = T::from_f64(arg.sin());
        }
    }
    out
}

/// Fixed 2D sin-cos positional table `[h·w, c]`, row-major tokens: the first
/// half of the channel dim encodes the row coordinate, the second the column,
/// each as `[sin(p·w_k) .. cos(p·w_k) ..]` with `w_k = MAX_PERIOD^(-k/(c/4))`.
pub fn sincos_pos_embed<T: Scalar>(h: usize, w: usize, c: usize) -> ArrayD<T> {
    assert_eq!(c % 4, 0, "positional table needs channels divisible by 4");
    let quarter = c / 4;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[h * w, c]));
    for row in 0..h {
        for col in 0..w {
            let tok = row * w + col;
            for k in 0..quarter {
                let omega = (-(MAX_PERIOD.ln()) * k as f64 / quarter as f64).exp();
                let (ra, ca) = (row as f64 * omega, col as f64 * omega);
                out[[tok, k]] = T::from_f64(ra.sin());
                out[[tok, quarter + k]] = T::from_f64(ra.cos());
                out[[tok, 2 * quarter + k]] = T::from_f64(ca.sin());
                out[[tok, 3 * quarter + k]] = T::from_f64(ca.cos());
            }
        }
    }
    out
}

// ---- runtime model ----

pub struct ForwardOutput {
    /// Velocity prediction, `[B, input_channels, H, W]`.
    pub velocity: Var,
    /// Hidden state after the block at the resolved tap depth, before any
    /// stage-transition resampler.
    pub tap: GridVar,
}

/// Config plus everything derivable from it that forward needs repeatedly:
/// gather maps, rotary tables, the positional constant.
pub struct Model<T: Scalar> {
    config: ModelConfig,
    layout: ModelLayout,
    rope: Option<RopeTable<T>>,
    pos_embed: Option<Arc<ArrayD<T>>>,
    patchify_idx: Arc<Vec<usize>>,
    patchify_shape: Vec<usize>,
    unpatchify_idx: Arc<Vec<usize>>,
    unpatchify_shape: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<(Model<T>, ParamSet<T>)> {
        let (layout, set) = ModelLayout::build::<T>(&config, rng)?;
        let model = Model::from_layout(config, layout)?;
        Ok((model, set))
    }

    /// Assemble the runtime caches for an existing layout (checkpoint load).
    pub fn from_layout(config: ModelConfig, layout: ModelLayout) -> Result<Model<T>> {
        config.validate()?;
        let g = config.grid_size();
        let rope = if config.use_rope {
            Some(RopeTable::<T>::new(g, config.head_dim())?)
        } else {
            None
        };
        let pos_embed = (!config.use_rope)
            .then(|| Arc::new(sincos_pos_embed::<T>(g, g, config.channels)));
        let (pidx, pshape) =
            patchify_map(config.input_channels, config.input_size, config.input_size, config.patch_size);
        let (uidx, ushape) = unpatchify_map(
            config.input_channels,
            config.input_size,
            config.input_size,
            config.patch_size,
        );
        Ok(Model {
            config,
            layout,
            rope,
            pos_embed,
            patchify_idx: Arc::new(pidx),
            patchify_shape: pshape,
            unpatchify_idx: Arc::new(uidx),
            unpatchify_shape: ushape,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Per-sample conditioning vector `[B, C]`: time MLP output plus class
    /// embedding; `None` labels select the null class row.
    fn conditioning(&self, tape: &Tape<T>, vars: &[Var], t: &[f64], labels: &[Option<usize>]) -> Result<Var> {
        for &tv in t {
            if !(0.0..=1.0).contains(&tv) {
                return Err(Error::OutOfRange(format!("time {tv} outside [0, 1]")));
            }
        }
        let mut ids = Vec::with_capacity(labels.len());
        for l in labels {
            match l {
                Some(y) if *y >= self.config.num_classes => {
                    return Err(Error::OutOfRange(format!(
                        "label {y} outside [0, {})",
                        self.config.num_classes
                    )));
                }
                Some(y) => ids.push(*y),
                None => ids.push(self.config.num_classes),
            }
        }
        let emb = tape.constant(time_embedding::<T>(t));
        let h = tape.linear(emb, vars[self.layout.time_fc1.w.0], self.layout.time_fc1.b.map(|b| vars[b.0]));
        let h = tape.silu(h);
        let t_feat =
            tape.linear(h, vars[self.layout.time_fc2.w.0], self.layout.time_fc2.b.map(|b| vars[b.0]));
        let y_feat = tape.embedding(vars[self.layout.class_table.0], Arc::new(ids));
        Ok(tape.add(t_feat, y_feat))
    }

    /// Full forward pass. `vars` must be the tape bindings of the parameter
    /// set in build order (see [`crate::blocks::bind_all`]).
    pub fn forward(
        &self,
        tape: &Tape<T>,
        vars: &[Var],
        z_t: &Array4<T>,
        t: &[f64],
        labels: &[Option<usize>],
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let b = z_t.shape()[0];
        let want = [b, cfg.input_channels, cfg.input_size, cfg.input_size];
        if z_t.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?}, expected {:?}",
                z_t.shape(),
                want
            )));
        }
        if t.len() != b || labels.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch {b} with {} times and {} labels",
                t.len(),
                labels.len()
            )));
        }
        let cond = self.conditioning(tape, vars, t, labels)?;

        let tokens0 = apply_sample_map(
            &z_t.to_owned().into_dyn(),
            &self.patchify_idx,
            &self.patchify_shape,
        );
        let x0 = tape.constant(tokens0);
        let mut x = tape.linear(
            x0,
            vars[self.layout.patch_embed.w.0],
            self.layout.patch_embed.b.map(|b| vars[b.0]),
        );
        if let Some(pos) = &self.pos_embed {
            x = tape.offset_tokens(x, pos.clone());
        }

        let g = cfg.grid_size();
        let mut grid = GridVar { var: x, height: g, width: g };
        let tap_depth = cfg.resolved_tap();
        let mut depth = 0usize;
        let mut tap: Option<GridVar> = None;
        let mut skip_stack: Vec<Var> = Vec::new();

        let run_block = |grid: &mut GridVar, bp: &BlockP, depth: &mut usize, tap: &mut Option<GridVar>| {
            let bv = bp.bind(vars);
            let rope = self.rope.as_ref().map(|rt| (rt, grid.height, grid.width));
            grid.var = transformer_block(tape, grid.var, cond, &bv, cfg.heads, rope);
            *depth += 1;
            if *depth == tap_depth {
                *tap = Some(*grid);
            }
        };

        for bp in &self.layout.enc {
            run_block(&mut grid, bp, &mut depth, &mut tap);
            if cfg.use_skips {
                skip_stack.push(grid.var);
            }
        }
        if let Some(down) = &self.layout.down {
            grid = downsample_stage(tape, grid, cfg.channels, &down.bind(vars));
        }
        for bp in &self.layout.mid {
            run_block(&mut grid, bp, &mut depth, &mut tap);
        }
        if let Some(up) = &self.layout.up {
            grid = upsample_stage(tape, grid, cfg.channels, &up.bind(vars));
        }
        for (i, bp) in self.layout.dec.iter().enumerate() {
            if cfg.use_skips {
                let shallow = skip_stack.pop().expect("skip stack balanced");
                let merge = self.layout.skips[i].bind(vars);
                grid.var = skip_merge(tape, grid.var, shallow, &merge);
            }
            run_block(&mut grid, bp, &mut depth, &mut tap);
        }

        let c = cfg.channels;
        let m = tape.linear(
            cond,
            vars[self.layout.final_mod.w.0],
            self.layout.final_mod.b.map(|b| vars[b.0]),
        );
        let shift = tape.slice_last(m, 0, c);
        let scale = tape.slice_last(m, c, c);
        let hn = tape.layer_norm_last(grid.var, crate::blocks::LN_EPS);
        let hm = modulate(tape, hn, shift, scale);
        let out_tokens = tape.linear(
            hm,
            vars[self.layout.final_proj.w.0],
            self.layout.final_proj.b.map(|b| vars[b.0]),
        );
        let velocity = tape.gather(out_tokens, self.unpatchify_idx.clone(), &self.unpatchify_shape);

        Ok(ForwardOutput {
            velocity,
            tap: tap.expect("tap depth validated against total blocks"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::bind_all;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_size: 8,
            input_channels: 2,
            patch_size: 2,
            channels: 16,
            heads: 2,
            blocks_per_stage: [2, 2, 2],
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn randn4(rng: &mut SeededRng, shape: [usize; 4]) -> Array4<f64> {
        let mut a = ArrayD::zeros(IxDyn(&shape));
        rng.fill_normal(&mut a, 1.0);
        a.into_dimensionality().unwrap()
    }

    #[test]
    fn default_tap_formula() {
        let mk = |bps: [usize; 3]| ModelConfig { blocks_per_stage: bps, ..toy_config() };
        assert_eq!(default_tap(&mk([10, 16, 10])), 18);
        assert_eq!(default_tap(&mk([2, 2, 2])), 3);
        assert_eq!(default_tap(&mk([5, 5, 5])), 8);
    }

    #[test]
    fn depth_to_stage_large_config_dims() {
        // 32-pixel input at patch 2 gives a 16x16 token grid.
        let cfg = ModelConfig {
            input_size: 32,
            patch_size: 2,
            channels: 32,
            heads: 4,
            blocks_per_stage: [10, 16, 10],
            ..toy_config()
        };
        cfg.validate().unwrap();
        let d4 = depth_to_stage(&cfg, 4).unwrap();
        assert_eq!((d4.stage, d4.height, d4.width), (0, 16, 16));
        let d18 = depth_to_stage(&cfg, 18).unwrap();
        assert_eq!((d18.stage, d18.height, d18.width), (1, 8, 8));
        let d32 = depth_to_stage(&cfg, 32).unwrap();
        assert_eq!((d32.stage, d32.height, d32.width), (2, 16, 16));
        assert_eq!(cfg.resolved_tap(), 18);
        assert!(depth_to_stage(&cfg, 0).is_err());
        assert!(depth_to_stage(&cfg, 37).is_err());
    }

    #[test]
    fn depth_dims_without_downsampling_are_constant() {
        let cfg = ModelConfig { use_downsampling: false, use_skips: false, ..toy_config() };
        for depth in 1..=cfg.total_blocks() {
            let info = depth_to_stage(&cfg, depth).unwrap();
            assert_eq!((info.height, info.width), (4, 4));
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(ModelConfig { heads: 3, ..toy_config() }.validate().is_err());
        assert!(ModelConfig { blocks_per_stage: [2, 0, 2], ..toy_config() }
            .validate()
            .is_err());
        assert!(ModelConfig { tap_depth: Some(7), ..toy_config() }.validate().is_err());
        assert!(ModelConfig { tap_depth: Some(0), ..toy_config() }.validate().is_err());
        // 6x6 input at patch 2 gives an odd 3x3 grid: no downsampling.
        assert!(ModelConfig { input_size: 6, ..toy_config() }.validate().is_err());
        assert!(ModelConfig { blocks_per_stage: [2, 2, 3], ..toy_config() }
            .validate()
            .is_err());
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn param_count_matches_built_set() {
        for (skips, down, swiglu) in
            [(true, true, true), (false, false, true), (true, true, false), (false, true, true)]
        {
            let cfg = ModelConfig {
                use_skips: skips,
                use_downsampling: down,
                use_swiglu: swiglu,
                ..toy_config()
            };
            let mut rng = SeededRng::new(1, 0);
            let (_, set) = ModelLayout::build::<f64>(&cfg, &mut rng).unwrap();
            assert_eq!(ModelLayout::param_count(&cfg), set.num_scalars());
        }
    }

    #[test]
    fn doubling_channels_quadruples_attention_params() {
        let count_attn = |c: usize| {
            let cfg = ModelConfig { channels: c, ..toy_config() };
            let mut sc = ShapeCounter::new();
            ModelLayout::count(&cfg, &mut sc);
            sc.total_matching(".attn.")
        };
        assert_eq!(count_attn(32), 4 * count_attn(16));
    }

    #[test]
    fn zero_init_model_predicts_zero_velocity() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(2, 0);
        let (model, set) = Model::<f64>::new(cfg, &mut rng).unwrap();
        let tape = Tape::new_inference();
        let vars = bind_all(&tape, &set);
        let z = randn4(&mut rng, [2, 2, 8, 8]);
        let out = model
            .forward(&tape, &vars, &z, &[0.3, 0.8], &[Some(1), None])
            .unwrap();
        assert_eq!(tape.shape(out.velocity), vec![2, 2, 8, 8]);
        assert!(tape.value(out.velocity).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_dims_follow_depth_map_and_forward_is_deterministic() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(3, 0);
        let (model, mut set) = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        crate::reference::randomize_conditioning(&mut set, &mut rng);
        let z = randn4(&mut rng, [2, 2, 8, 8]);
        let run = |tap: usize| {
            let m = Model::<f64>::from_layout(
                ModelConfig { tap_depth: Some(tap), ..cfg.clone() },
                model.layout().clone(),
            )
            .unwrap();
            let tape = Tape::new_inference();
            let vars = bind_all(&tape, &set);
            let out = m.forward(&tape, &vars, &z, &[0.5, 0.1], &[Some(0), Some(3)]).unwrap();
            (
                (out.tap.height, out.tap.width),
                tape.value(out.tap.var).as_ref().clone(),
                tape.value(out.velocity).as_ref().clone(),
            )
        };
        for depth in 1..=cfg.total_blocks() {
            let info = depth_to_stage(&cfg, depth).unwrap();
            let ((h, w), tapv, _) = run(depth);
            assert_eq!((h, w), (info.height, info.width), "depth {depth}");
            assert_eq!(tapv.shape(), &[2, info.height * info.width, cfg.channels]);
        }
        // Toy config, tap 3: first middle block, one downsample in -> 2x2.
        let ((h, w), _, _) = run(3);
        assert_eq!((h, w), (2, 2));
        let (_, tap_a, vel_a) = run(3);
        let (_, tap_b, vel_b) = run(3);
        assert_eq!(tap_a, tap_b);
        assert_eq!(vel_a, vel_b);
    }

    #[test]
    fn tap_is_bit_identical_with_and_without_downstream_graph() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(4, 0);
        let (model, mut set) = Model::<f64>::new(cfg, &mut rng).unwrap();
        crate::reference::randomize_conditioning(&mut set, &mut rng);
        let z = randn4(&mut rng, [1, 2, 8, 8]);

        let tape_a = Tape::<f64>::new();
        let vars_a = bind_all(&tape_a, &set);
        let out_a = model.forward(&tape_a, &vars_a, &z, &[0.4], &[Some(2)]).unwrap();
        // Attach an extra consumer of the tap, as the alignment loss does.
        let probe = tape_a.mean_all(out_a.tap.var);
        let _ = tape_a.backward(probe);

        let tape_b = Tape::<f64>::new();
        let vars_b = bind_all(&tape_b, &set);
        let out_b = model.forward(&tape_b, &vars_b, &z, &[0.4], &[Some(2)]).unwrap();

        assert_eq!(&*tape_a.value(out_a.tap.var), &*tape_b.value(out_b.tap.var));
        assert_eq!(&*tape_a.value(out_a.velocity), &*tape_b.value(out_b.velocity));
    }

    #[test]
    fn invalid_inputs_error() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(5, 0);
        let (model, set) = Model::<f64>::new(cfg, &mut rng).unwrap();
        let tape = Tape::new_inference();
        let vars = bind_all(&tape, &set);
        let z = randn4(&mut rng, [1, 2, 8, 8]);
        assert!(model.forward(&tape, &vars, &z, &[1.5], &[Some(0)]).is_err());
        assert!(model.forward(&tape, &vars, &z, &[0.5], &[Some(9)]).is_err());
        assert!(model.forward(&tape, &vars, &z, &[0.5, 0.5], &[Some(0)]).is_err());
        let bad = randn4(&mut rng, [1, 2, 4, 4]);
        assert!(model.forward(&tape, &vars, &bad, &[0.5], &[Some(0)]).is_err());
    }

    #[test]
    fn isotropic_stack_matches_independent_reference() {
        for (rope, swiglu) in [(true, true), (false, false), (true, false)] {
            let cfg = ModelConfig {
                use_skips: false,
                use_downsampling: false,
                use_rope: rope,
                use_swiglu: swiglu,
                ..toy_config()
            };
            let mut rng = SeededRng::new(6, 0);
            let (model, mut set) = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
            crate::reference::randomize_conditioning(&mut set, &mut rng);
            let z = randn4(&mut rng, [2, 2, 8, 8]);
            let t = [0.25, 0.9];
            let labels = [Some(3), None];

            let tape = Tape::new_inference();
            let vars = bind_all(&tape, &set);
            let got = model.forward(&tape, &vars, &z, &t, &labels).unwrap();
            let got_v = tape.value(got.velocity);

            let want = crate::reference::isotropic_forward(&set, model.layout(), &cfg, &z, &t, &labels);
            let max_err = got_v
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(
                max_err < 1e-6,
                "rope={rope} swiglu={swiglu}: max abs err {max_err}"
            );
            // Tap grid dims in the isotropic model match the patch grid.
            assert_eq!((got.tap.height, got.tap.width), (4, 4));
        }
    }

    #[test]
    fn skips_and_downsampling_change_the_function() {
        // Structural sanity: toggling the U-Net components moves the output.
        let base = toy_config();
        let mut rng = SeededRng::new(7, 0);
        let (model, mut set) = Model::<f64>::new(base.clone(), &mut rng).unwrap();
        crate::reference::randomize_conditioning(&mut set, &mut rng);
        let z = randn4(&mut rng, [1, 2, 8, 8]);
        let tape = Tape::new_inference();
        let vars = bind_all(&tape, &set);
        let full = model.forward(&tape, &vars, &z, &[0.5], &[Some(1)]).unwrap();
        let full_v = tape.value(full.velocity);

        let iso_cfg =
            ModelConfig { use_skips: false, use_downsampling: false, ..base };
        let mut rng2 = SeededRng::new(7, 0);
        let (iso, mut iso_set) = Model::<f64>::new(iso_cfg, &mut rng2).unwrap();
        crate::reference::randomize_conditioning(&mut iso_set, &mut rng2);
        let tape2 = Tape::new_inference();
        let vars2 = bind_all(&tape2, &iso_set);
        let iso_out = iso.forward(&tape2, &vars2, &z, &[0.5], &[Some(1)]).unwrap();
        assert_ne!(&*full_v, &*tape2.value(iso_out.velocity));
    }
}

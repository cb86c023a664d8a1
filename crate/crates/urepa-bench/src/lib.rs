//! Shared fixtures for the criterion benches. Everything is pinned to the
//! default desk-scale configuration in f32, the dtype training actually
//! runs in, so the numbers predict real wall time.

use ndarray::{Array3, ArrayD, IxDyn};
use urepa_core::alignment::{AlignmentSpec, ProjectorLayout};
use urepa_core::blocks::BlockP;
use urepa_core::data::{ToyDataset, ToyDatasetConfig};
use urepa_core::geometry::RopeTable;
use urepa_core::model::{depth_to_stage, Model, ModelConfig};
use urepa_core::numerics::{streams, SeededRng};
use urepa_core::params::{ParamBuilder, ParamSet};
use urepa_core::teacher::{StubEncoder, StubEncoderConfig, TeacherProvider};
use urepa_core::trainer::{Trainer, TrainerOptions};

pub fn randn(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<f32> {
    let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
    rng.fill_normal(&mut a, 1.0);
    a
}

/// One transformer block at desk width plus a batch of token grids sized
/// like the encoder stage sees them.
pub struct BlockFixture {
    pub block: BlockP,
    pub set: ParamSet<f32>,
    pub rope: RopeTable<f32>,
    pub heads: usize,
    /// Grid side; tokens are `grid * grid` per sample.
    pub grid: usize,
    pub x: ArrayD<f32>,
    pub cond: ArrayD<f32>,
}

pub fn block_fixture() -> BlockFixture {
    let config = ModelConfig::default();
    let (b, c, heads) = (32, config.channels, config.heads);
    let grid = config.grid_size();
    let n = grid * grid;
    let mut build_rng = SeededRng::new(0, 0);
    let mut pb = ParamBuilder::<f32>::new(&mut build_rng);
    let block = BlockP::build(&mut pb, "blk", c, config.ffn_hidden(), config.use_swiglu);
    let set = pb.finish();
    let rope = RopeTable::<f32>::new(grid, c / heads).unwrap();
    let mut rng = SeededRng::new(1, 0);
    let x = randn(&mut rng, &[b, n, c]);
    let cond = randn(&mut rng, &[b, c]);
    BlockFixture { block, set, rope, heads, grid, x, cond }
}

/// Teacher-shaped feature grids for the alignment losses: default stub
/// width on the full patch grid at training batch size.
pub fn loss_grids() -> (Array3<f32>, Array3<f32>) {
    let teacher = StubEncoderConfig::default();
    let config = ModelConfig::default();
    let n = config.grid_size() * config.grid_size();
    let mut rng = SeededRng::new(2, 0);
    let y_star = randn(&mut rng, &[32, n, teacher.channels]);
    let y = randn(&mut rng, &[32, n, teacher.channels]);
    (
        y_star.into_dimensionality().unwrap(),
        y.into_dimensionality().unwrap(),
    )
}

/// The full desk-scale training rig with default hyperparameters; one step
/// of this decides how long a 2,000-step run takes.
pub fn desk_trainer() -> Trainer<f32> {
    let seed = 0;
    let config = ModelConfig::default();
    let align = AlignmentSpec::default();
    let mut rng = SeededRng::new(seed, streams::MODEL_INIT);
    let (model, model_set) = Model::<f32>::new(config, &mut rng).unwrap();
    let tap = depth_to_stage(&config, config.resolved_tap()).unwrap();
    let r = config.grid_size() / tap.height;
    let teacher_cfg = StubEncoderConfig::default();
    let mut prng = SeededRng::new(seed, streams::PROJECTOR_INIT);
    let (proj, proj_set) = ProjectorLayout::build::<f32>(
        config.channels,
        teacher_cfg.channels,
        r,
        align.placement,
        align.time_aware,
        &mut prng,
    )
    .unwrap();
    let teacher = TeacherProvider::Stub(StubEncoder::new(teacher_cfg).unwrap());
    let dataset = ToyDataset::new(ToyDatasetConfig::default()).unwrap();
    Trainer::new(
        model,
        model_set,
        Some((proj, proj_set)),
        Some(teacher),
        dataset,
        align,
        TrainerOptions::default(),
        seed,
    )
    .unwrap()
}

/// Default model plus weights for velocity-field evaluations.
pub fn desk_model() -> (Model<f32>, ParamSet<f32>) {
    let mut rng = SeededRng::new(0, streams::MODEL_INIT);
    Model::<f32>::new(ModelConfig::default(), &mut rng).unwrap()
}

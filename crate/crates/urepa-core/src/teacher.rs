//! Frozen reference features: a seeded stub vision transformer standing in
//! for a large pretrained encoder, plus a seekable feature-file format so
//! real encoder outputs can be supplied without code changes.
//!
//! Teacher outputs are plain arrays, never tape nodes, so no gradient can
//! reach them by construction.

use crate::blocks::{LinearP, LN_EPS};
use crate::error::{Error, Result};
use crate::geometry::{apply_sample_map, patchify_map};
use crate::model::sincos_pos_embed;
use crate::numerics::{streams, InitScheme, Scalar, SeededRng};
use crate::params::{ParamBuilder, ParamSet};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubEncoderConfig {
    pub depth: usize,
    /// Feature width D of the produced tokens.
    pub channels: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub input_channels: usize,
    /// Weights are drawn once from this seed and never change.
    pub seed: u64,
}

impl Default for StubEncoderConfig {
    fn default() -> Self {
        StubEncoderConfig {
            depth: 4,
            channels: 64,
            heads: 4,
            patch_size: 2,
            input_channels: 3,
            seed: 0,
        }
    }
}

impl StubEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.patch_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("stub depth, patch, input channels must be positive".into()));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "stub channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config("stub channels must divide by 4 for 2D positions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StubBlock {
    wq: LinearP,
    wk: LinearP,
    wv: LinearP,
    wo: LinearP,
    fc1: LinearP,
    fc2: LinearP,
}

/// Isotropic pre-norm ViT with GELU MLPs and fixed seeded weights.
pub struct StubEncoder<T: Scalar> {
    config: StubEncoderConfig,
    set: ParamSet<T>,
    patch: LinearP,
    blocks: Vec<StubBlock>,
}

const NORMAL: InitScheme = InitScheme::Normal { std: crate::blocks::INIT_STD };

impl<T: Scalar> StubEncoder<T> {
    pub fn new(config: StubEncoderConfig) -> Result<StubEncoder<T>> {
        config.validate()?;
        let c = config.channels;
        let k = config.patch_size * config.patch_size * config.input_channels;
        let mut rng = SeededRng::new(config.seed, streams::TEACHER_INIT);
        let mut pb = ParamBuilder::<T>::new(&mut rng);
        let patch = LinearP::build(&mut pb, "stub.patch", k, c, NORMAL, Some(InitScheme::Zeros));
        let blocks = (0..config.depth)
            .map(|i| StubBlock {
                wq: LinearP::build(&mut pb, &format!("stub.{i}.q"), c, c, NORMAL, None),
                wk: LinearP::build(&mut pb, &format!("stub.{i}.k"), c, c, NORMAL, None),
                wv: LinearP::build(&mut pb, &format!("stub.{i}.v"), c, c, NORMAL, None),
                wo: LinearP::build(&mut pb, &format!("stub.{i}.o"), c, c, NORMAL, None),
                fc1: LinearP::build(
                    &mut pb,
                    &format!("stub.{i}.fc1"),
                    c,
                    4 * c,
                    NORMAL,
                    Some(InitScheme::Zeros),
                ),
                fc2: LinearP::build(
                    &mut pb,
                    &format!("stub.{i}.fc2"),
                    4 * c,
                    c,
                    NORMAL,
                    Some(InitScheme::Zeros),
                ),
            })
            .collect();
        Ok(StubEncoder { config, set: pb.finish(), patch, blocks })
    }

    pub fn config(&self) -> &StubEncoderConfig {
        &self.config
    }

    /// Token count produced for a square input of the given extent.
    pub fn tokens_for(&self, input_size: usize) -> usize {
        let g = input_size / self.config.patch_size;
        g * g
    }

    fn mat(&self, p: &LinearP) -> Array2<T> {
        self.set
            .value(p.w)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("stub weight rank 2")
    }

    /// Encode clean images `[B, C_in, H, W]` into features `[B, N, D]`.
    pub fn encode(&self, x_star: &Array4<T>) -> Result<Array3<T>> {
        let cfg = &self.config;
        let (b, cin, h, w) = x_star.dim();
        if cin != cfg.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "stub expects {} input channels, got {cin}",
                cfg.input_channels
            )));
        }
        if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 || h != w {
            return Err(Error::ShapeMismatch(format!(
                "stub needs square inputs divisible by patch {}, got {h}x{w}",
                cfg.patch_size
            )));
        }
        let (idx, shape) = patchify_map(cin, h, w, cfg.patch_size);
        let tokens = apply_sample_map(&x_star.to_owned().into_dyn(), &idx, &shape);
        let n = shape[0];
        let c = cfg.channels;
        let g = h / cfg.patch_size;
        let pos = sincos_pos_embed::<T>(g, g, c)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let pw = self.mat(&self.patch);
        let pb = self
            .set
            .value(self.patch.b.unwrap())
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();

        let mut out = Array3::<T>::zeros((b, n, c));
        for bi in 0..b {
            let tok2 = tokens
                .index_axis(Axis(0), bi)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut x = tok2.dot(&pw) + &pb;
            x += &pos;
            for blk in &self.blocks {
                x = self.block_forward(&x, blk);
            }
            ln_rows(&mut x);
            out.index_axis_mut(Axis(0), bi).assign(&x);
        }
        Ok(out)
    }

    fn block_forward(&self, x: &Array2<T>, blk: &StubBlock) -> Array2<T> {
        let cfg = &self.config;
        let c = cfg.channels;
        let dh = c / cfg.heads;
        let mut h = x.clone();
        ln_rows(&mut h);
        let q = h.dot(&self.mat(&blk.wq));
        let k = h.dot(&self.mat(&blk.wk));
        let v = h.dot(&self.mat(&blk.wv));
        let n = x.nrows();
        let mut ctx = Array2::<T>::zeros((n, c));
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for head in 0..cfg.heads {
            let cols = ndarray::s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            for mut row in scores.rows_mut() {
                let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                row.mapv_inplace(|s| (s - mx).exp());
                let mut sum = T::zero();
                for &s in row.iter() {
                    sum += s;
                }
                let inv = T::one() / sum;
                row.mapv_inplace(|s| s * inv);
            }
            ctx.slice_mut(cols).assign(&scores.dot(&vh));
        }
        let att = ctx.dot(&self.mat(&blk.wo));
        let x1 = x + &att;

        let mut h2 = x1.clone();
        ln_rows(&mut h2);
        let b1 = self
            .set
            .value(blk.fc1.b.unwrap())
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let b2 = self
            .set
            .value(blk.fc2.b.unwrap())
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut inner = h2.dot(&self.mat(&blk.fc1)) + &b1;
        inner.mapv_inplace(gelu_tanh);
        let ffn = inner.dot(&self.mat(&blk.fc2)) + &b2;
        x1 + &ffn
    }
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn ln_rows<T: Scalar>(x: &mut Array2<T>) {
    let eps = T::from_f64(LN_EPS);
    let inv_n = T::one() / T::from_f64(x.ncols() as f64);
    for mut row in x.rows_mut() {
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var = var * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
}

/// Per-token standardization over the feature dim: zero mean, unit variance.
pub fn standardize_tokens<T: Scalar>(features: &mut Array3<T>) {
    let d = features.dim().2;
    let inv_d = T::one() / T::from_f64(d as f64);
    let eps = T::from_f64(1e-6);
    for mut row in features.rows_mut() {
        let mut mean = T::zero();
        for &v in row.iter() {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var = var * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
}

// ---- feature file format ----

const MAGIC: [u8; 4] = *b"URFT";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Write per-sample token features (each `[N, D]`) as a seekable binary file:
/// magic "URFT", version u16, count u32, N u32, D u32, dtype u8 (0 = f32),
/// then `count · N · D` little-endian f32 values, tokens row-major.
pub fn save_features(path: &Path, features: &[Array2<f32>]) -> Result<()> {
    let first = features
        .first()
        .ok_or_else(|| Error::Config("cannot save an empty feature set".into()))?;
    let (n, d) = first.dim();
    for (i, f) in features.iter().enumerate() {
        if f.dim() != (n, d) {
            return Err(Error::ShapeMismatch(format!(
                "feature {i} has shape {:?}, expected ({n}, {d})",
                f.dim()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(features.len() as u32).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    for f in features {
        for &v in f.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// In-memory random-access store over a saved feature file.
pub struct FeatureStore {
    count: usize,
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn load(path: &Path) -> Result<FeatureStore> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 19];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("feature file shorter than its header".into()))?;
        if head[0..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                &head[0..4],
                MAGIC
            )));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(head[14..18].try_into().unwrap()) as usize;
        if head[18] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {}", head[18])));
        }
        let want = count * n * d;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != want * 4 {
            return Err(Error::Format(format!(
                "expected {} payload bytes for {count}x{n}x{d} f32, found {}",
                want * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureStore { count, n, d, data })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, index: usize) -> Result<ArrayView2<'_, f32>> {
        if index >= self.count {
            return Err(Error::OutOfRange(format!(
                "feature index {index} outside [0, {})",
                self.count
            )));
        }
        let stride = self.n * self.d;
        let slice = &self.data[index * stride..(index + 1) * stride];
        Ok(ArrayView2::from_shape((self.n, self.d), slice).unwrap())
    }
}

/// Where teacher features come from, plus the optional per-token
/// standardization flag recorded in run metadata.
pub enum TeacherProvider<T: Scalar> {
    Stub(StubEncoder<T>),
    File(FeatureStore),
}

impl<T: Scalar> TeacherProvider<T> {
    /// Features for a batch: the stub encodes the images, the file store is
    /// indexed by dataset position.
    pub fn features(
        &self,
        x_star: &Array4<T>,
        indices: &[usize],
        standardize: bool,
    ) -> Result<Array3<T>> {
        let mut feats = match self {
            TeacherProvider::Stub(enc) => enc.encode(x_star)?,
            TeacherProvider::File(store) => {
                let b = indices.len();
                let mut out = Array3::<T>::zeros((b, store.token_count(), store.dim()));
                for (bi, &idx) in indices.iter().enumerate() {
                    let f = store.get(idx)?;
                    out.index_axis_mut(Axis(0), bi)
                        .assign(&f.mapv(|v| T::from_f64(v as f64)));
                }
                out
            }
        };
        if standardize {
            standardize_tokens(&mut feats);
        }
        Ok(feats)
    }

    /// Validate token count and width against what alignment expects.
    pub fn check_dims(&self, tokens: usize, dim: usize, input_size: usize) -> Result<()> {
        let (have_n, have_d) = match self {
            TeacherProvider::Stub(enc) => (enc.tokens_for(input_size), enc.config().channels),
            TeacherProvider::File(store) => (store.token_count(), store.dim()),
        };
        if (have_n, have_d) != (tokens, dim) {
            return Err(Error::Config(format!(
                "teacher provides {have_n} tokens of width {have_d}, run needs {tokens} of width {dim}"
            )));
        }
        Ok(())
    }
}

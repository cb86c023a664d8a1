//! Procedural class-conditional toy data: oriented sinusoidal gratings with
//! per-class frequency and orientation, random per-sample phase, and a small
//! additive noise floor. Every sample is a pure function of (seed, index), so
//! runs are reproducible and batch order is irrelevant to content.

use crate::error::{Error, Result};
use crate::numerics::{streams, Scalar, SeededRng};
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};

pub const NUM_CLASSES: usize = 10;
const AMPLITUDE: f64 = 0.8;
const CHANNEL_PHASE: f64 = 2.0 * std::f64::consts::PI / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub size: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig { size: 512, input_size: 16, input_channels: 3, noise_std: 0.1, seed: 0 }
    }
}

impl ToyDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.input_size == 0 || self.input_channels == 0 {
            return Err(Error::Config("dataset size and dims must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be finite, >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Fully materialized dataset; desk-scale sizes fit comfortably in memory.
pub struct ToyDataset<T: Scalar> {
    config: ToyDatasetConfig,
    images: Vec<Array3<T>>,
    labels: Vec<usize>,
}

impl<T: Scalar> ToyDataset<T> {
    pub fn new(config: ToyDatasetConfig) -> Result<ToyDataset<T>> {
        config.validate()?;
        let mut images = Vec::with_capacity(config.size);
        let mut labels = Vec::with_capacity(config.size);
        for index in 0..config.size {
            let (img, label) = generate_sample(&config, index);
            images.push(img);
            labels.push(label);
        }
        Ok(ToyDataset { config, images, labels })
    }

    pub fn config(&self) -> &ToyDatasetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<(&Array3<T>, usize)> {
        if index >= self.images.len() {
            return Err(Error::OutOfRange(format!(
                "sample index {index} outside [0, {})",
                self.images.len()
            )));
        }
        Ok((&self.images[index], self.labels[index]))
    }

    /// Stack the given samples into `[B, C, H, W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Array4<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Config("batch must be non-empty".into()));
        }
        let c = self.config.input_channels;
        let s = self.config.input_size;
        let mut x = Array4::<T>::zeros((indices.len(), c, s, s));
        let mut labels = Vec::with_capacity(indices.len());
        for (bi, &idx) in indices.iter().enumerate() {
            let (img, label) = self.get(idx)?;
            x.index_axis_mut(Axis(0), bi).assign(img);
            labels.push(label);
        }
        Ok((x, labels))
    }
}

/// Class c draws a grating with orientation π·c/10 and spatial frequency
/// 1 + (c mod 5) cycles per 16 pixels; channels are phase-shifted copies.
fn generate_sample<T: Scalar>(config: &ToyDatasetConfig, index: usize) -> (Array3<T>, usize) {
    let mut rng = SeededRng::new(config.seed, streams::STREAM_DATASET_BASE + index as u64);
    let label = rng.index(NUM_CLASSES);
    let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let alpha = std::f64::consts::PI * label as f64 / NUM_CLASSES as f64;
    let freq = 1.0 + (label % 5) as f64;
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let s = config.input_size;
    let cch = config.input_channels;

    let mut img = Array3::<T>::zeros((cch, s, s));
    for ch in 0..cch {
        let delta = CHANNEL_PHASE * ch as f64;
        for i in 0..s {
            for j in 0..s {
                let u = ca * (i as f64 + 0.5) + sa * (j as f64 + 0.5);
                let arg = 2.0 * std::f64::consts::PI * freq * u / 16.0 + phase + delta;
                img[[ch, i, j]] = T::from_f64(AMPLITUDE * arg.sin());
            }
        }
    }
    if config.noise_std > 0.0 {
        let mut noise = ArrayD::<T>::zeros(IxDyn(&[cch, s, s]));
        rng.fill_normal(&mut noise, config.noise_std);
        img += &noise.into_dimensionality::<ndarray::Ix3>().unwrap();
    }
    (img, label)
}

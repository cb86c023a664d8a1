//! Flow matching on the linear interpolant and ODE sampling with
//! classifier-free guidance restricted to a time interval.
//!
//! Time convention: t = 0 is clean data, t = 1 is pure noise;
//! `z_t = (1-t)·x* + t·eps`, the velocity target is `eps - x*`, and sampling
//! integrates from t = 1 down to t = 0.

use crate::autodiff::{Tape, Var};
use crate::blocks::bind_all;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, SeededRng};
use crate::params::ParamSet;
use ndarray::{Array4, ArrayD};

/// Noisy point and velocity target for one time on the linear path.
pub fn make_pair<T: Scalar>(
    x_star: &ArrayD<T>,
    eps: &ArrayD<T>,
    t: f64,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    if x_star.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!(
            "clean {:?} vs noise {:?}",
            x_star.shape(),
            eps.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange(format!("time {t} outside [0, 1]")));
    }
    let a = T::from_f64(1.0 - t);
    let s = T::from_f64(t);
    let mut z = x_star.clone();
    ndarray::Zip::from(&mut z).and(eps).for_each(|zv, &ev| *zv = a * *zv + s * ev);
    let v = eps - x_star;
    Ok((z, v))
}

/// Mean squared error of a predicted velocity against a fixed target.
pub fn velocity_loss<T: Scalar>(tape: &Tape<T>, pred: Var, v_target: &ArrayD<T>) -> Var {
    let tv = tape.constant(v_target.clone());
    tape.mse(pred, tv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Classifier-free guidance strength; 1 disables guidance entirely.
    pub cfg_scale: f64,
    /// Times at which guidance applies, as a closed subinterval of [0, 1].
    pub interval: [f64; 2],
    pub steps: usize,
    pub method: OdeMethod,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            cfg_scale: 1.65,
            interval: [0.0, 0.7],
            steps: 50,
            method: OdeMethod::Euler,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.interval;
        if !(self.cfg_scale >= 1.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Config(format!("cfg_scale must be >= 1, got {}", self.cfg_scale)));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("guidance interval [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether a solver step whose time bucket is `[t_next, t_cur]` receives
/// guidance: the bucket must intersect the closed interval.
pub fn step_is_guided(bucket: (f64, f64), interval: [f64; 2]) -> bool {
    let (t_next, t_cur) = bucket;
    t_next <= interval[1] && t_cur >= interval[0]
}

/// Integrate `dz/dt = f(z, t)` from t = 1 down to t = 0 on a uniform grid.
/// The closure also receives the step's bucket `(t_next, t_cur)` so callers
/// can hold per-step decisions fixed across a Heun step's two evaluations.
pub fn integrate<T, F>(mut z: Array4<T>, steps: usize, method: OdeMethod, mut f: F) -> Result<Array4<T>>
where
    T: Scalar,
    F: FnMut(&Array4<T>, f64, (f64, f64)) -> Result<Array4<T>>,
{
    if steps == 0 {
        return Err(Error::Config("steps must be >= 1".into()));
    }
    for k in 0..steps {
        let t_cur = 1.0 - k as f64 / steps as f64;
        let t_next = 1.0 - (k + 1) as f64 / steps as f64;
        let bucket = (t_next, t_cur);
        let h = T::from_f64(t_next - t_cur);
        let v1 = f(&z, t_cur, bucket)?;
        match method {
            OdeMethod::Euler => {
                ndarray::Zip::from(&mut z).and(&v1).for_each(|zv, &v| *zv = *zv + h * v);
            }
            OdeMethod::Heun => {
                let mut z_pred = z.clone();
                ndarray::Zip::from(&mut z_pred).and(&v1).for_each(|zv, &v| *zv = *zv + h * v);
                let v2 = f(&z_pred, t_next, bucket)?;
                let half = T::from_f64(0.5);
                ndarray::Zip::from(&mut z)
                    .and(&v1)
                    .and(&v2)
                    .for_each(|zv, &a, &b| *zv = *zv + h * half * (a + b));
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "state diverged in step {k} (bucket [{t_next:.4}, {t_cur:.4}])"
            )));
        }
    }
    Ok(z)
}

/// Draw initial noise and integrate the model's velocity field down to t = 0.
/// Guidance mixes conditional and unconditional predictions inside the
/// configured interval; `cfg_scale = 1` never computes the unconditional pass
/// and is therefore bit-identical to plain conditional sampling.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    set: &ParamSet<T>,
    labels: &[Option<usize>],
    cfg: &GuidanceConfig,
    rng: &mut SeededRng,
) -> Result<Array4<T>> {
    cfg.validate()?;
    let mc = model.config();
    let b = labels.len();
    if b == 0 {
        return Err(Error::Config("sample needs at least one label".into()));
    }
    let mut z0 = ArrayD::<T>::zeros(ndarray::IxDyn(&[
        b,
        mc.input_channels,
        mc.input_size,
        mc.input_size,
    ]));
    rng.fill_normal(&mut z0, 1.0);
    let z0 = z0.into_dimensionality::<ndarray::Ix4>().unwrap();
    let null_labels: Vec<Option<usize>> = vec![None; b];

    let eval = |z: &Array4<T>, t: f64, labels: &[Option<usize>]| -> Result<Array4<T>> {
        let tape = Tape::<T>::new_inference();
        let vars = bind_all(&tape, set);
        let times = vec![t; z.shape()[0]];
        let out = model.forward(&tape, &vars, z, &times, labels)?;
        Ok(tape
            .value(out.velocity)
            .as_ref()
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap())
    };

    integrate(z0, cfg.steps, cfg.method, |z, t, bucket| {
        let v_cond = eval(z, t, labels)?;
        if cfg.cfg_scale == 1.0 || !step_is_guided(bucket, cfg.interval) {
            return Ok(v_cond);
        }
        let v_uncond = eval(z, t, &null_labels)?;
        let s = T::from_f64(cfg.cfg_scale);
        let mut v = v_uncond;
        ndarray::Zip::from(&mut v).and(&v_cond).for_each(|u, &c| *u = *u + s * (c - *u));
        Ok(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::IxDyn;

    fn randn(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        rng.fill_normal(&mut a, 1.0);
        a
    }

    #[test]
    fn make_pair_boundaries_and_reconstruction() {
        let mut rng = SeededRng::new(50, 0);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let e = randn(&mut rng, &[2, 3, 4, 4]);

        let (z0, v0) = make_pair(&x, &e, 0.0).unwrap();
        assert_eq!(z0, x);
        let (z1, _) = make_pair(&x, &e, 1.0).unwrap();
        assert_eq!(z1, e);
        assert_eq!(v0, &e - &x);

        // x* = 0 collapses to z = t * eps, v = eps.
        let zero = ArrayD::<f64>::zeros(x.raw_dim());
        let (z, v) = make_pair(&zero, &e, 0.3).unwrap();
        assert_eq!(v, e);
        let max = z
            .iter()
            .zip(e.iter())
            .map(|(a, b)| (a - 0.3 * b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-15);

        // Reconstruction identity x* = z_t - t * v_target at several times.
        for t in [0.1, 0.45, 0.999] {
            let (z, v) = make_pair(&x, &e, t).unwrap();
            let max = z
                .iter()
                .zip(v.iter())
                .zip(x.iter())
                .map(|((zv, vv), xv)| (zv - t * vv - xv).abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-12, "t={t}: {max}");
        }

        assert!(make_pair(&x, &randn(&mut rng, &[1, 3, 4, 4]), 0.5).is_err());
        assert!(make_pair(&x, &e, 1.5).is_err());
    }

    #[test]
    fn velocity_loss_values() {
        let mut rng = SeededRng::new(51, 0);
        let target = randn(&mut rng, &[2, 3, 4, 4]);

        let tape = Tape::<f64>::new();
        let same = tape.constant(target.clone());
        assert_eq!(tape.scalar(velocity_loss(&tape, same, &target)), 0.0);

        let offset = tape.constant(&target + 0.5);
        let got = tape.scalar(velocity_loss(&tape, offset, &target));
        assert!((got - 0.25).abs() < 1e-12);

        // Elementwise oracle on random pairs.
        let pred = randn(&mut rng, &[2, 3, 4, 4]);
        let pv = tape.constant(pred.clone());
        let got = tape.scalar(velocity_loss(&tape, pv, &target));
        let want = pred
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / pred.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn euler_matches_closed_form_geometric_decay() {
        // v(z, t) = z integrated from 1 to 0 multiplies by (1 - dt) each step.
        let steps = 17;
        let z0 = Array4::<f64>::from_elem((1, 1, 2, 2), 3.0);
        let got = integrate(z0.clone(), steps, OdeMethod::Euler, |z, _, _| Ok(z.clone())).unwrap();
        let factor = (1.0 - 1.0 / steps as f64).powi(steps as i32);
        for (g, z) in got.iter().zip(z0.iter()) {
            assert!((g - z * factor).abs() < 1e-12);
        }
    }

    #[test]
    fn solver_orders_on_linear_field() {
        // dz/dt = -z from t=1 to t=0 has exact solution z(0) = e * z(1).
        let want = std::f64::consts::E * 2.0;
        let err = |steps: usize, method: OdeMethod| {
            let z0 = Array4::<f64>::from_elem((1, 1, 1, 1), 2.0);
            let z =
                integrate(z0, steps, method, |z, _, _| Ok(z.mapv(|v| -v))).unwrap();
            (z[[0, 0, 0, 0]] - want).abs()
        };
        let order = |method: OdeMethod| {
            let (e1, e2) = (err(40, method), err(80, method));
            (e1 / e2).log2()
        };
        let eo = order(OdeMethod::Euler);
        let ho = order(OdeMethod::Heun);
        assert!(eo >= 0.9, "Euler order {eo}");
        assert!(ho >= 1.8, "Heun order {ho}");
    }

    #[test]
    fn non_finite_state_aborts() {
        let z0 = Array4::<f64>::from_elem((1, 1, 1, 1), 1.0);
        let res = integrate(z0, 4, OdeMethod::Euler, |z, _, _| Ok(z.mapv(|_| f64::NAN)));
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn guidance_bucket_semantics() {
        // 4 steps: buckets [0.75,1], [0.5,0.75], [0.25,0.5], [0,0.25].
        let buckets = [(0.75, 1.0), (0.5, 0.75), (0.25, 0.5), (0.0, 0.25)];
        // Degenerate interval [0,0] touches only the final bucket.
        let hits: Vec<bool> = buckets.iter().map(|&b| step_is_guided(b, [0.0, 0.0])).collect();
        assert_eq!(hits, [false, false, false, true]);
        // Default interval [0, 0.7] covers every bucket that dips below 0.7.
        let hits: Vec<bool> = buckets.iter().map(|&b| step_is_guided(b, [0.0, 0.7])).collect();
        assert_eq!(hits, [false, true, true, true]);
        // Interval at the noise end only.
        let hits: Vec<bool> = buckets.iter().map(|&b| step_is_guided(b, [0.9, 1.0])).collect();
        assert_eq!(hits, [true, false, false, false]);
    }

    #[test]
    fn guidance_config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { cfg_scale: 0.5, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { interval: [0.8, 0.2], ..Default::default() }
            .validate()
            .is_err());
        assert!(GuidanceConfig { interval: [0.0, 1.2], ..Default::default() }
            .validate()
            .is_err());
        assert!(GuidanceConfig { steps: 0, ..Default::default() }.validate().is_err());
    }

    fn tiny_model() -> (Model<f64>, ParamSet<f64>) {
        let cfg = ModelConfig {
            input_size: 8,
            input_channels: 2,
            patch_size: 2,
            channels: 16,
            heads: 2,
            blocks_per_stage: [1, 1, 1],
            num_classes: 3,
            ..ModelConfig::default()
        };
        let mut rng = SeededRng::new(52, 0);
        let (model, mut set) = Model::<f64>::new(cfg, &mut rng).unwrap();
        // Wake the conditioning path up so guidance actually changes output.
        for i in 0..set.len() {
            if set.name(i).contains(".adaln") || set.name(i).starts_with("final.") {
                let shape = set.value_at(i).shape().to_vec();
                let mut a = ArrayD::zeros(IxDyn(&shape));
                rng.fill_normal(&mut a, 0.4);
                set.set_value_at(i, a).unwrap();
            }
        }
        (model, set)
    }

    #[test]
    fn sampling_is_deterministic_and_cfg_one_short_circuits() {
        let (model, set) = tiny_model();
        let labels = [Some(0), Some(2)];
        let cfg1 = GuidanceConfig { cfg_scale: 1.0, steps: 3, ..Default::default() };

        let mut rng_a = SeededRng::new(53, 4);
        let a = sample(&model, &set, &labels, &cfg1, &mut rng_a).unwrap();
        let mut rng_b = SeededRng::new(53, 4);
        let b = sample(&model, &set, &labels, &cfg1, &mut rng_b).unwrap();
        assert_eq!(a, b, "same seed, same bits");

        // Manual conditional-only Euler loop as the unguided reference.
        let mut rng_c = SeededRng::new(53, 4);
        let mut z = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 8, 8]));
        rng_c.fill_normal(&mut z, 1.0);
        let mut z = z.into_dimensionality::<ndarray::Ix4>().unwrap();
        let steps = 3;
        for k in 0..steps {
            let t_cur = 1.0 - k as f64 / steps as f64;
            let t_next = 1.0 - (k + 1) as f64 / steps as f64;
            let tape = Tape::<f64>::new_inference();
            let vars = bind_all(&tape, &set);
            let out = model.forward(&tape, &vars, &z, &[t_cur, t_cur], &labels).unwrap();
            let v = tape.value(out.velocity);
            let h = t_next - t_cur;
            ndarray::Zip::from(&mut z)
                .and(&v.view().into_dimensionality::<ndarray::Ix4>().unwrap())
                .for_each(|zv, &vv| *zv += h * vv);
        }
        assert_eq!(a, z, "cfg_scale = 1 must equal plain conditional sampling");

        // Guidance with cfg > 1 changes the output.
        let mut rng_d = SeededRng::new(53, 4);
        let cfg_g = GuidanceConfig { cfg_scale: 2.0, steps: 3, ..Default::default() };
        let g = sample(&model, &set, &labels, &cfg_g, &mut rng_d).unwrap();
        assert_ne!(a, g);
    }

    #[test]
    fn heun_sampling_runs_and_differs_from_euler() {
        let (model, set) = tiny_model();
        let labels = [Some(1)];
        let mk = |method| GuidanceConfig { cfg_scale: 1.0, steps: 4, method, ..Default::default() };
        let mut rng_a = SeededRng::new(54, 4);
        let e = sample(&model, &set, &labels, &mk(OdeMethod::Euler), &mut rng_a).unwrap();
        let mut rng_b = SeededRng::new(54, 4);
        let h = sample(&model, &set, &labels, &mk(OdeMethod::Heun), &mut rng_b).unwrap();
        assert_eq!(e.shape(), &[1, 2, 8, 8]);
        assert_ne!(e, h);
    }
}

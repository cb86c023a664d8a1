//! Command implementations. Each returns `Result<()>`; `main` maps errors to
//! exit codes (1 user/config, 2 internal verification).

use crate::config::RunConfig;
use ndarray::Array4;
use std::fs;
use std::path::Path;
use urepa_core::data::ToyDataset;
use urepa_core::error::{Error, Result};
use urepa_core::flow;
use urepa_core::model::{depth_to_stage, Model};
use urepa_core::numerics::{streams, Scalar, SeededRng};
use urepa_core::params::ParamSet;
use urepa_core::teacher::{save_features, StubEncoder, TeacherProvider};
use urepa_core::trainer::{
    load_checkpoint, probe_depth, save_checkpoint, MetricsWriter, Trainer, TrainState,
};
use urepa_core::verify;

pub const CHECKPOINT_FILE: &str = "checkpoint.urck";
pub const SAMPLES_FILE: &str = "samples.ursm";
pub const FEATURES_FILE: &str = "features.urft";
pub const PROBE_FILE: &str = "probe_depth.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

const SAMPLES_MAGIC: [u8; 4] = *b"URSM";
const SAMPLES_VERSION: u16 = 1;

/// Echo the resolved configuration to stdout and into the output directory;
/// a run must be reconstructible from its artifacts alone.
fn echo_config(config: &RunConfig) -> Result<String> {
    let echo = config.to_toml()?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join(CONFIG_ECHO_FILE), &echo)?;
    println!("# resolved configuration\n{echo}");
    Ok(echo)
}

/// Fresh model, projector, and teacher as the trainer expects them. The
/// projector is always built, even at lambda = 0, so the checkpoint layout
/// does not depend on the alignment settings.
fn build_parts<T: Scalar>(
    config: &RunConfig,
) -> Result<(
    Model<T>,
    ParamSet<T>,
    urepa_core::alignment::ProjectorLayout,
    ParamSet<T>,
    TeacherProvider<T>,
)> {
    let mut rng = SeededRng::new(config.seed, streams::MODEL_INIT);
    let (model, model_set) = Model::<T>::new(config.model, &mut rng)?;
    let teacher = config.teacher.build::<T>()?;
    let teacher_dim = match &teacher {
        TeacherProvider::Stub(enc) => enc.config().channels,
        TeacherProvider::File(store) => store.dim(),
    };
    let tap = depth_to_stage(&config.model, config.model.resolved_tap())?;
    let r = config.model.grid_size() / tap.height;
    let mut prng = SeededRng::new(config.seed, streams::PROJECTOR_INIT);
    let (proj, proj_set) = urepa_core::alignment::ProjectorLayout::build::<T>(
        config.model.channels,
        teacher_dim,
        r,
        config.alignment.placement,
        config.alignment.time_aware,
        &mut prng,
    )?;
    Ok((model, model_set, proj, proj_set, teacher))
}

pub fn train<T: Scalar>(config: &RunConfig) -> Result<()> {
    let echo = echo_config(config)?;
    let dataset = ToyDataset::<T>::new(config.dataset)?;
    let (model, model_set, proj, proj_set, teacher) = build_parts::<T>(config)?;
    let mut trainer = Trainer::new(
        model,
        model_set,
        Some((proj, proj_set)),
        Some(teacher),
        dataset,
        config.alignment,
        config.trainer,
        config.seed,
    )?;
    let mut writer = MetricsWriter::create(&config.out_dir)?;
    let ckpt_path = config.out_dir.join(CHECKPOINT_FILE);
    let report_every = (config.iters / 10).max(1);
    for i in 1..=config.iters {
        let m = trainer.step()?;
        writer.append(&m)?;
        if i % report_every == 0 || i == config.iters {
            println!(
                "iter {:>6}  velocity {:.6}  repa {:.6}  manifold {:.6}  sim {:.4}",
                m.iter, m.velocity_loss, m.repa_loss, m.manifold_loss, m.mean_sim
            );
        }
        if config.checkpoint_every > 0 && i % config.checkpoint_every == 0 {
            writer.flush()?;
            save_checkpoint(&ckpt_path, &echo, trainer.state())?;
        }
    }
    writer.flush()?;
    save_checkpoint(&ckpt_path, &echo, trainer.state())?;
    let skipped = trainer.state().skipped;
    if skipped > 0 {
        println!("warning: {skipped} steps skipped on non-finite gradients");
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

/// Rebuild the model for a checkpoint and select its weights: EMA shadows
/// (the evaluation weights) or the raw parameters.
fn model_from_state<T: Scalar>(
    config: &RunConfig,
    state: &TrainState<T>,
    use_ema: bool,
) -> Result<(Model<T>, ParamSet<T>)> {
    let mut rng = SeededRng::new(config.seed, streams::MODEL_INIT);
    let (model, fresh) = Model::<T>::new(config.model, &mut rng)?;
    if state.proj_offset != fresh.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} model tensors, config builds {}",
            state.proj_offset,
            fresh.len()
        )));
    }
    let mut parts = Vec::with_capacity(fresh.len());
    for i in 0..fresh.len() {
        if fresh.name(i) != state.params.name(i)
            || fresh.value_at(i).shape() != state.params.value_at(i).shape()
        {
            return Err(Error::Format(format!(
                "checkpoint tensor {} is {} {:?}, config expects {} {:?}",
                i,
                state.params.name(i),
                state.params.value_at(i).shape(),
                fresh.name(i),
                fresh.value_at(i).shape()
            )));
        }
        let value = if use_ema {
            state.ema[i].clone()
        } else {
            state.params.value_at(i).clone()
        };
        parts.push((state.params.name(i).to_string(), value));
    }
    Ok((model, ParamSet::from_parts(parts)))
}

fn write_samples<T: Scalar>(path: &Path, labels: &[usize], samples: &Array4<T>) -> Result<()> {
    let (b, c, h, w) = samples.dim();
    let mut buf = Vec::with_capacity(4 + 2 + 16 + 4 * b + 8 * samples.len());
    buf.extend_from_slice(&SAMPLES_MAGIC);
    buf.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    for dim in [b, c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &l in labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in samples.iter() {
        buf.extend_from_slice(&Scalar::to_f64(v).to_le_bytes());
    }
    fs::write(path, &buf)?;
    Ok(())
}

pub fn sample<T: Scalar>(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    echo_config(config)?;
    let (_, state) = load_checkpoint::<T>(checkpoint)?;
    let (model, ema_set) = model_from_state(config, &state, true)?;
    let labels: Vec<Option<usize>> = config.sample_labels.iter().map(|&l| Some(l)).collect();
    let mut rng = SeededRng::new(config.seed, streams::SAMPLER);
    let samples = flow::sample(&model, &ema_set, &labels, &config.guidance, &mut rng)?;
    let path = config.out_dir.join(SAMPLES_FILE);
    write_samples(&path, &config.sample_labels, &samples)?;
    println!(
        "sampled {} images ({} steps, cfg {}, interval [{}, {}]) to {}",
        config.sample_labels.len(),
        config.guidance.steps,
        config.guidance.cfg_scale,
        config.guidance.interval[0],
        config.guidance.interval[1],
        path.display()
    );
    Ok(())
}

pub fn probe<T: Scalar>(
    config: &RunConfig,
    checkpoint: &Path,
    depths: &[usize],
) -> Result<()> {
    echo_config(config)?;
    let (_, state) = load_checkpoint::<T>(checkpoint)?;
    let (model, ema_set) = model_from_state(config, &state, true)?;
    let teacher = config.teacher.build::<T>()?;
    let dataset = ToyDataset::<T>::new(config.dataset)?;
    let mut rows = String::from("depth,stage,height,width,channels,mean_sim\n");
    for &depth in depths {
        let report = probe_depth(
            model.config(),
            model.layout(),
            &ema_set,
            &teacher,
            config.trainer.standardize_features,
            &dataset,
            &config.alignment,
            depth,
            config.probe_fit_iters,
            config.trainer.batch_size,
            config.seed,
        )?;
        let line = format!(
            "{},{},{},{},{},{}",
            report.depth, report.stage, report.height, report.width, report.channels,
            report.mean_sim
        );
        println!("{line}");
        rows.push_str(&line);
        rows.push('\n');
    }
    let path = config.out_dir.join(PROBE_FILE);
    fs::write(&path, rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn export_features(config: &RunConfig) -> Result<()> {
    echo_config(config)?;
    // URFT stores f32; the export always runs the stub encoder, regardless
    // of the configured provider, and writes raw (unstandardized) features.
    let dataset = ToyDataset::<f32>::new(config.dataset)?;
    let encoder = StubEncoder::<f32>::new(config.teacher.stub)?;
    let chunk = config.trainer.batch_size.max(1);
    let mut features = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for block in indices.chunks(chunk) {
        let (batch, _) = dataset.batch(block)?;
        let feats = encoder.encode(&batch)?;
        for bi in 0..block.len() {
            features.push(feats.index_axis(ndarray::Axis(0), bi).to_owned());
        }
    }
    let path = config.out_dir.join(FEATURES_FILE);
    save_features(&path, &features)?;
    println!(
        "encoded {} samples ({} tokens x {} dims) to {}",
        features.len(),
        encoder.tokens_for(config.dataset.input_size),
        config.teacher.stub.channels,
        path.display()
    );
    Ok(())
}

pub fn gradcheck(out: Option<&Path>) -> Result<()> {
    let seeds = verify::default_seeds();
    println!(
        "# gradient checks: eps {:e}, tolerance {:e}, {} seeds",
        verify::DEFAULT_FD_EPS,
        verify::DEFAULT_FD_TOL,
        seeds.len()
    );
    let summary = verify::run_all(&seeds, verify::DEFAULT_FD_EPS, verify::DEFAULT_FD_TOL);
    let text = verify::format_summary(&summary);
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("gradcheck.txt"), &text)?;
    }
    if summary.all_passed() {
        Ok(())
    } else {
        Err(Error::Verification("gradient checks failed".into()))
    }
}

/// Parse `--depths 4,8,12`; an empty selection means every depth.
pub fn parse_depths(flag: Option<&str>, total_blocks: usize) -> Result<Vec<usize>> {
    match flag {
        None => Ok((1..=total_blocks).collect()),
        Some(text) => {
            let mut out = Vec::new();
            for part in text.split(',') {
                let d: usize = part.trim().parse().map_err(|_| {
                    Error::Config(format!("bad depth {part:?} in --depths"))
                })?;
                out.push(d);
            }
            if out.is_empty() {
                return Err(Error::Config("--depths needs at least one depth".into()));
            }
            Ok(out)
        }
    }
}

/// Parse `--interval LO,HI`.
pub fn parse_interval(text: &str) -> Result<[f64; 2]> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("--interval wants LO,HI, got {text:?}")));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| {
        Error::Config(format!("bad interval bound {:?}", parts[0]))
    })?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| {
        Error::Config(format!("bad interval bound {:?}", parts[1]))
    })?;
    Ok([lo, hi])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_flag_parses_and_defaults() {
        assert_eq!(parse_depths(None, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_depths(Some("4, 8,12"), 36).unwrap(), vec![4, 8, 12]);
        assert!(parse_depths(Some("4,x"), 36).is_err());
        assert!(parse_depths(Some(""), 36).is_err());
    }

    #[test]
    fn interval_flag_parses() {
        assert_eq!(parse_interval("0,0.7").unwrap(), [0.0, 0.7]);
        assert_eq!(parse_interval(" 0.2 , 0.5 ").unwrap(), [0.2, 0.5]);
        assert!(parse_interval("0.7").is_err());
        assert!(parse_interval("a,b").is_err());
    }
}

//! The command drivers behind the CLI, callable as a library.

use std::path::{Path, PathBuf};

use transporter_core::gradcheck::{self, CheckConfig, CheckRow};
use transporter_core::manip::{self, LearnedKeypoints, OracleKeypoints};
use transporter_core::metrics::{evaluate, ModelDetector};
use transporter_core::synth::{generate_dataset, ArticulatedScene};
use transporter_core::train::{StepRecord, Trainer};
use transporter_core::Error as CoreError;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, create_dir, write_json, DatasetSummary};
use crate::error::{Error, Result};
use crate::ply;
use crate::report::{EvalReport, LossCsv, ManipReport};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

/// Generates `scenes` scenes into `out`.
pub fn gen_data(cfg: &RunConfig, out: &Path, scenes: usize, seed: u64) -> Result<DatasetSummary> {
    if scenes == 0 {
        return Err(Error::Usage("--scenes must be at least 1".into()));
    }
    let data = generate_dataset(&cfg.data, scenes, seed)?;
    dataset::write_dataset(out, &data, scenes, seed, cfg.echo())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: usize,
    pub checkpoint: PathBuf,
    pub periodic: Vec<PathBuf>,
    pub last: Option<StepRecord>,
}

pub fn periodic_checkpoint(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Trains on the dataset at `data_dir`. `on_step` sees every record.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let data = dataset::read_dataset(data_dir)?;
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), &cfg.echo())?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train, &cfg.data).map_err(|e| match e {
        CoreError::Invalid(m) => Error::Usage(format!("config: {m}")),
        other => other.into(),
    })?;
    let mut csv = LossCsv::create(&out.join(LOSS_FILE))?;
    let every = cfg.train.checkpoint_every;
    if every > 0 {
        create_dir(&out.join("checkpoints"))?;
    }
    let mut periodic = Vec::new();
    let mut last = None;
    let mut failure: Option<Error> = None;
    trainer.run(&data, |rec, t| {
        let done = rec.step + 1;
        let mut io = || -> Result<()> {
            csv.push(rec)?;
            if every > 0 && done % every == 0 {
                let path = periodic_checkpoint(out, done);
                checkpoint::save(&path, &t.params, done, cfg.echo())?;
                periodic.push(path);
            }
            Ok(())
        };
        if let Err(e) = io() {
            failure = Some(e);
            return false;
        }
        on_step(rec);
        last = Some(rec.clone());
        true
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&path, &trainer.params, trainer.steps(), cfg.echo())?;
    Ok(TrainOutcome {
        steps: trainer.steps(),
        checkpoint: path,
        periodic,
        last,
    })
}

/// Scores a checkpoint on a dataset and writes the report and keypoint
/// dumps. The model section of `cfg` must match the checkpoint.
pub fn eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    data_dir: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let ckpt = checkpoint::load_params(checkpoint_path)?;
    if ckpt.params.config != cfg.model {
        return Err(CoreError::ConfigMismatch(format!(
            "checkpoint model {:?} differs from requested model {:?}",
            ckpt.params.config, cfg.model
        ))
        .into());
    }
    let data = dataset::read_dataset(data_dir)?;
    let perception = evaluate(&ModelDetector(&ckpt.params), &data, cfg.eval.tau)?;
    create_dir(out)?;
    if cfg.eval.dump_keypoints {
        let dir = out.join("keypoints");
        create_dir(&dir)?;
        for (i, p) in perception.per_pair.iter().enumerate() {
            ply::write(
                &dir.join(format!("pair_{i:04}_a.ply")),
                &p.keypoints_a,
                None,
            )?;
            ply::write(
                &dir.join(format!("pair_{i:04}_b.ply")),
                &p.keypoints_b,
                None,
            )?;
        }
    }
    let report = EvalReport {
        checkpoint: checkpoint_path.display().to_string(),
        tau: perception.tau,
        per_pair: perception.per_pair,
        aggregate: perception.aggregate,
        config_echo: cfg.echo(),
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub enum ManipSource<'a> {
    Oracle,
    Checkpoint(&'a Path),
}

/// Runs seeded episodes and writes one log per episode plus the aggregate.
pub fn manip(
    cfg: &RunConfig,
    source: ManipSource,
    episodes: usize,
    out: &Path,
) -> Result<ManipReport> {
    if episodes == 0 {
        return Err(Error::Usage("--episodes must be at least 1".into()));
    }
    let scene =
        ArticulatedScene::named(&cfg.manip.scene).map_err(|e| Error::Usage(e.to_string()))?;
    let (results, label) = match source {
        ManipSource::Oracle => (
            manip::run_episodes(
                &OracleKeypoints,
                &scene,
                episodes,
                &cfg.manip.policy,
                cfg.manip.seed,
            )?,
            "oracle".to_string(),
        ),
        ManipSource::Checkpoint(path) => {
            let ckpt = checkpoint::load_params(path)?;
            let r = manip::run_episodes(
                &LearnedKeypoints(&ckpt.params),
                &scene,
                episodes,
                &cfg.manip.policy,
                cfg.manip.seed,
            )?;
            (r, path.display().to_string())
        }
    };
    let dir = out.join("episodes");
    create_dir(&dir)?;
    let mut logs = Vec::with_capacity(results.len());
    for (i, r) in results.iter().enumerate() {
        let rel = format!("episodes/episode_{i:03}.json");
        write_json(&out.join(&rel), r)?;
        logs.push(rel);
    }
    let report = ManipReport {
        scene: scene.name.clone(),
        source: label,
        seed: cfg.manip.seed,
        aggregate: manip::manipulation_metrics(&results)?,
        episodes: logs,
        config_echo: cfg.echo(),
    };
    write_json(&out.join(AGGREGATE_FILE), &report)?;
    Ok(report)
}

/// Finite-difference suite. Only the `micro` scale exists.
pub fn grad_check(scale: &str, corrupt: Option<&str>, seed: u64) -> Result<Vec<CheckRow>> {
    if scale != "micro" {
        return Err(Error::Usage(format!(
            "unknown grad-check scale `{scale}` (expected `micro`)"
        )));
    }
    let cfg = CheckConfig {
        seed,
        ..CheckConfig::default()
    };
    gradcheck::run_suite(&cfg, corrupt).map_err(|e| match e {
        CoreError::Invalid(m) => Error::Usage(m),
        other => other.into(),
    })
}

//! The five experiment commands.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use cmim_core::data::{load_idx, Dataset};
use cmim_core::eval::write_records;
use cmim_core::experiments::{
    build_report, collect_records, evaluate_bundle, run_train, sweep, toy2d, RunKey, SweepPlan,
};
use cmim_core::models::Checkpoint;
use cmim_core::ErrorKind;

use crate::config::{ConfigError, Experiment, ExperimentConfig, Split};

#[derive(Debug)]
pub enum CliError {
    Contract(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Contract(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<cmim_core::Error> for CliError {
    fn from(e: cmim_core::Error) -> Self {
        match e.kind() {
            ErrorKind::Contract => CliError::Contract(e.to_string()),
            ErrorKind::Io => CliError::Io(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(_) => CliError::Contract(e.to_string()),
            ConfigError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn execute(cfg: &ExperimentConfig, raw_config: Option<&str>) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    if let Some(raw) = raw_config {
        fs::write(cfg.out.join("config.toml"), raw)?;
    }
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Contract(format!("serializing config: {e}")))?;
    fs::write(cfg.out.join("resolved.toml"), resolved)?;
    match cfg.experiment {
        Experiment::Toy2d => cmd_toy2d(cfg),
        Experiment::Train => cmd_train(cfg),
        Experiment::Sweep => cmd_sweep(cfg),
        Experiment::Evaluate => cmd_evaluate(cfg),
        Experiment::Report => cmd_report(cfg),
    }
}

fn load(split: &Split, name: &str, which: &str) -> Result<Dataset, CliError> {
    let mut ds = load_idx(&split.images, &split.labels)?;
    ds.name = name.to_string();
    ds.split = which.to_string();
    log::info!("loaded {} {which} images from {}", ds.len(), split.images.display());
    Ok(ds)
}

fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let name = &cfg.train.dataset;
    let train = load(cfg.train_split.as_ref().expect("resolved"), name, "train")?;
    let test = cfg.test_split.as_ref().map(|s| load(s, name, "test")).transpose()?;
    Ok((train, test))
}

fn cmd_toy2d(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let toy = cfg.toy.as_ref().expect("resolved");
    let snaps = toy2d(toy)?;
    let mut stats = String::from("step\tloss\tangle_ks\tradius_variance\tradius_max\n");
    let mut angles = String::from("step\tbin\tcount\n");
    let mut radii = String::from("step\tbin\tcount\n");
    for s in &snaps {
        let st = &s.stats;
        let _ = writeln!(stats, "{}\t{}\t{}\t{}\t{}", s.step, s.loss, st.angle_ks, st.radius_variance, st.radius_max);
        for (b, c) in st.angle_hist.iter().enumerate() {
            let _ = writeln!(angles, "{}\t{b}\t{c}", s.step);
        }
        for (b, c) in st.radius_hist.iter().enumerate() {
            let _ = writeln!(radii, "{}\t{b}\t{c}", s.step);
        }
        if let Some(p) = &s.points {
            let mut body = String::from("x\ty\n");
            for xy in p.data().chunks(2) {
                let _ = writeln!(body, "{}\t{}", xy[0], xy[1]);
            }
            fs::write(cfg.out.join(format!("points_step{}.tsv", s.step)), body)?;
        }
        log::info!("step {}: angle KS {:.4}, radius variance {:.4}", s.step, st.angle_ks, st.radius_variance);
    }
    fs::write(cfg.out.join("toy2d_stats.tsv"), stats)?;
    fs::write(cfg.out.join("angle_hist.tsv"), angles)?;
    fs::write(cfg.out.join("radius_hist.tsv"), radii)?;
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train, _) = datasets(cfg)?;
    let outcome = run_train(&cfg.train, &train, Some(&cfg.out))?;
    log::info!(
        "kept step {} (validation loss {:?}); wrote {}",
        outcome.bundle.step,
        outcome.bundle.val_loss,
        cfg.out.join("checkpoint.cmim").display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train, test) = datasets(cfg)?;
    let plan = SweepPlan {
        base: cfg.train.clone(),
        objectives: cfg.objectives.clone(),
        batch_sizes: cfg.batch_sizes.clone(),
        seeds: cfg.seeds.clone(),
        eval: cfg.eval.clone(),
    };
    let records = sweep(&plan, &train, test.as_ref().expect("resolved"), &cfg.out, cfg.jobs)?;
    log::info!("{} records from {} runs", records.len(), plan.keys().len());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train, test) = datasets(cfg)?;
    let test = test.expect("resolved");
    let path = cfg.checkpoint.as_ref().expect("resolved");
    let key = |objective, seed| RunKey { objective, batch_size: cfg.train.batch_size, seed };
    let records = match Checkpoint::load(path)? {
        Checkpoint::F32(b) => evaluate_bundle(&b, &key(b.objective, b.seed), &train, &test, &cfg.eval)?,
        Checkpoint::F64(b) => evaluate_bundle(&b, &key(b.objective, b.seed), &train, &test, &cfg.eval)?,
    };
    for r in &records {
        log::info!("{} {} {}: {:.4}", r.model, r.probe, r.embedding, r.value);
    }
    write_records(cfg.out.join("records.csv"), &records)?;
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir: &Path = cfg.records.as_ref().expect("resolved");
    let records = collect_records(dir)?;
    if records.is_empty() {
        return Err(CliError::Contract(format!("no records.csv found below {}", dir.display())));
    }
    let report = build_report(&records)?;
    for p in report.write(&cfg.out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

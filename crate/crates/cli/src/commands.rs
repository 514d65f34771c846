//! Subcommand implementations. Each stage derives its own seed from the root
//! seed, reads inputs untouched, writes artifacts only under `--out`, and
//! drops a run manifest beside them.

use std::path::{Path, PathBuf};

use teledrive_core::cvae::{load_model, save_model, CvaeModel, ModelMeta, Role};
use teledrive_core::drivers::ScriptedDriver;
use teledrive_core::eval::metrics::{compare_populations, write_reports};
use teledrive_core::gradcheck::{layer_scenarios, model_scenarios};
use teledrive_core::pipeline::{
    build_dataset, rollout_population, train_forward, train_inverse, TrainOutcome,
};
use teledrive_core::preprocess::Dataset;
use teledrive_core::rng::mix;
use teledrive_core::sim::episode::{run_episode, Episode};
use teledrive_core::sim::terrain::{generate_terrain, Terrain};
use teledrive_core::{Error, Result};

use crate::config::AppConfig;
use crate::manifest::ManifestBuilder;

// Per-stage seed derivation tags under the root seed.
const STAGE_TERRAIN: u64 = 1;
const STAGE_COLLECT: u64 = 2;
const STAGE_TRAIN_FORWARD: u64 = 3;
const STAGE_TRAIN_INVERSE: u64 = 4;
const STAGE_ROLLOUT: u64 = 5;
const STAGE_GRADCHECK: u64 = 6;

// Artifact format tags recorded in manifests. File readers check the
// magic embedded in each file; CSV readers check the pinned header row.
const TERRAIN_FORMAT: &str = "TDGTERR1";
const LOG_FORMAT: &str = "TDGLOG1";
const DATASET_FORMAT: &str = "TDGDATA1";
const CHECKPOINT_FORMAT: &str = "TDGCKPT1";
const META_FORMAT: &str = "TDGMETA1";
const CSV_FORMAT: &str = "csv/header-v1";

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

/// Missing input files surface as a clear error naming the path instead of
/// a bare io error.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

/// Episode logs in a directory, in name order.
fn list_logs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "episode directory not found: {}",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "log"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no episode logs (*.log) in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn load_episodes(dir: &Path) -> Result<(Vec<PathBuf>, Vec<Episode>)> {
    let files = list_logs(dir)?;
    let episodes = files
        .iter()
        .map(|p| Episode::load(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((files, episodes))
}

/// Checkpoint path → its metadata path (same stem, `.meta.json`).
fn meta_path_for(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("meta.json")
}

fn load_role_model(ckpt: &Path, role: Role) -> Result<(CvaeModel, ModelMeta)> {
    require_file(ckpt, "model checkpoint")?;
    require_file(&meta_path_for(ckpt), "model metadata")?;
    let (model, meta) = load_model(ckpt, &meta_path_for(ckpt))?;
    meta.expect_role(role)?;
    Ok((model, meta))
}

pub fn gen_terrain(
    config: &AppConfig,
    config_hash: String,
    root: u64,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let seed = mix(root, STAGE_TERRAIN);
    let terrain = generate_terrain(seed, &config.terrain)?;
    terrain.save(&out.join("terrain.json"))?;
    println!(
        "terrain {}: {:.0} m, {} sections -> {}",
        terrain.id(),
        config.terrain.length,
        terrain.section_count(),
        out.join("terrain.json").display()
    );

    let mut m = ManifestBuilder::new("gen-terrain", config_hash, root);
    m.seed("terrain", seed);
    m.artifact("terrain.json", TERRAIN_FORMAT);
    m.write(out)
}

pub fn collect(
    config: &AppConfig,
    config_hash: String,
    root: u64,
    terrain_path: &Path,
    out: &Path,
) -> Result<()> {
    require_file(terrain_path, "terrain file")?;
    let terrain = Terrain::load(terrain_path)?;
    let episodes_dir = out.join("episodes");
    ensure_dir(&episodes_dir)?;

    let stage_seed = mix(root, STAGE_COLLECT);
    let mut m = ManifestBuilder::new("collect", config_hash, root);
    m.seed("collect", stage_seed);
    m.input(terrain_path)?;

    let profiles = config.collect.population.profiles();
    let mut run = 0u64;
    for profile in &profiles {
        for _ in 0..config.collect.runs_per_profile {
            let episode_seed = mix(stage_seed, run);
            let mut driver = ScriptedDriver::new(profile.clone());
            let episode = run_episode(&terrain, &mut driver, episode_seed, config.collect.tick_limit)?;
            let name = format!("ep-{run:03}.log");
            episode.save(&episodes_dir.join(&name))?;
            println!(
                "{name}: driver={} ticks={} completed={} collisions={}",
                episode.driver_id,
                episode.records.len(),
                episode.completed,
                episode.collision_count
            );
            m.artifact(&format!("episodes/{name}"), LOG_FORMAT);
            run += 1;
        }
    }
    m.write(out)
}

pub fn build_dataset_cmd(
    config_hash: String,
    root: u64,
    role: Role,
    episodes_dir: &Path,
    out: &Path,
) -> Result<()> {
    let (files, episodes) = load_episodes(episodes_dir)?;
    ensure_dir(out)?;
    let name = format!("{}.ds", role.name());
    let summary = build_dataset(&episodes, role, &out.join(&name))?;
    for note in &summary.skipped {
        println!("warning: skipped episode {note}");
    }
    println!(
        "{name}: {} windows from {} of {} episodes",
        summary.windows,
        summary.episodes_used,
        episodes.len()
    );

    let mut m = ManifestBuilder::new("build-dataset", config_hash, root);
    for f in &files {
        m.input(f)?;
    }
    m.artifact(&name, DATASET_FORMAT);
    m.write(out)
}

fn write_training_log(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    let mut text = String::from("epoch,lr,train_total,train_mse,train_kl,val_total,val_mse\n");
    for log in &outcome.logs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            log.epoch, log.lr, log.train_total, log.train_mse, log.train_kl, log.val_total,
            log.val_mse
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn train(
    config: &AppConfig,
    config_hash: String,
    root: u64,
    role: Role,
    dataset_path: &Path,
    forward_ckpt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require_file(dataset_path, "dataset file")?;
    let dataset = Dataset::load(dataset_path)?;
    ensure_dir(out)?;

    let (stage_name, stage_tag) = match role {
        Role::Forward => ("train-forward", STAGE_TRAIN_FORWARD),
        Role::Inverse => ("train-inverse", STAGE_TRAIN_INVERSE),
    };
    let mut training = config.training.clone();
    training.seed = mix(root, stage_tag);

    let mut m = ManifestBuilder::new(stage_name, config_hash, root);
    m.seed(stage_name, training.seed);
    m.input(dataset_path)?;

    let forward = match (role, forward_ckpt) {
        (Role::Inverse, Some(ckpt)) => {
            m.input(ckpt)?;
            m.input(&meta_path_for(ckpt))?;
            Some(load_role_model(ckpt, Role::Forward)?)
        }
        (Role::Forward, Some(_)) => {
            return Err(Error::Config(
                "--forward-model only applies to --role inverse".into(),
            ))
        }
        _ => None,
    };

    let outcome = match role {
        Role::Forward => train_forward(&dataset, &training)?,
        Role::Inverse => train_inverse(&dataset, forward.as_ref().map(|(f, _)| f), &training)?,
    };
    for log in &outcome.logs {
        println!(
            "epoch {}  lr {}  train {:.6}  val {:.6}",
            log.epoch, log.lr, log.train_total, log.val_total
        );
    }
    println!(
        "best validation {:.6} at epoch {}",
        outcome.meta.best_val_loss, outcome.best_epoch
    );

    let ckpt_name = format!("{}.ckpt", role.name());
    let meta_name = format!("{}.meta.json", role.name());
    save_model(
        &outcome.model,
        &outcome.meta,
        &out.join(&ckpt_name),
        &out.join(&meta_name),
    )?;
    write_training_log(&outcome, &out.join("training-log.csv"))?;

    m.artifact(&ckpt_name, CHECKPOINT_FORMAT);
    m.artifact(&meta_name, META_FORMAT);
    m.artifact("training-log.csv", CSV_FORMAT);
    m.write(out)
}

pub fn rollout_cmd(
    config: &AppConfig,
    config_hash: String,
    root: u64,
    model_ckpt: &Path,
    forward_ckpt: Option<&Path>,
    terrain_path: &Path,
    out: &Path,
) -> Result<()> {
    let (model, _) = load_role_model(model_ckpt, Role::Inverse)?;
    let forward = forward_ckpt
        .map(|p| load_role_model(p, Role::Forward))
        .transpose()?;
    require_file(terrain_path, "terrain file")?;
    let terrain = Terrain::load(terrain_path)?;
    let rollouts_dir = out.join("rollouts");
    ensure_dir(&rollouts_dir)?;

    let stage_seed = mix(root, STAGE_ROLLOUT);
    let mut m = ManifestBuilder::new("rollout", config_hash, root);
    m.seed("rollout", stage_seed);
    m.input(model_ckpt)?;
    m.input(&meta_path_for(model_ckpt))?;
    if let Some(p) = forward_ckpt {
        m.input(p)?;
        m.input(&meta_path_for(p))?;
    }
    m.input(terrain_path)?;

    let episodes = rollout_population(
        &model,
        forward.as_ref().map(|(f, _)| f),
        &terrain,
        stage_seed,
        &config.rollout,
    )?;
    for (i, episode) in episodes.iter().enumerate() {
        let name = format!("ep-{i:03}.log");
        episode.save(&rollouts_dir.join(&name))?;
        println!(
            "{name}: ticks={} completed={} collisions={}",
            episode.records.len(),
            episode.completed,
            episode.collision_count
        );
        m.artifact(&format!("rollouts/{name}"), LOG_FORMAT);
    }
    m.write(out)
}

pub fn evaluate(
    config_hash: String,
    root: u64,
    drivers_dir: &Path,
    model_dir: &Path,
    terrain_path: &Path,
    out: &Path,
) -> Result<()> {
    let (driver_files, drivers) = load_episodes(drivers_dir)?;
    let (model_files, model_runs) = load_episodes(model_dir)?;
    require_file(terrain_path, "terrain file")?;
    let terrain = Terrain::load(terrain_path)?;
    ensure_dir(out)?;

    let report = compare_populations(&drivers, &model_runs, &terrain)?;
    write_reports(&report, out)?;
    for row in &report.correlations {
        println!(
            "{}: slope {:.4} intercept {:.4} r {:.4}",
            row.metric, row.slope, row.intercept, row.r
        );
    }
    for row in &report.ttests {
        println!("{}: t {:.4} df {:.2} p {:.4}", row.metric, row.t, row.df, row.p);
    }

    let mut m = ManifestBuilder::new("evaluate", config_hash, root);
    for f in driver_files.iter().chain(&model_files) {
        m.input(f)?;
    }
    m.input(terrain_path)?;
    for name in ["sections.csv", "correlation.csv", "ttest.csv"] {
        m.artifact(name, CSV_FORMAT);
    }
    m.write(out)
}

pub fn gradcheck(config_hash: String, root: u64, out: Option<&Path>) -> Result<()> {
    let seed = mix(root, STAGE_GRADCHECK);
    let mut outcomes = layer_scenarios(seed)?;
    outcomes.extend(model_scenarios(seed)?);

    let mut lines = Vec::new();
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        if !o.passed() {
            failed += 1;
        }
        lines.push(format!(
            "{status} {}: max relative error {:.3e} over {} parameters",
            o.scenario, o.max_rel_err, o.parameter_count
        ));
    }
    for line in &lines {
        println!("{line}");
    }

    let mut m = ManifestBuilder::new("gradcheck", config_hash, root);
    m.seed("gradcheck", seed);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("gradcheck-report.txt"), lines.join("\n") + "\n")?;
        m.artifact("gradcheck-report.txt", "text/plain");
        m.write(dir)?;
    } else {
        m.print()?;
    }
    if failed > 0 {
        return Err(Error::NonFinite {
            context: format!("gradient check: {failed} scenario(s) failed"),
        });
    }
    Ok(())
}

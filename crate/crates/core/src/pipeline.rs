//! Three-step behavior pipeline: window datasets from episode logs, training
//! for the forward and inverse models, and closed-loop rollouts in which the
//! inverse model drives the simulator.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    standard_normal, CvaeConfig, CvaeMode, CvaeModel, ModelMeta, Role, WindowBatch,
};
use crate::drivers::{experienced_population, DriverProfile, ScriptedDriver};
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, TapeParams};
use crate::optim::{step_decay_lr, OptimizerState};
use crate::preprocess::{
    normalize_control, ConditionWindow, Dataset, DatasetWriter, CONTROL_DIM, PERCEPTION_DIM,
    STEP_DIM, WINDOW_LEN,
};
use crate::rng::{derive_rng, mix};
use crate::sim::episode::{run_episode, Driver, Episode, TimestepRecord};
use crate::sim::terrain::Terrain;
use crate::sim::vehicle::{RawControl, VehicleState};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Optimization settings plus the model dimensions they imply. Defaults are
/// the desk-scale profile sized for a single CPU core; the full-scale profile
/// raises epochs, batch and widths through the same fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_period: u64,
    pub decay_factor: f64,
    pub beta: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub linear_width: usize,
    pub hidden_size: usize,
    pub mode: CvaeMode,
    pub variance_scaled_noise: bool,
    /// Inverse training only: condition on the logged current-step perception
    /// instead of forward-model output, decoupling the two models.
    pub ground_truth_perception: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            initial_lr: 1e-3,
            decay_period: 300,
            decay_factor: 0.1,
            beta: 0.01,
            seed: 0,
            validation_fraction: 0.1,
            linear_width: 64,
            hidden_size: 64,
            mode: CvaeMode::NoiseInput,
            variance_scaled_noise: false,
            ground_truth_perception: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay_period must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in (0, 0.5), got {}",
                self.validation_fraction
            )));
        }
        let model = self.cvae_config(Role::Inverse);
        model.validate()
    }

    pub fn cvae_config(&self, role: Role) -> CvaeConfig {
        CvaeConfig {
            role,
            per_step_dim: STEP_DIM,
            window_len: WINDOW_LEN,
            linear_width: self.linear_width,
            hidden_size: self.hidden_size,
            beta: self.beta,
            mode: self.mode,
            variance_scaled_noise: self.variance_scaled_noise,
        }
    }
}

/// Closed-loop rollout settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub tick_limit: u64,
    pub runs: u64,
    /// Scripted profile that fills the first ten history steps.
    pub warmup: DriverProfile,
    /// Replace simulator perception with forward-model output in the loop.
    pub hallucinated_perception: bool,
    /// Suppress generative noise: latent at the prior mean, encoder noise zero.
    pub zero_latent: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            tick_limit: 3000,
            runs: 28,
            warmup: experienced_population().remove(0),
            hallucinated_perception: false,
            zero_latent: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tick_limit <= 100 {
            return Err(Error::Config(format!(
                "tick_limit must exceed 100, got {}",
                self.tick_limit
            )));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        self.warmup.validate()
    }
}

/// One epoch of the training log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub train_total: f64,
    pub train_mse: f64,
    pub train_kl: f64,
    pub val_total: f64,
    pub val_mse: f64,
}

pub struct TrainOutcome {
    pub model: CvaeModel,
    pub meta: ModelMeta,
    pub logs: Vec<EpochLog>,
    pub best_epoch: u64,
}

/// What `build_dataset` did, including which episodes it refused.
#[derive(Clone, Debug)]
pub struct BuildSummary {
    pub windows: u64,
    pub episodes_used: usize,
    pub skipped: Vec<String>,
}

/// Slide a ten-step window over every episode and write one dataset file.
/// Episodes shorter than the window are skipped and reported.
pub fn build_dataset(episodes: &[Episode], role: Role, out: &Path) -> Result<BuildSummary> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut summary = BuildSummary {
        windows: 0,
        episodes_used: 0,
        skipped: Vec::new(),
    };
    for e in episodes {
        if e.records.len() < WINDOW_LEN {
            summary.skipped.push(format!(
                "{} seed {}: {} ticks, need {}",
                e.driver_id,
                e.seed,
                e.records.len(),
                WINDOW_LEN
            ));
        } else {
            summary.windows += (e.records.len() - (WINDOW_LEN - 1)) as u64;
            summary.episodes_used += 1;
        }
    }
    if summary.windows == 0 {
        return Err(Error::EmptyDataset);
    }

    let mut writer = DatasetWriter::create(out, role.dataset_target(), summary.windows)?;
    for e in episodes {
        if e.records.len() < WINDOW_LEN {
            continue;
        }
        for t in (WINDOW_LEN - 1)..e.records.len() {
            let window = ConditionWindow::from_episode(e, t)?;
            writer.push(&window)?;
        }
    }
    writer.finish()?;
    Ok(summary)
}

/// Gradients of one backward pass arranged like the parameter set.
fn collect_grads(
    params: &ParameterSet,
    ids: &TapeParams,
    grads: &crate::tape::Gradients,
) -> ParameterSet {
    let mut out = ParameterSet::new();
    for (name, tensor) in params.iter() {
        out.insert(name, grads.get_or_zeros(ids.id(name), tensor.shape()));
    }
    out
}

/// Gather dataset rows, applying any per-window perception replacement.
fn gather_batch(
    dataset: &Dataset,
    indices: &[usize],
    conditioned: Option<&Vec<Vec<f64>>>,
) -> WindowBatch {
    let mut batch = WindowBatch::from_dataset(dataset, indices);
    if let Some(rows) = conditioned {
        let mut data = Vec::with_capacity(indices.len() * PERCEPTION_DIM);
        for &i in indices {
            data.extend_from_slice(&rows[i]);
        }
        let values = Tensor::new(vec![indices.len(), PERCEPTION_DIM], data).expect("row geometry");
        batch.replace_current_slice(&(0..PERCEPTION_DIM), &values);
    }
    batch
}

/// Shared optimization loop. `conditioned`, when present, replaces each
/// window's current-step perception before batches are assembled.
fn train_model(
    dataset: &Dataset,
    config: &TrainConfig,
    role: Role,
    conditioned: Option<Vec<Vec<f64>>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.expect_target(role.dataset_target())?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: dataset.len(),
        });
    }

    let n = dataset.len();
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut derive_rng(config.seed, "train-split", 0));
    let val_count = ((n as f64 * config.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = indices.split_at(val_count);

    let cvae_cfg = config.cvae_config(role);
    let mut model = CvaeModel::init(cvae_cfg.clone(), config.seed)?;
    let mut opt = OptimizerState::new(model.params());
    let range = cvae_cfg.target_range();
    let latent = cvae_cfg.generated_dim();

    // Fixed validation batch and noise: epochs stay comparable.
    let val_batch = gather_batch(dataset, val_idx, conditioned.as_ref());
    let val_targets = val_batch.target_rows(&range);
    let mut val_rng = derive_rng(config.seed, "val-noise", 0);
    let val_shape = [val_batch.len(), latent];
    let val_noise = standard_normal(&mut val_rng, &val_shape);
    let val_eps = standard_normal(&mut val_rng, &val_shape);

    let mut best: Option<(f64, u64, ParameterSet)> = None;
    let mut logs = Vec::with_capacity(config.epochs as usize);
    for epoch in 0..config.epochs {
        let lr = step_decay_lr(config.initial_lr, config.decay_factor, epoch, config.decay_period);

        let mut order = train_idx.to_vec();
        order.shuffle(&mut derive_rng(config.seed, "train-shuffle", epoch));
        let mut noise_rng = derive_rng(config.seed, "train-noise", epoch);

        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(config.batch_size) {
            let batch = gather_batch(dataset, chunk, conditioned.as_ref());
            let targets = batch.target_rows(&range);
            let shape = [batch.len(), latent];
            let noise = standard_normal(&mut noise_rng, &shape);
            let eps = standard_normal(&mut noise_rng, &shape);

            let mut tape = Tape::new();
            let ids = TapeParams::leaf_all(&mut tape, model.params());
            let nodes =
                model.training_loss(&mut tape, &ids, &batch, &targets, &noise, &eps, config.beta)?;
            let total = tape.value(nodes.total).data()[0];
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{} training loss at epoch {epoch}", role.name()),
                });
            }
            let weight = chunk.len() as f64;
            sums[0] += total * weight;
            sums[1] += tape.value(nodes.mse).data()[0] * weight;
            sums[2] += tape.value(nodes.kl).data()[0] * weight;

            let grads = tape.backward(nodes.total)?;
            let grad_set = collect_grads(model.params(), &ids, &grads);
            opt.adam_step(model.params_mut(), &grad_set, lr);
        }
        let train_n = order.len() as f64;

        let mut tape = Tape::new();
        let ids = TapeParams::leaf_all(&mut tape, model.params());
        let val_nodes = model.training_loss(
            &mut tape,
            &ids,
            &val_batch,
            &val_targets,
            &val_noise,
            &val_eps,
            config.beta,
        )?;
        let val_total = tape.value(val_nodes.total).data()[0];
        let val_mse = tape.value(val_nodes.mse).data()[0];
        if !val_total.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} validation loss at epoch {epoch}", role.name()),
            });
        }

        logs.push(EpochLog {
            epoch,
            lr,
            train_total: sums[0] / train_n,
            train_mse: sums[1] / train_n,
            train_kl: sums[2] / train_n,
            val_total,
            val_mse,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_total < *b) {
            best = Some((val_total, epoch, model.params().clone()));
        }
    }

    let (best_val, best_epoch, best_params) = best.expect("at least one epoch");
    let model = CvaeModel::from_parts(cvae_cfg.clone(), best_params)?;
    let mut meta = ModelMeta::new(cvae_cfg, dataset.fingerprint().to_string());
    meta.epochs_trained = config.epochs;
    meta.best_val_loss = best_val;
    Ok(TrainOutcome {
        model,
        meta,
        logs,
        best_epoch,
    })
}

/// Train the forward model: windows from the reference population, target is
/// the current-step perception.
pub fn train_forward(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_model(dataset, config, Role::Forward, None)
}

/// Generated perception for every window, evaluated in chunks. This is the
/// conditioning signal for inverse training.
fn forward_conditioning(
    dataset: &Dataset,
    forward: &CvaeModel,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 256;
    let n = dataset.len();
    let mut out = Vec::with_capacity(n);
    let mut rng = derive_rng(seed, "forward-conditioning", 0);
    let mut start = 0;
    while start < n {
        let indices: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let batch = WindowBatch::from_dataset(dataset, &indices);
        let generated = forward.generate(&batch, &mut rng)?;
        for row in 0..indices.len() {
            out.push(generated.data()[row * PERCEPTION_DIM..(row + 1) * PERCEPTION_DIM].to_vec());
        }
        start += CHUNK;
    }
    Ok(out)
}

/// Train the inverse model: target is the current-step control. Unless
/// `ground_truth_perception` is set, each window's current perception is
/// replaced by the forward model's generated perception first.
pub fn train_inverse(
    dataset: &Dataset,
    forward: Option<&CvaeModel>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let conditioned = if config.ground_truth_perception {
        None
    } else {
        let forward = forward.ok_or_else(|| {
            Error::Config(
                "inverse training conditions on the forward model; \
                 pass one or set ground_truth_perception"
                    .into(),
            )
        })?;
        if forward.config().role != Role::Forward {
            return Err(Error::RoleMismatch {
                expected: Role::Forward.name().to_string(),
                found: forward.config().role.name().to_string(),
            });
        }
        Some(forward_conditioning(dataset, forward, config.seed)?)
    };
    train_model(dataset, config, Role::Inverse, conditioned)
}

/// Closed-loop driver: scripted warmup for the first ten ticks, the inverse
/// model thereafter, with perception history maintained from what the
/// simulator (or optionally the forward model) provides.
struct ModelDriver<'a> {
    id: String,
    model: &'a CvaeModel,
    forward: Option<&'a CvaeModel>,
    warmup: ScriptedDriver,
    hallucinated_perception: bool,
    zero_latent: bool,
    seed: u64,
    history: Vec<[f64; STEP_DIM]>,
}

impl<'a> ModelDriver<'a> {
    fn new(
        model: &'a CvaeModel,
        forward: Option<&'a CvaeModel>,
        config: &RolloutConfig,
        seed: u64,
    ) -> Self {
        Self {
            id: format!("model-{}", model.config().mode.name()),
            model,
            forward,
            warmup: ScriptedDriver::new(config.warmup.clone()),
            hallucinated_perception: config.hallucinated_perception,
            zero_latent: config.zero_latent,
            seed,
            history: Vec::new(),
        }
    }

    /// Current-step vector from live simulator outputs, neutral control slot.
    fn current_step(&self, state: &VehicleState, lidar: &[[f64; 3]], tick: u64) -> [f64; STEP_DIM] {
        let record = TimestepRecord {
            tick,
            time: 0.0,
            control: RawControl::coast(),
            state: *state,
            lidar: lidar.to_vec(),
        };
        crate::preprocess::preprocess_step(&record)
    }

    fn push_history(&mut self, mut step: [f64; STEP_DIM], control: RawControl) {
        let c = normalize_control(control);
        step[STEP_DIM - CONTROL_DIM] = c.steer_n;
        step[STEP_DIM - CONTROL_DIM + 1] = c.pedal_n;
        self.history.push(step);
        if self.history.len() > WINDOW_LEN - 1 {
            let excess = self.history.len() - (WINDOW_LEN - 1);
            self.history.drain(..excess);
        }
    }
}

impl Driver for ModelDriver<'_> {
    fn id(&self) -> &str {
        &self.id
    }

    fn reset(&mut self, episode_seed: u64) {
        self.warmup.reset(episode_seed);
        self.history.clear();
    }

    fn act(
        &mut self,
        terrain: &Terrain,
        state: &VehicleState,
        lidar: &[[f64; 3]],
        tick: u64,
    ) -> Result<RawControl> {
        let step = self.current_step(state, lidar, tick);

        if tick < WINDOW_LEN as u64 {
            let control = self.warmup.act(terrain, state, lidar, tick)?;
            self.push_history(step, control);
            return Ok(control);
        }

        let mut window = Vec::with_capacity(WINDOW_LEN * STEP_DIM);
        for past in &self.history {
            window.extend_from_slice(past);
        }
        window.extend_from_slice(&step);
        let mut batch = WindowBatch::from_flat(STEP_DIM, WINDOW_LEN, window);

        let mut rng = derive_rng(self.seed, "rollout-latent", tick);
        if self.hallucinated_perception {
            let forward = self.forward.expect("checked at rollout entry");
            let replaced = if self.zero_latent {
                let shape = [1, PERCEPTION_DIM];
                forward.generate_batch(&batch, &Tensor::zeros(&shape), &Tensor::zeros(&shape))?
            } else {
                forward.generate(&batch, &mut rng)?
            };
            batch.replace_current_slice(&(0..PERCEPTION_DIM), &replaced);
        }

        let generated = if self.zero_latent {
            let shape = [1, CONTROL_DIM];
            self.model
                .generate_batch(&batch, &Tensor::zeros(&shape), &Tensor::zeros(&shape))?
        } else {
            self.model.generate(&batch, &mut rng)?
        };

        // Denormalize: steer back to [-1, 1], fused pedal split by sign.
        let steer = 2.0 * generated.data()[0] - 1.0;
        let pedal = 2.0 * generated.data()[1] - 1.0;
        let control = RawControl::new(steer, pedal.max(0.0), (-pedal).max(0.0));
        self.push_history(step, control);
        Ok(control)
    }
}

/// One closed-loop episode under the inverse model.
pub fn rollout(
    model: &CvaeModel,
    forward: Option<&CvaeModel>,
    terrain: &Terrain,
    seed: u64,
    config: &RolloutConfig,
) -> Result<Episode> {
    config.validate()?;
    if model.config().role != Role::Inverse {
        return Err(Error::RoleMismatch {
            expected: Role::Inverse.name().to_string(),
            found: model.config().role.name().to_string(),
        });
    }
    if config.hallucinated_perception {
        match forward {
            None => {
                return Err(Error::Config(
                    "hallucinated_perception requires a forward model".into(),
                ))
            }
            Some(f) if f.config().role != Role::Forward => {
                return Err(Error::RoleMismatch {
                    expected: Role::Forward.name().to_string(),
                    found: f.config().role.name().to_string(),
                });
            }
            Some(_) => {}
        }
    }
    let mut driver = ModelDriver::new(model, forward, config, seed);
    run_episode(terrain, &mut driver, seed, config.tick_limit)
}

/// The standard evaluation set: `config.runs` rollouts with split seeds.
pub fn rollout_population(
    model: &CvaeModel,
    forward: Option<&CvaeModel>,
    terrain: &Terrain,
    root_seed: u64,
    config: &RolloutConfig,
) -> Result<Vec<Episode>> {
    (0..config.runs)
        .map(|i| rollout(model, forward, terrain, mix(root_seed, i), config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::terrain::{generate_terrain, TerrainConfig};

    fn tiny_terrain() -> Terrain {
        let config = TerrainConfig {
            length: 160.0,
            curviness: 0.2,
            ..TerrainConfig::default()
        };
        generate_terrain(11, &config).unwrap()
    }

    fn collect_episodes(terrain: &Terrain, profile: &DriverProfile, seeds: &[u64]) -> Vec<Episode> {
        seeds
            .iter()
            .map(|&s| {
                let mut driver = ScriptedDriver::new(profile.clone());
                run_episode(terrain, &mut driver, s, 2000).unwrap()
            })
            .collect()
    }

    fn quick_config(epochs: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            linear_width: 8,
            hidden_size: 8,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn dataset_window_count_matches_episode_lengths() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let mut episodes = collect_episodes(&terrain, &profile, &[1, 2]);
        let expect: u64 = episodes
            .iter()
            .map(|e| (e.records.len() - 9) as u64)
            .sum();

        // A stub too short for one window must be skipped with a note.
        let mut stub = episodes[0].clone();
        stub.records.truncate(4);
        stub.driver_id = "stub".into();
        episodes.push(stub);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forward.ds");
        let summary = build_dataset(&episodes, Role::Forward, &path).unwrap();
        assert_eq!(summary.windows, expect);
        assert_eq!(summary.episodes_used, 2);
        assert_eq!(summary.skipped.len(), 1);
        assert!(summary.skipped[0].contains("stub"));

        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.len() as u64, summary.windows);
        ds.expect_target(Role::Forward.dataset_target()).unwrap();
        assert!(matches!(
            ds.expect_target(Role::Inverse.dataset_target()),
            Err(Error::RoleMismatch { .. })
        ));
        assert!(matches!(
            build_dataset(&[], Role::Forward, &path),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn dataset_builds_are_byte_identical() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let episodes = collect_episodes(&terrain, &profile, &[3]);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ds");
        let b = dir.path().join("b.ds");
        build_dataset(&episodes, Role::Inverse, &a).unwrap();
        build_dataset(&episodes, Role::Inverse, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let ds = Dataset::load(&a).unwrap();
        assert!(ds.fingerprint().starts_with("sha256:"));
        assert_eq!(ds.fingerprint(), Dataset::load(&b).unwrap().fingerprint());
    }

    #[test]
    fn training_walks_the_lr_schedule_and_improves() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let episodes = collect_episodes(&terrain, &profile, &[5, 6]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forward.ds");
        build_dataset(&episodes, Role::Forward, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();

        let mut config = quick_config(12);
        config.decay_period = 5;
        let outcome = train_forward(&ds, &config).unwrap();

        assert_eq!(outcome.logs.len(), 12);
        for log in &outcome.logs {
            assert_eq!(
                log.lr,
                step_decay_lr(config.initial_lr, config.decay_factor, log.epoch, 5)
            );
            assert!(log.train_total.is_finite() && log.val_total.is_finite());
        }
        let first = outcome.logs.first().unwrap().train_total;
        let last = outcome.logs.last().unwrap().train_total;
        assert!(last < first, "training loss should drop: {first} -> {last}");
        assert_eq!(outcome.meta.dataset_fingerprint, ds.fingerprint());
        assert_eq!(outcome.meta.epochs_trained, 12);
        let best_log = outcome.logs[outcome.best_epoch as usize];
        assert_eq!(best_log.val_total, outcome.meta.best_val_loss);
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let episodes = collect_episodes(&terrain, &profile, &[7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inverse.ds");
        build_dataset(&episodes, Role::Inverse, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();

        let mut config = quick_config(4);
        config.ground_truth_perception = true;
        let a = train_inverse(&ds, None, &config).unwrap();
        let b = train_inverse(&ds, None, &config).unwrap();
        for ((na, ta), (nb, tb)) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {na} diverged");
        }

        let mut other = config.clone();
        other.seed = 1;
        let c = train_inverse(&ds, None, &other).unwrap();
        let differs = a
            .model
            .params()
            .iter()
            .zip(c.model.params().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs, "different seeds should train differently");
    }

    #[test]
    fn inverse_training_needs_a_forward_model_or_the_flag() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let episodes = collect_episodes(&terrain, &profile, &[9]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inverse.ds");
        build_dataset(&episodes, Role::Inverse, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();

        let config = quick_config(2);
        assert!(matches!(
            train_inverse(&ds, None, &config),
            Err(Error::Config(_))
        ));

        // A model of the wrong role is rejected up front.
        let inverse_model = CvaeModel::init(config.cvae_config(Role::Inverse), 1).unwrap();
        assert!(matches!(
            train_inverse(&ds, Some(&inverse_model), &config),
            Err(Error::RoleMismatch { .. })
        ));

        // With a real forward model the conditioned path trains.
        let forward_model = CvaeModel::init(config.cvae_config(Role::Forward), 1).unwrap();
        let outcome = train_inverse(&ds, Some(&forward_model), &config).unwrap();
        assert_eq!(outcome.logs.len(), 2);

        // Role-mismatched dataset is rejected.
        let fpath = dir.path().join("forward.ds");
        build_dataset(&episodes, Role::Forward, &fpath).unwrap();
        let fds = Dataset::load(&fpath).unwrap();
        let mut gtp = config.clone();
        gtp.ground_truth_perception = true;
        assert!(matches!(
            train_inverse(&fds, None, &gtp),
            Err(Error::RoleMismatch { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.validation_fraction = 0.5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.decay_factor = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut r = RolloutConfig::default();
        r.tick_limit = 100;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rollout_is_deterministic_and_well_formed() {
        let terrain = tiny_terrain();
        let profile = experienced_population().remove(0);
        let episodes = collect_episodes(&terrain, &profile, &[13, 14]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inverse.ds");
        build_dataset(&episodes, Role::Inverse, &path).unwrap();
        let ds = Dataset::load(&path).unwrap();

        let mut config = quick_config(6);
        config.ground_truth_perception = true;
        let trained = train_inverse(&ds, None, &config).unwrap();

        let rcfg = RolloutConfig {
            tick_limit: 400,
            ..RolloutConfig::default()
        };
        let a = rollout(&trained.model, None, &terrain, 77, &rcfg).unwrap();
        let b = rollout(&trained.model, None, &terrain, 77, &rcfg).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let pa = dir2.path().join("a.log");
        let pb = dir2.path().join("b.log");
        a.save(&pa).unwrap();
        b.save(&pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

        // Controls the model produced (after warmup) stay in range.
        for r in &a.records {
            assert!(r.control.steer().abs() <= 1.0);
            assert!((0.0..=1.0).contains(&r.control.accel()));
            assert!((0.0..=1.0).contains(&r.control.brake()));
        }
        assert!(a.records.len() > WINDOW_LEN);

        // The forward model is mandatory for in-the-loop perception.
        let halluc = RolloutConfig {
            hallucinated_perception: true,
            ..rcfg.clone()
        };
        assert!(matches!(
            rollout(&trained.model, None, &terrain, 1, &halluc),
            Err(Error::Config(_))
        ));

        // Forward-role model cannot drive.
        let forward_model = CvaeModel::init(config.cvae_config(Role::Forward), 1).unwrap();
        assert!(matches!(
            rollout(&forward_model, None, &terrain, 1, &rcfg),
            Err(Error::RoleMismatch { .. })
        ));
    }
}

//! End-to-end pipeline checks: supervised imitation accuracy on a
//! deterministic driver, closed-loop trajectory reproduction, and the
//! non-finite-loss abort path.

use teledrive_core::cvae::{CvaeMode, Role};
use teledrive_core::drivers::{experienced_population, DriverProfile, ScriptedDriver};
use teledrive_core::pipeline::{build_dataset, rollout, train_inverse, RolloutConfig, TrainConfig};
use teledrive_core::preprocess::Dataset;
use teledrive_core::sim::episode::{run_episode, Episode};
use teledrive_core::sim::terrain::{generate_terrain, Terrain, TerrainConfig};
use teledrive_core::Error;

fn straight_terrain() -> Terrain {
    let config = TerrainConfig {
        curviness: 0.0,
        ..TerrainConfig::default()
    };
    generate_terrain(4242, &config).unwrap()
}

fn noiseless_profile() -> DriverProfile {
    DriverProfile {
        steer_noise_sd: 0.0,
        pedal_noise_sd: 0.0,
        ..experienced_population().remove(0)
    }
}

fn scripted_episode(terrain: &Terrain, profile: &DriverProfile, seed: u64) -> Episode {
    let mut driver = ScriptedDriver::new(profile.clone());
    run_episode(terrain, &mut driver, seed, 2000).unwrap()
}

/// On data from a noiseless scripted driver the control target is an exact
/// function of the condition, so a desk-scale run must push held-out control
/// error below 1e-3 and at least halve its training loss.
#[test]
fn deterministic_driver_data_trains_to_small_control_error() {
    let terrain = straight_terrain();
    let reference = scripted_episode(&terrain, &noiseless_profile(), 100);
    assert!(reference.records.len() > 520, "reference run too short");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inverse.ds");
    build_dataset(std::slice::from_ref(&reference), Role::Inverse, &path).unwrap();
    let ds = Dataset::load(&path).unwrap();

    let config = TrainConfig {
        epochs: 60,
        batch_size: 64,
        linear_width: 24,
        hidden_size: 24,
        seed: 7,
        mode: CvaeMode::Standard,
        ground_truth_perception: true,
        ..TrainConfig::default()
    };
    let outcome = train_inverse(&ds, None, &config).unwrap();

    let first = outcome.logs.first().unwrap().train_total;
    let last = outcome.logs.last().unwrap().train_total;
    assert!(
        last < 0.5 * first,
        "training barely moved: {first} -> {last}"
    );
    let best_mse = outcome
        .logs
        .iter()
        .map(|l| l.val_mse)
        .fold(f64::INFINITY, f64::min);
    assert!(
        best_mse < 1e-3,
        "held-out control error too high: {best_mse}"
    );
}

/// Closed-loop imitation fidelity floor: trained on the scripted driver's
/// corridor runs (the deterministic reference plus a few small-noise variants
/// of the same profile, which make the feedback law identifiable), the model
/// must retrace the noiseless trajectory within one meter of mean per-tick
/// position error across 500 ticks of a straight corridor.
#[test]
fn trained_model_reproduces_a_deterministic_driver() {
    let terrain = straight_terrain();
    let noiseless = noiseless_profile();
    let reference = scripted_episode(&terrain, &noiseless, 100);

    let explorer = DriverProfile {
        steer_noise_sd: 0.02,
        pedal_noise_sd: 0.03,
        ..noiseless.clone()
    };
    let mut corpus = vec![reference.clone()];
    for seed in 201..204 {
        corpus.push(scripted_episode(&terrain, &explorer, seed));
    }
    for e in corpus.iter_mut() {
        e.records.truncate(450);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inverse.ds");
    build_dataset(&corpus, Role::Inverse, &path).unwrap();
    let ds = Dataset::load(&path).unwrap();

    let config = TrainConfig {
        epochs: 200,
        batch_size: 64,
        linear_width: 16,
        hidden_size: 16,
        beta: 0.5,
        decay_period: 100,
        seed: 7,
        mode: CvaeMode::Standard,
        ground_truth_perception: true,
        ..TrainConfig::default()
    };
    let outcome = train_inverse(&ds, None, &config).unwrap();

    let rollout_config = RolloutConfig {
        tick_limit: 520,
        warmup: noiseless,
        ..RolloutConfig::default()
    };
    let driven = rollout(&outcome.model, None, &terrain, 100, &rollout_config).unwrap();
    assert!(driven.records.len() >= 500, "model run ended early");
    assert_eq!(driven.collision_count, 0, "model run hit a wall");

    let compare = 500.min(reference.records.len());
    let mut total = 0.0;
    for t in 0..compare {
        let a = reference.records[t].state.pos;
        let b = driven.records[t].state.pos;
        total += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    }
    let mean_err = total / compare as f64;
    assert!(
        mean_err < 1.0,
        "mean per-tick position error {mean_err:.3} m exceeds 1 m"
    );

    // Controls the model produced stay in the valid actuation ranges.
    for r in &driven.records {
        assert!(r.control.steer().abs() <= 1.0);
        assert!((0.0..=1.0).contains(&r.control.accel()));
        assert!((0.0..=1.0).contains(&r.control.brake()));
    }
}

/// A learning rate far outside the stable region must surface as a
/// non-finite-loss error rather than silently training on garbage.
#[test]
fn diverging_training_aborts_with_a_diagnostic() {
    let terrain = straight_terrain();
    let mut episode = scripted_episode(&terrain, &noiseless_profile(), 3);
    episode.records.truncate(80);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inverse.ds");
    build_dataset(&[episode], Role::Inverse, &path).unwrap();
    let ds = Dataset::load(&path).unwrap();

    let config = TrainConfig {
        epochs: 50,
        batch_size: 16,
        linear_width: 8,
        hidden_size: 8,
        initial_lr: 1e4,
        ground_truth_perception: true,
        ..TrainConfig::default()
    };
    match train_inverse(&ds, None, &config) {
        Err(Error::NonFinite { context }) => {
            assert!(context.contains("epoch"), "context should name the epoch");
        }
        Err(other) => panic!("wrong error: {other:?}"),
        Ok(_) => panic!("training with lr=1e4 should not stay finite"),
    }
}

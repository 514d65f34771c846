//! Scripted closed-loop drivers: a pure-pursuit steering oracle and a
//! proportional speed controller, wrapped with per-profile noise and a
//! reaction-lag filter to mimic operator populations of varying skill.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{derive_rng, mix};
use crate::sim::episode::Driver;
use crate::sim::geom::{heading, V2};
use crate::sim::terrain::Terrain;
use crate::sim::vehicle::{RawControl, VehicleState, A_MAX, B_MAX, DRAG, MAX_STEER_DEG, WHEELBASE};

/// Lateral acceleration budget used to slow down for upcoming curvature.
const LATERAL_ACCEL_MAX: f64 = 4.0;
/// Speed-error gain, 1/s.
const SPEED_KP: f64 = 1.0;
/// How far ahead the speed controller samples curvature, meters.
const CURVATURE_PREVIEW: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverProfile {
    pub name: String,
    /// Pursuit distance along the centerline, meters.
    pub lookahead: f64,
    /// m/s, at most the vehicle envelope.
    pub target_speed: f64,
    pub steer_noise_sd: f64,
    pub pedal_noise_sd: f64,
    /// Low-pass constant in ticks; 0 reacts instantly.
    pub reaction_lag: u32,
    pub seed: u64,
}

impl DriverProfile {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if !(self.lookahead > 0.0) {
            return Err(Error::Config(format!(
                "driver {}: lookahead must be positive",
                self.name
            )));
        }
        if !(self.target_speed > 0.0 && self.target_speed <= 30.0) {
            return Err(Error::Config(format!(
                "driver {}: target_speed must lie in (0, 30]",
                self.name
            )));
        }
        if self.steer_noise_sd < 0.0 || self.pedal_noise_sd < 0.0 {
            return Err(Error::Config(format!(
                "driver {}: noise SDs must be nonnegative",
                self.name
            )));
        }
        Ok(())
    }
}

/// Steering toward the centerline point `lookahead` meters ahead of the
/// closest-point projection, mapped to [-1, 1]. Positive steers right.
pub fn pure_pursuit_steer(state: &VehicleState, terrain: &Terrain, lookahead: f64) -> f64 {
    let loc = terrain.locate(state.pos, None);
    let target = terrain.point_at(loc.arc_len + lookahead);
    let d = target - state.pos;
    let forward = heading(state.yaw);
    let right = V2::new(forward.y, -forward.x);
    let alpha = d.dot(right).atan2(d.dot(forward));
    let dist = d.norm().max(1e-6);
    let delta = (2.0 * WHEELBASE * alpha.sin() / dist).atan();
    (delta.to_degrees() / MAX_STEER_DEG).clamp(-1.0, 1.0)
}

/// Proportional speed control toward the profile target, reduced where the
/// upcoming centerline curves. Exactly one pedal is ever active.
pub fn speed_control(state: &VehicleState, terrain: &Terrain, profile: &DriverProfile) -> (f64, f64) {
    let loc = terrain.locate(state.pos, None);
    let mut kappa: f64 = 0.0;
    let mut s = 0.0;
    while s <= CURVATURE_PREVIEW {
        kappa = kappa.max(terrain.curvature_at(loc.arc_len + s));
        s += 10.0;
    }
    let curve_cap = if kappa > 1e-9 {
        (LATERAL_ACCEL_MAX / kappa).sqrt()
    } else {
        f64::INFINITY
    };
    let v_des = profile.target_speed.min(curve_cap);

    // Desired longitudinal acceleration, then invert the plant model
    // (accel*A - brake*B - drag*v) to pick one pedal.
    let a_des = SPEED_KP * (v_des - state.speed);
    let effort = a_des + DRAG * state.speed;
    if effort >= 0.0 {
        ((effort / A_MAX).min(1.0), 0.0)
    } else {
        (0.0, (-effort / B_MAX).min(1.0))
    }
}

/// A profile bound to per-episode filter state. Noise lands on the
/// controller's intent and the lag filter smooths the result, the way a
/// sluggish operator chases a wandering target.
#[derive(Debug, Clone)]
pub struct ScriptedDriver {
    profile: DriverProfile,
    episode_seed: u64,
    prev_steer: f64,
    prev_pedal: f64,
}

impl ScriptedDriver {
    pub fn new(profile: DriverProfile) -> Self {
        Self { profile, episode_seed: 0, prev_steer: 0.0, prev_pedal: 0.0 }
    }

    pub fn profile(&self) -> &DriverProfile {
        &self.profile
    }
}

impl Driver for ScriptedDriver {
    fn id(&self) -> &str {
        &self.profile.name
    }

    fn reset(&mut self, episode_seed: u64) {
        self.episode_seed = episode_seed;
        self.prev_steer = 0.0;
        self.prev_pedal = 0.0;
    }

    fn act(
        &mut self,
        terrain: &Terrain,
        state: &VehicleState,
        _lidar: &[[f64; 3]],
        tick: u64,
    ) -> Result<RawControl> {
        let steer = pure_pursuit_steer(state, terrain, self.profile.lookahead);
        let (accel, brake) = speed_control(state, terrain, &self.profile);
        // Single pedal axis so noise can push through zero.
        let pedal = accel - brake;

        // Counter-based noise: a fresh short-lived stream per tick keeps the
        // sequence independent of call history.
        let mut rng = derive_rng(mix(self.profile.seed, self.episode_seed), "driver-noise", tick);
        let steer_noisy = if self.profile.steer_noise_sd > 0.0 {
            let n = Normal::new(0.0, self.profile.steer_noise_sd).expect("valid sd");
            steer + n.sample(&mut rng)
        } else {
            let _ = rng.gen::<u64>();
            steer
        };
        let pedal_noisy = if self.profile.pedal_noise_sd > 0.0 {
            let n = Normal::new(0.0, self.profile.pedal_noise_sd).expect("valid sd");
            pedal + n.sample(&mut rng)
        } else {
            pedal
        };

        let a = self.profile.reaction_lag as f64 / (self.profile.reaction_lag as f64 + 1.0);
        let steer_f = a * self.prev_steer + (1.0 - a) * steer_noisy;
        let pedal_f = a * self.prev_pedal + (1.0 - a) * pedal_noisy;
        self.prev_steer = steer_f;
        self.prev_pedal = pedal_f;

        let (accel_out, brake_out) = if pedal_f >= 0.0 { (pedal_f, 0.0) } else { (0.0, -pedal_f) };
        Ok(RawControl::new(steer_f, accel_out, brake_out))
    }
}

/// The 5 steady high-skill profiles: longer lookahead, low noise, no lag.
/// Moderate speeds keep their corner cutting below the wander any
/// low-skill profile produces.
pub fn experienced_population() -> Vec<DriverProfile> {
    (0..5)
        .map(|i| DriverProfile {
            name: format!("exp-{i}"),
            lookahead: 13.0 + 0.6 * i as f64,
            target_speed: 9.0 + 0.4 * i as f64,
            steer_noise_sd: 0.01 + 0.005 * i as f64,
            pedal_noise_sd: 0.01 + 0.005 * i as f64,
            reaction_lag: 0,
            seed: 101 + i as u64,
        })
        .collect()
}

/// The 14 erratic low-skill profiles: short lookahead, strong noise,
/// sluggish reactions, and speeds the short lookahead cannot damp, so the
/// closed loop weaves.
pub fn inexperienced_population() -> Vec<DriverProfile> {
    (0..14)
        .map(|i| DriverProfile {
            name: format!("inexp-{i}"),
            lookahead: 9.0 + 0.25 * i as f64,
            target_speed: 11.0 + (i % 4) as f64,
            steer_noise_sd: 0.10 + 0.05 * i as f64 / 13.0,
            pedal_noise_sd: 0.10 + 0.05 * i as f64 / 13.0,
            reaction_lag: 3 + (i % 3) as u32,
            seed: 201 + i as u64,
        })
        .collect()
}

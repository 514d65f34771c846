//! Kinematic bicycle vehicle stepped at a fixed 100 ms tick.

use serde::{Deserialize, Serialize};

use crate::sim::geom::{heading, wrap_deg, V2};
use crate::sim::terrain::Roughness;

/// Simulation tick, seconds.
pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 3.0;
/// Full steering deflection, degrees.
pub const MAX_STEER_DEG: f64 = 30.0;
/// Full-throttle acceleration, m/s^2.
pub const A_MAX: f64 = 3.0;
/// Full-brake deceleration, m/s^2.
pub const B_MAX: f64 = 6.0;
/// Linear drag coefficient, 1/s; a_max/drag puts the terminal speed at
/// exactly the 30 m/s envelope cap.
pub const DRAG: f64 = 0.1;
pub const MAX_SPEED: f64 = 30.0;
/// Collision circle radius (body width 2 m).
pub const VEHICLE_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub pos: V2,
    /// Compass yaw, degrees in [0, 360): 0 = north (+y), increasing clockwise.
    pub yaw: f64,
    pub roll: f64,
    pub pitch: f64,
    /// m/s, in [0, 30].
    pub speed: f64,
}

impl VehicleState {
    pub fn heading(&self) -> V2 {
        heading(self.yaw)
    }
}

/// Driver command. Construction clamps every channel into range, so a held
/// value is always valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawControl {
    steer: f64,
    accel: f64,
    brake: f64,
}

impl RawControl {
    /// Clamps steer into [-1, 1] and the pedals into [0, 1]; non-finite
    /// channels become 0 (callers that must reject them check beforehand).
    pub fn new(steer: f64, accel: f64, brake: f64) -> Self {
        let sane = |v: f64, lo: f64| if v.is_finite() { v.clamp(lo, 1.0) } else { 0.0 };
        Self {
            steer: sane(steer, -1.0),
            accel: sane(accel, 0.0),
            brake: sane(brake, 0.0),
        }
    }

    pub fn coast() -> Self {
        Self { steer: 0.0, accel: 0.0, brake: 0.0 }
    }

    /// Positive steers right.
    pub fn steer(&self) -> f64 {
        self.steer
    }

    pub fn accel(&self) -> f64 {
        self.accel
    }

    pub fn brake(&self) -> f64 {
        self.brake
    }
}

/// Advances one tick of bicycle kinematics. The yaw turns first and the
/// position advances along the new heading with the pre-update speed, so a
/// straight 10 m/s tick covers exactly 1 m.
pub fn step_vehicle(
    state: &VehicleState,
    control: RawControl,
    dt: f64,
    rough: &Roughness,
) -> VehicleState {
    assert!(dt > 0.0, "dt must be positive");
    let yaw_rate = state.speed / WHEELBASE * (control.steer * MAX_STEER_DEG).to_radians().tan();
    let yaw = wrap_deg(state.yaw + yaw_rate.to_degrees() * dt);
    let pos = state.pos + heading(yaw) * (state.speed * dt);
    let speed = (state.speed + (control.accel * A_MAX - control.brake * B_MAX - DRAG * state.speed) * dt)
        .clamp(0.0, MAX_SPEED);
    let (roll, pitch) = rough.attitude(pos, yaw);
    VehicleState { pos, yaw, roll, pitch, speed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::terrain::{generate_terrain, TerrainConfig};

    fn flat_state(yaw: f64, speed: f64) -> VehicleState {
        VehicleState { pos: V2::new(0.0, 10.0), yaw, roll: 0.0, pitch: 0.0, speed }
    }

    fn rough() -> Roughness {
        generate_terrain(1, &TerrainConfig::default()).unwrap().roughness().clone()
    }

    #[test]
    fn control_clamps_on_ingest() {
        let c = RawControl::new(3.0, -0.5, 1.7);
        assert_eq!((c.steer(), c.accel(), c.brake()), (1.0, 0.0, 1.0));
        let n = RawControl::new(f64::NAN, f64::INFINITY, 0.5);
        assert_eq!((n.steer(), n.accel(), n.brake()), (0.0, 0.0, 0.5));
    }

    #[test]
    fn at_rest_stays_put() {
        let r = rough();
        let s = flat_state(37.0, 0.0);
        let s2 = step_vehicle(&s, RawControl::coast(), DT, &r);
        assert_eq!(s2.pos, s.pos);
        assert_eq!(s2.yaw, s.yaw);
        assert_eq!(s2.speed, 0.0);
    }

    #[test]
    fn straight_tick_advances_one_meter() {
        let r = rough();
        let s = flat_state(0.0, 10.0);
        let s2 = step_vehicle(&s, RawControl::coast(), DT, &r);
        assert_eq!(s2.yaw, 0.0);
        assert!((s2.pos.y - s.pos.y - 1.0).abs() < 1e-12);
        assert!((s2.pos.x - s.pos.x).abs() < 1e-12);
        // Drag bleeds speed after the move.
        assert!((s2.speed - 9.9).abs() < 1e-12);
    }

    #[test]
    fn full_brake_reaches_zero_and_stays() {
        let r = rough();
        let mut s = flat_state(90.0, 10.0);
        let brake = RawControl::new(0.0, 0.0, 1.0);
        for _ in 0..30 {
            s = step_vehicle(&s, brake, DT, &r);
        }
        assert_eq!(s.speed, 0.0);
        let s2 = step_vehicle(&s, brake, DT, &r);
        assert_eq!(s2.speed, 0.0);
    }

    #[test]
    fn full_throttle_tops_out_at_envelope() {
        let r = rough();
        let mut s = flat_state(180.0, 0.0);
        let gas = RawControl::new(0.0, 1.0, 0.0);
        for _ in 0..2000 {
            s = step_vehicle(&s, gas, DT, &r);
            assert!(s.speed <= MAX_SPEED);
        }
        assert!((s.speed - MAX_SPEED).abs() < 1e-6, "terminal speed {}", s.speed);
    }

    #[test]
    fn positive_steer_turns_clockwise() {
        let r = rough();
        let s = flat_state(0.0, 10.0);
        let s2 = step_vehicle(&s, RawControl::new(1.0, 0.0, 0.0), DT, &r);
        assert!(s2.yaw > 0.0 && s2.yaw < 90.0, "yaw {}", s2.yaw);
        // Turning right from north drifts east.
        assert!(s2.pos.x > s.pos.x);
    }

    #[test]
    fn yaw_stays_wrapped() {
        let r = rough();
        let mut s = flat_state(359.0, 20.0);
        for _ in 0..50 {
            s = step_vehicle(&s, RawControl::new(1.0, 0.5, 0.0), DT, &r);
            assert!((0.0..360.0).contains(&s.yaw), "yaw {}", s.yaw);
        }
    }

    #[test]
    fn constant_steer_traces_a_regular_polygon() {
        let r = rough();
        // accel 0.5 exactly balances drag at 15 m/s.
        let s = flat_state(0.0, 15.0);
        let c = RawControl::new(1.0, 0.5, 0.0);
        let expected_turn = (15.0 / WHEELBASE * (MAX_STEER_DEG.to_radians()).tan() * DT).to_degrees();
        let mut prev = s;
        for _ in 0..40 {
            let next = step_vehicle(&prev, c, DT, &r);
            assert!((next.speed - 15.0).abs() < 1e-12);
            let chord = next.pos.dist(prev.pos);
            assert!((chord - 1.5).abs() < 1e-12, "chord {chord}");
            let turn = wrap_deg(next.yaw - prev.yaw);
            assert!((turn - expected_turn).abs() < 1e-9, "turn {turn}");
            prev = next;
        }
    }

    #[test]
    fn attitude_follows_roughness() {
        let t = generate_terrain(7, &TerrainConfig::default()).unwrap();
        let s = flat_state(0.0, 10.0);
        let s2 = step_vehicle(&s, RawControl::coast(), DT, t.roughness());
        let (roll, pitch) = t.roughness().attitude(s2.pos, s2.yaw);
        assert_eq!((s2.roll, s2.pitch), (roll, pitch));
    }
}

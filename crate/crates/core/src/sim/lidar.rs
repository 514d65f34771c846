//! Raycast range scanner: 16 elevation channels swept over the forward
//! 180 degrees at 1 degree azimuth steps, returning wall and ground hits
//! within 50 m as 3D points in the vehicle frame.
//!
//! Vehicle frame: x right, y forward, z up, origin on the ground under the
//! sensor; the sensor sits at z = 2.

use crate::sim::geom::{heading, ray_segment, V2};
use crate::sim::terrain::Terrain;
use crate::sim::vehicle::VehicleState;

pub const MAX_RANGE: f64 = 50.0;
pub const SENSOR_HEIGHT: f64 = 2.0;
/// Azimuths -90..=90 degrees; 0 is straight ahead, positive is left.
pub const AZIMUTH_COUNT: usize = 181;
pub const ELEVATION_COUNT: usize = 16;

/// Channel elevations in degrees: odd values -15, -13, .., 13, 15.
pub fn elevation_deg(channel: usize) -> f64 {
    debug_assert!(channel < ELEVATION_COUNT);
    -15.0 + 2.0 * channel as f64
}

/// One full sweep. Points are ordered by azimuth (right to left), then by
/// channel (lowest elevation first); the scan ignores roll and pitch, as a
/// stabilized sensor would.
pub fn lidar_scan(terrain: &Terrain, state: &VehicleState) -> Vec<[f64; 3]> {
    let wall_height = terrain.wall_height();
    // Candidate wall segments near the vehicle. The horizontal reach is at
    // most MAX_RANGE, so anything whose endpoints both sit farther than
    // range + segment length cannot be hit.
    let mut candidates: Vec<(V2, V2)> = Vec::new();
    let (left, right) = terrain.walls();
    for wall in [left, right] {
        for w in wall.windows(2) {
            if w[0].dist(state.pos) <= MAX_RANGE + 2.0 || w[1].dist(state.pos) <= MAX_RANGE + 2.0 {
                candidates.push((w[0], w[1]));
            }
        }
    }

    let trig: Vec<(f64, f64)> = (0..ELEVATION_COUNT)
        .map(|k| {
            let e = elevation_deg(k).to_radians();
            (e.tan(), e.cos())
        })
        .collect();

    let mut points = Vec::with_capacity(AZIMUTH_COUNT * ELEVATION_COUNT / 2);
    for az in -90..=90i32 {
        let theta = (az as f64).to_radians();
        // World-frame ray direction; positive azimuth sweeps toward the left.
        let dir = heading(state.yaw - az as f64);
        // Vehicle-frame direction of the same ray.
        let u = V2::new(-theta.sin(), theta.cos());

        let mut s_wall = f64::INFINITY;
        for &(a, b) in &candidates {
            if let Some(s) = ray_segment(state.pos, dir, a, b) {
                if s < s_wall {
                    s_wall = s;
                }
            }
        }

        for &(te, ce) in &trig {
            if te > 0.0 {
                // Upward channel: only a wall can return, and the hit height
                // grows with distance, so the first wall decides.
                if s_wall.is_finite() {
                    let z = SENSOR_HEIGHT + s_wall * te;
                    if z <= wall_height && s_wall / ce <= MAX_RANGE {
                        points.push([u.x * s_wall, u.y * s_wall, z]);
                    }
                }
            } else {
                // Downward channel: ground unless a wall stands in front of
                // the ground strike point.
                let s_g = SENSOR_HEIGHT / -te;
                if s_g <= s_wall {
                    if s_g / ce <= MAX_RANGE {
                        points.push([u.x * s_g, u.y * s_g, 0.0]);
                    }
                } else if s_wall / ce <= MAX_RANGE {
                    let z = SENSOR_HEIGHT + s_wall * te;
                    points.push([u.x * s_wall, u.y * s_wall, z]);
                }
            }
        }
    }
    points
}

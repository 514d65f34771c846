//! Canyon driving simulation: planar geometry, procedural corridors, the
//! vehicle model, the range scanner, and the episode loop.

pub mod episode;
pub mod geom;
pub mod lidar;
pub mod terrain;
pub mod vehicle;

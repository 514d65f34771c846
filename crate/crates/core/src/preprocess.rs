//! Per-tick feature construction: normalized control/state vectors, the
//! 180-entry forward obstacle-distance vector from the scan, and sliding
//! ten-step condition windows, plus the packed dataset file they feed.

use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sim::episode::{Episode, TimestepRecord};
use crate::sim::geom::wrap_deg;
use crate::sim::vehicle::{RawControl, VehicleState, MAX_SPEED};

pub const ENV_DIM: usize = 180;
pub const STATE_DIM: usize = 4;
pub const CONTROL_DIM: usize = 2;
/// Environment then state, in that order.
pub const PERCEPTION_DIM: usize = ENV_DIM + STATE_DIM;
/// Perception then control.
pub const STEP_DIM: usize = PERCEPTION_DIM + CONTROL_DIM;
pub const WINDOW_LEN: usize = 10;

/// Free-space normalization range for obstacle distances, meters.
pub const ENV_MAX_RANGE: f64 = 50.0;
/// Obstacle slope threshold, degrees; strictly-greater fires.
pub const OBSTACLE_SLOPE_THRESHOLD_DEG: f64 = 45.0;

pub type StepVector = [f64; STEP_DIM];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlVector {
    pub steer_n: f64,
    pub pedal_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub speed_n: f64,
    pub yaw_n: f64,
    pub roll_n: f64,
    pub pitch_n: f64,
}

/// (azimuth degrees, horizontal range m, height m); azimuth 0 is due
/// right, 90 forward, 180 due left.
pub type CylPoint = (f64, f64, f64);

/// Steering and the single pedal axis, each mapped from [-1, 1] to [0, 1].
pub fn normalize_control(raw: RawControl) -> ControlVector {
    ControlVector {
        steer_n: (raw.steer() + 1.0) / 2.0,
        pedal_n: (raw.accel() - raw.brake() + 1.0) / 2.0,
    }
}

/// Speed over [0, 30], angles over [0, 360).
pub fn normalize_state(state: &VehicleState) -> StateVector {
    StateVector {
        speed_n: (state.speed / MAX_SPEED).clamp(0.0, 1.0),
        yaw_n: wrap_deg(state.yaw) / 360.0,
        roll_n: wrap_deg(state.roll) / 360.0,
        pitch_n: wrap_deg(state.pitch) / 360.0,
    }
}

pub fn to_cylindrical(points: &[[f64; 3]]) -> Vec<CylPoint> {
    points
        .iter()
        .map(|p| (p[1].atan2(p[0]).to_degrees(), (p[0] * p[0] + p[1] * p[1]).sqrt(), p[2]))
        .collect()
}

fn azimuth_bucket(az: f64) -> usize {
    (az.floor() as isize).clamp(0, ENV_DIM as isize - 1) as usize
}

/// Marks points whose slope to the nearer predecessor in the same
/// one-degree azimuth bucket exceeds the threshold strictly. A near-zero
/// range step with rising height counts as vertical.
pub fn detect_obstacles(points: &[CylPoint], threshold_deg: f64) -> Vec<CylPoint> {
    let mut buckets: Vec<Vec<CylPoint>> = vec![Vec::new(); ENV_DIM];
    for &p in points {
        buckets[azimuth_bucket(p.0)].push(p);
    }
    let mut obstacles = Vec::new();
    for bucket in &mut buckets {
        bucket.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
        for k in 1..bucket.len() {
            let dr = bucket[k].1 - bucket[k - 1].1;
            let dh = bucket[k].2 - bucket[k - 1].2;
            let vertical = dr < 1e-6 && dh > 0.0;
            if vertical || (dr >= 1e-6 && (dh / dr).atan().to_degrees() > threshold_deg) {
                obstacles.push(bucket[k]);
            }
        }
    }
    obstacles
}

/// Per-degree nearest obstacle distance over the forward 180, normalized
/// by 50 m; free buckets read 1.
pub fn build_environment_vector(obstacles: &[CylPoint]) -> [f64; ENV_DIM] {
    let mut env = [1.0f64; ENV_DIM];
    for &(az, range, _) in obstacles {
        let b = azimuth_bucket(az);
        let d = (range.min(ENV_MAX_RANGE) / ENV_MAX_RANGE).max(0.0);
        if d < env[b] {
            env[b] = d;
        }
    }
    env
}

/// Full per-tick feature vector: environment, then state, then control.
pub fn preprocess_step(record: &TimestepRecord) -> StepVector {
    let cyl = to_cylindrical(&record.lidar);
    let obstacles = detect_obstacles(&cyl, OBSTACLE_SLOPE_THRESHOLD_DEG);
    let env = build_environment_vector(&obstacles);
    let state = normalize_state(&record.state);
    let control = normalize_control(record.control);
    let mut step = [0.0f64; STEP_DIM];
    step[..ENV_DIM].copy_from_slice(&env);
    step[ENV_DIM] = state.speed_n;
    step[ENV_DIM + 1] = state.yaw_n;
    step[ENV_DIM + 2] = state.roll_n;
    step[ENV_DIM + 3] = state.pitch_n;
    step[PERCEPTION_DIM] = control.steer_n;
    step[PERCEPTION_DIM + 1] = control.pedal_n;
    step
}

/// Which slice of the current step a model learns to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSlice {
    /// Environment plus state, dims 0..184.
    Perception,
    /// Steering plus pedal, dims 184..186.
    Control,
}

impl TargetSlice {
    pub fn id(self) -> u32 {
        match self {
            TargetSlice::Perception => 0,
            TargetSlice::Control => 1,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(TargetSlice::Perception),
            1 => Ok(TargetSlice::Control),
            other => Err(Error::Format(format!("unknown target slice id {other}"))),
        }
    }

    pub fn range(self) -> Range<usize> {
        match self {
            TargetSlice::Perception => 0..PERCEPTION_DIM,
            TargetSlice::Control => PERCEPTION_DIM..STEP_DIM,
        }
    }

    pub fn dim(self) -> usize {
        self.range().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetSlice::Perception => "perception",
            TargetSlice::Control => "control",
        }
    }
}

/// Ten consecutive preprocessed steps; index 9 is the current step.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionWindow {
    data: Box<[f64]>,
}

impl ConditionWindow {
    /// Builds from ten already-preprocessed consecutive steps.
    pub fn from_steps(steps: &[StepVector]) -> Self {
        assert_eq!(steps.len(), WINDOW_LEN, "a window holds exactly ten steps");
        let mut data = Vec::with_capacity(WINDOW_LEN * STEP_DIM);
        for s in steps {
            data.extend_from_slice(s);
        }
        Self { data: data.into_boxed_slice() }
    }

    /// Preprocesses ticks t-9..=t of an episode.
    pub fn from_episode(episode: &Episode, t: usize) -> Result<Self> {
        if t < WINDOW_LEN - 1 {
            return Err(Error::InsufficientHistory { tick: t, needed: WINDOW_LEN });
        }
        let records = &episode.records[t + 1 - WINDOW_LEN..=t];
        for pair in records.windows(2) {
            if pair[1].tick != pair[0].tick + 1 {
                return Err(Error::Format(format!(
                    "window ticks not consecutive at {}",
                    pair[1].tick
                )));
            }
        }
        let steps: Vec<StepVector> = records.iter().map(preprocess_step).collect();
        Ok(Self::from_steps(&steps))
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * STEP_DIM..(k + 1) * STEP_DIM]
    }

    /// The model target: the named slice of the current step.
    pub fn target(&self, slice: TargetSlice) -> &[f64] {
        let r = slice.range();
        &self.step(WINDOW_LEN - 1)[r.start..r.end]
    }
}

const DATA_MAGIC: &[u8; 8] = b"TDGDATA1";

/// Streams windows into the packed dataset file; the header is written up
/// front from a precomputed count and verified on finish.
pub struct DatasetWriter {
    w: BufWriter<std::fs::File>,
    declared: u64,
    written: u64,
}

impl DatasetWriter {
    pub fn create(path: &Path, target: TargetSlice, count: u64) -> Result<Self> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(DATA_MAGIC)?;
        w.write_all(&(WINDOW_LEN as u32).to_le_bytes())?;
        w.write_all(&(STEP_DIM as u32).to_le_bytes())?;
        w.write_all(&target.id().to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        Ok(Self { w, declared: count, written: 0 })
    }

    pub fn push(&mut self, window: &ConditionWindow) -> Result<()> {
        for &v in window.flat() {
            self.w.write_all(&(v as f32).to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.declared {
            return Err(Error::Format(format!(
                "dataset declared {} windows but received {}",
                self.declared, self.written
            )));
        }
        self.w.flush()?;
        Ok(())
    }
}

/// Fully loaded dataset; window i is a contiguous 10 x 186 f32 row.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub target: TargetSlice,
    windows: Vec<f32>,
    count: usize,
    fingerprint: String,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut header = [0u8; 8 + 4 + 4 + 4 + 8];
        f.read_exact(&mut header)
            .map_err(|_| Error::Format("dataset header truncated".into()))?;
        if &header[..8] != DATA_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let window_len = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        let step_dim = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes"));
        if window_len as usize != WINDOW_LEN || step_dim as usize != STEP_DIM {
            return Err(Error::Format(format!(
                "dataset geometry {window_len}x{step_dim}, expected {WINDOW_LEN}x{STEP_DIM}"
            )));
        }
        let target = TargetSlice::from_id(u32::from_le_bytes(
            header[16..20].try_into().expect("4 bytes"),
        ))?;
        let count = u64::from_le_bytes(header[20..28].try_into().expect("8 bytes")) as usize;

        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        let expected = count * WINDOW_LEN * STEP_DIM * 4;
        if raw.len() != expected {
            return Err(Error::Format(format!(
                "dataset payload {} bytes, expected {expected}",
                raw.len()
            )));
        }
        let windows: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !windows.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: "dataset payload".into() });
        }

        let mut hasher = Sha256::new();
        hasher.update(header);
        hasher.update(&raw);
        let fingerprint = format!("sha256:{:x}", hasher.finalize());
        Ok(Self {
            target,
            windows,
            count,
            fingerprint,
        })
    }

    /// Content hash of the file this dataset came from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Rejects a dataset built for the other model role.
    pub fn expect_target(&self, target: TargetSlice) -> Result<()> {
        if self.target != target {
            return Err(Error::RoleMismatch {
                expected: target.name().into(),
                found: self.target.name().into(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let w = WINDOW_LEN * STEP_DIM;
        &self.windows[i * w..(i + 1) * w]
    }

    pub fn step(&self, i: usize, k: usize) -> &[f32] {
        &self.window(i)[k * STEP_DIM..(k + 1) * STEP_DIM]
    }
}

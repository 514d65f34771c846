//! Procedural canyon corridors: a smooth centerline of alternating straight
//! and arc segments, per-point corridor half-width, vertical walls, and a
//! seeded roughness field supplying roll/pitch attitude.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::sim::geom::{heading, segments_cross, yaw_of, V2};

/// Point spacing of the sampled centerline, meters of arc length per step.
pub const SAMPLE_SPACING: f64 = 1.0;

/// Vehicle body width; corridor half-width never drops below width + 1 m.
pub const VEHICLE_WIDTH: f64 = 2.0;

const MIN_HALF_WIDTH: f64 = VEHICLE_WIDTH + 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    /// Total centerline arc length, meters.
    pub length: f64,
    /// Corridor width (twice the base half-width), meters.
    pub width: f64,
    /// Curvature intensity in [0, 1]; 0 produces a straight corridor.
    pub curviness: f64,
    /// Wall height, meters.
    pub wall_height: f64,
    /// Number of equal arc-length sections.
    pub section_count: usize,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            length: 900.0,
            width: 20.0,
            curviness: 0.5,
            wall_height: 8.0,
            section_count: 9,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length < 100.0 {
            return Err(Error::Config(format!(
                "terrain.length must be at least 100 m, got {}",
                self.length
            )));
        }
        if !(0.0..=1.0).contains(&self.curviness) {
            return Err(Error::Config(format!(
                "terrain.curviness must lie in [0, 1], got {}",
                self.curviness
            )));
        }
        if self.width / 2.0 < MIN_HALF_WIDTH {
            return Err(Error::Config(format!(
                "terrain.width {} leaves half-width below the {MIN_HALF_WIDTH} m floor",
                self.width
            )));
        }
        if self.wall_height <= 0.0 {
            return Err(Error::Config("terrain.wall_height must be positive".into()));
        }
        if self.section_count == 0 {
            return Err(Error::Config("terrain.section_count must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded sum-of-sines height field; only its slopes are used, as the
/// vehicle's roll and pitch. The drivable ground itself stays flat.
#[derive(Debug, Clone)]
pub struct Roughness {
    waves: Vec<(V2, f64, f64, f64)>, // direction, spatial frequency, phase, amplitude
}

impl Roughness {
    fn from_seed(seed: u64) -> Self {
        let mut rng = derive_rng(seed, "terrain-rough", 0);
        let waves = (0..4)
            .map(|k| {
                let dir_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let wavelength: f64 = rng.gen_range(12.0..40.0);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = 0.12 / (k as f64 + 1.0);
                (
                    V2::new(dir_angle.cos(), dir_angle.sin()),
                    std::f64::consts::TAU / wavelength,
                    phase,
                    amp,
                )
            })
            .collect();
        Self { waves }
    }

    fn gradient(&self, p: V2) -> V2 {
        let mut g = V2::ZERO;
        for &(dir, freq, phase, amp) in &self.waves {
            let c = amp * freq * (freq * p.dot(dir) + phase).cos();
            g = g + dir * c;
        }
        g
    }

    /// (roll, pitch) in degrees at a pose. Pitch is positive when the ground
    /// rises ahead; roll is positive when it rises to the right.
    pub fn attitude(&self, p: V2, yaw_deg: f64) -> (f64, f64) {
        let g = self.gradient(p);
        let fwd = heading(yaw_deg);
        let right = V2::new(fwd.y, -fwd.x);
        let pitch = g.dot(fwd).atan().to_degrees();
        let roll = g.dot(right).atan().to_degrees();
        (roll, pitch)
    }
}

/// Closest-centerline query result.
#[derive(Debug, Clone, Copy)]
pub struct Location {
    pub segment: usize,
    pub t: f64,
    pub closest: V2,
    pub arc_len: f64,
    /// Signed lateral offset, positive left of the travel direction.
    pub offset: f64,
    pub tangent: V2,
    pub beyond_start: bool,
    pub beyond_end: bool,
}

#[derive(Debug, Clone)]
pub struct Terrain {
    id: String,
    seed: u64,
    config: TerrainConfig,
    centerline: Vec<V2>,
    half_width: Vec<f64>,
    cum_len: Vec<f64>,
    tangents: Vec<V2>,
    left_wall: Vec<V2>,
    right_wall: Vec<V2>,
    roughness: Roughness,
}

/// On-disk JSON form; derived geometry is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct TerrainFile {
    format: String,
    id: String,
    seed: u64,
    config: TerrainConfig,
    centerline: Vec<V2>,
    half_width: Vec<f64>,
}

const FORMAT: &str = "TDGTERR1";

pub fn generate_terrain(seed: u64, config: &TerrainConfig) -> Result<Terrain> {
    config.validate()?;
    let mut rng = derive_rng(seed, "terrain-path", 0);

    let total_steps = (config.length / SAMPLE_SPACING).floor() as usize;
    let remainder = config.length - total_steps as f64 * SAMPLE_SPACING;

    let mut points = Vec::with_capacity(total_steps + 2);
    points.push(V2::ZERO);
    // Track the path direction as a math angle; the corridor starts due
    // north so the initial vehicle yaw is 0.
    let mut theta = std::f64::consts::FRAC_PI_2;
    let mut steps_taken = 0usize;
    let mut turn_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut straight_phase = true;

    while steps_taken < total_steps {
        if straight_phase {
            let steps = rng.gen_range(40..=80).min(total_steps - steps_taken);
            for _ in 0..steps {
                let p = *points.last().expect("nonempty");
                points.push(p + V2::new(theta.cos(), theta.sin()) * SAMPLE_SPACING);
            }
            steps_taken += steps;
        } else {
            let radius: f64 = rng.gen_range(35.0..90.0);
            let turn: f64 = rng.gen_range(0.2..1.0) * 1.6 * config.curviness;
            if rng.gen_bool(0.7) {
                turn_sign = -turn_sign;
            }
            // Chord-exact stepping: each step advances exactly one sample
            // spacing of polyline length while staying on the arc.
            let dphi = 2.0 * (SAMPLE_SPACING / (2.0 * radius)).asin() * turn_sign;
            let steps = ((turn * radius / SAMPLE_SPACING).round() as usize)
                .min(total_steps - steps_taken);
            for _ in 0..steps {
                let p = *points.last().expect("nonempty");
                let mid = theta + dphi / 2.0;
                points.push(p + V2::new(mid.cos(), mid.sin()) * SAMPLE_SPACING);
                theta += dphi;
            }
            steps_taken += steps;
        }
        straight_phase = !straight_phase;
    }
    if remainder > 1e-9 {
        let p = *points.last().expect("nonempty");
        points.push(p + V2::new(theta.cos(), theta.sin()) * remainder);
    }

    // Slowly varying corridor width.
    let base = config.width / 2.0;
    let mut wrng = derive_rng(seed, "terrain-width", 0);
    let lam1: f64 = wrng.gen_range(80.0..200.0);
    let lam2: f64 = wrng.gen_range(80.0..200.0);
    let ph1: f64 = wrng.gen_range(0.0..std::f64::consts::TAU);
    let ph2: f64 = wrng.gen_range(0.0..std::f64::consts::TAU);
    let half_width: Vec<f64> = (0..points.len())
        .map(|i| {
            let s = (i as f64 * SAMPLE_SPACING).min(config.length);
            let v = base
                * (1.0
                    + 0.15 * (std::f64::consts::TAU * s / lam1 + ph1).sin()
                    + 0.10 * (std::f64::consts::TAU * s / lam2 + ph2).sin());
            v.max(MIN_HALF_WIDTH)
        })
        .collect();

    let id = format!(
        "terrain-s{seed}-L{:.0}-W{:.0}-C{:.2}",
        config.length, config.width, config.curviness
    );
    Terrain::assemble(id, seed, *config, points, half_width)
}

impl Terrain {
    /// Builds a terrain from explicit geometry, revalidating every
    /// invariant. Loading and generation both funnel through here.
    pub fn from_parts(
        id: String,
        seed: u64,
        config: TerrainConfig,
        centerline: Vec<V2>,
        half_width: Vec<f64>,
    ) -> Result<Terrain> {
        Terrain::assemble(id, seed, config, centerline, half_width)
    }

    fn assemble(
        id: String,
        seed: u64,
        config: TerrainConfig,
        centerline: Vec<V2>,
        half_width: Vec<f64>,
    ) -> Result<Terrain> {
        if centerline.len() < 2 {
            return Err(Error::TerrainGeneration("centerline needs at least 2 points".into()));
        }
        if half_width.len() != centerline.len() {
            return Err(Error::TerrainGeneration(format!(
                "half_width count {} does not match centerline count {}",
                half_width.len(),
                centerline.len()
            )));
        }
        if let Some(w) = half_width.iter().find(|w| **w < MIN_HALF_WIDTH - 1e-9) {
            return Err(Error::TerrainGeneration(format!(
                "half-width {w} below the {MIN_HALF_WIDTH} m floor"
            )));
        }

        let n = centerline.len();
        let mut cum_len = Vec::with_capacity(n);
        let mut acc = 0.0;
        cum_len.push(0.0);
        for i in 1..n {
            acc += centerline[i].dist(centerline[i - 1]);
            cum_len.push(acc);
        }

        let mut tangents = Vec::with_capacity(n);
        for i in 0..n {
            let t = if i == 0 {
                centerline[1] - centerline[0]
            } else if i == n - 1 {
                centerline[n - 1] - centerline[n - 2]
            } else {
                centerline[i + 1] - centerline[i - 1]
            };
            tangents.push(t.unit());
        }

        let left_wall: Vec<V2> = (0..n)
            .map(|i| centerline[i] + tangents[i].perp_left() * half_width[i])
            .collect();
        let right_wall: Vec<V2> = (0..n)
            .map(|i| centerline[i] - tangents[i].perp_left() * half_width[i])
            .collect();

        let terrain = Terrain {
            id,
            seed,
            config,
            centerline,
            half_width,
            cum_len,
            tangents,
            left_wall,
            right_wall,
            roughness: Roughness::from_seed(seed),
        };
        terrain.check_self_intersection()?;
        Ok(terrain)
    }

    /// Reject corridors whose walls cross themselves or each other.
    fn check_self_intersection(&self) -> Result<()> {
        let walls = [&self.left_wall, &self.right_wall];
        let mut segs: Vec<(usize, V2, V2)> = Vec::new();
        for (w, wall) in walls.iter().enumerate() {
            for i in 0..wall.len() - 1 {
                segs.push((w * wall.len() + i, wall[i], wall[i + 1]));
            }
        }
        let half = self.left_wall.len() - 1;
        for i in 0..segs.len() {
            for j in (i + 1)..segs.len() {
                let same_wall = (i < half) == (j < half);
                if same_wall && j - i <= 1 {
                    continue;
                }
                let (_, a, b) = segs[i];
                let (_, c, d) = segs[j];
                // Cheap reject before the orientation tests.
                if a.x.min(b.x) > c.x.max(d.x) + 0.0
                    || c.x.min(d.x) > a.x.max(b.x)
                    || a.y.min(b.y) > c.y.max(d.y)
                    || c.y.min(d.y) > a.y.max(b.y)
                {
                    continue;
                }
                if segments_cross(a, b, c, d) {
                    return Err(Error::TerrainGeneration(format!(
                        "corridor walls self-intersect near ({:.1}, {:.1})",
                        a.x, a.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &TerrainConfig {
        &self.config
    }

    pub fn length(&self) -> f64 {
        self.config.length
    }

    pub fn centerline(&self) -> &[V2] {
        &self.centerline
    }

    pub fn walls(&self) -> (&[V2], &[V2]) {
        (&self.left_wall, &self.right_wall)
    }

    pub fn wall_height(&self) -> f64 {
        self.config.wall_height
    }

    pub fn start(&self) -> V2 {
        self.centerline[0]
    }

    pub fn end(&self) -> V2 {
        *self.centerline.last().expect("nonempty")
    }

    pub fn start_yaw(&self) -> f64 {
        yaw_of(self.tangents[0])
    }

    pub fn roughness(&self) -> &Roughness {
        &self.roughness
    }

    /// Closest point on the centerline. `hint` narrows the search to the
    /// neighborhood of a previous result; the full polyline is scanned when
    /// the hint turns out to be stale.
    pub fn locate(&self, p: V2, hint: Option<usize>) -> Location {
        let n_seg = self.centerline.len() - 1;
        let scan = |lo: usize, hi: usize| -> (usize, f64, f64) {
            let mut best = (0usize, 0.0f64, f64::INFINITY);
            for i in lo..hi {
                let a = self.centerline[i];
                let b = self.centerline[i + 1];
                let t = crate::sim::geom::project_t(p, a, b);
                let q = a + (b - a) * t;
                let d2 = (p - q).dot(p - q);
                if d2 < best.2 {
                    best = (i, t, d2);
                }
            }
            best
        };

        let (mut seg, mut t, mut d2) = match hint {
            Some(h) => {
                let lo = h.saturating_sub(40);
                let hi = (h + 40).min(n_seg);
                scan(lo, hi)
            }
            None => scan(0, n_seg),
        };
        if hint.is_some() {
            // A windowed result farther than the widest corridor means the
            // hint went stale; rescan everything.
            let max_hw = self.half_width.iter().cloned().fold(0.0, f64::max);
            if d2.sqrt() > max_hw + 5.0 {
                let full = scan(0, n_seg);
                seg = full.0;
                t = full.1;
                d2 = full.2;
            }
        }
        let _ = d2;

        let a = self.centerline[seg];
        let b = self.centerline[seg + 1];
        let e = b - a;
        let closest = a + e * t;
        let tangent = e.unit();
        let offset = tangent.cross(p - closest);
        let seg_len = self.cum_len[seg + 1] - self.cum_len[seg];
        let arc_len = self.cum_len[seg] + t * seg_len;

        let raw_first = if e.dot(e) > 0.0 { (p - a).dot(e) / e.dot(e) } else { 0.0 };
        let beyond_start = seg == 0 && raw_first < -1e-12;
        let beyond_end = seg == n_seg - 1 && raw_first > 1.0 + 1e-12;

        Location {
            segment: seg,
            t,
            closest,
            arc_len,
            offset,
            tangent,
            beyond_start,
            beyond_end,
        }
    }

    /// Signed perpendicular distance from the centerline, positive left of
    /// the travel direction. Positions beyond either end are an error.
    pub fn lateral_offset(&self, p: V2) -> Result<f64> {
        let loc = self.locate(p, None);
        if loc.beyond_start || loc.beyond_end {
            return Err(Error::PositionOutOfRange);
        }
        Ok(loc.offset)
    }

    /// Corridor half-width at an arc-length position, linearly interpolated.
    pub fn half_width_at(&self, arc_len: f64) -> f64 {
        let i = self
            .cum_len
            .partition_point(|&c| c <= arc_len)
            .clamp(1, self.cum_len.len() - 1);
        let (c0, c1) = (self.cum_len[i - 1], self.cum_len[i]);
        let t = if c1 > c0 { ((arc_len - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        self.half_width[i - 1] * (1.0 - t) + self.half_width[i] * t
    }

    /// Centerline point at an arc-length position, clamped to the ends.
    pub fn point_at(&self, arc_len: f64) -> V2 {
        let total = *self.cum_len.last().expect("nonempty");
        let s = arc_len.clamp(0.0, total);
        let i = self
            .cum_len
            .partition_point(|&c| c <= s)
            .clamp(1, self.cum_len.len() - 1);
        let (c0, c1) = (self.cum_len[i - 1], self.cum_len[i]);
        let t = if c1 > c0 { (s - c0) / (c1 - c0) } else { 0.0 };
        self.centerline[i - 1] + (self.centerline[i] - self.centerline[i - 1]) * t
    }

    /// Unsigned curvature near an arc-length position, from the tangent turn
    /// rate of the sampled polyline.
    pub fn curvature_at(&self, arc_len: f64) -> f64 {
        let total = *self.cum_len.last().expect("nonempty");
        let s = arc_len.clamp(0.0, total);
        let i = self
            .cum_len
            .partition_point(|&c| c <= s)
            .clamp(1, self.tangents.len() - 1);
        let t0 = self.tangents[i - 1];
        let t1 = self.tangents[i];
        let ds = (self.cum_len[i] - self.cum_len[i - 1]).max(1e-9);
        let dangle = t0.cross(t1).asin().abs();
        dangle / ds
    }

    pub fn total_arc_len(&self) -> f64 {
        *self.cum_len.last().expect("nonempty")
    }

    pub fn section_len(&self) -> f64 {
        self.total_arc_len() / self.config.section_count as f64
    }

    pub fn section_count(&self) -> usize {
        self.config.section_count
    }

    /// Section index in [0, section_count) for an arc-length position.
    pub fn section_index(&self, arc_len: f64) -> usize {
        let idx = (arc_len / self.section_len()).floor() as isize;
        idx.clamp(0, self.config.section_count as isize - 1) as usize
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TerrainFile {
            format: FORMAT.to_string(),
            id: self.id.clone(),
            seed: self.seed,
            config: self.config,
            centerline: self.centerline.clone(),
            half_width: self.half_width.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Terrain> {
        let text = std::fs::read_to_string(path)?;
        let file: TerrainFile =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("terrain file: {e}")))?;
        if file.format != FORMAT {
            return Err(Error::Format(format!(
                "terrain format {:?}, expected {FORMAT:?}",
                file.format
            )));
        }
        Terrain::assemble(file.id, file.seed, file.config, file.centerline, file.half_width)
    }
}

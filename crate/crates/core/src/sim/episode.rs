//! Closed-loop episode runner and the line-delimited episode log format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::lidar::lidar_scan;
use crate::sim::terrain::Terrain;
use crate::sim::vehicle::{step_vehicle, RawControl, VehicleState, DT, VEHICLE_RADIUS};

/// Arriving within this distance of the centerline end completes an episode.
pub const ARRIVAL_RADIUS: f64 = 5.0;

const LOG_MAGIC: &str = "TDGLOG1";

/// Closed-loop controller driven by the episode loop, one call per tick.
/// Scripted drivers steer off the terrain directly; model-backed drivers
/// consume the scan. Implementations must be deterministic given
/// (reset seed, tick).
pub trait Driver {
    fn id(&self) -> &str;
    /// Clears per-episode state and fixes the episode's noise stream.
    fn reset(&mut self, episode_seed: u64);
    fn act(
        &mut self,
        terrain: &Terrain,
        state: &VehicleState,
        lidar: &[[f64; 3]],
        tick: u64,
    ) -> Result<RawControl>;
}

#[derive(Debug, Clone)]
pub struct TimestepRecord {
    pub tick: u64,
    /// Seconds; exactly tick * 0.1.
    pub time: f64,
    pub control: RawControl,
    pub state: VehicleState,
    pub lidar: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub terrain_id: String,
    pub driver_id: String,
    pub seed: u64,
    pub records: Vec<TimestepRecord>,
    pub completed: bool,
    pub collision_count: u64,
}

/// Runs one closed-loop episode: scan, act, log, then step, clamping the
/// vehicle against the walls. Wall contact does not end the episode; the
/// vehicle slides, and each fresh contact increments the collision count.
pub fn run_episode(
    terrain: &Terrain,
    driver: &mut dyn Driver,
    seed: u64,
    tick_limit: u64,
) -> Result<Episode> {
    driver.reset(seed);
    let start = terrain.start();
    let yaw = terrain.start_yaw();
    let (roll, pitch) = terrain.roughness().attitude(start, yaw);
    let mut state = VehicleState { pos: start, yaw, roll, pitch, speed: 0.0 };

    let mut records = Vec::new();
    let mut completed = false;
    let mut collision_count = 0u64;
    let mut in_contact = false;
    let mut hint = None;

    for tick in 0..tick_limit {
        let lidar = lidar_scan(terrain, &state);
        let control = driver.act(terrain, &state, &lidar, tick)?;
        records.push(TimestepRecord {
            tick,
            time: tick as f64 * DT,
            control,
            state,
            lidar,
        });

        if state.pos.dist(terrain.end()) <= ARRIVAL_RADIUS {
            completed = true;
            break;
        }

        state = step_vehicle(&state, control, DT, terrain.roughness());

        // Wall containment: treat the body as a circle and slide it back
        // inside the corridor when it scrapes.
        let loc = terrain.locate(state.pos, hint);
        hint = Some(loc.segment);
        let hw = terrain.half_width_at(loc.arc_len);
        let limit = hw - VEHICLE_RADIUS;
        if loc.offset.abs() > limit {
            if !in_contact {
                collision_count += 1;
                in_contact = true;
            }
            let clamped = loc.closest + loc.tangent.perp_left() * (limit * loc.offset.signum());
            let (r, p) = terrain.roughness().attitude(clamped, state.yaw);
            state.pos = clamped;
            state.roll = r;
            state.pitch = p;
        } else {
            in_contact = false;
        }
    }

    Ok(Episode {
        terrain_id: terrain.id().to_string(),
        driver_id: driver.id().to_string(),
        seed,
        records,
        completed,
        collision_count,
    })
}

impl Episode {
    /// Writes the log: a header line, then one line per tick with pose and
    /// control at full precision and scan points at millimeter precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "{LOG_MAGIC} terrain={} driver={} seed={} ticks={} completed={} collisions={}",
            self.terrain_id,
            self.driver_id,
            self.seed,
            self.records.len(),
            self.completed,
            self.collision_count
        )?;
        for r in &self.records {
            write!(
                w,
                "{} {} {} {} {} {} {} {} {} {} {} {}",
                r.tick,
                r.time,
                r.control.steer(),
                r.control.accel(),
                r.control.brake(),
                r.state.pos.x,
                r.state.pos.y,
                r.state.yaw,
                r.state.roll,
                r.state.pitch,
                r.state.speed,
                r.lidar.len()
            )?;
            for p in &r.lidar {
                write!(w, " {:.3} {:.3} {:.3}", p[0], p[1], p[2])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Episode> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty episode log".into()))??;
        let (terrain_id, driver_id, seed, ticks, completed, collision_count) =
            parse_header(&header)?;

        let mut records = Vec::with_capacity(ticks);
        let mut prev_tick: Option<u64> = None;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let r = parse_record(&line)?;
            if let Some(p) = prev_tick {
                if r.tick <= p {
                    return Err(Error::Format(format!(
                        "episode ticks not strictly increasing at {}",
                        r.tick
                    )));
                }
            }
            prev_tick = Some(r.tick);
            records.push(r);
        }
        if records.len() != ticks {
            return Err(Error::Format(format!(
                "episode log declares {ticks} ticks but holds {}",
                records.len()
            )));
        }
        Ok(Episode {
            terrain_id,
            driver_id,
            seed,
            records,
            completed,
            collision_count,
        })
    }

    /// Header fields only, without materializing the records. The dataset
    /// builder uses this to size its output before a second streaming pass.
    pub fn peek_header(path: &Path) -> Result<(String, String, u64, usize, bool, u64)> {
        let file = std::fs::File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        parse_header(header.trim_end())
    }

    /// Streams records one at a time without holding the episode in memory.
    pub fn stream(path: &Path) -> Result<impl Iterator<Item = Result<TimestepRecord>>> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(h)) => {
                parse_header(h.trim_end())?;
            }
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Format("empty episode log".into())),
        }
        Ok(lines.filter_map(|line| match line {
            Ok(l) if l.is_empty() => None,
            Ok(l) => Some(parse_record(&l)),
            Err(e) => Some(Err(e.into())),
        }))
    }
}

fn parse_header(header: &str) -> Result<(String, String, u64, usize, bool, u64)> {
    let mut parts = header.split_whitespace();
    let magic = parts.next().unwrap_or_default();
    if magic != LOG_MAGIC {
        return Err(Error::Format(format!(
            "episode log starts with {magic:?}, expected {LOG_MAGIC:?}"
        )));
    }
    let mut terrain = None;
    let mut driver = None;
    let mut seed = None;
    let mut ticks = None;
    let mut completed = None;
    let mut collisions = None;
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header field {kv:?}")))?;
        match k {
            "terrain" => terrain = Some(v.to_string()),
            "driver" => driver = Some(v.to_string()),
            "seed" => seed = Some(parse_num::<u64>(v, "seed")?),
            "ticks" => ticks = Some(parse_num::<usize>(v, "ticks")?),
            "completed" => completed = Some(parse_num::<bool>(v, "completed")?),
            "collisions" => collisions = Some(parse_num::<u64>(v, "collisions")?),
            other => return Err(Error::Format(format!("unknown header field {other:?}"))),
        }
    }
    match (terrain, driver, seed, ticks, completed, collisions) {
        (Some(t), Some(d), Some(s), Some(n), Some(c), Some(k)) => Ok((t, d, s, n, c, k)),
        _ => Err(Error::Format("episode header missing fields".into())),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Format(format!("bad {what} value {v:?}")))
}

fn parse_record(line: &str) -> Result<TimestepRecord> {
    let mut it = line.split_ascii_whitespace();
    let mut next_f64 = |what: &str| -> Result<f64> {
        it.next()
            .ok_or_else(|| Error::Format(format!("episode record truncated before {what}")))?
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("bad {what} in episode record")))
    };
    let tick = next_f64("tick")? as u64;
    let time = next_f64("time")?;
    let steer = next_f64("steer")?;
    let accel = next_f64("accel")?;
    let brake = next_f64("brake")?;
    let x = next_f64("x")?;
    let y = next_f64("y")?;
    let yaw = next_f64("yaw")?;
    let roll = next_f64("roll")?;
    let pitch = next_f64("pitch")?;
    let speed = next_f64("speed")?;
    let count = next_f64("point count")? as usize;
    let mut lidar = Vec::with_capacity(count);
    for _ in 0..count {
        let px = next_f64("point x")?;
        let py = next_f64("point y")?;
        let pz = next_f64("point z")?;
        lidar.push([px, py, pz]);
    }
    if it.next().is_some() {
        return Err(Error::Format("trailing fields in episode record".into()));
    }
    Ok(TimestepRecord {
        tick,
        time,
        control: RawControl::new(steer, accel, brake),
        state: VehicleState {
            pos: crate::sim::geom::V2::new(x, y),
            yaw,
            roll,
            pitch,
            speed,
        },
        lidar,
    })
}

//! Driving-behavior metrics and population comparison reports.
//!
//! Four scalar metrics summarize an episode: lateral-position variability
//! (SDLP), speed variability (SDS), mean speed, and course completion time
//! (DCT). Comparisons aggregate them per course section, regress one
//! population's section means on the other's, and t-test the whole-episode
//! values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::stats::{linear_regression, pearson_r, welch_t_test};
use crate::sim::episode::Episode;
use crate::sim::terrain::Terrain;
use crate::sim::vehicle::DT;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrivingMetrics {
    pub sdlp: f64,
    pub sds: f64,
    pub avg_speed: f64,
    pub dct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Sdlp,
    Sds,
    AvgSpeed,
    Dct,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Sdlp, Metric::Sds, Metric::AvgSpeed, Metric::Dct];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sdlp => "sdlp",
            Metric::Sds => "sds",
            Metric::AvgSpeed => "avg_speed",
            Metric::Dct => "dct",
        }
    }

    pub fn pick(self, m: &DrivingMetrics) -> f64 {
        match self {
            Metric::Sdlp => m.sdlp,
            Metric::Sds => m.sds,
            Metric::AvgSpeed => m.avg_speed,
            Metric::Dct => m.dct,
        }
    }
}

/// Population standard deviation, n denominator: these are summaries of the
/// full recorded signal, not estimates from a subsample.
fn population_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Whole-episode metrics. DCT spans first to last record.
pub fn compute_metrics(episode: &Episode, terrain: &Terrain) -> Result<DrivingMetrics> {
    if episode.records.len() < 2 {
        return Err(Error::TooFewRecords {
            needed: 2,
            got: episode.records.len(),
        });
    }
    let mut offsets = Vec::with_capacity(episode.records.len());
    let mut speeds = Vec::with_capacity(episode.records.len());
    let mut hint = None;
    for r in &episode.records {
        let loc = terrain.locate(r.state.pos, hint);
        hint = Some(loc.segment);
        offsets.push(loc.offset);
        speeds.push(r.state.speed);
    }
    let first = episode.records.first().expect("len checked");
    let last = episode.records.last().expect("len checked");
    Ok(DrivingMetrics {
        sdlp: population_sd(&offsets),
        sds: population_sd(&speeds),
        avg_speed: speeds.iter().sum::<f64>() / speeds.len() as f64,
        dct: last.time - first.time,
    })
}

/// Metrics of the records falling in one section of one episode. Section DCT
/// is occupancy time at the sampling resolution.
fn section_episode_metrics(offsets: &[f64], speeds: &[f64]) -> DrivingMetrics {
    DrivingMetrics {
        sdlp: population_sd(offsets),
        sds: population_sd(speeds),
        avg_speed: speeds.iter().sum::<f64>() / speeds.len() as f64,
        dct: speeds.len() as f64 * DT,
    }
}

/// Per-section metrics averaged across a population. A section no episode
/// visited is `None` and stays out of downstream regressions.
pub fn section_metrics(
    episodes: &[Episode],
    terrain: &Terrain,
) -> Result<Vec<Option<DrivingMetrics>>> {
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sections = terrain.section_count();
    let mut sums = vec![(0usize, [0.0f64; 4]); sections];
    for episode in episodes {
        let mut offsets = vec![Vec::new(); sections];
        let mut speeds = vec![Vec::new(); sections];
        let mut hint = None;
        for r in &episode.records {
            let loc = terrain.locate(r.state.pos, hint);
            hint = Some(loc.segment);
            let s = terrain.section_index(loc.arc_len);
            offsets[s].push(loc.offset);
            speeds[s].push(r.state.speed);
        }
        for s in 0..sections {
            if offsets[s].is_empty() {
                continue;
            }
            let m = section_episode_metrics(&offsets[s], &speeds[s]);
            let (count, acc) = &mut sums[s];
            *count += 1;
            for (slot, metric) in acc.iter_mut().zip(Metric::ALL) {
                *slot += metric.pick(&m);
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(count, acc)| {
            (count > 0).then(|| DrivingMetrics {
                sdlp: acc[0] / count as f64,
                sds: acc[1] / count as f64,
                avg_speed: acc[2] / count as f64,
                dct: acc[3] / count as f64,
            })
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct SectionRow {
    pub metric: &'static str,
    pub section: usize,
    pub mean_drivers: f64,
    pub mean_model: f64,
}

#[derive(Clone, Debug)]
pub struct CorrelationRow {
    pub metric: &'static str,
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

#[derive(Clone, Debug)]
pub struct TTestRow {
    pub metric: &'static str,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_a: f64,
    pub sd_a: f64,
    pub mean_b: f64,
    pub sd_b: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ComparisonReport {
    pub sections: Vec<SectionRow>,
    pub correlations: Vec<CorrelationRow>,
    pub ttests: Vec<TTestRow>,
}

/// Compare a reference population against a candidate one on the same course.
/// Section rows cover sections both populations visited; the regression fits
/// candidate section means on reference section means; the t test runs on
/// whole-episode values.
pub fn compare_populations(
    drivers: &[Episode],
    model: &[Episode],
    terrain: &Terrain,
) -> Result<ComparisonReport> {
    let driver_sections = section_metrics(drivers, terrain)?;
    let model_sections = section_metrics(model, terrain)?;

    let driver_whole: Vec<DrivingMetrics> = drivers
        .iter()
        .map(|e| compute_metrics(e, terrain))
        .collect::<Result<_>>()?;
    let model_whole: Vec<DrivingMetrics> = model
        .iter()
        .map(|e| compute_metrics(e, terrain))
        .collect::<Result<_>>()?;

    let mut report = ComparisonReport::default();
    for metric in Metric::ALL {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (section, (a, b)) in driver_sections.iter().zip(&model_sections).enumerate() {
            if let (Some(a), Some(b)) = (a, b) {
                let (x, y) = (metric.pick(a), metric.pick(b));
                xs.push(x);
                ys.push(y);
                report.sections.push(SectionRow {
                    metric: metric.name(),
                    section,
                    mean_drivers: x,
                    mean_model: y,
                });
            }
        }
        let fit = linear_regression(&xs, &ys)?;
        let r = pearson_r(&xs, &ys)?;
        report.correlations.push(CorrelationRow {
            metric: metric.name(),
            slope: fit.slope,
            intercept: fit.intercept,
            r,
        });

        let a: Vec<f64> = driver_whole.iter().map(|m| metric.pick(m)).collect();
        let b: Vec<f64> = model_whole.iter().map(|m| metric.pick(m)).collect();
        let t = welch_t_test(&a, &b)?;
        report.ttests.push(TTestRow {
            metric: metric.name(),
            t: t.t,
            df: t.df,
            p: t.p,
            mean_a: t.mean_a,
            sd_a: t.sd_a,
            mean_b: t.mean_b,
            sd_b: t.sd_b,
        });
    }
    Ok(report)
}

/// Emit the three report CSVs into `dir`. Floats print in shortest
/// round-trip form, so identical reports serialize identically.
pub fn write_reports(report: &ComparisonReport, dir: &Path) -> Result<()> {
    let mut sections = String::from("metric,section,mean_drivers,mean_model\n");
    for row in &report.sections {
        sections.push_str(&format!(
            "{},{},{},{}\n",
            row.metric, row.section, row.mean_drivers, row.mean_model
        ));
    }
    std::fs::write(dir.join("sections.csv"), sections)?;

    let mut correlation = String::from("metric,slope,intercept,r\n");
    for row in &report.correlations {
        correlation.push_str(&format!(
            "{},{},{},{}\n",
            row.metric, row.slope, row.intercept, row.r
        ));
    }
    std::fs::write(dir.join("correlation.csv"), correlation)?;

    let mut ttest = String::from("metric,t,df,p,mean_a,sd_a,mean_b,sd_b\n");
    for row in &report.ttests {
        ttest.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.metric, row.t, row.df, row.p, row.mean_a, row.sd_a, row.mean_b, row.sd_b
        ));
    }
    std::fs::write(dir.join("ttest.csv"), ttest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::episode::TimestepRecord;
    use crate::sim::terrain::{generate_terrain, TerrainConfig};
    use crate::sim::vehicle::{RawControl, VehicleState};

    fn straight_terrain() -> Terrain {
        let config = TerrainConfig {
            curviness: 0.0,
            ..TerrainConfig::default()
        };
        generate_terrain(5, &config).unwrap()
    }

    /// Fabricate an episode gliding along the centerline with prescribed
    /// lateral offsets and speeds, advancing by speed * DT per record the way
    /// a real vehicle would.
    fn synthetic_episode(
        terrain: &Terrain,
        offsets: impl Fn(usize) -> f64,
        speeds: impl Fn(usize) -> f64,
        max_arc: f64,
    ) -> Episode {
        let mut records = Vec::new();
        let mut tick = 0u64;
        let mut arc = 0.0;
        while arc < max_arc {
            let center = terrain.point_at(arc);
            let loc = terrain.locate(center, None);
            let pos = center + loc.tangent.perp_left() * offsets(tick as usize);
            let speed = speeds(tick as usize);
            records.push(TimestepRecord {
                tick,
                time: tick as f64 * DT,
                control: RawControl::coast(),
                state: VehicleState {
                    pos,
                    yaw: 0.0,
                    roll: 0.0,
                    pitch: 0.0,
                    speed,
                },
                lidar: Vec::new(),
            });
            tick += 1;
            arc += speed * DT;
        }
        Episode {
            terrain_id: terrain.id().to_string(),
            driver_id: "synthetic".into(),
            seed: 0,
            records,
            completed: true,
            collision_count: 0,
        }
    }

    #[test]
    fn metrics_match_hand_computation() {
        let terrain = straight_terrain();
        // Offsets alternate +0.5/-0.5: population SD exactly 0.5. Constant
        // speed 10: SDS 0, mean 10.
        let episode = synthetic_episode(
            &terrain,
            |i| if i % 2 == 0 { 0.5 } else { -0.5 },
            |_| 10.0,
            100.0,
        );
        let m = compute_metrics(&episode, &terrain).unwrap();
        assert!((m.sdlp - 0.5).abs() < 1e-12);
        assert!(m.sds.abs() < 1e-12);
        assert!((m.avg_speed - 10.0).abs() < 1e-12);
        let expect_dct = (episode.records.len() - 1) as f64 * DT;
        assert!((m.dct - expect_dct).abs() < 1e-12);
    }

    #[test]
    fn too_few_records_is_an_error() {
        let terrain = straight_terrain();
        let mut episode = synthetic_episode(&terrain, |_| 0.0, |_| 5.0, 100.0);
        episode.records.truncate(1);
        assert!(matches!(
            compute_metrics(&episode, &terrain),
            Err(Error::TooFewRecords { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn sections_cover_the_course_and_average_occupancy() {
        let terrain = straight_terrain();
        let episode = synthetic_episode(&terrain, |_| 0.25, |_| 12.0, 899.5);
        let sections = section_metrics(&[episode], &terrain).unwrap();
        assert_eq!(sections.len(), 9);
        for s in &sections {
            let m = s.expect("every section visited");
            assert!((m.avg_speed - 12.0).abs() < 1e-12);
            // Roughly 100 m / 12 m/s of occupancy, give or take one record.
            assert!((m.dct - 100.0 / 12.0).abs() < 2.0 * DT, "dct {}", m.dct);
            assert!(m.sdlp.abs() < 1e-9);
        }
    }

    #[test]
    fn unvisited_sections_stay_missing() {
        let terrain = straight_terrain();
        let episode = synthetic_episode(&terrain, |_| 0.0, |_| 8.0, 440.0);
        let sections = section_metrics(&[episode], &terrain).unwrap();
        assert!(sections[0].is_some());
        assert!(sections[3].is_some());
        assert!(sections[5].is_none());
        assert!(sections[8].is_none());
        assert!(matches!(
            section_metrics(&[], &terrain),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn self_comparison_is_perfect() {
        let terrain = straight_terrain();
        let population: Vec<Episode> = (0..3)
            .map(|k| {
                synthetic_episode(
                    &terrain,
                    move |i| 0.3 * ((i + 7 * k) as f64 * 0.37).sin(),
                    move |i| 9.0 + k as f64 * 0.5 + (i as f64 * 0.11).cos(),
                    899.5,
                )
            })
            .collect();
        let report = compare_populations(&population, &population, &terrain).unwrap();

        assert_eq!(report.sections.len(), 4 * 9);
        for row in &report.sections {
            assert_eq!(row.mean_drivers, row.mean_model);
        }
        assert_eq!(report.correlations.len(), 4);
        for row in &report.correlations {
            assert!((row.r - 1.0).abs() < 1e-12, "{}: r = {}", row.metric, row.r);
            assert!((row.slope - 1.0).abs() < 1e-9);
            assert!(row.intercept.abs() < 1e-9);
        }
        assert_eq!(report.ttests.len(), 4);
        for row in &report.ttests {
            assert_eq!(row.t, 0.0);
            assert_eq!(row.p, 1.0);
            assert_eq!(row.mean_a, row.mean_b);
        }
    }

    #[test]
    fn distinct_populations_move_the_test_statistics() {
        let terrain = straight_terrain();
        let calm: Vec<Episode> = (0..3)
            .map(|k| {
                synthetic_episode(
                    &terrain,
                    move |i| 0.1 * ((i + k) as f64 * 0.29).sin(),
                    move |i| 10.0 + k as f64 * 0.1 + 0.3 * (i as f64 * 0.13).sin(),
                    899.5,
                )
            })
            .collect();
        let wild: Vec<Episode> = (0..3)
            .map(|k| {
                synthetic_episode(
                    &terrain,
                    move |i| 0.8 * ((i + 3 * k) as f64 * 0.31).sin(),
                    move |i| 13.0 + k as f64 * 0.1 + 0.4 * (i as f64 * 0.19).sin(),
                    899.5,
                )
            })
            .collect();
        let report = compare_populations(&calm, &wild, &terrain).unwrap();
        let sdlp = &report.ttests[0];
        assert_eq!(sdlp.metric, "sdlp");
        assert!(sdlp.mean_b > sdlp.mean_a * 3.0);
        let speed = &report.ttests[2];
        assert_eq!(speed.metric, "avg_speed");
        assert!(speed.p < 0.05, "clearly separated means, got p = {}", speed.p);
    }

    #[test]
    fn csv_emission_is_stable_and_well_formed() {
        let terrain = straight_terrain();
        let population: Vec<Episode> = (0..2)
            .map(|k| {
                synthetic_episode(
                    &terrain,
                    move |i| 0.2 * ((i + k) as f64 * 0.41).sin(),
                    move |i| 11.0 + ((i + 2 * k) as f64 * 0.17).sin(),
                    899.5,
                )
            })
            .collect();
        let report = compare_populations(&population, &population, &terrain).unwrap();

        let dir = tempfile::tempdir().unwrap();
        write_reports(&report, dir.path()).unwrap();
        let sections = std::fs::read_to_string(dir.path().join("sections.csv")).unwrap();
        let correlation = std::fs::read_to_string(dir.path().join("correlation.csv")).unwrap();
        let ttest = std::fs::read_to_string(dir.path().join("ttest.csv")).unwrap();

        assert!(sections.starts_with("metric,section,mean_drivers,mean_model\n"));
        assert_eq!(sections.lines().count(), 1 + 36);
        assert!(correlation.starts_with("metric,slope,intercept,r\n"));
        assert_eq!(correlation.lines().count(), 1 + 4);
        assert!(ttest.starts_with("metric,t,df,p,mean_a,sd_a,mean_b,sd_b\n"));
        assert_eq!(ttest.lines().count(), 1 + 4);

        write_reports(&report, dir.path()).unwrap();
        let again = std::fs::read_to_string(dir.path().join("sections.csv")).unwrap();
        assert_eq!(sections, again);
    }
}

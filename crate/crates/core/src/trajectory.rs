//! Entering trajectories through reviewed intersections, windowed by
//! cumulative distance around the reference point nearest the junction.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{angular_difference_deg, haversine_distance_ft, initial_bearing_deg, point_in_polygon, HeadingDeg};
use crate::ingest::{drive_ranges, SensorRecord};
use crate::review::ReviewedIntersection;
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("intersection {intxn_id} leg {leg_id}: entering line has coincident endpoints")]
    DegenerateLine { intxn_id: u64, leg_id: u32 },
    #[error("intersection {intxn_id} leg {leg_id}: entering line needs at least two vertices")]
    ShortLine { intxn_id: u64, leg_id: u32 },
    #[error("intersection {intxn_id} leg {leg_id} has no entering bearing")]
    MissingBearing { intxn_id: u64, leg_id: u32 },
    #[error("invalid window parameters: {0}")]
    InvalidParams(String),
    #[error("trajectory {traj_id}: {message}")]
    Inconsistent { traj_id: String, message: String },
    #[error("trajectory csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub upstream_ft: f64,
    pub downstream_ft: f64,
    pub heading_tol_deg: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            upstream_ft: 300.0,
            downstream_ft: 200.0,
            heading_tol_deg: 45.0,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.upstream_ft) || !positive(self.downstream_ft) {
            return Err(TrajectoryError::InvalidParams(
                "upstream and downstream distances must be positive".into(),
            ));
        }
        if !positive(self.heading_tol_deg) || self.heading_tol_deg >= 90.0 {
            return Err(TrajectoryError::InvalidParams(
                "heading tolerance must lie in (0, 90) degrees".into(),
            ));
        }
        Ok(())
    }
}

/// Entering bearing of every approach: first vertex toward last vertex of its
/// entering line.
pub fn assign_bearings(reviewed: &mut [ReviewedIntersection]) -> Result<(), TrajectoryError> {
    for ix in reviewed.iter_mut() {
        for leg in &mut ix.approaches {
            let (Some(first), Some(last)) = (leg.entering_line.first(), leg.entering_line.last()) else {
                return Err(TrajectoryError::ShortLine {
                    intxn_id: ix.intxn_id,
                    leg_id: leg.leg_id,
                });
            };
            if leg.entering_line.len() < 2 {
                return Err(TrajectoryError::ShortLine {
                    intxn_id: ix.intxn_id,
                    leg_id: leg.leg_id,
                });
            }
            let bearing = initial_bearing_deg(*first, *last).map_err(|_| TrajectoryError::DegenerateLine {
                intxn_id: ix.intxn_id,
                leg_id: leg.leg_id,
            })?;
            leg.entering_bearing = Some(bearing);
        }
    }
    Ok(())
}

pub fn traj_id(subj: &str, drive: u32, intxn_id: u64) -> String {
    format!("{subj}_{drive}_{intxn_id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCandidate {
    pub traj_id: String,
    pub subj: String,
    pub drive: u32,
    pub intxn_id: u64,
    pub leg_id: u32,
    pub points: Vec<SensorRecord>,
    /// Index into `points` of the reference sample.
    pub ref_index: usize,
    pub ref_time_utc: Timestamp,
    pub start_time_utc: Timestamp,
    pub end_time_utc: Timestamp,
}

impl TrajectoryCandidate {
    pub fn ref_point(&self) -> &SensorRecord {
        &self.points[self.ref_index]
    }

    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            traj_id: self.traj_id.clone(),
            subj: self.subj.clone(),
            drive: self.drive,
            intxn_id: self.intxn_id,
            leg_id: self.leg_id,
            ref_time_utc: self.ref_time_utc,
            start_time_utc: self.start_time_utc,
            end_time_utc: self.end_time_utc,
            ref_cum_dist_ft: self.ref_point().cum_dist_ft,
            n_points: self.points.len(),
        }
    }
}

/// One row of the trajectory table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub traj_id: String,
    pub subj: String,
    pub drive: u32,
    pub intxn_id: u64,
    pub leg_id: u32,
    pub ref_time_utc: Timestamp,
    pub start_time_utc: Timestamp,
    pub end_time_utc: Timestamp,
    pub ref_cum_dist_ft: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    /// Approaches whose polygon a drive entered only against the entering
    /// direction.
    pub exiting_only: u64,
    /// Extra passes and approaches for an already-kept (subj, drive, intxn_id).
    pub duplicate_pass: u64,
    /// Kept trajectories whose window hit the start or end of the drive.
    pub truncated: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub trajectories: Vec<TrajectoryCandidate>,
    pub skips: SkipReport,
    /// Entering passes found before de-duplication.
    pub passes: usize,
}

const APPROACH_CELL_DEG: f64 = 0.002;

struct ApproachRef {
    ix: usize,
    leg: usize,
    bbox: (f64, f64, f64, f64),
    bearing: HeadingDeg,
}

struct ApproachIndex {
    refs: Vec<ApproachRef>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

fn cell(lat: f64, lon: f64) -> (i64, i64) {
    ((lat / APPROACH_CELL_DEG).floor() as i64, (lon / APPROACH_CELL_DEG).floor() as i64)
}

impl ApproachIndex {
    fn new(reviewed: &[ReviewedIntersection]) -> Result<Self, TrajectoryError> {
        let mut refs = Vec::new();
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (ix, inter) in reviewed.iter().enumerate() {
            for (leg, a) in inter.approaches.iter().enumerate() {
                let bearing = a.entering_bearing.ok_or(TrajectoryError::MissingBearing {
                    intxn_id: inter.intxn_id,
                    leg_id: a.leg_id,
                })?;
                let bbox = a.polygon.bbox();
                let (r0, c0) = cell(bbox.0, bbox.1);
                let (r1, c1) = cell(bbox.2, bbox.3);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        cells.entry((r, c)).or_default().push(refs.len());
                    }
                }
                refs.push(ApproachRef { ix, leg, bbox, bearing });
            }
        }
        Ok(ApproachIndex { refs, cells })
    }

    fn candidates(&self, lat: f64, lon: f64) -> &[usize] {
        self.cells.get(&cell(lat, lon)).map_or(&[], Vec::as_slice)
    }
}

#[derive(Default)]
struct DriveResult {
    trajectories: Vec<TrajectoryCandidate>,
    exiting_only: u64,
    duplicate_pass: u64,
    passes: usize,
    truncated: Vec<String>,
}

/// Extracts at most one entering trajectory per (subj, drive, intersection).
/// `sensor` must be canonically sorted and every approach must carry a
/// bearing. Output is sorted by (subj, drive, intxn_id).
pub fn extract_trajectories(
    sensor: &[SensorRecord],
    reviewed: &[ReviewedIntersection],
    params: &WindowParams,
) -> Result<Extraction, TrajectoryError> {
    params.validate()?;
    let index = ApproachIndex::new(reviewed)?;
    let drives: Vec<&[SensorRecord]> = sensor
        .chunk_by(|a, b| a.subj == b.subj && a.drive == b.drive)
        .collect();
    let results: Vec<DriveResult> = drives
        .par_iter()
        .map(|d| extract_drive(d, reviewed, &index, params))
        .collect();

    let mut out = Extraction::default();
    for r in results {
        out.trajectories.extend(r.trajectories);
        out.skips.exiting_only += r.exiting_only;
        out.skips.duplicate_pass += r.duplicate_pass;
        out.skips.truncated.extend(r.truncated);
        out.passes += r.passes;
    }
    out.trajectories
        .sort_by(|a, b| (&a.subj, a.drive, a.intxn_id).cmp(&(&b.subj, b.drive, b.intxn_id)));
    out.skips.truncated.sort();
    Ok(out)
}

fn extract_drive(
    drive: &[SensorRecord],
    reviewed: &[ReviewedIntersection],
    index: &ApproachIndex,
    params: &WindowParams,
) -> DriveResult {
    // approach ref -> (in-polygon count, entering sample indices)
    let mut hits: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for (i, rec) in drive.iter().enumerate() {
        let (lat, lon) = (rec.pos.lat(), rec.pos.lon());
        for &a in index.candidates(lat, lon) {
            let r = &index.refs[a];
            let (la0, lo0, la1, lo1) = r.bbox;
            if lat < la0 || lat > la1 || lon < lo0 || lon > lo1 {
                continue;
            }
            let leg = &reviewed[r.ix].approaches[r.leg];
            if !point_in_polygon(rec.pos, &leg.polygon) {
                continue;
            }
            let entry = hits.entry(a).or_default();
            entry.0 += 1;
            if angular_difference_deg(rec.heading, r.bearing) <= params.heading_tol_deg {
                entry.1.push(i);
            }
        }
    }

    let mut result = DriveResult::default();
    let window_len = params.upstream_ft + params.downstream_ft;
    let mut by_intxn: BTreeMap<u64, Vec<(Timestamp, u32, TrajectoryCandidate, bool)>> = BTreeMap::new();
    for (a, (in_count, entering)) in hits {
        if entering.is_empty() {
            if in_count > 0 {
                result.exiting_only += 1;
            }
            continue;
        }
        let r = &index.refs[a];
        let inter = &reviewed[r.ix];
        let leg = &inter.approaches[r.leg];
        let passes = entering.chunk_by(|&x, &y| drive[y].cum_dist_ft - drive[x].cum_dist_ft <= window_len);
        for pass in passes {
            result.passes += 1;
            let ref_i = pass
                .iter()
                .copied()
                .map(|i| (i, haversine_distance_ft(drive[i].pos, inter.pos)))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                .map(|(i, _)| i)
                .expect("passes are nonempty");
            let (cand, truncated) = build_window(drive, ref_i, inter.intxn_id, leg.leg_id, params);
            by_intxn
                .entry(inter.intxn_id)
                .or_default()
                .push((cand.ref_time_utc, leg.leg_id, cand, truncated));
        }
    }
    for (_, mut cands) in by_intxn {
        cands.sort_by_key(|a| (a.0, a.1));
        result.duplicate_pass += (cands.len() - 1) as u64;
        let (_, _, cand, truncated) = cands.swap_remove(0);
        if truncated {
            result.truncated.push(cand.traj_id.clone());
        }
        result.trajectories.push(cand);
    }
    result
}

fn build_window(
    drive: &[SensorRecord],
    ref_i: usize,
    intxn_id: u64,
    leg_id: u32,
    params: &WindowParams,
) -> (TrajectoryCandidate, bool) {
    let ref_cum = drive[ref_i].cum_dist_ft;
    let lo_cum = ref_cum - params.upstream_ft;
    let hi_cum = ref_cum + params.downstream_ft;
    let lo = drive.partition_point(|r| r.cum_dist_ft < lo_cum);
    let hi = drive.partition_point(|r| r.cum_dist_ft <= hi_cum);
    let truncated = lo_cum < drive[0].cum_dist_ft || hi_cum > drive[drive.len() - 1].cum_dist_ft;
    let points = drive[lo..hi].to_vec();
    let first = &drive[ref_i];
    let cand = TrajectoryCandidate {
        traj_id: traj_id(&first.subj, first.drive, intxn_id),
        subj: first.subj.clone(),
        drive: first.drive,
        intxn_id,
        leg_id,
        ref_index: ref_i - lo,
        ref_time_utc: first.t_utc,
        start_time_utc: points[0].t_utc,
        end_time_utc: points[points.len() - 1].t_utc,
        points,
    };
    (cand, truncated)
}

pub const TRAJECTORY_COLUMNS: [&str; 10] = [
    "traj_id",
    "subj",
    "drive",
    "intxn_id",
    "leg_id",
    "ref_time_utc",
    "start_time_utc",
    "end_time_utc",
    "ref_cum_dist_ft",
    "n_points",
];

pub fn write_trajectory_csv<W: Write>(rows: &[TrajectorySummary], out: W) -> Result<(), TrajectoryError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAJECTORY_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trajectory_csv(bytes: &[u8]) -> Result<Vec<TrajectorySummary>, TrajectoryError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    rdr.deserialize().map(|r| r.map_err(TrajectoryError::from)).collect()
}

/// Rebuilds full trajectory windows from table rows and the clean sensor
/// table the rows were extracted from.
pub fn rehydrate(rows: &[TrajectorySummary], sensor: &[SensorRecord]) -> Result<Vec<TrajectoryCandidate>, TrajectoryError> {
    let ranges = drive_ranges(sensor);
    rows.iter()
        .map(|row| {
            let bad = |message: &str| TrajectoryError::Inconsistent {
                traj_id: row.traj_id.clone(),
                message: message.to_string(),
            };
            let range = ranges
                .get(&(row.subj.as_str(), row.drive))
                .ok_or_else(|| bad("drive not present in the sensor table"))?;
            let drive = &sensor[range.clone()];
            let lo = drive.partition_point(|r| r.t_utc < row.start_time_utc);
            let hi = drive.partition_point(|r| r.t_utc <= row.end_time_utc);
            let points = drive[lo..hi].to_vec();
            if points.len() != row.n_points {
                return Err(bad("window size differs from the sensor table"));
            }
            let ref_index = points
                .iter()
                .position(|r| r.t_utc == row.ref_time_utc)
                .ok_or_else(|| bad("reference sample missing from the window"))?;
            Ok(TrajectoryCandidate {
                traj_id: row.traj_id.clone(),
                subj: row.subj.clone(),
                drive: row.drive,
                intxn_id: row.intxn_id,
                leg_id: row.leg_id,
                points,
                ref_index,
                ref_time_utc: row.ref_time_utc,
                start_time_utc: row.start_time_utc,
                end_time_utc: row.end_time_utc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, LocalFrame, PolygonRing};
    use crate::review::{ApproachLeg, ControlType};

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPoint::new(41.0, -96.0).unwrap())
    }

    fn at(x: f64, y: f64) -> GeoPoint {
        frame().unproject(x, y).unwrap()
    }

    /// Junction at the origin with one approach from the west for eastbound
    /// traffic: a 300 ft x 40 ft polygon and an entering line pointing east.
    fn junction() -> ReviewedIntersection {
        let mut r = vec![ReviewedIntersection {
            intxn_id: 7,
            pos: at(0.0, 0.0),
            control_type: ControlType::Stop,
            approaches: vec![ApproachLeg {
                leg_id: 1,
                polygon: PolygonRing::new(vec![at(-300.0, -20.0), at(0.0, -20.0), at(0.0, 20.0), at(-300.0, 20.0)]).unwrap(),
                entering_line: vec![at(-250.0, 0.0), at(-50.0, 0.0)],
                entering_bearing: None,
            }],
        }];
        assign_bearings(&mut r).unwrap();
        r.remove(0)
    }

    /// Eastbound at `speed` ft/s, 1 Hz, starting `x0` ft east of the
    /// junction, with cumulative distance supplied exactly.
    fn drive(x0: f64, speed: f64, n: usize, heading: f64) -> Vec<SensorRecord> {
        (0..n)
            .map(|k| SensorRecord {
                subj: "S01".into(),
                drive: 1,
                t_utc: Timestamp::from_millis(1_556_719_200_000 + k as i64 * 1000),
                pos: at(x0 + speed * k as f64, 0.0),
                heading: HeadingDeg::new(heading).unwrap(),
                speed_fps: speed,
                cum_dist_ft: speed * k as f64,
            })
            .collect()
    }

    #[test]
    fn bearing_examples() {
        let mut r = vec![junction()];
        let leg = &mut r[0].approaches[0];
        leg.entering_line = vec![at(0.0, 0.0), at(0.0, 100.0)];
        assign_bearings(&mut r).unwrap();
        assert!(r[0].approaches[0].entering_bearing.unwrap().value().abs() < 1e-9);

        let leg = &mut r[0].approaches[0];
        leg.entering_line = vec![GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 0.001).unwrap()];
        assign_bearings(&mut r).unwrap();
        assert!((r[0].approaches[0].entering_bearing.unwrap().value() - 90.0).abs() < 1e-9);

        // dog-leg: only the endpoints count
        let leg = &mut r[0].approaches[0];
        leg.entering_line = vec![at(0.0, 0.0), at(100.0, 100.0), at(0.0, 200.0)];
        assign_bearings(&mut r).unwrap();
        assert!(r[0].approaches[0].entering_bearing.unwrap().value().abs() < 1e-9);

        let leg = &mut r[0].approaches[0];
        leg.entering_line = vec![at(5.0, 5.0), at(50.0, 0.0), at(5.0, 5.0)];
        assert!(matches!(assign_bearings(&mut r), Err(TrajectoryError::DegenerateLine { intxn_id: 7, leg_id: 1 })));
    }

    #[test]
    fn constant_speed_window() {
        // samples at -975, -925, ... so the nearest in-polygon sample is 25 ft short
        let d = drive(-975.0, 50.0, 40, 90.0);
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        let t = &out.trajectories[0];
        assert_eq!(t.traj_id, "S01_1_7");
        assert_eq!(t.ref_point().cum_dist_ft, 950.0);
        assert_eq!(t.points.len(), 11);
        assert_eq!(t.end_time_utc.seconds_since(t.start_time_utc), 10.0);
        assert_eq!(t.points[0].cum_dist_ft, 650.0);
        assert_eq!(t.points[10].cum_dist_ft, 1150.0);
        assert!(out.skips.truncated.is_empty());
    }

    #[test]
    fn reversed_heading_gives_nothing() {
        let d = drive(-975.0, 50.0, 40, 270.0);
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        assert!(out.trajectories.is_empty());
        assert_eq!(out.skips.exiting_only, 1);
    }

    #[test]
    fn drive_elsewhere_changes_nothing() {
        let mut d = drive(-975.0, 50.0, 40, 90.0);
        for r in &mut d {
            r.pos = GeoPoint::new(r.pos.lat() + 0.1, r.pos.lon()).unwrap();
        }
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        assert!(out.trajectories.is_empty());
        assert_eq!(out.skips, SkipReport::default());
    }

    #[test]
    fn truncated_window_is_kept_and_flagged() {
        let d = drive(-75.0, 50.0, 10, 90.0);
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.trajectories[0].points[0].cum_dist_ft, 0.0);
        assert_eq!(out.skips.truncated, ["S01_1_7"]);
    }

    #[test]
    fn repeat_pass_keeps_the_earliest() {
        let mut d = drive(-975.0, 50.0, 40, 90.0);
        // come back 2000 ft later along the same approach
        let extra = drive(-975.0, 50.0, 40, 90.0);
        let offset = d.len();
        for (k, mut r) in extra.into_iter().enumerate() {
            r.t_utc = Timestamp::from_millis(1_556_719_200_000 + (offset + k) as i64 * 1000 + 60_000);
            r.cum_dist_ft = 5000.0 + 50.0 * k as f64;
            d.push(r);
        }
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.passes, 2);
        assert_eq!(out.skips.duplicate_pass, 1);
        assert_eq!(out.trajectories[0].ref_point().cum_dist_ft, 950.0);
    }

    #[test]
    fn missing_bearing_and_bad_params() {
        let mut j = junction();
        j.approaches[0].entering_bearing = None;
        assert!(matches!(
            extract_trajectories(&[], &[j], &WindowParams::default()),
            Err(TrajectoryError::MissingBearing { .. })
        ));
        let bad = WindowParams {
            heading_tol_deg: 90.0,
            ..WindowParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn csv_round_trip_and_rehydrate() {
        let d = drive(-975.0, 50.0, 40, 90.0);
        let out = extract_trajectories(&d, &[junction()], &WindowParams::default()).unwrap();
        let rows: Vec<_> = out.trajectories.iter().map(|t| t.summary()).collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "traj_id,subj,drive,intxn_id,leg_id,ref_time_utc,start_time_utc,end_time_utc,ref_cum_dist_ft,n_points\n"
        ));
        let back = read_trajectory_csv(&buf).unwrap();
        assert_eq!(back, rows);
        assert_eq!(rehydrate(&back, &d).unwrap(), out.trajectories);
    }
}

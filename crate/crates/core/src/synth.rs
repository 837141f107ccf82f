//! Deterministic synthetic scenarios: a grid road network, constant-speed
//! drives along grid lines, stop-sign detections, video metadata, a
//! pre-reviewed KML and closed-form expected results.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clips::{write_video_csv, VideoFile};
use crate::discovery::{Polyline, RoadNetwork};
use crate::geo::{GeoPoint, LocalFrame, PolygonRing};
use crate::ingest::{CUM_DIST_COLUMN, DETECTION_COLUMNS, SENSOR_COLUMNS};
use crate::review::kml::export_reviewed_kml;
use crate::review::{ApproachLeg, ControlType, ReviewedIntersection};
use crate::time::Timestamp;
use crate::trajectory::traj_id;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
}

pub const APPROACH_LEN_FT: f64 = 300.0;
pub const APPROACH_HALF_WIDTH_FT: f64 = 20.0;
pub const LINE_FAR_FT: f64 = 250.0;
pub const LINE_NEAR_FT: f64 = 50.0;
pub const DETECTION_RANGE_FT: f64 = 150.0;
pub const VIDEO_PAD_S: i64 = 5;
/// Largest sample spacing for which opposing last detections stay within
/// the default clustering radius.
pub const MAX_SAMPLE_SPACING_FT: f64 = 50.0;

fn default_origin_lat() -> f64 {
    41.0
}
fn default_origin_lon() -> f64 {
    -96.0
}
fn default_start() -> Timestamp {
    "2019-05-01T14:00:00Z".parse().expect("valid literal")
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub block_ft: f64,
    pub n_subjects: usize,
    pub drives_per_subject: usize,
    pub speed_fps: f64,
    pub sample_hz: f64,
    pub seed: u64,
    #[serde(default = "default_origin_lat")]
    pub origin_lat: f64,
    #[serde(default = "default_origin_lon")]
    pub origin_lon: f64,
    #[serde(default = "default_start")]
    pub start_time_utc: Timestamp,
    #[serde(default)]
    pub gps_jitter_ft: f64,
    #[serde(default = "default_true")]
    pub emit_cum_dist: bool,
    /// Drive along grid columns (north/south) instead of rows.
    #[serde(default)]
    pub transpose: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            grid_rows: 5,
            grid_cols: 5,
            block_ft: 1000.0,
            n_subjects: 2,
            drives_per_subject: 2,
            speed_fps: 50.0,
            sample_hz: 1.0,
            seed: 7,
            origin_lat: default_origin_lat(),
            origin_lon: default_origin_lon(),
            start_time_utc: default_start(),
            gps_jitter_ft: 0.0,
            emit_cum_dist: true,
            transpose: false,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.grid_rows < 3 || self.grid_cols < 3 {
            return bad("grid needs at least 3 rows and 3 columns");
        }
        if self.n_subjects == 0 || self.drives_per_subject == 0 {
            return bad("need at least one subject and one drive");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.speed_fps) || !positive(self.sample_hz) {
            return bad("speed and sample rate must be positive");
        }
        if !(self.block_ft.is_finite() && self.block_ft > APPROACH_LEN_FT + LINE_NEAR_FT) {
            return bad("block length must exceed 350 ft");
        }
        if self.step_ft() > MAX_SAMPLE_SPACING_FT {
            return bad("sample spacing speed/sample_hz must not exceed 50 ft");
        }
        if !(self.gps_jitter_ft.is_finite() && self.gps_jitter_ft >= 0.0) {
            return bad("GPS jitter must be non-negative");
        }
        if GeoPoint::new(self.origin_lat, self.origin_lon).is_err() || self.origin_lat.abs() > 80.0 {
            return bad("origin must be a valid position below 80 degrees latitude");
        }
        Ok(())
    }

    pub fn step_ft(&self) -> f64 {
        self.speed_fps / self.sample_hz
    }

    fn lines(&self) -> usize {
        if self.transpose {
            self.grid_cols
        } else {
            self.grid_rows
        }
    }

    fn along(&self) -> usize {
        if self.transpose {
            self.grid_rows
        } else {
            self.grid_cols
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthIntersection {
    pub intxn_id: u64,
    pub pos: GeoPoint,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTrajectory {
    pub traj_id: String,
    pub ref_time_utc: Timestamp,
    pub start_time_utc: Timestamp,
    pub end_time_utc: Timestamp,
    pub ref_cum_dist_ft: f64,
    pub n_points: usize,
    pub truncated: bool,
    pub in_offset_s: f64,
    pub duration_s: f64,
    pub overlay_on_s: f64,
    pub overlay_off_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_intersections: Vec<TruthIntersection>,
    pub expected_visited: Vec<u64>,
    /// Keyed `<subj>_<drive>`.
    pub expected_traj_count: BTreeMap<String, usize>,
    pub trajectories: Vec<TruthTrajectory>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub network: RoadNetwork,
    /// One raw sensor file per subject, `(file name, bytes)`.
    pub sensor_files: Vec<(String, Vec<u8>)>,
    pub detection_files: Vec<(String, Vec<u8>)>,
    pub videos: Vec<VideoFile>,
    pub demographics_csv: Vec<u8>,
    pub reviewed: Vec<ReviewedIntersection>,
    pub truth: GroundTruth,
}

struct DrivePlan {
    subj: String,
    drive: u32,
    line: usize,
    forward: bool,
    start: Timestamp,
    n: usize,
}

struct Geometry<'a> {
    spec: &'a ScenarioSpec,
    frame: LocalFrame,
}

impl Geometry<'_> {
    /// Junction at grid row `r`, column `c`.
    fn junction(&self, r: usize, c: usize) -> GeoPoint {
        let b = self.spec.block_ft;
        self.frame.unproject(c as f64 * b, r as f64 * b).expect("validated origin")
    }

    /// Local (east, north) of a point `along` feet down grid line `line`,
    /// offset `across` feet to the left of increasing `along`.
    fn local(&self, line: usize, along: f64, across: f64) -> (f64, f64) {
        let l = line as f64 * self.spec.block_ft;
        if self.spec.transpose {
            (l - across, along)
        } else {
            (along, l + across)
        }
    }

    fn point(&self, line: usize, along: f64, across: f64) -> GeoPoint {
        let (x, y) = self.local(line, along, across);
        self.frame.unproject(x, y).expect("validated origin")
    }

    fn junction_on(&self, line: usize, j: usize) -> GeoPoint {
        if self.spec.transpose {
            self.junction(j, line)
        } else {
            self.junction(line, j)
        }
    }

    fn length(&self) -> f64 {
        (self.spec.along() - 1) as f64 * self.spec.block_ft
    }

    /// Along-line position of sample `k` of a drive.
    fn along_at(&self, forward: bool, k: usize) -> f64 {
        let step = self.spec.step_ft();
        if forward {
            step / 2.0 + k as f64 * step
        } else {
            self.length() - step / 2.0 - k as f64 * step
        }
    }

    /// Travelled distance from the drive start to junction `j`.
    fn travel_to(&self, forward: bool, j: usize) -> f64 {
        let a = j as f64 * self.spec.block_ft;
        let a0 = self.along_at(forward, 0);
        if forward {
            a - a0
        } else {
            a0 - a
        }
    }
}

fn sample_ms(k: usize, hz: f64) -> i64 {
    (k as f64 * 1000.0 / hz).round() as i64
}

fn network(g: &Geometry<'_>) -> RoadNetwork {
    let (rows, cols) = (g.spec.grid_rows, g.spec.grid_cols);
    let mut polylines = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            polylines.push(Polyline {
                line_id: format!("row{r}_{c}"),
                vertices: vec![g.junction(r, c), g.junction(r, c + 1)],
            });
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            polylines.push(Polyline {
                line_id: format!("col{c}_{r}"),
                vertices: vec![g.junction(r, c), g.junction(r + 1, c)],
            });
        }
    }
    RoadNetwork { polylines }
}

/// Candidate ids exactly as the network step assigns them: junctions of
/// degree 3 or more in (lat, lon) order, from 1.
fn candidate_ids(g: &Geometry<'_>) -> (BTreeMap<(usize, usize), u64>, Vec<TruthIntersection>) {
    let (rows, cols) = (g.spec.grid_rows, g.spec.grid_cols);
    let mut js: Vec<(GeoPoint, usize, usize, usize)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let degree = usize::from(r > 0) + usize::from(r + 1 < rows) + usize::from(c > 0) + usize::from(c + 1 < cols);
            if degree >= 3 {
                js.push((g.junction(r, c), r, c, degree));
            }
        }
    }
    js.sort_by(|a, b| a.0.lex_cmp(&b.0));
    let mut ids = BTreeMap::new();
    let mut out = Vec::new();
    for (k, (pos, r, c, degree)) in js.into_iter().enumerate() {
        let id = k as u64 + 1;
        ids.insert((r, c), id);
        out.push(TruthIntersection { intxn_id: id, pos, degree });
    }
    (ids, out)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, SynthError> {
    spec.validate()?;
    let frame = LocalFrame::new(GeoPoint::new(spec.origin_lat, spec.origin_lon).expect("validated"));
    let g = Geometry { spec, frame };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.gps_jitter_ft).expect("validated jitter");
    let step = spec.step_ft();
    let n_samples = ((g.length() - step) / step + 1e-9).floor() as usize + 1;
    let interior_lines = spec.lines() - 2;

    let mut plans = Vec::new();
    for s in 0..spec.n_subjects {
        for d in 0..spec.drives_per_subject {
            let slot = (s * spec.drives_per_subject + d) as i64;
            plans.push(DrivePlan {
                subj: format!("S{:02}", s + 1),
                drive: d as u32 + 1,
                line: 1 + (2 * d) % interior_lines,
                forward: s % 2 == 0,
                start: spec.start_time_utc.plus_millis(slot * 3_600_000),
                n: n_samples,
            });
        }
    }

    // controlled junctions: interior junctions on travelled lines
    let controlled = || 1..spec.along() - 1;
    let mut passes: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (pi, p) in plans.iter().enumerate() {
        for j in controlled() {
            passes.entry((p.line, j)).or_default().push(pi);
        }
    }
    let visited: Vec<(usize, usize)> = passes
        .iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(k, _)| *k)
        .collect();
    let grid_rc = |line: usize, j: usize| if spec.transpose { (j, line) } else { (line, j) };

    let (ids, true_intersections) = candidate_ids(&g);
    let mut expected_visited: Vec<u64> = visited.iter().map(|&(l, j)| ids[&grid_rc(l, j)]).collect();
    expected_visited.sort_unstable();

    let heading = |forward: bool| match (spec.transpose, forward) {
        (false, true) => 90.0,
        (false, false) => 270.0,
        (true, true) => 0.0,
        (true, false) => 180.0,
    };

    let mut sensor_rows: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut detection_rows: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut videos = Vec::new();
    for p in &plans {
        let rows = sensor_rows.entry(p.subj.clone()).or_default();
        for k in 0..p.n {
            let (mut x, mut y) = g.local(p.line, g.along_at(p.forward, k), 0.0);
            if spec.gps_jitter_ft > 0.0 {
                x += jitter.sample(&mut rng);
                y += jitter.sample(&mut rng);
            }
            let pos = frame.unproject(x, y).expect("validated origin");
            let t = p.start.plus_millis(sample_ms(k, spec.sample_hz));
            let mut row = vec![
                p.subj.clone(),
                p.drive.to_string(),
                t.to_string(),
                pos.lat().to_string(),
                pos.lon().to_string(),
                heading(p.forward).to_string(),
                spec.speed_fps.to_string(),
            ];
            if spec.emit_cum_dist {
                row.push((k as f64 * step).to_string());
            }
            rows.push(row);
        }
        let dets = detection_rows.entry(p.subj.clone()).or_default();
        for j in controlled() {
            let to_j = g.travel_to(p.forward, j);
            for k in 0..p.n {
                let before = to_j - k as f64 * step;
                if before > 0.0 && before <= DETECTION_RANGE_FT {
                    let t = p.start.plus_millis(sample_ms(k, spec.sample_hz));
                    let conf: f64 = rng.random_range(0.6..0.99);
                    dets.push(vec![
                        p.subj.clone(),
                        p.drive.to_string(),
                        t.to_string(),
                        "stop_sign".into(),
                        format!("{conf:.3}"),
                    ]);
                }
            }
        }
        let last = p.start.plus_millis(sample_ms(p.n - 1, spec.sample_hz));
        videos.push(VideoFile {
            uri: format!("videos/{}_{}.mp4", p.subj, p.drive),
            subj: p.subj.clone(),
            drive: p.drive,
            start_time_utc: p.start.plus_millis(-VIDEO_PAD_S * 1000),
            end_time_utc: last.plus_millis(VIDEO_PAD_S * 1000),
            fps: 30.0,
        });
    }

    let mut sensor_header: Vec<&str> = SENSOR_COLUMNS.to_vec();
    if spec.emit_cum_dist {
        sensor_header.push(CUM_DIST_COLUMN);
    }
    let sensor_files = sensor_rows
        .iter()
        .map(|(s, rows)| (format!("{s}.csv"), csv_bytes(&sensor_header, rows)))
        .collect();
    let detection_files = detection_rows
        .iter()
        .map(|(s, rows)| (format!("{s}.csv"), csv_bytes(&DETECTION_COLUMNS, rows)))
        .collect();

    let genders = ["F", "M"];
    let demo_rows: Vec<Vec<String>> = sensor_rows
        .keys()
        .map(|s| {
            let age: u32 = rng.random_range(16..=90);
            let gender = genders[rng.random_range(0..genders.len())];
            vec![s.clone(), age.to_string(), gender.to_string()]
        })
        .collect();
    let demographics_csv = csv_bytes(&["subj", "age", "gender"], &demo_rows);

    // approach legs per visited junction, one per travel direction seen
    let mut reviewed = Vec::new();
    for &(line, j) in &visited {
        let ja = j as f64 * spec.block_ft;
        let mut dirs: Vec<bool> = passes[&(line, j)].iter().map(|&pi| plans[pi].forward).collect();
        dirs.sort_unstable_by(|a, b| b.cmp(a));
        dirs.dedup();
        let approaches = dirs
            .iter()
            .enumerate()
            .map(|(i, &forward)| {
                let back = |d: f64| if forward { ja - d } else { ja + d };
                let h = APPROACH_HALF_WIDTH_FT;
                let ring = vec![
                    g.point(line, back(APPROACH_LEN_FT), -h),
                    g.point(line, back(0.0), -h),
                    g.point(line, back(0.0), h),
                    g.point(line, back(APPROACH_LEN_FT), h),
                ];
                ApproachLeg {
                    leg_id: i as u32 + 1,
                    polygon: PolygonRing::new(ring).expect("rectangle is simple"),
                    entering_line: vec![g.point(line, back(LINE_FAR_FT), 0.0), g.point(line, back(LINE_NEAR_FT), 0.0)],
                    entering_bearing: None,
                }
            })
            .collect();
        reviewed.push(ReviewedIntersection {
            intxn_id: ids[&grid_rc(line, j)],
            pos: g.junction_on(line, j),
            control_type: ControlType::Stop,
            approaches,
        });
    }
    reviewed.sort_by_key(|r| r.intxn_id);

    let mut expected_traj_count = BTreeMap::new();
    let mut trajectories = Vec::new();
    for p in &plans {
        let mut count = 0;
        for j in controlled() {
            if !visited.contains(&(p.line, j)) {
                continue;
            }
            count += 1;
            let id = ids[&grid_rc(p.line, j)];
            trajectories.push(truth_trajectory(spec, &g, p, j, id));
        }
        expected_traj_count.insert(format!("{}_{}", p.subj, p.drive), count);
    }
    trajectories.sort_by(|a, b| a.traj_id.cmp(&b.traj_id));

    Ok(Scenario {
        spec: spec.clone(),
        network: network(&g),
        sensor_files,
        detection_files,
        videos,
        demographics_csv,
        reviewed,
        truth: GroundTruth {
            true_intersections,
            expected_visited,
            expected_traj_count,
            trajectories,
        },
    })
}

/// Window and overlay timings in closed form for constant speed.
fn truth_trajectory(spec: &ScenarioSpec, g: &Geometry<'_>, p: &DrivePlan, j: usize, id: u64) -> TruthTrajectory {
    let step = spec.step_ft();
    let hz = spec.sample_hz;
    let (up, down) = (300.0, 200.0);
    let to_j = g.travel_to(p.forward, j);
    let k_ref = (to_j / step + 1e-9).floor() as usize;
    let ref_cum = k_ref as f64 * step;
    let lo_k = ((ref_cum - up) / step - 1e-9).ceil().max(0.0) as usize;
    let hi_k = (((ref_cum + down) / step + 1e-9).floor() as usize).min(p.n - 1);
    let truncated = ref_cum - up < 0.0 || ref_cum + down > (p.n - 1) as f64 * step;
    let (lo_cum, hi_cum) = (lo_k as f64 * step, hi_k as f64 * step);
    let t_lo = lo_k as f64 / hz;
    let duration = (hi_k - lo_k) as f64 / hz;
    let rel = |target: f64| (target.clamp(lo_cum, hi_cum) / spec.speed_fps - t_lo).clamp(0.0, duration);
    TruthTrajectory {
        traj_id: traj_id(&p.subj, p.drive, id),
        ref_time_utc: p.start.plus_millis(sample_ms(k_ref, hz)),
        start_time_utc: p.start.plus_millis(sample_ms(lo_k, hz)),
        end_time_utc: p.start.plus_millis(sample_ms(hi_k, hz)),
        ref_cum_dist_ft: ref_cum,
        n_points: hi_k - lo_k + 1,
        truncated,
        in_offset_s: VIDEO_PAD_S as f64 + t_lo,
        duration_s: duration,
        overlay_on_s: rel(ref_cum - 150.0),
        overlay_off_s: rel(ref_cum + 50.0),
    }
}

impl Scenario {
    /// Every generated input as `(relative path, bytes)`, in a fixed order.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        let mut out = vec![("network.geojson".to_string(), self.network.to_geojson().into_bytes())];
        for (name, bytes) in &self.sensor_files {
            out.push((format!("sensor/{name}"), bytes.clone()));
        }
        for (name, bytes) in &self.detection_files {
            out.push((format!("detections/{name}"), bytes.clone()));
        }
        let mut videos = Vec::new();
        write_video_csv(&self.videos, &mut videos).expect("in-memory write");
        out.push(("videos.csv".into(), videos));
        out.push(("demographics.csv".into(), self.demographics_csv.clone()));
        out.push(("reviewed.kml".into(), export_reviewed_kml(&self.reviewed, &[]).into_bytes()));
        let mut truth = serde_json::to_string_pretty(&self.truth).expect("truth serializes");
        truth.push('\n');
        out.push(("ground_truth.json".into(), truth.into_bytes()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::extract_lrs_candidates;
    use crate::geo::haversine_distance_ft;

    #[test]
    fn four_by_four_candidates() {
        let spec = ScenarioSpec {
            grid_rows: 4,
            grid_cols: 4,
            ..ScenarioSpec::default()
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.truth.true_intersections.len(), 12);
        // brute-force degree count over all vertices
        let verts: Vec<GeoPoint> = s.network.polylines.iter().flat_map(|p| p.vertices.clone()).collect();
        let mut distinct: Vec<GeoPoint> = Vec::new();
        for v in &verts {
            if !distinct.iter().any(|d| haversine_distance_ft(*d, *v) < 1.0) {
                distinct.push(*v);
            }
        }
        assert_eq!(distinct.len(), 16);
        let high = distinct
            .iter()
            .filter(|d| verts.iter().filter(|v| haversine_distance_ft(**d, **v) < 1.0).count() >= 3)
            .count();
        assert_eq!(high, 12);
        let cands = extract_lrs_candidates(&s.network, 1.0);
        for (c, t) in cands.iter().zip(&s.truth.true_intersections) {
            assert_eq!(c.intxn_id, t.intxn_id);
            assert!(haversine_distance_ft(c.pos, t.pos) < 1e-3);
            assert_eq!(c.degree, t.degree);
        }
    }

    #[test]
    fn default_scenario_counts() {
        let s = generate(&ScenarioSpec::default()).unwrap();
        assert_eq!(s.truth.expected_visited.len(), 6);
        assert!(s.truth.expected_traj_count.values().all(|&n| n == 3));
        assert_eq!(s.truth.trajectories.len(), 12);
        for t in &s.truth.trajectories {
            assert_eq!(t.n_points, 11);
            assert_eq!((t.overlay_on_s, t.overlay_off_s, t.duration_s), (3.0, 7.0, 10.0));
            assert!(!t.truncated);
        }
    }

    #[test]
    fn single_drive_three_junctions() {
        let spec = ScenarioSpec {
            n_subjects: 1,
            drives_per_subject: 2,
            grid_rows: 3,
            ..ScenarioSpec::default()
        };
        // 3 rows: both drives use row 1 and pass the same 3 junctions
        let s = generate(&spec).unwrap();
        assert_eq!(s.truth.expected_traj_count["S01_1"], 3);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ScenarioSpec {
            gps_jitter_ft: 2.0,
            ..ScenarioSpec::default()
        };
        assert_eq!(generate(&spec).unwrap().files(), generate(&spec).unwrap().files());
        let other = ScenarioSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().files(), generate(&other).unwrap().files());
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            ScenarioSpec { grid_rows: 2, ..ScenarioSpec::default() },
            ScenarioSpec { speed_fps: 0.0, ..ScenarioSpec::default() },
            ScenarioSpec { speed_fps: 120.0, ..ScenarioSpec::default() },
            ScenarioSpec { n_subjects: 0, ..ScenarioSpec::default() },
            ScenarioSpec { block_ft: 200.0, ..ScenarioSpec::default() },
        ] {
            assert!(generate(&bad).is_err());
        }
    }
}

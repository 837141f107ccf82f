//! Cleaning and merging of per-participant sensor and detection CSV files
//! into two study-wide tables.
//!
//! Malformed rows are dropped, never fatal, and every drop is counted in a
//! [`DropReport`]. Only unreadable files and missing header columns fail.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance_ft, GeoPoint, HeadingDeg};
use crate::time::Timestamp;

pub const SENSOR_COLUMNS: [&str; 7] = [
    "subj",
    "drive",
    "time_utc",
    "lat",
    "lon",
    "heading_deg",
    "speed_fps",
];
pub const CUM_DIST_COLUMN: &str = "cum_dist_ft";
pub const DETECTION_COLUMNS: [&str; 5] = ["subj", "drive", "time_utc", "object_class", "confidence"];
const CLEAN_DETECTION_COLUMNS: [&str; 7] = [
    "subj",
    "drive",
    "time_utc",
    "object_class",
    "confidence",
    "lat",
    "lon",
];

/// Largest sensor/detection time offset accepted by the position join.
pub const JOIN_TOLERANCE_MS: i64 = 500;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {name}: {source}")]
    Unreadable {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{name}: header is missing columns {missing:?}")]
    HeaderMismatch { name: String, missing: Vec<String> },
    #[error("{name} line {line}: {message}")]
    BadRow {
        name: String,
        line: u64,
        message: String,
    },
    #[error("csv write failed: {0}")]
    Write(#[from] csv::Error),
}

/// One input file, already loaded.
#[derive(Debug, Clone)]
pub struct NamedSource {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl NamedSource {
    pub fn new(name: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        NamedSource {
            name: name.into(),
            bytes: bytes.into(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, IngestError> {
        let bytes = std::fs::read(path).map_err(|source| IngestError::Unreadable {
            name: path.display().to_string(),
            source,
        })?;
        Ok(NamedSource::new(path.display().to_string(), bytes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropReason {
    #[serde(rename = "unparseable")]
    Unparseable,
    #[serde(rename = "out_of_range")]
    OutOfRange,
    #[serde(rename = "negative_speed")]
    NegativeSpeed,
    #[serde(rename = "duplicate_timestamp")]
    DuplicateTimestamp,
    #[serde(rename = "non_monotonic_cum_dist")]
    NonMonotonicCumDist,
    #[serde(rename = "unknown_class")]
    UnknownClass,
    #[serde(rename = "no_sensor_match")]
    NoSensorMatch,
}

impl DropReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DropReason::Unparseable => "unparseable",
            DropReason::OutOfRange => "out_of_range",
            DropReason::NegativeSpeed => "negative_speed",
            DropReason::DuplicateTimestamp => "duplicate_timestamp",
            DropReason::NonMonotonicCumDist => "non_monotonic_cum_dist",
            DropReason::UnknownClass => "unknown_class",
            DropReason::NoSensorMatch => "no_sensor_match",
        }
    }
}

/// Rejected-row counts keyed by reason; serializes as `{reason: count}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DropReport(BTreeMap<DropReason, u64>);

impl DropReport {
    pub fn add(&mut self, reason: DropReason) {
        self.add_n(reason, 1);
    }

    pub fn add_n(&mut self, reason: DropReason, n: u64) {
        if n > 0 {
            *self.0.entry(reason).or_insert(0) += n;
        }
    }

    pub fn get(&self, reason: DropReason) -> u64 {
        self.0.get(&reason).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn merge(&mut self, other: &DropReport) {
        for (r, n) in &other.0 {
            self.add_n(*r, *n);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.0.iter().map(|(r, n)| (r.as_str(), *n))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("drop report serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub subj: String,
    pub drive: u32,
    pub t_utc: Timestamp,
    pub pos: GeoPoint,
    pub heading: HeadingDeg,
    pub speed_fps: f64,
    pub cum_dist_ft: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    #[serde(rename = "stop_sign")]
    StopSign,
    #[serde(rename = "signal_state")]
    SignalState,
}

impl ObjectClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectClass::StopSign => "stop_sign",
            ObjectClass::SignalState => "signal_state",
        }
    }
}

impl FromStr for ObjectClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stop_sign" => Ok(ObjectClass::StopSign),
            "signal_state" => Ok(ObjectClass::SignalState),
            other => Err(format!("unknown object class {other:?}")),
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub subj: String,
    pub drive: u32,
    pub t_utc: Timestamp,
    pub pos: GeoPoint,
    pub object_class: ObjectClass,
    pub confidence: f64,
}

impl DetectionRecord {
    fn canonical_cmp(&self, o: &Self) -> std::cmp::Ordering {
        (&self.subj, self.drive, self.t_utc, self.object_class)
            .cmp(&(&o.subj, o.drive, o.t_utc, o.object_class))
            .then(self.confidence.total_cmp(&o.confidence))
            .then(self.pos.lex_cmp(&o.pos))
    }
}

#[derive(Debug, Clone, Default)]
pub struct SensorTable {
    pub records: Vec<SensorRecord>,
    pub rows_read: u64,
    pub drops: DropReport,
}

#[derive(Debug, Clone, Default)]
pub struct DetectionTable {
    pub records: Vec<DetectionRecord>,
    pub rows_read: u64,
    pub drops: DropReport,
}

/// Both cleaned tables plus the combined drop report.
#[derive(Debug, Clone, Default)]
pub struct CleanTables {
    pub sensor: Vec<SensorRecord>,
    pub detections: Vec<DetectionRecord>,
    pub drop_report: DropReport,
}

pub fn clean_tables(
    sensor_files: &[NamedSource],
    detection_files: &[NamedSource],
) -> Result<CleanTables, IngestError> {
    let sensor = clean_sensor(sensor_files)?;
    let detections = clean_cv(detection_files, &sensor.records)?;
    let mut drop_report = sensor.drops.clone();
    drop_report.merge(&detections.drops);
    Ok(CleanTables {
        sensor: sensor.records,
        detections: detections.records,
        drop_report,
    })
}

struct Columns {
    idx: HashMap<String, usize>,
}

impl Columns {
    fn read(
        name: &str,
        rdr: &mut csv::Reader<&[u8]>,
        required: &[&str],
    ) -> Result<Columns, IngestError> {
        let headers = rdr.headers().map_err(|e| csv_read_error(name, e))?.clone();
        let idx: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        let missing: Vec<String> = required
            .iter()
            .filter(|c| !idx.contains_key(**c))
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(IngestError::HeaderMismatch {
                name: name.to_string(),
                missing,
            });
        }
        Ok(Columns { idx })
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, col: &str) -> Option<&'r str> {
        self.idx.get(col).and_then(|&i| rec.get(i)).map(str::trim)
    }

    fn has(&self, col: &str) -> bool {
        self.idx.contains_key(col)
    }
}

fn csv_read_error(name: &str, e: csv::Error) -> IngestError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IngestError::Unreadable {
            name: name.to_string(),
            source,
        },
        other => IngestError::Unreadable {
            name: name.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{other:?}")),
        },
    }
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes)
}

fn parse_f64(s: Option<&str>) -> Result<f64, DropReason> {
    let v: f64 = s
        .ok_or(DropReason::Unparseable)?
        .parse()
        .map_err(|_| DropReason::Unparseable)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DropReason::Unparseable)
    }
}

fn parse_key(cols: &Columns, rec: &csv::StringRecord) -> Result<(String, u32, Timestamp), DropReason> {
    let subj = cols.get(rec, "subj").ok_or(DropReason::Unparseable)?;
    if subj.is_empty() {
        return Err(DropReason::Unparseable);
    }
    let drive: i64 = cols
        .get(rec, "drive")
        .ok_or(DropReason::Unparseable)?
        .parse()
        .map_err(|_| DropReason::Unparseable)?;
    if drive < 1 || drive > u32::MAX as i64 {
        return Err(DropReason::OutOfRange);
    }
    let t: Timestamp = cols
        .get(rec, "time_utc")
        .ok_or(DropReason::Unparseable)?
        .parse()
        .map_err(|_| DropReason::Unparseable)?;
    Ok((subj.to_string(), drive as u32, t))
}

/// Candidate row before sorting and per-drive validation.
struct RawSensor {
    rec: SensorRecord,
    supplied_cum: Option<f64>,
    source: usize,
    line: u64,
}

fn parse_sensor_row(
    cols: &Columns,
    rec: &csv::StringRecord,
    with_cum: bool,
) -> Result<(SensorRecord, Option<f64>), DropReason> {
    let (subj, drive, t_utc) = parse_key(cols, rec)?;
    let lat = parse_f64(cols.get(rec, "lat"))?;
    let lon = parse_f64(cols.get(rec, "lon"))?;
    let heading = parse_f64(cols.get(rec, "heading_deg"))?;
    let speed_fps = parse_f64(cols.get(rec, "speed_fps"))?;
    let cum = if with_cum {
        Some(parse_f64(cols.get(rec, CUM_DIST_COLUMN))?)
    } else {
        None
    };
    let pos = GeoPoint::new(lat, lon).map_err(|_| DropReason::OutOfRange)?;
    let heading = HeadingDeg::new(heading).map_err(|_| DropReason::OutOfRange)?;
    if speed_fps < 0.0 {
        return Err(DropReason::NegativeSpeed);
    }
    Ok((
        SensorRecord {
            subj,
            drive,
            t_utc,
            pos,
            heading,
            speed_fps,
            cum_dist_ft: 0.0,
        },
        cum,
    ))
}

/// Parses, validates and merges sensor files into one canonically sorted
/// table. Output does not depend on the order of `files`: duplicate
/// timestamps keep the row from the lexicographically first source name.
pub fn clean_sensor(files: &[NamedSource]) -> Result<SensorTable, IngestError> {
    let mut order: Vec<usize> = (0..files.len()).collect();
    order.sort_by(|&a, &b| files[a].name.cmp(&files[b].name).then(files[a].bytes.cmp(&files[b].bytes)));

    let mut drops = DropReport::default();
    let mut rows_read = 0u64;
    let mut raw = Vec::new();
    for (rank, &fi) in order.iter().enumerate() {
        let file = &files[fi];
        let mut rdr = reader(&file.bytes);
        let cols = Columns::read(&file.name, &mut rdr, &SENSOR_COLUMNS)?;
        let with_cum = cols.has(CUM_DIST_COLUMN);
        for (line, row) in rdr.records().enumerate() {
            rows_read += 1;
            let row = match row {
                Ok(r) => r,
                Err(e) if e.is_io_error() => return Err(csv_read_error(&file.name, e)),
                Err(_) => {
                    drops.add(DropReason::Unparseable);
                    continue;
                }
            };
            match parse_sensor_row(&cols, &row, with_cum) {
                Ok((rec, supplied_cum)) => raw.push(RawSensor {
                    rec,
                    supplied_cum,
                    source: rank,
                    line: line as u64,
                }),
                Err(reason) => drops.add(reason),
            }
        }
    }

    raw.sort_by(|a, b| {
        (&a.rec.subj, a.rec.drive, a.rec.t_utc, a.source, a.line)
            .cmp(&(&b.rec.subj, b.rec.drive, b.rec.t_utc, b.source, b.line))
    });
    let before = raw.len();
    raw.dedup_by(|b, a| a.rec.subj == b.rec.subj && a.rec.drive == b.rec.drive && a.rec.t_utc == b.rec.t_utc);
    drops.add_n(DropReason::DuplicateTimestamp, (before - raw.len()) as u64);

    let drives: Vec<&[RawSensor]> = raw
        .chunk_by(|a, b| a.rec.subj == b.rec.subj && a.rec.drive == b.rec.drive)
        .collect();
    let cleaned: Vec<(Vec<SensorRecord>, u64)> = drives.par_iter().map(|d| finish_drive(d)).collect();

    let mut records = Vec::with_capacity(raw.len());
    for (recs, non_monotonic) in cleaned {
        drops.add_n(DropReason::NonMonotonicCumDist, non_monotonic);
        records.extend(recs);
    }
    Ok(SensorTable {
        records,
        rows_read,
        drops,
    })
}

/// Uses the supplied odometry when every row of the drive carries it
/// (dropping rows that would make it decrease, then rebasing to start at 0);
/// otherwise recomputes cumulative distance from positions.
fn finish_drive(rows: &[RawSensor]) -> (Vec<SensorRecord>, u64) {
    if rows.iter().all(|r| r.supplied_cum.is_some()) {
        let mut out: Vec<SensorRecord> = Vec::with_capacity(rows.len());
        let mut dropped = 0;
        let mut last = f64::NEG_INFINITY;
        for r in rows {
            let cum = r.supplied_cum.unwrap_or_default();
            if cum < last {
                dropped += 1;
                continue;
            }
            last = cum;
            let mut rec = r.rec.clone();
            rec.cum_dist_ft = cum;
            out.push(rec);
        }
        if let Some(base) = out.first().map(|r| r.cum_dist_ft) {
            for r in &mut out {
                r.cum_dist_ft -= base;
            }
        }
        (out, dropped)
    } else {
        let mut out: Vec<SensorRecord> = rows.iter().map(|r| r.rec.clone()).collect();
        compute_cum_dist(&mut out);
        (out, 0)
    }
}

/// Fills `cum_dist_ft` with the running sum of haversine steps, starting at 0.
pub fn compute_cum_dist(drive_records: &mut [SensorRecord]) {
    let mut total = 0.0;
    let mut prev: Option<GeoPoint> = None;
    for r in drive_records.iter_mut() {
        if let Some(p) = prev {
            total += haversine_distance_ft(p, r.pos);
        }
        r.cum_dist_ft = total;
        prev = Some(r.pos);
    }
}

/// Contiguous index range of each (subj, drive) in a canonically sorted table.
pub fn drive_ranges(sensor: &[SensorRecord]) -> HashMap<(&str, u32), std::ops::Range<usize>> {
    let mut map = HashMap::new();
    let mut start = 0;
    for chunk in sensor.chunk_by(|a, b| a.subj == b.subj && a.drive == b.drive) {
        map.insert((chunk[0].subj.as_str(), chunk[0].drive), start..start + chunk.len());
        start += chunk.len();
    }
    map
}

/// Nearest-in-time sample within [`JOIN_TOLERANCE_MS`]; an exact tie goes to
/// the earlier sample.
pub fn nearest_in_time(drive: &[SensorRecord], t: Timestamp) -> Option<usize> {
    let i = drive.partition_point(|r| r.t_utc < t);
    let mut best: Option<(usize, i64)> = None;
    for j in [i.checked_sub(1), Some(i)].into_iter().flatten() {
        if let Some(r) = drive.get(j) {
            let dt = (r.t_utc.millis() - t.millis()).abs();
            // j ascends, so strict < keeps the earlier sample on ties
            if dt <= JOIN_TOLERANCE_MS && best.is_none_or(|(_, b)| dt < b) {
                best = Some((j, dt));
            }
        }
    }
    best.map(|(j, _)| j)
}

/// Parses detection files and joins each detection to the position of the
/// nearest-in-time sensor sample of the same drive.
pub fn clean_cv(files: &[NamedSource], sensor: &[SensorRecord]) -> Result<DetectionTable, IngestError> {
    let ranges = drive_ranges(sensor);
    let mut drops = DropReport::default();
    let mut rows_read = 0u64;
    let mut records = Vec::new();
    for file in files {
        let mut rdr = reader(&file.bytes);
        let cols = Columns::read(&file.name, &mut rdr, &DETECTION_COLUMNS)?;
        for row in rdr.records() {
            rows_read += 1;
            let row = match row {
                Ok(r) => r,
                Err(e) if e.is_io_error() => return Err(csv_read_error(&file.name, e)),
                Err(_) => {
                    drops.add(DropReason::Unparseable);
                    continue;
                }
            };
            let parsed = (|| {
                let (subj, drive, t_utc) = parse_key(&cols, &row)?;
                let object_class: ObjectClass = cols
                    .get(&row, "object_class")
                    .ok_or(DropReason::Unparseable)?
                    .parse()
                    .map_err(|_| DropReason::UnknownClass)?;
                let confidence = parse_f64(cols.get(&row, "confidence"))?;
                if !(0.0..=1.0).contains(&confidence) {
                    return Err(DropReason::OutOfRange);
                }
                let range = ranges
                    .get(&(subj.as_str(), drive))
                    .ok_or(DropReason::NoSensorMatch)?;
                let drive_recs = &sensor[range.clone()];
                let j = nearest_in_time(drive_recs, t_utc).ok_or(DropReason::NoSensorMatch)?;
                Ok(DetectionRecord {
                    subj,
                    drive,
                    t_utc,
                    pos: drive_recs[j].pos,
                    object_class,
                    confidence,
                })
            })();
            match parsed {
                Ok(d) => records.push(d),
                Err(reason) => drops.add(reason),
            }
        }
    }
    records.sort_by(|a, b| a.canonical_cmp(b));
    Ok(DetectionTable {
        records,
        rows_read,
        drops,
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_sensor_csv<W: Write>(records: &[SensorRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = SENSOR_COLUMNS.to_vec();
    header.push(CUM_DIST_COLUMN);
    w.write_record(&header)?;
    for r in records {
        w.write_record([
            r.subj.clone(),
            r.drive.to_string(),
            r.t_utc.to_string(),
            fmt_f64(r.pos.lat()),
            fmt_f64(r.pos.lon()),
            fmt_f64(r.heading.value()),
            fmt_f64(r.speed_fps),
            fmt_f64(r.cum_dist_ft),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_detection_csv<W: Write>(records: &[DetectionRecord], out: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CLEAN_DETECTION_COLUMNS)?;
    for d in records {
        w.write_record([
            d.subj.clone(),
            d.drive.to_string(),
            d.t_utc.to_string(),
            d.object_class.to_string(),
            fmt_f64(d.confidence),
            fmt_f64(d.pos.lat()),
            fmt_f64(d.pos.lon()),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Strict reader for a table written by [`write_sensor_csv`].
pub fn read_clean_sensor(source: &NamedSource) -> Result<Vec<SensorRecord>, IngestError> {
    let mut rdr = reader(&source.bytes);
    let mut required = SENSOR_COLUMNS.to_vec();
    required.push(CUM_DIST_COLUMN);
    let cols = Columns::read(&source.name, &mut rdr, &required)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad_row(source, i, e.to_string()))?;
        let (mut rec, cum) =
            parse_sensor_row(&cols, &row, true).map_err(|r| bad_row(source, i, r.as_str().into()))?;
        rec.cum_dist_ft = cum.unwrap_or_default();
        out.push(rec);
    }
    Ok(out)
}

/// Strict reader for a table written by [`write_detection_csv`].
pub fn read_clean_detections(source: &NamedSource) -> Result<Vec<DetectionRecord>, IngestError> {
    let mut rdr = reader(&source.bytes);
    let cols = Columns::read(&source.name, &mut rdr, &CLEAN_DETECTION_COLUMNS)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| bad_row(source, i, e.to_string()))?;
        let parsed = (|| {
            let (subj, drive, t_utc) = parse_key(&cols, &row)?;
            let object_class = cols
                .get(&row, "object_class")
                .ok_or(DropReason::Unparseable)?
                .parse()
                .map_err(|_| DropReason::UnknownClass)?;
            let confidence = parse_f64(cols.get(&row, "confidence"))?;
            let pos = GeoPoint::new(parse_f64(cols.get(&row, "lat"))?, parse_f64(cols.get(&row, "lon"))?)
                .map_err(|_| DropReason::OutOfRange)?;
            Ok(DetectionRecord {
                subj,
                drive,
                t_utc,
                pos,
                object_class,
                confidence,
            })
        })();
        out.push(parsed.map_err(|r: DropReason| bad_row(source, i, r.as_str().into()))?);
    }
    Ok(out)
}

fn bad_row(source: &NamedSource, i: usize, message: String) -> IngestError {
    IngestError::BadRow {
        name: source.name.clone(),
        line: i as u64 + 2,
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use approx::assert_abs_diff_eq;

    const HEADER: &str = "subj,drive,time_utc,lat,lon,heading_deg,speed_fps\n";

    fn src(name: &str, body: &str) -> NamedSource {
        NamedSource::new(name, body.as_bytes().to_vec())
    }

    #[test]
    fn three_good_rows() {
        let csv = format!(
            "{HEADER}S1,1,2019-05-01T14:00:00.000Z,41,-96,90,50\n\
             S1,1,2019-05-01T14:00:01.000Z,41,-95.9999,90,50\n\
             S1,1,2019-05-01T14:00:02.000Z,41,-95.9998,90,50\n"
        );
        let t = clean_sensor(&[src("a.csv", &csv)]).unwrap();
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.drops.total(), 0);
        assert_eq!(t.records[0].cum_dist_ft, 0.0);
        assert!(t.records[2].cum_dist_ft > t.records[1].cum_dist_ft);
    }

    #[test]
    fn out_of_range_latitude_is_dropped() {
        let csv = format!(
            "{HEADER}S1,1,2019-05-01T14:00:00.000Z,95,-96,90,50\n\
             S1,1,2019-05-01T14:00:01.000Z,41,-96,90,50\n"
        );
        let t = clean_sensor(&[src("a.csv", &csv)]).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.drops.get(DropReason::OutOfRange), 1);
        assert_eq!(t.rows_read, 2);
    }

    #[test]
    fn malformed_rows_are_classified() {
        let csv = format!(
            "{HEADER}S1,1,not-a-time,41,-96,90,50\n\
             S1,1,2019-05-01T14:00:01.000Z,41,-96,360,50\n\
             S1,1,2019-05-01T14:00:02.000Z,41,-96,90,-1\n\
             S1,1,2019-05-01T14:00:03.000Z,41,-96\n\
             S1,0,2019-05-01T14:00:04.000Z,41,-96,90,5\n\
             S1,1,2019-05-01T14:00:05.000Z,41,-96,90,5\n\
             S1,1,2019-05-01T14:00:05.000Z,41,-97,90,5\n"
        );
        let t = clean_sensor(&[src("a.csv", &csv)]).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].pos.lon(), -96.0);
        assert_eq!(t.drops.get(DropReason::Unparseable), 2);
        assert_eq!(t.drops.get(DropReason::OutOfRange), 2);
        assert_eq!(t.drops.get(DropReason::NegativeSpeed), 1);
        assert_eq!(t.drops.get(DropReason::DuplicateTimestamp), 1);
        assert_eq!(t.rows_read, t.records.len() as u64 + t.drops.total());
    }

    #[test]
    fn merge_sorts_subjects() {
        let b = format!("{HEADER}S2,1,2019-05-01T14:00:00.000Z,41,-96,90,50\n");
        let a = format!(
            "{HEADER}S1,2,2019-05-01T15:00:00.000Z,41,-96,90,50\nS1,1,2019-05-01T14:00:00.000Z,41,-96,90,50\n"
        );
        let t = clean_sensor(&[src("b.csv", &b), src("a.csv", &a)]).unwrap();
        let keys: Vec<_> = t.records.iter().map(|r| (r.subj.as_str(), r.drive)).collect();
        assert_eq!(keys, [("S1", 1), ("S1", 2), ("S2", 1)]);
    }

    #[test]
    fn header_mismatch_lists_missing() {
        let err = clean_sensor(&[src("x.csv", "subj,drive,lat\nS1,1,41\n")]).unwrap_err();
        match err {
            IngestError::HeaderMismatch { missing, .. } => {
                assert_eq!(missing, ["time_utc", "lon", "heading_deg", "speed_fps"])
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unreadable_file() {
        let err = NamedSource::from_path(Path::new("/nonexistent/sensor.csv")).unwrap_err();
        assert!(matches!(err, IngestError::Unreadable { .. }));
    }

    #[test]
    fn supplied_cum_dist_is_validated_and_rebased() {
        let csv = "subj,drive,time_utc,lat,lon,heading_deg,speed_fps,cum_dist_ft\n\
             S1,1,2019-05-01T14:00:00.000Z,41,-96,90,50,1000\n\
             S1,1,2019-05-01T14:00:01.000Z,41,-96,90,50,1050\n\
             S1,1,2019-05-01T14:00:02.000Z,41,-96,90,50,1040\n\
             S1,1,2019-05-01T14:00:03.000Z,41,-96,90,50,1100\n";
        let t = clean_sensor(&[src("a.csv", csv)]).unwrap();
        let cum: Vec<f64> = t.records.iter().map(|r| r.cum_dist_ft).collect();
        assert_eq!(cum, [0.0, 50.0, 100.0]);
        assert_eq!(t.drops.get(DropReason::NonMonotonicCumDist), 1);
    }

    fn rec_at(pos: GeoPoint, ms: i64) -> SensorRecord {
        SensorRecord {
            subj: "S".into(),
            drive: 1,
            t_utc: Timestamp::from_millis(ms),
            pos,
            heading: HeadingDeg::new(0.0).unwrap(),
            speed_fps: 0.0,
            cum_dist_ft: -1.0,
        }
    }

    #[test]
    fn cum_dist_examples() {
        let o = GeoPoint::new(41.0, -96.0).unwrap();
        let mut one = vec![rec_at(o, 0)];
        compute_cum_dist(&mut one);
        assert_eq!(one[0].cum_dist_ft, 0.0);

        let far = LocalFrame::new(o).unproject(0.0, 100.0).unwrap();
        let mut two = vec![rec_at(o, 0), rec_at(far, 1000)];
        compute_cum_dist(&mut two);
        assert_eq!(two[0].cum_dist_ft, 0.0);
        assert_abs_diff_eq!(two[1].cum_dist_ft, haversine_distance_ft(o, far), epsilon = 1e-12);
        assert_abs_diff_eq!(two[1].cum_dist_ft, 100.0, epsilon = 1e-6);

        let mut still: Vec<_> = (0..5).map(|i| rec_at(o, i * 1000)).collect();
        compute_cum_dist(&mut still);
        assert!(still.iter().all(|r| r.cum_dist_ft == 0.0));
    }

    fn sensor_fixture() -> Vec<SensorRecord> {
        let csv = format!(
            "{HEADER}S1,1,2019-05-01T14:00:10.000Z,41,-96,90,50\n\
             S1,1,2019-05-01T14:00:10.500Z,41,-95.9999,90,50\n\
             S1,1,2019-05-01T14:00:20.000Z,41,-95.9998,90,50\n"
        );
        clean_sensor(&[src("s.csv", &csv)]).unwrap().records
    }

    #[test]
    fn detection_join_rules() {
        let sensor = sensor_fixture();
        let det = "subj,drive,time_utc,object_class,confidence\n\
            S1,1,2019-05-01T14:00:10.200Z,stop_sign,0.9\n\
            S1,1,2019-05-01T14:00:13.500Z,stop_sign,0.9\n\
            S1,1,2019-05-01T14:00:10.250Z,signal_state,0.8\n\
            S1,1,2019-05-01T14:00:10.300Z,yield_sign,0.8\n\
            S1,1,2019-05-01T14:00:10.300Z,stop_sign,1.5\n\
            S9,1,2019-05-01T14:00:10.300Z,stop_sign,0.5\n";
        let t = clean_cv(&[src("d.csv", det)], &sensor).unwrap();
        assert_eq!(t.records.len(), 2);
        // 10.2 s is nearer to the 10.0 s sample
        assert_eq!(t.records[0].pos, sensor[0].pos);
        // 10.25 s is equidistant; the earlier sample wins
        assert_eq!(t.records[1].object_class, ObjectClass::SignalState);
        assert_eq!(t.records[1].pos, sensor[0].pos);
        assert_eq!(t.drops.get(DropReason::NoSensorMatch), 2);
        assert_eq!(t.drops.get(DropReason::UnknownClass), 1);
        assert_eq!(t.drops.get(DropReason::OutOfRange), 1);
    }

    #[test]
    fn clean_tables_round_trip_through_csv() {
        let sensor = sensor_fixture();
        let mut buf = Vec::new();
        write_sensor_csv(&sensor, &mut buf).unwrap();
        let back = read_clean_sensor(&NamedSource::new("clean", buf.clone())).unwrap();
        assert_eq!(back, sensor);

        let det = "subj,drive,time_utc,object_class,confidence\nS1,1,2019-05-01T14:00:20.100Z,stop_sign,0.75\n";
        let dets = clean_cv(&[src("d.csv", det)], &sensor).unwrap().records;
        let mut buf = Vec::new();
        write_detection_csv(&dets, &mut buf).unwrap();
        assert_eq!(read_clean_detections(&NamedSource::new("d", buf)).unwrap(), dets);
    }

    #[test]
    fn drop_report_json_shape() {
        let mut d = DropReport::default();
        d.add(DropReason::OutOfRange);
        d.add_n(DropReason::NoSensorMatch, 2);
        let v: serde_json::Value = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(v, serde_json::json!({"out_of_range": 1, "no_sensor_match": 2}));
    }
}

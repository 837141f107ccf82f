//! Video matching, overlay timing and cut-lists for an external video
//! processor.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ingest::SensorRecord;
use crate::time::Timestamp;
use crate::trajectory::TrajectoryCandidate;

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("no video covers trajectory {traj_id}")]
    NoCoveringVideo { traj_id: String },
    #[error("target distance {target} ft outside window [{lo}, {hi}] ft")]
    TargetOutOfRange { target: f64, lo: f64, hi: f64 },
    #[error("empty trajectory window")]
    EmptyWindow,
    #[error("video metadata line {line}: {message}")]
    InvalidVideo { line: u64, message: String },
    #[error("video metadata: {0}")]
    Csv(#[from] csv::Error),
    #[error("cut-list: {0}")]
    CutList(String),
    #[error("invalid overlay parameters: {0}")]
    InvalidParams(String),
    #[error("running {program}: {message}")]
    Exec { program: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoFile {
    pub uri: String,
    pub subj: String,
    pub drive: u32,
    pub start_time_utc: Timestamp,
    pub end_time_utc: Timestamp,
    pub fps: f64,
}

pub const VIDEO_COLUMNS: [&str; 6] = ["uri", "subj", "drive", "start_time_utc", "end_time_utc", "fps"];

pub fn read_video_csv(bytes: &[u8]) -> Result<Vec<VideoFile>, ClipError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in rdr.deserialize::<VideoFile>() {
        let v = row?;
        let line = out.len() as u64 + 2;
        if v.end_time_utc <= v.start_time_utc {
            return Err(ClipError::InvalidVideo {
                line,
                message: "end time must be after start time".into(),
            });
        }
        if !(v.fps.is_finite() && v.fps > 0.0) {
            return Err(ClipError::InvalidVideo {
                line,
                message: "fps must be positive".into(),
            });
        }
        out.push(v);
    }
    Ok(out)
}

pub fn write_video_csv<W: Write>(videos: &[VideoFile], out: W) -> Result<(), ClipError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(VIDEO_COLUMNS)?;
    for v in videos {
        w.serialize(v)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoMatch<'a> {
    pub video: &'a VideoFile,
    pub spans_files: bool,
}

/// The video holding the whole window, else the one holding the reference
/// time (flagged as spanning files). Earlier-starting files win ties.
pub fn match_video<'a>(traj: &TrajectoryCandidate, videos: &'a [VideoFile]) -> Result<VideoMatch<'a>, ClipError> {
    let mut own: Vec<&VideoFile> = videos
        .iter()
        .filter(|v| v.subj == traj.subj && v.drive == traj.drive)
        .collect();
    own.sort_by(|a, b| (a.start_time_utc, &a.uri).cmp(&(b.start_time_utc, &b.uri)));
    if let Some(v) = own
        .iter()
        .find(|v| v.start_time_utc <= traj.start_time_utc && traj.end_time_utc <= v.end_time_utc)
    {
        return Ok(VideoMatch {
            video: v,
            spans_files: false,
        });
    }
    own.iter()
        .find(|v| v.start_time_utc <= traj.ref_time_utc && traj.ref_time_utc <= v.end_time_utc)
        .map(|v| VideoMatch {
            video: v,
            spans_files: true,
        })
        .ok_or_else(|| ClipError::NoCoveringVideo {
            traj_id: traj.traj_id.clone(),
        })
}

/// Epoch milliseconds at which cumulative distance first reaches `target`,
/// linear between samples. A flat stretch at the target resolves to its
/// earliest sample.
pub fn distance_crossing_time(points: &[SensorRecord], target_cum_dist_ft: f64) -> Result<f64, ClipError> {
    let (first, last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(ClipError::EmptyWindow),
    };
    let out_of_range = || ClipError::TargetOutOfRange {
        target: target_cum_dist_ft,
        lo: first.cum_dist_ft,
        hi: last.cum_dist_ft,
    };
    if target_cum_dist_ft.is_nan() || target_cum_dist_ft < first.cum_dist_ft {
        return Err(out_of_range());
    }
    let i = points.partition_point(|r| r.cum_dist_ft < target_cum_dist_ft);
    let Some(hit) = points.get(i) else {
        return Err(out_of_range());
    };
    if hit.cum_dist_ft == target_cum_dist_ft || i == 0 {
        return Ok(hit.t_utc.millis() as f64);
    }
    let prev = &points[i - 1];
    let frac = (target_cum_dist_ft - prev.cum_dist_ft) / (hit.cum_dist_ft - prev.cum_dist_ft);
    let (t0, t1) = (prev.t_utc.millis() as f64, hit.t_utc.millis() as f64);
    Ok(t0 + frac * (t1 - t0))
}

/// Whole milliseconds, written as seconds with three decimals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Millis(pub i64);

impl Millis {
    pub fn seconds(&self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn from_seconds(s: f64) -> Self {
        Millis((s * 1000.0).round() as i64)
    }
}

impl fmt::Display for Millis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:03}", a / 1000, a % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipSpec {
    pub traj_id: String,
    pub source_uri: String,
    pub in_offset: Millis,
    pub duration: Millis,
    pub overlay_on: Millis,
    pub overlay_off: Millis,
    pub output_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayParams {
    pub on_upstream_ft: f64,
    pub off_downstream_ft: f64,
}

impl Default for OverlayParams {
    fn default() -> Self {
        OverlayParams {
            on_upstream_ft: 150.0,
            off_downstream_ft: 50.0,
        }
    }
}

impl OverlayParams {
    pub fn validate(&self) -> Result<(), ClipError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.on_upstream_ft) && ok(self.off_downstream_ft) {
            Ok(())
        } else {
            Err(ClipError::InvalidParams("overlay distances must be non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unclippable {
    pub traj_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipOutcome {
    pub specs: Vec<ClipSpec>,
    pub unclippable: Vec<Unclippable>,
    /// Trajectories cut from the file holding their reference time only.
    pub spans_files: Vec<String>,
}

pub fn output_name(traj_id: &str) -> String {
    format!("{traj_id}.mp4")
}

fn clip_for(traj: &TrajectoryCandidate, videos: &[VideoFile], params: &OverlayParams) -> Result<(ClipSpec, bool), ClipError> {
    let m = match_video(traj, videos)?;
    let clip_start = traj.start_time_utc.max(m.video.start_time_utc);
    let clip_end = traj.end_time_utc.min(m.video.end_time_utc);
    let duration = clip_end.millis() - clip_start.millis();
    if duration <= 0 {
        return Err(ClipError::NoCoveringVideo {
            traj_id: traj.traj_id.clone(),
        });
    }
    let lo = traj.points[0].cum_dist_ft;
    let hi = traj.points[traj.points.len() - 1].cum_dist_ft;
    let ref_cum = traj.ref_point().cum_dist_ft;
    let rel = |target: f64| -> Result<Millis, ClipError> {
        let t = distance_crossing_time(&traj.points, target.clamp(lo, hi))?;
        let ms = (t - clip_start.millis() as f64).round() as i64;
        Ok(Millis(ms.clamp(0, duration)))
    };
    let overlay_on = rel(ref_cum - params.on_upstream_ft)?;
    let overlay_off = rel(ref_cum + params.off_downstream_ft)?;
    Ok((
        ClipSpec {
            traj_id: traj.traj_id.clone(),
            source_uri: m.video.uri.clone(),
            in_offset: Millis(clip_start.millis() - m.video.start_time_utc.millis()),
            duration: Millis(duration),
            overlay_on,
            overlay_off,
            output_name: output_name(&traj.traj_id),
        },
        m.spans_files,
    ))
}

/// One clip per trajectory, in trajectory order. Trajectories without a
/// covering video are reported, not errors.
pub fn build_clip_specs(
    trajs: &[TrajectoryCandidate],
    videos: &[VideoFile],
    params: &OverlayParams,
) -> Result<ClipOutcome, ClipError> {
    params.validate()?;
    let results: Vec<_> = trajs.par_iter().map(|t| clip_for(t, videos, params)).collect();
    let mut out = ClipOutcome::default();
    for (traj, r) in trajs.iter().zip(results) {
        match r {
            Ok((spec, spans)) => {
                if spans {
                    out.spans_files.push(spec.traj_id.clone());
                }
                out.specs.push(spec);
            }
            Err(ClipError::NoCoveringVideo { .. }) => out.unclippable.push(Unclippable {
                traj_id: traj.traj_id.clone(),
                reason: "no_covering_video".into(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

pub fn cutlist_to_json(specs: &[ClipSpec]) -> String {
    if specs.is_empty() {
        return "[]\n".into();
    }
    let entries: Vec<String> = specs
        .iter()
        .map(|s| {
            format!(
                "  {{\n    \"traj_id\": {},\n    \"source_uri\": {},\n    \"in_offset_s\": {},\n    \"duration_s\": {},\n    \"overlay_on_s\": {},\n    \"overlay_off_s\": {},\n    \"output_name\": {}\n  }}",
                json_str(&s.traj_id),
                json_str(&s.source_uri),
                s.in_offset,
                s.duration,
                s.overlay_on,
                s.overlay_off,
                json_str(&s.output_name)
            )
        })
        .collect();
    format!("[\n{}\n]\n", entries.join(",\n"))
}

pub fn cutlist_from_json(text: &str) -> Result<Vec<ClipSpec>, ClipError> {
    let v: Value = serde_json::from_str(text).map_err(|e| ClipError::CutList(e.to_string()))?;
    let arr = v.as_array().ok_or_else(|| ClipError::CutList("expected an array".into()))?;
    arr.iter()
        .enumerate()
        .map(|(i, e)| {
            let s = |k: &str| {
                e.get(k)
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| ClipError::CutList(format!("entry {i}: missing {k}")))
            };
            let n = |k: &str| {
                e.get(k)
                    .and_then(Value::as_f64)
                    .map(Millis::from_seconds)
                    .ok_or_else(|| ClipError::CutList(format!("entry {i}: missing {k}")))
            };
            Ok(ClipSpec {
                traj_id: s("traj_id")?,
                source_uri: s("source_uri")?,
                in_offset: n("in_offset_s")?,
                duration: n("duration_s")?,
                overlay_on: n("overlay_on_s")?,
                overlay_off: n("overlay_off_s")?,
                output_name: s("output_name")?,
            })
        })
        .collect()
}

/// Axis-aligned square drawn over the clip while the overlay is active.
/// Fractions are of the frame; the side length is a fraction of the width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub center_x: f64,
    pub center_y: f64,
    pub width: f64,
    pub color: String,
    pub thickness: u32,
}

impl Default for OverlayBox {
    fn default() -> Self {
        OverlayBox {
            center_x: 0.5,
            center_y: 0.3,
            width: 0.1,
            color: "red".into(),
            thickness: 4,
        }
    }
}

impl OverlayBox {
    pub fn drawbox_filter(&self, on: Millis, off: Millis) -> String {
        let half = self.width / 2.0;
        format!(
            "drawbox=x=iw*{}:y=ih*{}-iw*{}:w=iw*{}:h=iw*{}:color={}:t={}:enable='between(t,{},{})'",
            self.center_x - half,
            self.center_y,
            half,
            self.width,
            self.width,
            self.color,
            self.thickness,
            on,
            off
        )
    }
}

pub fn clip_command(spec: &ClipSpec, processor: &str, clip_dir: &str, overlay: &OverlayBox) -> Vec<String> {
    let output = if clip_dir.is_empty() {
        spec.output_name.clone()
    } else {
        format!("{}/{}", clip_dir.trim_end_matches('/'), spec.output_name)
    };
    vec![
        processor.to_string(),
        "-hide_banner".into(),
        "-y".into(),
        "-ss".into(),
        spec.in_offset.to_string(),
        "-i".into(),
        spec.source_uri.clone(),
        "-t".into(),
        spec.duration.to_string(),
        "-vf".into(),
        overlay.drawbox_filter(spec.overlay_on, spec.overlay_off),
        output,
    ]
}

fn shell_quote(arg: &str) -> String {
    let plain = !arg.is_empty()
        && arg
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "_-./:=,+@%".contains(c));
    if plain {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', "'\\''"))
    }
}

/// One shell command line per clip.
pub fn emit_script(specs: &[ClipSpec], processor: &str, clip_dir: &str, overlay: &OverlayBox) -> String {
    specs
        .iter()
        .map(|s| {
            let argv = clip_command(s, processor, clip_dir, overlay);
            let mut line = argv.iter().map(|a| shell_quote(a)).collect::<Vec<_>>().join(" ");
            line.push('\n');
            line
        })
        .collect()
}

/// Runs the processor once per clip. Only used when execution is enabled.
pub fn execute_clips(specs: &[ClipSpec], processor: &str, clip_dir: &str, overlay: &OverlayBox) -> Result<(), ClipError> {
    let exec_err = |message: String| ClipError::Exec {
        program: processor.to_string(),
        message,
    };
    if !clip_dir.is_empty() {
        std::fs::create_dir_all(Path::new(clip_dir)).map_err(|e| exec_err(e.to_string()))?;
    }
    for s in specs {
        let argv = clip_command(s, processor, clip_dir, overlay);
        let status = Command::new(&argv[0])
            .args(&argv[1..])
            .status()
            .map_err(|e| exec_err(e.to_string()))?;
        if !status.success() {
            return Err(exec_err(format!("{} exited with {status}", s.traj_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, HeadingDeg};

    const T0: i64 = 1_556_719_200_000;

    fn rec(k: usize, cum: f64) -> SensorRecord {
        SensorRecord {
            subj: "S01".into(),
            drive: 1,
            t_utc: Timestamp::from_millis(T0 + k as i64 * 1000),
            pos: GeoPoint::new(41.0, -96.0).unwrap(),
            heading: HeadingDeg::new(90.0).unwrap(),
            speed_fps: 50.0,
            cum_dist_ft: cum,
        }
    }

    /// 11 samples at 50 ft/s starting `offset_s` into the drive, ref at index 6.
    fn traj(offset_s: usize) -> TrajectoryCandidate {
        let points: Vec<_> = (0..11).map(|k| rec(offset_s + k, 50.0 * (offset_s + k) as f64)).collect();
        TrajectoryCandidate {
            traj_id: "S01_1_7".into(),
            subj: "S01".into(),
            drive: 1,
            intxn_id: 7,
            leg_id: 1,
            ref_index: 6,
            ref_time_utc: points[6].t_utc,
            start_time_utc: points[0].t_utc,
            end_time_utc: points[10].t_utc,
            points,
        }
    }

    fn video(uri: &str, start_s: i64, end_s: i64) -> VideoFile {
        VideoFile {
            uri: uri.into(),
            subj: "S01".into(),
            drive: 1,
            start_time_utc: Timestamp::from_millis(T0 + start_s * 1000),
            end_time_utc: Timestamp::from_millis(T0 + end_s * 1000),
            fps: 30.0,
        }
    }

    #[test]
    fn crossing_examples() {
        let t = traj(0);
        // window starts 300 ft upstream of ref
        let ref_cum = t.ref_point().cum_dist_ft;
        assert_eq!(ref_cum, 300.0);
        assert_eq!(distance_crossing_time(&t.points, ref_cum - 150.0).unwrap(), (T0 + 3000) as f64);
        assert_eq!(distance_crossing_time(&t.points, 100.0).unwrap(), (T0 + 2000) as f64);
        assert_eq!(distance_crossing_time(&t.points, 125.0).unwrap(), (T0 + 2500) as f64);
        assert!(matches!(distance_crossing_time(&t.points, 501.0), Err(ClipError::TargetOutOfRange { .. })));
        assert!(matches!(distance_crossing_time(&t.points, -1.0), Err(ClipError::TargetOutOfRange { .. })));

        let flat = vec![rec(0, 0.0), rec(1, 50.0), rec(2, 50.0), rec(3, 50.0), rec(4, 100.0)];
        assert_eq!(distance_crossing_time(&flat, 50.0).unwrap(), (T0 + 1000) as f64);
    }

    #[test]
    fn video_matching() {
        let t = traj(100);
        let vids = vec![video("a.mp4", 0, 600)];
        let m = match_video(&t, &vids).unwrap();
        assert!(!m.spans_files);
        let out = build_clip_specs(std::slice::from_ref(&t), &vids, &OverlayParams::default()).unwrap();
        assert_eq!(out.specs[0].in_offset, Millis(100_000));

        let split = vec![video("a.mp4", 0, 104), video("b.mp4", 104, 600)];
        let m = match_video(&t, &split).unwrap();
        assert_eq!(m.video.uri, "b.mp4");
        assert!(m.spans_files);

        let none = vec![video("a.mp4", 0, 50)];
        let out = build_clip_specs(&[t], &none, &OverlayParams::default()).unwrap();
        assert!(out.specs.is_empty());
        assert_eq!(out.unclippable[0].traj_id, "S01_1_7");
    }

    #[test]
    fn overlay_timings() {
        let vids = vec![video("a.mp4", 0, 600)];
        let out = build_clip_specs(&[traj(0)], &vids, &OverlayParams::default()).unwrap();
        let s = &out.specs[0];
        assert_eq!((s.overlay_on, s.overlay_off, s.duration), (Millis(3000), Millis(7000), Millis(10_000)));
        assert_eq!(s.output_name, "S01_1_7.mp4");

        // window now starts only 100 ft upstream of ref
        let mut t = traj(0);
        t.points.drain(..4);
        t.ref_index = 2;
        t.start_time_utc = t.points[0].t_utc;
        let out = build_clip_specs(&[t], &vids, &OverlayParams::default()).unwrap();
        assert_eq!(out.specs[0].overlay_on, Millis(0));

        let zero = OverlayParams {
            on_upstream_ft: 0.0,
            off_downstream_ft: 0.0,
        };
        let out = build_clip_specs(&[traj(0)], &vids, &zero).unwrap();
        assert_eq!(out.specs[0].overlay_on, Millis(6000));
        assert_eq!(out.specs[0].overlay_off, Millis(6000));
    }

    #[test]
    fn cutlist_and_script() {
        assert_eq!(cutlist_to_json(&[]), "[]\n");
        assert_eq!(emit_script(&[], "ffmpeg", "clips", &OverlayBox::default()), "");
        let vids = vec![video("videos/a b.mp4", 0, 600)];
        let mut t2 = traj(20);
        t2.traj_id = "S01_1_8".into();
        let out = build_clip_specs(&[traj(0), t2], &vids, &OverlayParams::default()).unwrap();
        let json = cutlist_to_json(&out.specs);
        assert!(json.contains("\"overlay_on_s\": 3.000"));
        assert_eq!(cutlist_from_json(&json).unwrap(), out.specs);
        let parsed: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.as_array().unwrap()[0].as_object().unwrap().len(), 7);

        let script = emit_script(&out.specs, "ffmpeg", "clips", &OverlayBox::default());
        let lines: Vec<_> = script.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.contains("-i 'videos/a b.mp4'")));
        assert!(lines[0].ends_with("clips/S01_1_7.mp4"));
        assert!(lines[1].ends_with("clips/S01_1_8.mp4"));
        assert!(lines[0].contains("enable='\\''between(t,3.000,7.000)'\\''"));
    }

    #[test]
    fn millis_format() {
        assert_eq!(Millis(3000).to_string(), "3.000");
        assert_eq!(Millis(12).to_string(), "0.012");
        assert_eq!(Millis(-1500).to_string(), "-1.500");
        assert_eq!(Millis::from_seconds(7.0), Millis(7000));
    }

    #[test]
    fn video_csv_round_trip() {
        let vids = vec![video("a.mp4", 0, 600), video("b.mp4", 600, 1200)];
        let mut buf = Vec::new();
        write_video_csv(&vids, &mut buf).unwrap();
        assert!(buf.starts_with(b"uri,subj,drive,start_time_utc,end_time_utc,fps\n"));
        assert_eq!(read_video_csv(&buf).unwrap(), vids);
        let bad = b"uri,subj,drive,start_time_utc,end_time_utc,fps\na,S,1,2019-05-01T14:00:00Z,2019-05-01T13:00:00Z,30\n";
        assert!(matches!(read_video_csv(bad), Err(ClipError::InvalidVideo { line: 2, .. })));
    }
}

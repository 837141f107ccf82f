//! Individual stages over the output directory, and the `all` sequence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::storage::{expand_inputs, read_bytes, read_text, resolve_uri, write_atomic};
use super::{PipelineError, Stage, StageReport};
use crate::clips::{build_clip_specs, cutlist_from_json, cutlist_to_json, emit_script, execute_clips, read_video_csv, OverlayBox, OverlayParams, Unclippable};
use crate::discovery::{
    candidates_from_geojson, candidates_to_geojson, extract_lrs_candidates, subject_intersections, visited_from_geojson,
    visited_to_geojson, RoadNetwork, VisitParams,
};
use crate::ingest::{clean_cv, clean_sensor, read_clean_detections, read_clean_sensor, write_detection_csv, write_sensor_csv, NamedSource, ObjectClass, SensorRecord};
use crate::review::{build_review_template, export_candidates_kml, import_reviewed_kml, parse_demographics, ControlType, CustomField, ImportParams, ReviewedIntersection};
use crate::synth::generate;
use crate::trajectory::{assign_bearings, extract_trajectories, read_trajectory_csv, rehydrate, write_trajectory_csv, TrajectorySummary, WindowParams};

pub const CLEAN_SENSOR: &str = "clean_sensor.csv";
pub const CLEAN_DETECTIONS: &str = "clean_detections.csv";
pub const LRS_CANDIDATES: &str = "lrs_candidates.geojson";
pub const VISITED: &str = "visited_candidates.geojson";
pub const UNMATCHED: &str = "unmatched_clusters.json";
pub const CANDIDATES_KML: &str = "candidates.kml";
pub const REVIEWED: &str = "reviewed_intersections.json";
pub const REVIEW_REJECTS: &str = "review_rejects.json";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const TRAJECTORY_SKIPS: &str = "trajectory_skips.json";
pub const CUTLIST: &str = "cutlist.json";
pub const CLIP_SCRIPT: &str = "clips.sh";
pub const UNCLIPPABLE: &str = "unclippable.json";
pub const REVIEW_TEMPLATE: &str = "review_template.csv";
pub const REVIEW_VALIDATION: &str = "review_validation.json";
pub const REVIEW_STATE: &str = "review_state.json";

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub reports: Vec<StageReport>,
    /// Set when `all` stopped to wait for the human review.
    pub paused: Option<String>,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("outputs serialize");
    s.push('\n');
    s
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prerequisite(&self, name: &str, hint: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingPrerequisite {
                path: p.display().to_string(),
                hint: hint.to_string(),
            })
        }
    }

    fn input(&self, value: &Option<String>, key: &str) -> Result<PathBuf, PipelineError> {
        let uri = value
            .as_deref()
            .ok_or_else(|| PipelineError::Config(format!("inputs.{key} is not set")))?;
        resolve_uri(uri, &self.cfg.base_dir)
    }

    /// Writes every output, then the report beside the first one.
    fn commit(&self, files: &[(&str, Vec<u8>)], mut report: StageReport, started: Instant) -> Result<StageReport, PipelineError> {
        debug_assert!(report.reconciles(), "{report:?}");
        for (name, bytes) in files {
            write_atomic(&self.path(name), bytes)?;
        }
        report.wall_time_s = started.elapsed().as_secs_f64();
        write_atomic(&self.path(&format!("{}.report.json", report.output)), report.to_json().as_bytes())?;
        Ok(report)
    }
}

fn sources(paths: &[PathBuf]) -> Result<Vec<NamedSource>, PipelineError> {
    paths
        .iter()
        .map(|p| Ok(NamedSource::new(p.display().to_string(), read_bytes(p)?)))
        .collect()
}

fn load_sensor(ctx: &Ctx<'_>) -> Result<Vec<SensorRecord>, PipelineError> {
    let p = ctx.prerequisite(CLEAN_SENSOR, "run the clean stage first")?;
    read_clean_sensor(&NamedSource::new(p.display().to_string(), read_bytes(&p)?)).map_err(PipelineError::data)
}

fn stage_clean(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let cfg = ctx.cfg;
    if cfg.inputs.sensor.is_empty() {
        return Err(PipelineError::Config("inputs.sensor is empty".into()));
    }
    let sensor_src = sources(&expand_inputs(&cfg.inputs.sensor, &cfg.base_dir)?)?;
    let det_src = sources(&expand_inputs(&cfg.inputs.detections, &cfg.base_dir)?)?;
    let sensor = clean_sensor(&sensor_src).map_err(PipelineError::data)?;
    let dets = clean_cv(&det_src, &sensor.records).map_err(PipelineError::data)?;

    let mut sensor_csv = Vec::new();
    write_sensor_csv(&sensor.records, &mut sensor_csv).map_err(PipelineError::data)?;
    let mut det_csv = Vec::new();
    write_detection_csv(&dets.records, &mut det_csv).map_err(PipelineError::data)?;

    let mut sr = StageReport::new(Stage::Clean, CLEAN_SENSOR);
    sr.rows_in = sensor.rows_read;
    sr.rows_out = sensor.records.len() as u64;
    for (reason, n) in sensor.drops.iter() {
        sr.drop_n(reason, n);
    }
    sr.count("files", sensor_src.len() as u64);
    let mut dr = StageReport::new(Stage::Clean, CLEAN_DETECTIONS);
    dr.rows_in = dets.rows_read;
    dr.rows_out = dets.records.len() as u64;
    for (reason, n) in dets.drops.iter() {
        dr.drop_n(reason, n);
    }
    dr.count("files", det_src.len() as u64);

    let sensor_drops = format!("{CLEAN_SENSOR}.drops.json");
    let det_drops = format!("{CLEAN_DETECTIONS}.drops.json");
    let sr = ctx.commit(
        &[(CLEAN_SENSOR, sensor_csv), (sensor_drops.as_str(), sensor.drops.to_json().into_bytes())],
        sr,
        started,
    )?;
    let dr = ctx.commit(
        &[(CLEAN_DETECTIONS, det_csv), (det_drops.as_str(), dets.drops.to_json().into_bytes())],
        dr,
        started,
    )?;
    Ok(vec![sr, dr])
}

fn stage_lrs(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let path = ctx.input(&ctx.cfg.inputs.network, "network")?;
    let network = RoadNetwork::from_geojson(&read_text(&path)?).map_err(PipelineError::data)?;
    let candidates = extract_lrs_candidates(&network, ctx.cfg.params.tol_ft);
    let absorbed: usize = candidates.iter().map(|c| c.degree).sum();
    let mut r = StageReport::new(Stage::LrsIntxns, LRS_CANDIDATES);
    r.rows_in = network.vertex_count() as u64;
    r.rows_out = absorbed as u64;
    r.drop_n("below_min_degree", r.rows_in - r.rows_out);
    r.count("polylines", network.polylines.len() as u64);
    r.count("candidates", candidates.len() as u64);
    Ok(vec![ctx.commit(&[(LRS_CANDIDATES, candidates_to_geojson(&candidates).into_bytes())], r, started)?])
}

fn stage_subj(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let p = &ctx.cfg.params;
    let det_path = ctx.prerequisite(CLEAN_DETECTIONS, "run the clean stage first")?;
    let cand_path = ctx.prerequisite(LRS_CANDIDATES, "run the lrs-intxns stage first")?;
    let dets = read_clean_detections(&NamedSource::new(det_path.display().to_string(), read_bytes(&det_path)?))
        .map_err(PipelineError::data)?;
    let candidates = candidates_from_geojson(&read_text(&cand_path)?).map_err(PipelineError::data)?;
    let params = VisitParams {
        object_class: p.control_class,
        max_gap_s: p.max_gap_s,
        eps_ft: p.eps_ft,
        min_pts: p.min_pts,
        max_match_ft: p.max_match_ft,
    };
    let out = subject_intersections(&dets, &candidates, &params).map_err(PipelineError::data)?;
    let mut r = StageReport::new(Stage::SubjIntxns, VISITED);
    r.rows_in = dets.len() as u64;
    r.rows_out = out.matched_members as u64;
    r.drop_n("other_class", out.other_class as u64);
    r.drop_n("not_last_in_run", out.not_last_in_run as u64);
    r.drop_n("noise", out.noise as u64);
    r.drop_n("unmatched_cluster", out.unmatched_members as u64);
    r.count("clusters", out.clusters.len() as u64);
    r.count("visited_candidates", out.visited.len() as u64);
    r.count("unmatched_clusters", out.unmatched.len() as u64);
    if out.visited.is_empty() {
        r.warnings.push("no visited candidates".into());
    }
    Ok(vec![ctx.commit(
        &[
            (VISITED, visited_to_geojson(&out.visited).into_bytes()),
            (UNMATCHED, json_pretty(&out.unmatched).into_bytes()),
        ],
        r,
        started,
    )?])
}

fn control_for(class: ObjectClass) -> ControlType {
    match class {
        ObjectClass::StopSign => ControlType::Stop,
        ObjectClass::SignalState => ControlType::Signal,
    }
}

fn stage_export(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let path = ctx.prerequisite(VISITED, "run the subj-intxns stage first")?;
    let visited = visited_from_geojson(&read_text(&path)?).map_err(PipelineError::data)?;
    let kml = export_candidates_kml(&visited, control_for(ctx.cfg.params.control_class)).map_err(PipelineError::data)?;
    let mut r = StageReport::new(Stage::ExportKml, CANDIDATES_KML);
    r.rows_in = visited.len() as u64;
    r.rows_out = visited.len() as u64;
    Ok(vec![ctx.commit(&[(CANDIDATES_KML, kml.into_bytes())], r, started)?])
}

fn stage_import(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let path = ctx.input(&ctx.cfg.inputs.reviewed_kml, "reviewed_kml").map_err(|_| PipelineError::MissingPrerequisite {
        path: "inputs.reviewed_kml".into(),
        hint: format!("review {CANDIDATES_KML} and set inputs.reviewed_kml to the edited file"),
    })?;
    if !path.is_file() {
        return Err(PipelineError::MissingPrerequisite {
            path: path.display().to_string(),
            hint: format!("save the reviewed copy of {CANDIDATES_KML} there"),
        });
    }
    let p = &ctx.cfg.params;
    let params = ImportParams {
        polygon_gate_ft: p.polygon_gate_ft,
        line_gate_ft: p.line_gate_ft,
    };
    let imported = import_reviewed_kml(&read_text(&path)?, &params).map_err(PipelineError::data)?;
    let mut r = StageReport::new(Stage::ImportReview, REVIEWED);
    r.rows_in = imported.items as u64;
    r.rows_out = imported
        .intersections
        .iter()
        .map(|i| 1 + 2 * i.approaches.len() as u64)
        .sum();
    for rej in &imported.rejects {
        let reason = serde_json::to_value(rej.reason).expect("reason serializes");
        r.drop_n(reason.as_str().unwrap_or("rejected"), 1);
    }
    r.count("placemarks", imported.placemarks as u64);
    r.count("intersections", imported.intersections.len() as u64);
    r.count(
        "approaches",
        imported.intersections.iter().map(|i| i.approaches.len() as u64).sum(),
    );
    if !r.reconciles() {
        r.warnings.push("imported items do not reconcile with rejects".into());
    }
    Ok(vec![ctx.commit(
        &[
            (REVIEWED, json_pretty(&imported.intersections).into_bytes()),
            (REVIEW_REJECTS, json_pretty(&imported.rejects).into_bytes()),
        ],
        r,
        started,
    )?])
}

fn stage_traj(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let rev_path = ctx.prerequisite(
        REVIEWED,
        &format!(
            "run import-review on the reviewed KML ({}) first",
            ctx.cfg.inputs.reviewed_kml.as_deref().unwrap_or("inputs.reviewed_kml not set")
        ),
    )?;
    let sensor = load_sensor(ctx)?;
    let mut reviewed: Vec<ReviewedIntersection> =
        serde_json::from_str(&read_text(&rev_path)?).map_err(|e| PipelineError::Data(format!("{REVIEWED}: {e}")))?;
    assign_bearings(&mut reviewed).map_err(PipelineError::data)?;
    let p = &ctx.cfg.params;
    let params = WindowParams {
        upstream_ft: p.upstream_ft,
        downstream_ft: p.downstream_ft,
        heading_tol_deg: p.heading_tol_deg,
    };
    let out = extract_trajectories(&sensor, &reviewed, &params).map_err(PipelineError::data)?;
    let rows: Vec<TrajectorySummary> = out.trajectories.iter().map(|t| t.summary()).collect();
    let mut csv = Vec::new();
    write_trajectory_csv(&rows, &mut csv).map_err(PipelineError::data)?;
    let mut r = StageReport::new(Stage::Traj, TRAJECTORIES);
    r.rows_in = out.passes as u64;
    r.rows_out = rows.len() as u64;
    r.drop_n("duplicate_pass", out.skips.duplicate_pass);
    r.count("exiting_only", out.skips.exiting_only);
    r.count("truncated", out.skips.truncated.len() as u64);
    r.count("sensor_points", sensor.len() as u64);
    Ok(vec![ctx.commit(
        &[(TRAJECTORIES, csv), (TRAJECTORY_SKIPS, json_pretty(&out.skips).into_bytes())],
        r,
        started,
    )?])
}

fn load_trajectories(ctx: &Ctx<'_>) -> Result<Vec<TrajectorySummary>, PipelineError> {
    let p = ctx.prerequisite(TRAJECTORIES, "run the traj stage first")?;
    read_trajectory_csv(&read_bytes(&p)?).map_err(PipelineError::data)
}

fn stage_clips(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let rows = load_trajectories(ctx)?;
    let sensor = load_sensor(ctx)?;
    let trajs = rehydrate(&rows, &sensor).map_err(PipelineError::data)?;
    let video_path = ctx.input(&ctx.cfg.inputs.videos, "videos")?;
    let videos = read_video_csv(&read_bytes(&video_path)?).map_err(PipelineError::data)?;
    let p = &ctx.cfg.params;
    let params = OverlayParams {
        on_upstream_ft: p.overlay_on_upstream_ft,
        off_downstream_ft: p.overlay_off_downstream_ft,
    };
    let out = build_clip_specs(&trajs, &videos, &params).map_err(PipelineError::data)?;
    let c = &ctx.cfg.clips;
    let overlay = OverlayBox::default();
    let script = emit_script(&out.specs, &c.processor, &c.clip_dir, &overlay);
    let mut r = StageReport::new(Stage::Clips, CUTLIST);
    r.rows_in = trajs.len() as u64;
    r.rows_out = out.specs.len() as u64;
    r.drop_n("unclippable", out.unclippable.len() as u64);
    r.count("videos", videos.len() as u64);
    for id in &out.spans_files {
        r.warnings.push(format!("spans_files: {id}"));
    }
    let report = ctx.commit(
        &[
            (CUTLIST, cutlist_to_json(&out.specs).into_bytes()),
            (CLIP_SCRIPT, script.into_bytes()),
            (UNCLIPPABLE, json_pretty(&out.unclippable).into_bytes()),
        ],
        r,
        started,
    )?;
    if c.execute {
        let clip_dir = resolve_uri(&c.clip_dir, &ctx.out)?;
        execute_clips(&out.specs, &c.processor, &clip_dir.display().to_string(), &overlay).map_err(PipelineError::data)?;
    }
    Ok(vec![report])
}

fn stage_template(ctx: &Ctx<'_>) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let rows = load_trajectories(ctx)?;
    let cut_path = ctx.prerequisite(CUTLIST, "run the clips stage first")?;
    let clips = cutlist_from_json(&read_text(&cut_path)?).map_err(PipelineError::data)?;
    let unclippable: Vec<Unclippable> = match read_bytes(&ctx.path(UNCLIPPABLE)) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| PipelineError::Data(format!("{UNCLIPPABLE}: {e}")))?,
        Err(PipelineError::NotFound(_)) => Vec::new(),
        Err(e) => return Err(e),
    };
    let participants = match &ctx.cfg.inputs.demographics {
        Some(uri) => parse_demographics(&read_bytes(&resolve_uri(uri, &ctx.cfg.base_dir)?)?).map_err(PipelineError::data)?,
        None => Vec::new(),
    };
    let fields: Vec<CustomField> = ctx
        .cfg
        .review
        .custom_fields
        .iter()
        .map(|s| s.parse().map_err(|e: crate::review::TemplateError| PipelineError::Config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let kept: Vec<TrajectorySummary> = rows
        .iter()
        .filter(|t| !unclippable.iter().any(|u| u.traj_id == t.traj_id))
        .cloned()
        .collect();
    let template = build_review_template(&kept, &clips, &participants, &fields, &ctx.cfg.clips.video_base_url)
        .map_err(PipelineError::data)?;
    let mut r = StageReport::new(Stage::Template, REVIEW_TEMPLATE);
    r.rows_in = rows.len() as u64;
    r.rows_out = template.rows.len() as u64;
    r.drop_n("unclippable", (rows.len() - kept.len()) as u64);
    r.count("missing_demographics", template.missing_demographics as u64);
    if template.missing_demographics > 0 {
        r.warnings.push(format!(
            "{} rows have no demographics entry",
            template.missing_demographics
        ));
    }
    let csv = template.to_csv().map_err(PipelineError::data)?;
    Ok(vec![ctx.commit(
        &[(REVIEW_TEMPLATE, csv), (REVIEW_VALIDATION, template.manifest_json().into_bytes())],
        r,
        started,
    )?])
}

fn stage_synth(cfg: &PipelineConfig) -> Result<Vec<StageReport>, PipelineError> {
    let started = Instant::now();
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("the synth stage needs a synth section".into()))?;
    let scenario = generate(&synth.scenario).map_err(|e| PipelineError::Config(e.to_string()))?;
    let dir = resolve_uri(&synth.output_dir, &cfg.base_dir)?;
    let files = scenario.files();
    let mut r = StageReport::new(Stage::Synth, "ground_truth.json");
    r.count("files", files.len() as u64);
    r.count("drives", scenario.truth.expected_traj_count.len() as u64);
    r.count("expected_visited", scenario.truth.expected_visited.len() as u64);
    r.count("expected_trajectories", scenario.truth.trajectories.len() as u64);
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
    }
    r.wall_time_s = started.elapsed().as_secs_f64();
    write_atomic(&dir.join("ground_truth.json.report.json"), r.to_json().as_bytes())?;
    Ok(vec![r])
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Whether the exported candidates were already handed to a reviewer.
/// Records the current export and returns false when they were not.
fn review_handed_off(ctx: &Ctx<'_>) -> Result<bool, PipelineError> {
    let digest = sha256_hex(&read_bytes(&ctx.path(CANDIDATES_KML))?);
    let state_path = ctx.path(REVIEW_STATE);
    let previous = match read_bytes(&state_path) {
        Ok(b) => serde_json::from_slice::<serde_json::Value>(&b)
            .ok()
            .and_then(|v| v.get("candidates_kml_sha256").and_then(|s| s.as_str().map(str::to_string))),
        Err(PipelineError::NotFound(_)) => None,
        Err(e) => return Err(e),
    };
    if previous.as_deref() == Some(digest.as_str()) {
        return Ok(true);
    }
    let state = serde_json::json!({ "candidates_kml_sha256": digest });
    write_atomic(&state_path, json_pretty(&state).as_bytes())?;
    Ok(false)
}

pub fn run(stage: Stage, cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    if stage == Stage::Synth {
        return Ok(RunOutcome {
            reports: stage_synth(cfg)?,
            paused: None,
        });
    }
    let ctx = Ctx {
        cfg,
        out: resolve_uri(&cfg.output_dir, &cfg.base_dir)?,
    };
    let single = |f: fn(&Ctx<'_>) -> Result<Vec<StageReport>, PipelineError>| -> Result<RunOutcome, PipelineError> {
        Ok(RunOutcome {
            reports: f(&ctx)?,
            paused: None,
        })
    };
    match stage {
        Stage::Clean => single(stage_clean),
        Stage::LrsIntxns => single(stage_lrs),
        Stage::SubjIntxns => single(stage_subj),
        Stage::ExportKml => single(stage_export),
        Stage::ImportReview => single(stage_import),
        Stage::Traj => single(stage_traj),
        Stage::Clips => single(stage_clips),
        Stage::Template => single(stage_template),
        Stage::Synth => unreachable!("handled above"),
        Stage::All => {
            let mut reports = Vec::new();
            for f in [stage_clean, stage_lrs, stage_subj, stage_export] {
                reports.extend(f(&ctx)?);
            }
            if !review_handed_off(&ctx)? {
                let kml = ctx.path(CANDIDATES_KML);
                let msg = format!(
                    "review {} (move true intersections into a folder named `true`, draw approach polygons and entering lines), save it as inputs.reviewed_kml, then rerun `all`",
                    kml.display()
                );
                return Ok(RunOutcome {
                    reports,
                    paused: Some(msg),
                });
            }
            for f in [stage_import, stage_traj, stage_clips, stage_template] {
                reports.extend(f(&ctx)?);
            }
            Ok(RunOutcome { reports, paused: None })
        }
    }
}

/// Outputs of a completed run, for callers that compare reruns.
pub fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(entries) = std::fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
    }
    out.sort();
    out
}

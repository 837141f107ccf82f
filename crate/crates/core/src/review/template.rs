//! Annotation review template: one row per trajectory with the join fields,
//! demographics and clip link, followed by blank reviewer columns.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clips::{ClipSpec, Millis};
use crate::time::Timestamp;
use crate::trajectory::TrajectorySummary;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("trajectory {0} has no clip")]
    MissingClip(String),
    #[error("custom field {0:?}: {1}")]
    BadField(String, String),
    #[error("demographics: {0}")]
    Demographics(#[from] csv::Error),
    #[error("demographics lists subject {0} twice")]
    DuplicateParticipant(String),
}

pub const STANDARD_COLUMNS: [&str; 9] = [
    "stop_traj_id",
    "subj",
    "drive",
    "intxn_id",
    "ref_time_utc",
    "primary_sub_age",
    "primary_subj_gender",
    "jump_to_ref",
    "video_url",
];

/// Reviewer column with an optional closed list of values. Written
/// `name:{a,b,c}`, or just `name` for free text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustomField {
    pub name: String,
    pub allowed: Vec<String>,
}

impl FromStr for CustomField {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, TemplateError> {
        let bad = |msg: &str| TemplateError::BadField(s.to_string(), msg.to_string());
        let (name, allowed) = match s.split_once(':') {
            None => (s.trim(), Vec::new()),
            Some((name, rest)) => {
                let inner = rest
                    .trim()
                    .strip_prefix('{')
                    .and_then(|r| r.strip_suffix('}'))
                    .ok_or_else(|| bad("allowed values must be written {a,b,...}"))?;
                let values: Vec<String> = inner.split(',').map(|v| v.trim().to_string()).collect();
                if values.iter().any(String::is_empty) {
                    return Err(bad("empty allowed value"));
                }
                (name.trim(), values)
            }
        };
        if name.is_empty() || name.contains(|c: char| c == ',' || c == '"' || c.is_control()) {
            return Err(bad("invalid column name"));
        }
        if STANDARD_COLUMNS.contains(&name) {
            return Err(bad("clashes with a standard column"));
        }
        Ok(CustomField {
            name: name.to_string(),
            allowed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub subj: String,
    pub age: u32,
    pub gender: String,
}

pub fn parse_demographics(bytes: &[u8]) -> Result<Vec<Participant>, TemplateError> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out: Vec<Participant> = Vec::new();
    for row in rdr.deserialize::<Participant>() {
        let p = row?;
        if out.iter().any(|q| q.subj == p.subj) {
            return Err(TemplateError::DuplicateParticipant(p.subj));
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewRow {
    pub stop_traj_id: String,
    pub subj: String,
    pub drive: u32,
    pub intxn_id: u64,
    pub ref_time_utc: Timestamp,
    pub primary_sub_age: Option<u32>,
    pub primary_subj_gender: Option<String>,
    pub jump_to_ref: Millis,
    pub video_url: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReviewTemplate {
    pub rows: Vec<ReviewRow>,
    pub custom_fields: Vec<CustomField>,
    /// Rows whose subject is absent from the demographics table.
    pub missing_demographics: usize,
}

pub fn build_review_template(
    trajs: &[TrajectorySummary],
    clips: &[ClipSpec],
    participants: &[Participant],
    custom_fields: &[CustomField],
    video_base_url: &str,
) -> Result<ReviewTemplate, TemplateError> {
    for (i, f) in custom_fields.iter().enumerate() {
        if custom_fields[..i].iter().any(|g| g.name == f.name) {
            return Err(TemplateError::BadField(f.name.clone(), "listed twice".into()));
        }
    }
    let by_traj: HashMap<&str, &ClipSpec> = clips.iter().map(|c| (c.traj_id.as_str(), c)).collect();
    let by_subj: HashMap<&str, &Participant> = participants.iter().map(|p| (p.subj.as_str(), p)).collect();
    let mut missing = 0;
    let mut rows = Vec::with_capacity(trajs.len());
    for t in trajs {
        let clip = by_traj
            .get(t.traj_id.as_str())
            .ok_or_else(|| TemplateError::MissingClip(t.traj_id.clone()))?;
        let person = by_subj.get(t.subj.as_str());
        if person.is_none() {
            missing += 1;
        }
        rows.push(ReviewRow {
            stop_traj_id: t.traj_id.clone(),
            subj: t.subj.clone(),
            drive: t.drive,
            intxn_id: t.intxn_id,
            ref_time_utc: t.ref_time_utc,
            primary_sub_age: person.map(|p| p.age),
            primary_subj_gender: person.map(|p| p.gender.clone()),
            jump_to_ref: clip.overlay_on,
            video_url: format!("{video_base_url}{}", clip.output_name),
        });
    }
    Ok(ReviewTemplate {
        rows,
        custom_fields: custom_fields.to_vec(),
        missing_demographics: missing,
    })
}

impl ReviewTemplate {
    pub fn header(&self) -> Vec<String> {
        STANDARD_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .chain(self.custom_fields.iter().map(|f| f.name.clone()))
            .collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        let blanks = self.custom_fields.len();
        for r in &self.rows {
            let mut rec = vec![
                r.stop_traj_id.clone(),
                r.subj.clone(),
                r.drive.to_string(),
                r.intxn_id.to_string(),
                r.ref_time_utc.to_string(),
                r.primary_sub_age.map(|a| a.to_string()).unwrap_or_default(),
                r.primary_subj_gender.clone().unwrap_or_default(),
                r.jump_to_ref.to_string(),
                r.video_url.clone(),
            ];
            rec.extend(std::iter::repeat_n(String::new(), blanks));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    /// `{column: [allowed values]}` in the order the fields were given.
    pub fn manifest_json(&self) -> String {
        if self.custom_fields.is_empty() {
            return "{}\n".into();
        }
        let mut out = String::from("{\n");
        for (i, f) in self.custom_fields.iter().enumerate() {
            let values = serde_json::to_string(&f.allowed).expect("strings serialize");
            let name = serde_json::to_string(&f.name).expect("strings serialize");
            let sep = if i + 1 < self.custom_fields.len() { "," } else { "" };
            let _ = writeln!(out, "  {name}: {values}{sep}");
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(id: &str, subj: &str) -> TrajectorySummary {
        let t = Timestamp::from_millis(1_556_719_200_000);
        TrajectorySummary {
            traj_id: id.into(),
            subj: subj.into(),
            drive: 1,
            intxn_id: 7,
            leg_id: 1,
            ref_time_utc: t,
            start_time_utc: t,
            end_time_utc: t.plus_millis(10_000),
            ref_cum_dist_ft: 300.0,
            n_points: 11,
        }
    }

    fn clip(id: &str, on: i64) -> ClipSpec {
        ClipSpec {
            traj_id: id.into(),
            source_uri: "a.mp4".into(),
            in_offset: Millis(0),
            duration: Millis(10_000),
            overlay_on: Millis(on),
            overlay_off: Millis(7000),
            output_name: format!("{id}.mp4"),
        }
    }

    #[test]
    fn one_row_with_jump() {
        let people = vec![Participant {
            subj: "S01".into(),
            age: 34,
            gender: "F".into(),
        }];
        let fields = vec!["stop_type:{full,rolling,none}".parse::<CustomField>().unwrap()];
        let t = build_review_template(&[summary("S01_1_7", "S01")], &[clip("S01_1_7", 3000)], &people, &fields, "https://example.org/clips/").unwrap();
        assert_eq!(t.rows[0].jump_to_ref, Millis(3000));
        let csv = String::from_utf8(t.to_csv().unwrap()).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "stop_traj_id,subj,drive,intxn_id,ref_time_utc,primary_sub_age,primary_subj_gender,jump_to_ref,video_url,stop_type"
        );
        assert_eq!(
            lines.next().unwrap(),
            "S01_1_7,S01,1,7,2019-05-01T14:00:00.000Z,34,F,3.000,https://example.org/clips/S01_1_7.mp4,"
        );
        let manifest: serde_json::Value = serde_json::from_str(&t.manifest_json()).unwrap();
        assert_eq!(manifest["stop_type"], serde_json::json!(["full", "rolling", "none"]));
        assert_eq!(t.missing_demographics, 0);
    }

    #[test]
    fn empty_and_missing_cases() {
        let t = build_review_template(&[], &[], &[], &[], "").unwrap();
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap().lines().count(), 1);
        assert_eq!(t.manifest_json(), "{}\n");

        let t = build_review_template(&[summary("S02_1_7", "S02")], &[clip("S02_1_7", 0)], &[], &[], "").unwrap();
        assert_eq!(t.missing_demographics, 1);
        assert!(String::from_utf8(t.to_csv().unwrap()).unwrap().contains(",1,7,2019-05-01T14:00:00.000Z,,,0.000,"));

        assert!(matches!(
            build_review_template(&[summary("S01_1_7", "S01")], &[], &[], &[], ""),
            Err(TemplateError::MissingClip(_))
        ));
    }

    #[test]
    fn field_parsing() {
        let f: CustomField = "notes".parse().unwrap();
        assert!(f.allowed.is_empty());
        assert!("subj".parse::<CustomField>().is_err());
        assert!("x:{a,,b}".parse::<CustomField>().is_err());
        assert!("x:a,b".parse::<CustomField>().is_err());
        let order: Vec<CustomField> = ["b:{1}", "a"].iter().map(|s| s.parse().unwrap()).collect();
        let t = build_review_template(&[], &[], &[], &order, "").unwrap();
        assert!(t.header().ends_with(&["b".to_string(), "a".to_string()]));
        assert_eq!(t.manifest_json(), "{\n  \"b\": [\"1\"],\n  \"a\": []\n}\n");
    }

    #[test]
    fn demographics_csv() {
        let p = parse_demographics(b"subj,age,gender\nS01,34,F\nS02,71,M\n").unwrap();
        assert_eq!(p.len(), 2);
        assert!(parse_demographics(b"subj,age,gender\nS01,34,F\nS01,35,F\n").is_err());
        assert!(parse_demographics(b"subj,age,gender\nS01,old,F\n").is_err());
    }
}

//! File interchange with the human review loop: candidate export to KML,
//! import of the reviewed KML, and the annotation review template.

pub mod kml;
pub mod template;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geo::{GeoPoint, HeadingDeg, PolygonRing};

pub use kml::{export_candidates_kml, export_reviewed_kml, import_reviewed_kml, ImportParams, ImportedReview, KmlError, Reject, RejectReason};
pub use template::{build_review_template, parse_demographics, CustomField, Participant, ReviewRow, ReviewTemplate, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlType {
    Stop,
    Signal,
}

impl ControlType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlType::Stop => "stop",
            ControlType::Signal => "signal",
        }
    }
}

impl FromStr for ControlType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stop" => Ok(ControlType::Stop),
            "signal" => Ok(ControlType::Signal),
            other => Err(format!("unknown control type {other:?}")),
        }
    }
}

impl fmt::Display for ControlType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachLeg {
    pub leg_id: u32,
    pub polygon: PolygonRing,
    pub entering_line: Vec<GeoPoint>,
    /// Filled by [`crate::trajectory::assign_bearings`].
    pub entering_bearing: Option<HeadingDeg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewedIntersection {
    pub intxn_id: u64,
    pub pos: GeoPoint,
    pub control_type: ControlType,
    pub approaches: Vec<ApproachLeg>,
}

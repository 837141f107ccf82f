//! KML export of visited candidates and import of the reviewer's edits.

use std::fmt::Write as _;

use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ApproachLeg, ControlType, ReviewedIntersection};
use crate::discovery::VisitedCandidate;
use crate::geo::{centroid, haversine_distance_ft, point_in_polygon, point_polygon_distance_ft, polyline_midpoint, GeoPoint, PolygonRing};

#[derive(Debug, Error)]
pub enum KmlError {
    #[error("malformed KML: {0}")]
    Parse(String),
    #[error("no candidates to export")]
    Empty,
}

pub const CANDIDATES_FOLDER: &str = "candidates";
pub const TRUE_FOLDER: &str = "true";
pub const FALSE_FOLDER: &str = "false";

const HEADER: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<kml xmlns=\"http://www.opengis.net/kml/2.2\">\n<Document>\n";
const FOOTER: &str = "</Document>\n</kml>\n";

fn coord(p: &GeoPoint) -> String {
    format!("{},{},0", p.lon(), p.lat())
}

fn coords(points: &[GeoPoint]) -> String {
    points.iter().map(coord).collect::<Vec<_>>().join(" ")
}

fn data(out: &mut String, name: &str, value: &str) {
    let _ = writeln!(
        out,
        "      <Data name=\"{}\"><value>{}</value></Data>",
        escape(name),
        escape(value)
    );
}

/// One Placemark per candidate in a `candidates` folder, ordered by id.
pub fn export_candidates_kml(candidates: &[VisitedCandidate], control: ControlType) -> Result<String, KmlError> {
    if candidates.is_empty() {
        return Err(KmlError::Empty);
    }
    let mut sorted: Vec<&VisitedCandidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.intxn_id);
    let mut out = String::from(HEADER);
    let _ = writeln!(out, "<Folder>\n  <name>{CANDIDATES_FOLDER}</name>");
    for c in sorted {
        let _ = writeln!(out, "  <Placemark>\n    <name>{}</name>\n    <ExtendedData>", c.intxn_id);
        data(&mut out, "control", control.as_str());
        data(&mut out, "degree", &c.degree.to_string());
        data(&mut out, "match_dist_ft", &c.match_dist_ft.to_string());
        let _ = writeln!(
            out,
            "    </ExtendedData>\n    <Point><coordinates>{}</coordinates></Point>\n  </Placemark>",
            coord(&c.pos)
        );
    }
    out.push_str("</Folder>\n");
    out.push_str(FOOTER);
    Ok(out)
}

/// Writes an already-reviewed document: true intersections with their
/// approach polygons and entering lines, plus discarded candidates.
pub fn export_reviewed_kml(reviewed: &[ReviewedIntersection], discarded: &[(u64, GeoPoint)]) -> String {
    let mut out = String::from(HEADER);
    let _ = writeln!(out, "<Folder>\n  <name>{TRUE_FOLDER}</name>");
    for ix in reviewed {
        let _ = writeln!(out, "  <Placemark>\n    <name>{}</name>\n    <ExtendedData>", ix.intxn_id);
        data(&mut out, "control", ix.control_type.as_str());
        let _ = writeln!(
            out,
            "    </ExtendedData>\n    <Point><coordinates>{}</coordinates></Point>\n  </Placemark>",
            coord(&ix.pos)
        );
        for leg in &ix.approaches {
            let mut ring = leg.polygon.vertices().to_vec();
            ring.push(ring[0]);
            let _ = writeln!(
                out,
                "  <Placemark>\n    <name>{}-{} approach</name>\n    <Polygon><outerBoundaryIs><LinearRing><coordinates>{}</coordinates></LinearRing></outerBoundaryIs></Polygon>\n  </Placemark>",
                ix.intxn_id,
                leg.leg_id,
                coords(&ring)
            );
            let _ = writeln!(
                out,
                "  <Placemark>\n    <name>{}-{} entering</name>\n    <LineString><coordinates>{}</coordinates></LineString>\n  </Placemark>",
                ix.intxn_id,
                leg.leg_id,
                coords(&leg.entering_line)
            );
        }
    }
    out.push_str("</Folder>\n");
    if !discarded.is_empty() {
        let _ = writeln!(out, "<Folder>\n  <name>{FALSE_FOLDER}</name>");
        for (id, pos) in discarded {
            let _ = writeln!(
                out,
                "  <Placemark>\n    <name>{id}</name>\n    <Point><coordinates>{}</coordinates></Point>\n  </Placemark>",
                coord(pos)
            );
        }
        out.push_str("</Folder>\n");
    }
    out.push_str(FOOTER);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportParams {
    pub polygon_gate_ft: f64,
    pub line_gate_ft: f64,
}

impl Default for ImportParams {
    fn default() -> Self {
        ImportParams {
            polygon_gate_ft: 500.0,
            line_gate_ft: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InvalidCoordinates,
    InvalidPolygon,
    InvalidLine,
    NoGeometry,
    BadIntersectionId,
    DuplicateIntersectionId,
    InvalidControl,
    DiscardedCandidate,
    PolygonUnassigned,
    PolygonWithoutLine,
    LineUnassigned,
    DuplicateLine,
    IntersectionWithoutApproach,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Placemark,
    Point,
    Polygon,
    Line,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    /// Zero-based Placemark position in document order.
    pub placemark: usize,
    pub name: Option<String>,
    pub geometry: GeometryKind,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportedReview {
    pub intersections: Vec<ReviewedIntersection>,
    pub rejects: Vec<Reject>,
    pub placemarks: usize,
    /// Geometries read, counting a geometry-less Placemark as one item.
    pub items: usize,
}

#[derive(Debug, Clone)]
enum RawGeom {
    Point(Vec<GeoPoint>),
    Polygon(Vec<GeoPoint>),
    Line(Vec<GeoPoint>),
    Invalid(GeometryKind, String),
}

#[derive(Debug, Clone, Default)]
struct RawPlacemark {
    name: Option<String>,
    control: Option<String>,
    in_true: bool,
    geoms: Vec<RawGeom>,
}

fn parse_coordinates(text: &str) -> Result<Vec<GeoPoint>, String> {
    text.split_whitespace()
        .map(|tuple| {
            let mut it = tuple.split(',');
            let lon = it.next().and_then(|v| v.parse::<f64>().ok());
            let lat = it.next().and_then(|v| v.parse::<f64>().ok());
            match (lat, lon) {
                (Some(lat), Some(lon)) => GeoPoint::new(lat, lon).map_err(|e| e.to_string()),
                _ => Err(format!("bad coordinate tuple {tuple:?}")),
            }
        })
        .collect()
}

#[derive(Default)]
struct Parser {
    stack: Vec<String>,
    folders: Vec<Option<String>>,
    text: String,
    data_name: Option<String>,
    current: Option<RawPlacemark>,
    placemarks: Vec<RawPlacemark>,
    saw_root: bool,
}

impl Parser {
    fn start(&mut self, e: &BytesStart<'_>) -> Result<(), KmlError> {
        let name = e.local_name().as_ref().to_string();
        if self.stack.is_empty() {
            if name != "kml" {
                return Err(KmlError::Parse(format!("root element is <{name}>, expected <kml>")));
            }
            self.saw_root = true;
        }
        self.text.clear();
        match name.as_str() {
            "Folder" => self.folders.push(None),
            "Placemark" => {
                let in_true = self.folders.iter().any(|f| f.as_deref() == Some(TRUE_FOLDER));
                self.current = Some(RawPlacemark {
                    in_true,
                    ..RawPlacemark::default()
                })
            }
            "Data" | "SimpleData" => {
                self.data_name = e
                    .try_get_attribute("name")
                    .map_err(|err| KmlError::Parse(err.to_string()))?
                    .map(|a| a.normalized_value(XmlVersion::Implicit1_0).map(|v| v.into_owned()))
                    .transpose()
                    .map_err(|err| KmlError::Parse(err.to_string()))?;
            }
            _ => {}
        }
        self.stack.push(name);
        Ok(())
    }

    fn parent(&self) -> Option<&str> {
        self.stack.len().checked_sub(2).map(|i| self.stack[i].as_str())
    }

    fn has_ancestor(&self, name: &str) -> bool {
        self.stack.iter().rev().skip(1).any(|s| s == name)
    }

    fn end(&mut self) -> Result<(), KmlError> {
        let name = self.stack.last().cloned().ok_or_else(|| KmlError::Parse("unbalanced end tag".into()))?;
        let text = self.text.trim().to_string();
        match name.as_str() {
            "name" => match self.parent() {
                Some("Folder") => {
                    if let Some(f) = self.folders.last_mut() {
                        *f = Some(text);
                    }
                }
                Some("Placemark") => {
                    if let Some(p) = self.current.as_mut() {
                        p.name = Some(text);
                    }
                }
                _ => {}
            },
            "value" if self.parent() == Some("Data") => self.set_data(text),
            "SimpleData" => self.set_data(text),
            "Data" => self.data_name = None,
            "coordinates" => self.coordinates(&text),
            "Folder" => {
                self.folders.pop();
            }
            "Placemark" => {
                if let Some(p) = self.current.take() {
                    self.placemarks.push(p);
                }
            }
            _ => {}
        }
        self.stack.pop();
        self.text.clear();
        Ok(())
    }

    fn set_data(&mut self, text: String) {
        if self.data_name.as_deref() == Some("control") {
            if let Some(p) = self.current.as_mut() {
                p.control = Some(text);
            }
        }
    }

    fn coordinates(&mut self, text: &str) {
        let kind = match self.parent() {
            Some("Point") => GeometryKind::Point,
            Some("LineString") => GeometryKind::Line,
            Some("LinearRing") if self.has_ancestor("outerBoundaryIs") => GeometryKind::Polygon,
            _ => return,
        };
        let Some(p) = self.current.as_mut() else {
            return;
        };
        let geom = match parse_coordinates(text) {
            Err(msg) => RawGeom::Invalid(kind, msg),
            Ok(pts) => match kind {
                GeometryKind::Point => RawGeom::Point(pts),
                GeometryKind::Line => RawGeom::Line(pts),
                _ => RawGeom::Polygon(pts),
            },
        };
        p.geoms.push(geom);
    }
}

fn parse_placemarks(text: &str) -> Result<Vec<RawPlacemark>, KmlError> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(false);
    let mut p = Parser::default();
    loop {
        let ev = reader
            .read_event()
            .map_err(|e| KmlError::Parse(format!("at byte {}: {e}", reader.buffer_position())))?;
        match ev {
            Event::Start(e) => p.start(&e)?,
            Event::Empty(e) => {
                p.start(&e)?;
                p.end()?;
            }
            Event::End(_) => p.end()?,
            Event::Text(t) => {
                p.text.push_str(&t.xml10_content());
            }
            Event::CData(t) => p.text.push_str(&t),
            Event::GeneralRef(r) => {
                if let Some(c) = r.resolve_char_ref().map_err(|e| KmlError::Parse(e.to_string()))? {
                    p.text.push(c);
                } else {
                    let name = r.to_string();
                    let resolved = resolve_predefined_entity(&name)
                        .ok_or_else(|| KmlError::Parse(format!("unknown entity &{name};")))?;
                    p.text.push_str(resolved);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !p.saw_root {
        return Err(KmlError::Parse("document has no <kml> root element".into()));
    }
    if !p.stack.is_empty() {
        return Err(KmlError::Parse("document ends inside an open element".into()));
    }
    Ok(p.placemarks)
}

struct PolygonItem {
    placemark: usize,
    name: Option<String>,
    ring: PolygonRing,
    centroid: GeoPoint,
    intersection: Option<usize>,
    line: Option<Vec<GeoPoint>>,
}

struct PointItem {
    placemark: usize,
    name: Option<String>,
    id: u64,
    pos: GeoPoint,
    control: ControlType,
}

/// Reads a reviewed KML document. Points inside a `true` folder are true
/// intersections; when no such folder exists every Point is. Approach
/// polygons attach to the nearest intersection and entering lines to the
/// polygon holding their midpoint, else the nearest polygon edge.
pub fn import_reviewed_kml(text: &str, params: &ImportParams) -> Result<ImportedReview, KmlError> {
    let placemarks = parse_placemarks(text)?;
    let use_true_folder = placemarks.iter().any(|p| p.in_true);
    let mut rejects = Vec::new();
    let reject = |rejects: &mut Vec<Reject>, placemark: usize, name: &Option<String>, geometry, reason, detail: String| {
        rejects.push(Reject {
            placemark,
            name: name.clone(),
            geometry,
            reason,
            detail,
        })
    };

    let mut points: Vec<PointItem> = Vec::new();
    let mut polygons: Vec<PolygonItem> = Vec::new();
    let mut lines: Vec<(usize, Option<String>, Vec<GeoPoint>)> = Vec::new();
    for (pi, pm) in placemarks.iter().enumerate() {
        if pm.geoms.is_empty() {
            reject(&mut rejects, pi, &pm.name, GeometryKind::Placemark, RejectReason::NoGeometry, "placemark has no supported geometry".into());
        }
        for g in &pm.geoms {
            match g {
                RawGeom::Invalid(kind, msg) => {
                    reject(&mut rejects, pi, &pm.name, *kind, RejectReason::InvalidCoordinates, msg.clone())
                }
                RawGeom::Point(pts) => {
                    if pts.len() != 1 {
                        reject(&mut rejects, pi, &pm.name, GeometryKind::Point, RejectReason::InvalidCoordinates, format!("point has {} coordinates", pts.len()));
                        continue;
                    }
                    if use_true_folder && !pm.in_true {
                        reject(&mut rejects, pi, &pm.name, GeometryKind::Point, RejectReason::DiscardedCandidate, "point is outside the true folder".into());
                        continue;
                    }
                    let Some(id) = pm.name.as_deref().and_then(|n| n.trim().parse::<u64>().ok()) else {
                        reject(&mut rejects, pi, &pm.name, GeometryKind::Point, RejectReason::BadIntersectionId, "placemark name is not an intersection id".into());
                        continue;
                    };
                    let control = match &pm.control {
                        None => ControlType::Stop,
                        Some(c) => match c.parse::<ControlType>() {
                            Ok(c) => c,
                            Err(msg) => {
                                reject(&mut rejects, pi, &pm.name, GeometryKind::Point, RejectReason::InvalidControl, msg);
                                continue;
                            }
                        },
                    };
                    if points.iter().any(|p| p.id == id) {
                        reject(&mut rejects, pi, &pm.name, GeometryKind::Point, RejectReason::DuplicateIntersectionId, format!("intersection {id} already defined"));
                        continue;
                    }
                    points.push(PointItem {
                        placemark: pi,
                        name: pm.name.clone(),
                        id,
                        pos: pts[0],
                        control,
                    });
                }
                RawGeom::Polygon(pts) => match PolygonRing::new(pts.clone()) {
                    Ok(ring) => {
                        let centroid = centroid(ring.vertices()).expect("rings are nonempty");
                        polygons.push(PolygonItem {
                            placemark: pi,
                            name: pm.name.clone(),
                            ring,
                            centroid,
                            intersection: None,
                            line: None,
                        });
                    }
                    Err(e) => reject(&mut rejects, pi, &pm.name, GeometryKind::Polygon, RejectReason::InvalidPolygon, e.to_string()),
                },
                RawGeom::Line(pts) => {
                    let distinct = pts.windows(2).any(|w| w[0] != w[1]);
                    if pts.len() < 2 || !distinct {
                        reject(&mut rejects, pi, &pm.name, GeometryKind::Line, RejectReason::InvalidLine, "line needs two distinct vertices".into());
                    } else {
                        lines.push((pi, pm.name.clone(), pts.clone()));
                    }
                }
            }
        }
    }

    for poly in polygons.iter_mut() {
        let best = points
            .iter()
            .enumerate()
            .map(|(k, p)| (k, point_polygon_distance_ft(p.pos, &poly.ring), p.id))
            .filter(|(_, d, _)| *d <= params.polygon_gate_ft)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
        match best {
            Some((k, _, _)) => poly.intersection = Some(k),
            None => reject(&mut rejects, poly.placemark, &poly.name, GeometryKind::Polygon, RejectReason::PolygonUnassigned, format!("no true intersection within {} ft", params.polygon_gate_ft)),
        }
    }

    for (pi, name, line) in lines {
        let mid = polyline_midpoint(&line).expect("lines have vertices");
        let assigned: Vec<usize> = (0..polygons.len()).filter(|&k| polygons[k].intersection.is_some()).collect();
        let containing = assigned
            .iter()
            .copied()
            .filter(|&k| point_in_polygon(mid, &polygons[k].ring))
            .min_by(|&a, &b| {
                haversine_distance_ft(mid, polygons[a].centroid)
                    .total_cmp(&haversine_distance_ft(mid, polygons[b].centroid))
                    .then(a.cmp(&b))
            });
        let target = containing.or_else(|| {
            assigned
                .iter()
                .copied()
                .map(|k| (k, point_polygon_distance_ft(mid, &polygons[k].ring)))
                .filter(|(_, d)| *d <= params.line_gate_ft)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k)
        });
        match target {
            None => reject(&mut rejects, pi, &name, GeometryKind::Line, RejectReason::LineUnassigned, format!("midpoint is in no polygon and over {} ft from every edge", params.line_gate_ft)),
            Some(k) if polygons[k].line.is_some() => reject(&mut rejects, pi, &name, GeometryKind::Line, RejectReason::DuplicateLine, "polygon already has an entering line".into()),
            Some(k) => polygons[k].line = Some(line),
        }
    }

    let mut legs: Vec<Vec<ApproachLeg>> = vec![Vec::new(); points.len()];
    for poly in polygons {
        let Some(k) = poly.intersection else { continue };
        match poly.line {
            None => reject(&mut rejects, poly.placemark, &poly.name, GeometryKind::Polygon, RejectReason::PolygonWithoutLine, "no entering line assigned".into()),
            Some(line) => {
                let leg_id = legs[k].len() as u32 + 1;
                legs[k].push(ApproachLeg {
                    leg_id,
                    polygon: poly.ring,
                    entering_line: line,
                    entering_bearing: None,
                });
            }
        }
    }

    let mut intersections = Vec::new();
    for (p, approaches) in points.into_iter().zip(legs) {
        if approaches.is_empty() {
            reject(&mut rejects, p.placemark, &p.name, GeometryKind::Point, RejectReason::IntersectionWithoutApproach, format!("intersection {} has no approach polygon", p.id));
            continue;
        }
        intersections.push(ReviewedIntersection {
            intxn_id: p.id,
            pos: p.pos,
            control_type: p.control,
            approaches,
        });
    }
    intersections.sort_by_key(|i| i.intxn_id);
    rejects.sort_by_key(|r| r.placemark);
    Ok(ImportedReview {
        intersections,
        rejects,
        placemarks: placemarks.len(),
        items: placemarks.iter().map(|p| p.geoms.len().max(1)).sum(),
    })
}

/// Positions and ids of every intersection Point in a document, regardless
/// of folder. Used to check export round trips.
pub fn read_point_placemarks(text: &str) -> Result<Vec<(String, GeoPoint)>, KmlError> {
    Ok(parse_placemarks(text)?
        .into_iter()
        .flat_map(|p| {
            let name = p.name.unwrap_or_default();
            p.geoms.into_iter().filter_map(move |g| match g {
                RawGeom::Point(pts) if pts.len() == 1 => Some((name.clone(), pts[0])),
                _ => None,
            })
        })
        .collect())
}

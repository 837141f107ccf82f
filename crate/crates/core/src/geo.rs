//! Spherical-earth geodesy and small-scale planar geometry.
//!
//! Distances are always in feet. The earth is a sphere of radius 6,371 km and
//! metres convert to feet at exactly 0.3048 m/ft.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
pub const METRES_PER_FOOT: f64 = 0.3048;
pub const EARTH_RADIUS_FT: f64 = EARTH_RADIUS_M / METRES_PER_FOOT;
/// Length of one degree of arc on the sphere, in feet.
pub const FT_PER_DEGREE: f64 = EARTH_RADIUS_FT * std::f64::consts::PI / 180.0;

/// Side tolerance (degrees) for treating a point as lying on a polygon edge.
const EDGE_EPS_DEG: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("heading {0} outside [0, 360)")]
    HeadingOutOfRange(f64),
    #[error("bearing is undefined between coincident points")]
    CoincidentPoints,
    #[error("centroid of an empty point set")]
    EmptyInput,
    #[error("polygon ring needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon ring has zero area")]
    DegenerateRing,
    #[error("polygon ring edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
}

/// WGS84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        // NaN fails both range checks.
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeOutOfRange(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Lexicographic (lat, lon) order used for canonical ID assignment.
    pub fn lex_cmp(&self, other: &GeoPoint) -> std::cmp::Ordering {
        self.lat
            .total_cmp(&other.lat)
            .then(self.lon.total_cmp(&other.lon))
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Degrees clockwise from true north, in [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HeadingDeg(f64);

impl HeadingDeg {
    /// Strict constructor: rejects anything outside [0, 360).
    pub fn new(value: f64) -> Result<Self, GeoError> {
        if (0.0..360.0).contains(&value) {
            Ok(HeadingDeg(value))
        } else {
            Err(GeoError::HeadingOutOfRange(value))
        }
    }

    /// Wraps any finite angle onto [0, 360).
    pub fn normalized(value: f64) -> Self {
        let v = value.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        HeadingDeg(if v >= 360.0 { 0.0 } else { v })
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for HeadingDeg {
    type Error = GeoError;
    fn try_from(v: f64) -> Result<Self, GeoError> {
        HeadingDeg::new(v)
    }
}

impl From<HeadingDeg> for f64 {
    fn from(h: HeadingDeg) -> f64 {
        h.0
    }
}

/// Great-circle distance in feet.
pub fn haversine_distance_ft(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_FT * h.sqrt().min(1.0).asin()
}

/// Forward azimuth at `a` toward `b`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> Result<HeadingDeg, GeoError> {
    if a == b {
        return Err(GeoError::CoincidentPoints);
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(HeadingDeg::normalized(y.atan2(x).to_degrees()))
}

/// Smallest separation between two headings, in [0, 180].
pub fn angular_difference_deg(h1: HeadingDeg, h2: HeadingDeg) -> f64 {
    let d = (h1.0 - h2.0).abs() % 360.0;
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Arithmetic mean of latitudes and longitudes.
pub fn centroid(points: &[GeoPoint]) -> Result<GeoPoint, GeoError> {
    if points.is_empty() {
        return Err(GeoError::EmptyInput);
    }
    let n = points.len() as f64;
    let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
    let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
    // means of in-range values stay in range up to rounding
    GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0))
}

/// A closed ring of vertices; the closing vertex is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GeoPoint>", into = "Vec<GeoPoint>")]
pub struct PolygonRing {
    vertices: Vec<GeoPoint>,
}

impl TryFrom<Vec<GeoPoint>> for PolygonRing {
    type Error = GeoError;
    fn try_from(v: Vec<GeoPoint>) -> Result<Self, GeoError> {
        PolygonRing::new(v)
    }
}

impl From<PolygonRing> for Vec<GeoPoint> {
    fn from(r: PolygonRing) -> Self {
        r.vertices
    }
}

impl PolygonRing {
    /// Validates a ring. A repeated closing vertex and consecutive duplicates are
    /// removed before checking vertex count, area and simplicity.
    pub fn new(mut vertices: Vec<GeoPoint>) -> Result<Self, GeoError> {
        vertices.dedup();
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(GeoError::TooFewVertices(vertices.len()));
        }
        let ring = PolygonRing { vertices };
        ring.check_simple()?;
        if ring.signed_area_deg2() == 0.0 {
            return Err(GeoError::DegenerateRing);
        }
        Ok(ring)
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (GeoPoint, GeoPoint)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// (min_lat, min_lon, max_lat, max_lon)
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.lat), b.min(p.lon), c.max(p.lat), d.max(p.lon)),
        )
    }

    fn signed_area_deg2(&self) -> f64 {
        self.edges()
            .map(|(a, b)| a.lon * b.lat - b.lon * a.lat)
            .sum::<f64>()
            / 2.0
    }

    fn check_simple(&self) -> Result<(), GeoError> {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(edges[i], edges[j]) {
                    return Err(GeoError::SelfIntersecting(i, j));
                }
            }
        }
        Ok(())
    }
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn within_box(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect((p1, p2): (GeoPoint, GeoPoint), (q1, q2): (GeoPoint, GeoPoint)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && within_box(q1, q2, p1))
        || (d2 == 0.0 && within_box(q1, q2, p2))
        || (d3 == 0.0 && within_box(p1, p2, q1))
        || (d4 == 0.0 && within_box(p1, p2, q2))
}

fn on_segment(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> bool {
    let (dx, dy) = (b.lon - a.lon, b.lat - a.lat);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p == a;
    }
    let cross = orient(a, b, p);
    if cross.abs() > EDGE_EPS_DEG * len2.sqrt() {
        return false;
    }
    let dot = (p.lon - a.lon) * dx + (p.lat - a.lat) * dy;
    dot >= 0.0 && dot <= len2
}

/// Boundary-inclusive containment by planar ray casting in (lon, lat).
pub fn point_in_polygon(pt: GeoPoint, ring: &PolygonRing) -> bool {
    let mut inside = false;
    for (a, b) in ring.edges() {
        if on_segment(pt, a, b) {
            return true;
        }
        if (a.lat > pt.lat) != (b.lat > pt.lat) {
            let x = a.lon + (pt.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if pt.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Equirectangular tangent-plane frame in feet (x east, y north).
/// Accurate to well under a foot over a few thousand feet.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        LocalFrame {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn project(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * FT_PER_DEGREE * self.cos_lat,
            (p.lat - self.origin.lat) * FT_PER_DEGREE,
        )
    }

    pub fn unproject(&self, east_ft: f64, north_ft: f64) -> Result<GeoPoint, GeoError> {
        GeoPoint::new(
            self.origin.lat + north_ft / FT_PER_DEGREE,
            self.origin.lon + east_ft / (FT_PER_DEGREE * self.cos_lat),
        )
    }
}

/// Distance in feet from `p` to the segment `a`-`b`, measured in a tangent
/// plane at `p`.
pub fn point_segment_distance_ft(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let frame = LocalFrame::new(p);
    let (ax, ay) = frame.project(a);
    let (bx, by) = frame.project(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((-ax) * dx + (-ay) * dy) / len2
    }
    .clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (cx * cx + cy * cy).sqrt()
}

/// Zero when `p` is inside the ring, else the distance to the nearest edge.
pub fn point_polygon_distance_ft(p: GeoPoint, ring: &PolygonRing) -> f64 {
    if point_in_polygon(p, ring) {
        return 0.0;
    }
    ring.edges()
        .map(|(a, b)| point_segment_distance_ft(p, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Point halfway along a polyline by haversine arc length.
pub fn polyline_midpoint(line: &[GeoPoint]) -> Option<GeoPoint> {
    let first = *line.first()?;
    let seg: Vec<f64> = line
        .windows(2)
        .map(|w| haversine_distance_ft(w[0], w[1]))
        .collect();
    let total: f64 = seg.iter().sum();
    if total == 0.0 {
        return Some(first);
    }
    let mut remaining = total / 2.0;
    for (w, len) in line.windows(2).zip(&seg) {
        if remaining <= *len && *len > 0.0 {
            let t = remaining / len;
            return GeoPoint::new(
                w[0].lat + t * (w[1].lat - w[0].lat),
                w[0].lon + t * (w[1].lon - w[0].lon),
            )
            .ok();
        }
        remaining -= len;
    }
    line.last().copied()
}

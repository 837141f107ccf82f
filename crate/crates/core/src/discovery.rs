//! Intersection candidates from a road network, and the subset of them that
//! study participants visited according to traffic-control detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geo::{centroid, haversine_distance_ft, GeoError, GeoPoint};
use crate::ingest::{DetectionRecord, ObjectClass};
use crate::spatial::GridIndex;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("road network GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("road network feature {feature}: {message}")]
    Geometry { feature: String, message: String },
    #[error("candidate GeoJSON: {0}")]
    Candidates(String),
    #[error("cannot match clusters against an empty candidate list")]
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub line_id: String,
    pub vertices: Vec<GeoPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadNetwork {
    pub polylines: Vec<Polyline>,
}

fn parse_position(v: &Value, feature: &str) -> Result<GeoPoint, DiscoveryError> {
    let geom_err = |message: String| DiscoveryError::Geometry {
        feature: feature.to_string(),
        message,
    };
    let arr = v.as_array().ok_or_else(|| geom_err("position is not an array".into()))?;
    let lon = arr.first().and_then(Value::as_f64);
    let lat = arr.get(1).and_then(Value::as_f64);
    match (lat, lon) {
        (Some(lat), Some(lon)) => GeoPoint::new(lat, lon).map_err(|e: GeoError| geom_err(e.to_string())),
        _ => Err(geom_err("position needs numeric lon, lat".into())),
    }
}

fn parse_line(v: &Value, feature: &str) -> Result<Vec<GeoPoint>, DiscoveryError> {
    let arr = v.as_array().ok_or_else(|| DiscoveryError::Geometry {
        feature: feature.to_string(),
        message: "LineString coordinates are not an array".into(),
    })?;
    let pts = arr
        .iter()
        .map(|p| parse_position(p, feature))
        .collect::<Result<Vec<_>, _>>()?;
    if pts.len() < 2 {
        return Err(DiscoveryError::Geometry {
            feature: feature.to_string(),
            message: format!("polyline has {} vertices, need at least 2", pts.len()),
        });
    }
    Ok(pts)
}

impl RoadNetwork {
    /// Reads a FeatureCollection of LineString / MultiLineString features.
    /// Line ids come from the feature `id`, a `line_id` property, or the
    /// feature index; MultiLineString parts get a `:<part>` suffix. Features
    /// of other geometry types are ignored.
    pub fn from_geojson(text: &str) -> Result<Self, DiscoveryError> {
        let doc: Value = serde_json::from_str(text)?;
        let features = doc
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| DiscoveryError::Geometry {
                feature: "<root>".into(),
                message: "expected a FeatureCollection".into(),
            })?;
        let mut polylines = Vec::new();
        for (i, f) in features.iter().enumerate() {
            let id = match f.get("id").or_else(|| f.pointer("/properties/line_id")) {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => i.to_string(),
            };
            let Some(geom) = f.get("geometry").filter(|g| !g.is_null()) else {
                continue;
            };
            let coords = geom.get("coordinates").unwrap_or(&Value::Null);
            match geom.get("type").and_then(Value::as_str) {
                Some("LineString") => polylines.push(Polyline {
                    vertices: parse_line(coords, &id)?,
                    line_id: id,
                }),
                Some("MultiLineString") => {
                    let parts = coords.as_array().ok_or_else(|| DiscoveryError::Geometry {
                        feature: id.clone(),
                        message: "MultiLineString coordinates are not an array".into(),
                    })?;
                    for (k, part) in parts.iter().enumerate() {
                        polylines.push(Polyline {
                            line_id: format!("{id}:{k}"),
                            vertices: parse_line(part, &id)?,
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(RoadNetwork { polylines })
    }

    pub fn to_geojson(&self) -> String {
        let features: Vec<Value> = self
            .polylines
            .iter()
            .map(|l| {
                json!({
                    "type": "Feature",
                    "id": l.line_id,
                    "properties": {},
                    "geometry": {
                        "type": "LineString",
                        "coordinates": l.vertices.iter().map(|p| json!([p.lon(), p.lat()])).collect::<Vec<_>>(),
                    }
                })
            })
            .collect();
        pretty(&json!({"type": "FeatureCollection", "features": features}))
    }

    pub fn vertex_count(&self) -> usize {
        self.polylines.iter().map(|l| l.vertices.len()).sum()
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionCandidate {
    pub intxn_id: u64,
    pub pos: GeoPoint,
    /// Number of coincident vertices.
    pub degree: usize,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Centroid of a group computed in canonical order so that the result does
/// not depend on input order.
fn canonical_centroid(points: &mut [GeoPoint]) -> GeoPoint {
    points.sort_by(|a, b| a.lex_cmp(b));
    centroid(points).expect("groups are nonempty")
}

/// Pools every polyline vertex, groups vertices transitively within `tol_ft`
/// of each other, and reports each group of three or more as a candidate at
/// the group centroid. IDs start at 1 in (lat, lon) order.
pub fn extract_lrs_candidates(network: &RoadNetwork, tol_ft: f64) -> Vec<IntersectionCandidate> {
    let vertices: Vec<GeoPoint> = network
        .polylines
        .iter()
        .flat_map(|l| l.vertices.iter().copied())
        .collect();
    if vertices.is_empty() {
        return Vec::new();
    }
    let grid = GridIndex::new(&vertices, tol_ft.max(1e-6));
    let mut sets = DisjointSet::new(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        for j in grid.within(*v, tol_ft) {
            sets.union(i, j);
        }
    }
    let mut groups: BTreeMap<usize, Vec<GeoPoint>> = BTreeMap::new();
    for (i, v) in vertices.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().push(*v);
    }
    let mut out: Vec<(GeoPoint, usize)> = groups
        .into_values()
        .filter(|g| g.len() >= 3)
        .map(|mut g| (canonical_centroid(&mut g), g.len()))
        .collect();
    out.sort_by(|a, b| a.0.lex_cmp(&b.0).then(a.1.cmp(&b.1)));
    out.into_iter()
        .enumerate()
        .map(|(i, (pos, degree))| IntersectionCandidate {
            intxn_id: i as u64 + 1,
            pos,
            degree,
        })
        .collect()
}

pub fn candidates_to_geojson(candidates: &[IntersectionCandidate]) -> String {
    let features: Vec<Value> = candidates
        .iter()
        .map(|c| {
            json!({
                "type": "Feature",
                "properties": {"intxn_id": c.intxn_id, "degree": c.degree},
                "geometry": {"type": "Point", "coordinates": [c.pos.lon(), c.pos.lat()]},
            })
        })
        .collect();
    pretty(&json!({"type": "FeatureCollection", "features": features}))
}

fn point_features(text: &str) -> Result<Vec<(GeoPoint, Value)>, DiscoveryError> {
    let doc: Value = serde_json::from_str(text)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| DiscoveryError::Candidates("expected a FeatureCollection".into()))?;
    features
        .iter()
        .map(|f| {
            let coords = f
                .pointer("/geometry/coordinates")
                .ok_or_else(|| DiscoveryError::Candidates("feature without coordinates".into()))?;
            let pos = parse_position(coords, "candidate")?;
            Ok((pos, f.get("properties").cloned().unwrap_or(Value::Null)))
        })
        .collect()
}

fn prop_u64(props: &Value, key: &str) -> Result<u64, DiscoveryError> {
    props
        .get(key)
        .and_then(Value::as_u64)
        .ok_or_else(|| DiscoveryError::Candidates(format!("missing integer property {key}")))
}

pub fn candidates_from_geojson(text: &str) -> Result<Vec<IntersectionCandidate>, DiscoveryError> {
    point_features(text)?
        .into_iter()
        .map(|(pos, props)| {
            Ok(IntersectionCandidate {
                intxn_id: prop_u64(&props, "intxn_id")?,
                degree: prop_u64(&props, "degree")? as usize,
                pos,
            })
        })
        .collect()
}

/// Keeps only the last detection of each run, where a run is a maximal
/// sequence of same-class detections in one drive with gaps ≤ `max_gap_s`.
/// Input must be canonically sorted; output is canonically sorted.
pub fn last_in_runs(detections: &[DetectionRecord], max_gap_s: f64) -> Vec<DetectionRecord> {
    let max_gap_ms = (max_gap_s * 1000.0).round() as i64;
    let mut by_stream: BTreeMap<(&str, u32, ObjectClass), Vec<&DetectionRecord>> = BTreeMap::new();
    for d in detections {
        by_stream
            .entry((d.subj.as_str(), d.drive, d.object_class))
            .or_default()
            .push(d);
    }
    let mut out = Vec::new();
    for stream in by_stream.values() {
        for (i, d) in stream.iter().enumerate() {
            let next_continues = stream
                .get(i + 1)
                .is_some_and(|n| n.t_utc.millis() - d.t_utc.millis() <= max_gap_ms);
            if !next_continues {
                out.push((*d).clone());
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.subj, a.drive, a.t_utc, a.object_class).cmp(&(&b.subj, b.drive, b.t_utc, b.object_class))
    });
    out
}

/// DBSCAN output over plain points: member indices into the input slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCluster {
    pub cluster_id: u64,
    pub members: Vec<usize>,
    pub center: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Label {
    Unvisited,
    Noise,
    Cluster(usize),
}

/// Density-based clustering with haversine distance; a point is a core point
/// when at least `min_pts` points (itself included) lie within `eps_ft`.
/// Noise is dropped. Points are visited in (lat, lon) order so border-point
/// assignment is deterministic, and cluster IDs start at 1 in (lat, lon)
/// order of each cluster's smallest member.
pub fn dbscan(points: &[GeoPoint], eps_ft: f64, min_pts: usize) -> Vec<PointCluster> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a].lex_cmp(&points[b]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let grid = GridIndex::new(points, eps_ft.max(1e-6));
    let neighbours = |i: usize| {
        let mut v = grid.within(points[i], eps_ft);
        v.sort_by_key(|&j| rank[j]);
        v
    };

    let mut labels = vec![Label::Unvisited; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for &p in &order {
        if labels[p] != Label::Unvisited {
            continue;
        }
        let seeds = neighbours(p);
        if seeds.len() < min_pts {
            labels[p] = Label::Noise;
            continue;
        }
        let c = clusters.len();
        clusters.push(Vec::new());
        labels[p] = Label::Cluster(c);
        let mut queue: std::collections::VecDeque<usize> = seeds.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Label::Noise => labels[q] = Label::Cluster(c),
                Label::Unvisited => {
                    labels[q] = Label::Cluster(c);
                    let nq = neighbours(q);
                    if nq.len() >= min_pts {
                        queue.extend(nq);
                    }
                }
                Label::Cluster(_) => {}
            }
        }
    }
    for (i, l) in labels.iter().enumerate() {
        if let Label::Cluster(c) = l {
            clusters[*c].push(i);
        }
    }
    let mut out: Vec<(Vec<usize>, GeoPoint)> = clusters
        .into_iter()
        .filter(|m| m.len() >= min_pts.max(1))
        .map(|mut m| {
            m.sort_by_key(|&i| rank[i]);
            let mut pts: Vec<GeoPoint> = m.iter().map(|&i| points[i]).collect();
            (m, canonical_centroid(&mut pts))
        })
        .collect();
    out.sort_by_key(|(m, _)| rank[m[0]]);
    out.into_iter()
        .enumerate()
        .map(|(i, (members, center))| PointCluster {
            cluster_id: i as u64 + 1,
            members,
            center,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCluster {
    pub cluster_id: u64,
    pub members: Vec<DetectionRecord>,
    pub center: GeoPoint,
}

pub fn cluster_detections(detections: &[DetectionRecord], eps_ft: f64, min_pts: usize) -> Vec<DetectionCluster> {
    let points: Vec<GeoPoint> = detections.iter().map(|d| d.pos).collect();
    dbscan(&points, eps_ft, min_pts)
        .into_iter()
        .map(|c| DetectionCluster {
            cluster_id: c.cluster_id,
            members: c.members.iter().map(|&i| detections[i].clone()).collect(),
            center: c.center,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitedCandidate {
    pub intxn_id: u64,
    pub pos: GeoPoint,
    pub degree: usize,
    pub supporting_cluster_ids: Vec<u64>,
    /// Smallest center-to-candidate distance among the supporting clusters.
    pub match_dist_ft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedCluster {
    pub cluster_id: u64,
    pub center: GeoPoint,
    pub nearest_intxn_id: u64,
    pub nearest_dist_ft: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchOutcome {
    pub visited: Vec<VisitedCandidate>,
    pub unmatched: Vec<UnmatchedCluster>,
}

/// Maps each cluster center to its nearest candidate (ties to the lower
/// intxn_id). Matches farther than `max_match_ft` are reported as unmatched.
pub fn match_clusters(
    centers: &[(u64, GeoPoint)],
    candidates: &[IntersectionCandidate],
    max_match_ft: f64,
) -> Result<MatchOutcome, DiscoveryError> {
    if candidates.is_empty() {
        return Err(DiscoveryError::NoCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by_key(|c| c.intxn_id);
    let positions: Vec<GeoPoint> = sorted.iter().map(|c| c.pos).collect();
    let grid = GridIndex::new(&positions, max_match_ft.max(1.0));

    let mut visited: BTreeMap<u64, VisitedCandidate> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for &(cluster_id, center) in centers {
        match grid.nearest_within(center, max_match_ft) {
            Some((i, dist)) => {
                let c = &sorted[i];
                let v = visited.entry(c.intxn_id).or_insert_with(|| VisitedCandidate {
                    intxn_id: c.intxn_id,
                    pos: c.pos,
                    degree: c.degree,
                    supporting_cluster_ids: Vec::new(),
                    match_dist_ft: f64::INFINITY,
                });
                v.supporting_cluster_ids.push(cluster_id);
                v.match_dist_ft = v.match_dist_ft.min(dist);
            }
            None => {
                let (i, dist) = positions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, haversine_distance_ft(center, *p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .expect("candidates nonempty");
                unmatched.push(UnmatchedCluster {
                    cluster_id,
                    center,
                    nearest_intxn_id: sorted[i].intxn_id,
                    nearest_dist_ft: dist,
                });
            }
        }
    }
    let mut visited: Vec<VisitedCandidate> = visited.into_values().collect();
    for v in &mut visited {
        v.supporting_cluster_ids.sort_unstable();
    }
    unmatched.sort_by_key(|u| u.cluster_id);
    Ok(MatchOutcome { visited, unmatched })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitParams {
    pub object_class: ObjectClass,
    pub max_gap_s: f64,
    pub eps_ft: f64,
    pub min_pts: usize,
    pub max_match_ft: f64,
}

impl Default for VisitParams {
    fn default() -> Self {
        VisitParams {
            object_class: ObjectClass::StopSign,
            max_gap_s: 2.0,
            eps_ft: 100.0,
            min_pts: 2,
            max_match_ft: 200.0,
        }
    }
}

/// Everything the visited-intersection step produces, with the row
/// accounting needed by stage reports.
#[derive(Debug, Clone, Default)]
pub struct VisitOutcome {
    pub visited: Vec<VisitedCandidate>,
    pub unmatched: Vec<UnmatchedCluster>,
    pub clusters: Vec<DetectionCluster>,
    pub other_class: usize,
    pub not_last_in_run: usize,
    pub noise: usize,
    pub unmatched_members: usize,
    pub matched_members: usize,
}

/// Class filter, last-in-run reduction, clustering and candidate matching.
pub fn subject_intersections(
    detections: &[DetectionRecord],
    candidates: &[IntersectionCandidate],
    params: &VisitParams,
) -> Result<VisitOutcome, DiscoveryError> {
    let of_class: Vec<DetectionRecord> = detections
        .iter()
        .filter(|d| d.object_class == params.object_class)
        .cloned()
        .collect();
    let last = last_in_runs(&of_class, params.max_gap_s);
    let clusters = cluster_detections(&last, params.eps_ft, params.min_pts);
    let clustered: usize = clusters.iter().map(|c| c.members.len()).sum();
    let centers: Vec<(u64, GeoPoint)> = clusters.iter().map(|c| (c.cluster_id, c.center)).collect();
    let outcome = if centers.is_empty() && candidates.is_empty() {
        MatchOutcome::default()
    } else {
        match_clusters(&centers, candidates, params.max_match_ft)?
    };
    let unmatched_members: usize = outcome
        .unmatched
        .iter()
        .map(|u| clusters[(u.cluster_id - 1) as usize].members.len())
        .sum();
    Ok(VisitOutcome {
        other_class: detections.len() - of_class.len(),
        not_last_in_run: of_class.len() - last.len(),
        noise: last.len() - clustered,
        unmatched_members,
        matched_members: clustered - unmatched_members,
        visited: outcome.visited,
        unmatched: outcome.unmatched,
        clusters,
    })
}

pub fn visited_to_geojson(visited: &[VisitedCandidate]) -> String {
    let features: Vec<Value> = visited
        .iter()
        .map(|v| {
            json!({
                "type": "Feature",
                "properties": {
                    "intxn_id": v.intxn_id,
                    "degree": v.degree,
                    "match_dist_ft": v.match_dist_ft,
                    "supporting_cluster_ids": v.supporting_cluster_ids,
                },
                "geometry": {"type": "Point", "coordinates": [v.pos.lon(), v.pos.lat()]},
            })
        })
        .collect();
    pretty(&json!({"type": "FeatureCollection", "features": features}))
}

pub fn visited_from_geojson(text: &str) -> Result<Vec<VisitedCandidate>, DiscoveryError> {
    point_features(text)?
        .into_iter()
        .map(|(pos, props)| {
            let supporting_cluster_ids = props
                .get("supporting_cluster_ids")
                .and_then(Value::as_array)
                .map(|a| a.iter().filter_map(Value::as_u64).collect())
                .unwrap_or_default();
            Ok(VisitedCandidate {
                intxn_id: prop_u64(&props, "intxn_id")?,
                degree: prop_u64(&props, "degree")? as usize,
                match_dist_ft: props
                    .get("match_dist_ft")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| DiscoveryError::Candidates("missing match_dist_ft".into()))?,
                supporting_cluster_ids,
                pos,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalFrame;
    use crate::time::Timestamp;

    fn origin() -> GeoPoint {
        GeoPoint::new(41.0, -96.0).unwrap()
    }

    fn at(x: f64, y: f64) -> GeoPoint {
        LocalFrame::new(origin()).unproject(x, y).unwrap()
    }

    fn line(id: &str, pts: &[GeoPoint]) -> Polyline {
        Polyline {
            line_id: id.into(),
            vertices: pts.to_vec(),
        }
    }

    #[test]
    fn four_leg_junction() {
        let o = origin();
        let net = RoadNetwork {
            polylines: vec![
                line("n", &[o, at(0.0, 500.0)]),
                line("s", &[o, at(0.0, -500.0)]),
                line("e", &[at(500.0, 0.0), o]),
                line("w", &[o, at(-500.0, 0.0)]),
            ],
        };
        let c = extract_lrs_candidates(&net, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].degree, 4);
        assert_eq!(c[0].pos, o);
        assert_eq!(c[0].intxn_id, 1);
    }

    #[test]
    fn continuation_is_not_a_junction_but_t_is() {
        let o = origin();
        let cont = RoadNetwork {
            polylines: vec![line("a", &[at(-500.0, 0.0), o]), line("b", &[o, at(500.0, 0.0)])],
        };
        assert!(extract_lrs_candidates(&cont, 1.0).is_empty());

        let mut tee = cont.clone();
        tee.polylines.push(line("c", &[o, at(0.0, 500.0)]));
        let c = extract_lrs_candidates(&tee, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].degree, 3);
    }

    #[test]
    fn jittered_vertices_group_transitively() {
        let net = RoadNetwork {
            polylines: vec![
                line("a", &[at(0.0, 0.0), at(0.0, 500.0)]),
                line("b", &[at(0.6, 0.0), at(500.0, 0.0)]),
                line("c", &[at(1.2, 0.0), at(0.0, -500.0)]),
            ],
        };
        // 0 and 1.2 are more than 1 ft apart but chained through 0.6
        let c = extract_lrs_candidates(&net, 1.0);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].degree, 3);
    }

    #[test]
    fn network_geojson_parsing() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","id":"r1","properties":{},"geometry":{"type":"LineString","coordinates":[[-96,41],[-96,41.01]]}},
            {"type":"Feature","properties":{"line_id":"m"},"geometry":{"type":"MultiLineString","coordinates":[[[-96,41],[-95.99,41]],[[-96,41],[-96,40.99]]]}},
            {"type":"Feature","properties":{},"geometry":{"type":"Point","coordinates":[-96,41]}}
        ]}"#;
        let net = RoadNetwork::from_geojson(text).unwrap();
        let ids: Vec<_> = net.polylines.iter().map(|l| l.line_id.as_str()).collect();
        assert_eq!(ids, ["r1", "m:0", "m:1"]);
        assert_eq!(RoadNetwork::from_geojson(&net.to_geojson()).unwrap().polylines[1].vertices, net.polylines[1].vertices);

        let short = r#"{"type":"FeatureCollection","features":[{"type":"Feature","geometry":{"type":"LineString","coordinates":[[-96,41]]}}]}"#;
        assert!(matches!(RoadNetwork::from_geojson(short), Err(DiscoveryError::Geometry { .. })));
    }

    #[test]
    fn candidate_geojson_round_trip() {
        let c = vec![IntersectionCandidate {
            intxn_id: 3,
            pos: at(10.0, 20.0),
            degree: 4,
        }];
        assert_eq!(candidates_from_geojson(&candidates_to_geojson(&c)).unwrap(), c);
    }

    fn det(t_s: i64, class: ObjectClass) -> DetectionRecord {
        DetectionRecord {
            subj: "S1".into(),
            drive: 1,
            t_utc: Timestamp::from_millis(t_s * 1000),
            pos: origin(),
            object_class: class,
            confidence: 0.9,
        }
    }

    #[test]
    fn last_in_runs_examples() {
        let d: Vec<_> = [0, 1, 2, 10, 11].iter().map(|&t| det(t, ObjectClass::StopSign)).collect();
        let kept: Vec<i64> = last_in_runs(&d, 2.0).iter().map(|d| d.t_utc.millis() / 1000).collect();
        assert_eq!(kept, [2, 11]);
        assert_eq!(last_in_runs(&d[..1], 2.0), d[..1].to_vec());
        assert!(last_in_runs(&[], 2.0).is_empty());
    }

    #[test]
    fn last_in_runs_separates_classes_and_drives() {
        let mut d = vec![det(0, ObjectClass::StopSign), det(1, ObjectClass::SignalState), det(2, ObjectClass::StopSign)];
        let mut other = det(3, ObjectClass::StopSign);
        other.drive = 2;
        d.push(other);
        let kept = last_in_runs(&d, 2.0);
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn dbscan_examples() {
        let pair = [at(0.0, 0.0), at(0.0, 50.0)];
        let c = dbscan(&pair, 100.0, 2);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 2);

        let with_noise = [at(0.0, 0.0), at(0.0, 50.0), at(1000.0, 0.0)];
        let c = dbscan(&with_noise, 100.0, 2);
        assert_eq!(c.len(), 1);
        assert!(!c[0].members.contains(&2));

        let chain: Vec<_> = (0..6).map(|i| at(80.0 * i as f64, 0.0)).collect();
        let c = dbscan(&chain, 100.0, 2);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members.len(), 6);
    }

    #[test]
    fn dbscan_border_point_with_higher_min_pts() {
        // a dense core of three plus one border point reachable from the core
        let pts = [at(0.0, 0.0), at(10.0, 0.0), at(20.0, 0.0), at(110.0, 0.0), at(500.0, 0.0)];
        let c = dbscan(&pts, 100.0, 3);
        assert_eq!(c.len(), 1);
        let mut m = c[0].members.clone();
        m.sort();
        assert_eq!(m, [0, 1, 2, 3]);
    }

    fn cand(id: u64, p: GeoPoint) -> IntersectionCandidate {
        IntersectionCandidate {
            intxn_id: id,
            pos: p,
            degree: 4,
        }
    }

    #[test]
    fn match_examples() {
        let a = cand(1, at(0.0, 0.0));
        let b = cand(2, at(530.0, 0.0));
        let out = match_clusters(&[(1, at(30.0, 0.0))], &[a, b], 200.0).unwrap();
        assert_eq!(out.visited.len(), 1);
        assert_eq!(out.visited[0].intxn_id, 1);
        assert!((out.visited[0].match_dist_ft - 30.0).abs() < 0.01);

        let out = match_clusters(&[(7, at(0.0, 300.0))], &[a], 200.0).unwrap();
        assert!(out.visited.is_empty());
        assert_eq!(out.unmatched[0].cluster_id, 7);
        assert!((out.unmatched[0].nearest_dist_ft - 300.0).abs() < 0.01);

        let out = match_clusters(&[(2, at(20.0, 0.0)), (1, at(-40.0, 0.0))], &[a, b], 200.0).unwrap();
        assert_eq!(out.visited.len(), 1);
        assert_eq!(out.visited[0].supporting_cluster_ids, [1, 2]);
        assert!((out.visited[0].match_dist_ft - 20.0).abs() < 0.01);

        assert!(matches!(match_clusters(&[], &[], 200.0), Err(DiscoveryError::NoCandidates)));
    }

    #[test]
    fn subject_intersections_accounting() {
        let mk = |t: i64, x: f64, subj: &str| DetectionRecord {
            subj: subj.into(),
            drive: 1,
            t_utc: Timestamp::from_millis(t * 1000),
            pos: at(x, 0.0),
            object_class: ObjectClass::StopSign,
            confidence: 0.9,
        };
        let mut dets = vec![mk(0, -100.0, "A"), mk(1, -50.0, "A"), mk(0, 40.0, "B"), mk(100, 5000.0, "B")];
        let mut sig = mk(50, 0.0, "B");
        sig.object_class = ObjectClass::SignalState;
        dets.push(sig);
        dets.sort_by(|a, b| (&a.subj, a.t_utc).cmp(&(&b.subj, b.t_utc)));
        let cands = [cand(1, at(0.0, 0.0))];
        let out = subject_intersections(&dets, &cands, &VisitParams::default()).unwrap();
        assert_eq!(out.visited.len(), 1);
        assert_eq!(out.other_class, 1);
        assert_eq!(out.not_last_in_run, 1);
        assert_eq!(out.noise, 1);
        assert_eq!(out.matched_members, 2);
        assert_eq!(
            dets.len(),
            out.other_class + out.not_last_in_run + out.noise + out.unmatched_members + out.matched_members
        );
    }

    #[test]
    fn visited_geojson_round_trip() {
        let v = vec![VisitedCandidate {
            intxn_id: 4,
            pos: at(1.0, 2.0),
            degree: 3,
            supporting_cluster_ids: vec![1, 5],
            match_dist_ft: 12.5,
        }];
        assert_eq!(visited_from_geojson(&visited_to_geojson(&v)).unwrap(), v);
    }
}

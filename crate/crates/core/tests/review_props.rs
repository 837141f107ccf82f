use std::collections::BTreeSet;

use intxn_core::discovery::VisitedCandidate;
use intxn_core::geo::{GeoPoint, LocalFrame};
use intxn_core::review::kml::read_point_placemarks;
use intxn_core::review::{
    build_review_template, export_candidates_kml, import_reviewed_kml, ControlType, CustomField, ImportParams,
};
use proptest::prelude::*;

fn placemark(name: Option<&str>, body: &str) -> String {
    let name = name.map(|n| format!("<name>{n}</name>")).unwrap_or_default();
    format!("<Placemark>{name}{body}</Placemark>\n")
}

fn point_body(p: GeoPoint, control: Option<&str>) -> String {
    let data = control
        .map(|c| format!("<ExtendedData><Data name=\"control\"><value>{c}</value></Data></ExtendedData>"))
        .unwrap_or_default();
    format!("{data}<Point><coordinates>{},{},0</coordinates></Point>", p.lon(), p.lat())
}

fn ring_body(f: &LocalFrame, pts: &[(f64, f64)]) -> String {
    let mut c: Vec<String> = pts
        .iter()
        .map(|&(x, y)| {
            let q = f.unproject(x, y).unwrap();
            format!("{},{},0", q.lon(), q.lat())
        })
        .collect();
    c.push(c[0].clone());
    format!(
        "<Polygon><outerBoundaryIs><LinearRing><coordinates>{}</coordinates></LinearRing></outerBoundaryIs></Polygon>",
        c.join(" ")
    )
}

fn line_body(f: &LocalFrame, a: (f64, f64), b: (f64, f64)) -> String {
    let p = f.unproject(a.0, a.1).unwrap();
    let q = f.unproject(b.0, b.1).unwrap();
    format!("<LineString><coordinates>{},{},0 {},{},0</coordinates></LineString>", p.lon(), p.lat(), q.lon(), q.lat())
}

fn document(true_folder: &str, false_folder: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<kml xmlns=\"http://www.opengis.net/kml/2.2\"><Document>\n\
         <Folder><name>true</name>\n{true_folder}</Folder>\n<Folder><name>false</name>\n{false_folder}</Folder>\n</Document></kml>\n"
    )
}

/// Approach box west of a junction at local (cx, cy), entering line inside it.
fn approach(f: &LocalFrame, cx: f64, cy: f64) -> (String, String) {
    let poly = ring_body(f, &[(cx - 300.0, cy - 20.0), (cx, cy - 20.0), (cx, cy + 20.0), (cx - 300.0, cy + 20.0)]);
    let line = line_body(f, (cx - 250.0, cy), (cx - 50.0, cy));
    (placemark(None, &poly), placemark(None, &line))
}

#[derive(Debug, Clone)]
enum Item {
    Point { node: usize, name: u8, control: u8 },
    Polygon { node: usize, dx: f64 },
    Line { node: usize, dx: f64 },
    Broken(u8),
}

fn item() -> impl Strategy<Value = Item> {
    prop_oneof![
        (0..6usize, 0..10u8, 0..10u8).prop_map(|(node, name, control)| Item::Point { node, name, control }),
        (0..6usize, prop_oneof![3 => Just(0.0), 1 => 0.0..1500.0f64]).prop_map(|(node, dx)| Item::Polygon { node, dx }),
        (0..6usize, prop_oneof![3 => Just(0.0), 1 => 0.0..600.0f64]).prop_map(|(node, dx)| Item::Line { node, dx }),
        (0..4u8).prop_map(Item::Broken),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn candidate_kml_round_trip(
        raw in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 1..1_000_000u64, 0.0..200.0f64, 3..6usize), 1..40),
    ) {
        let mut seen = BTreeSet::new();
        let cands: Vec<VisitedCandidate> = raw
            .iter()
            .enumerate()
            .filter(|(_, r)| seen.insert(r.2))
            .map(|(i, &(jlat, jlon, id, dist, degree))| VisitedCandidate {
                intxn_id: id,
                pos: GeoPoint::new(30.0 + (i / 8) as f64 * 0.1 + 0.05 * jlat, -100.0 + (i % 8) as f64 * 0.1 + 0.05 * jlon).unwrap(),
                degree,
                supporting_cluster_ids: vec![1],
                match_dist_ft: dist,
            })
            .collect();
        let kml = export_candidates_kml(&cands, ControlType::Signal).unwrap();
        let points = read_point_placemarks(&kml).unwrap();
        prop_assert_eq!(points.len(), cands.len());

        let mut body = String::new();
        for (name, p) in &points {
            body.push_str(&placemark(Some(name), &point_body(*p, Some("signal"))));
            let (poly, line) = approach(&LocalFrame::new(*p), 0.0, 0.0);
            body.push_str(&poly);
            body.push_str(&line);
        }
        let imported = import_reviewed_kml(&document(&body, ""), &ImportParams::default()).unwrap();
        prop_assert!(imported.rejects.is_empty(), "{:?}", imported.rejects);
        let mut want = cands.clone();
        want.sort_by_key(|c| c.intxn_id);
        prop_assert_eq!(imported.intersections.len(), want.len());
        for (got, c) in imported.intersections.iter().zip(&want) {
            prop_assert_eq!(got.intxn_id, c.intxn_id);
            prop_assert!((got.pos.lat() - c.pos.lat()).abs() <= 1e-6);
            prop_assert!((got.pos.lon() - c.pos.lon()).abs() <= 1e-6);
            prop_assert_eq!(got.control_type, ControlType::Signal);
            prop_assert_eq!(got.approaches.len(), 1);
        }
    }

    #[test]
    fn every_geometry_is_kept_or_rejected_once(items in prop::collection::vec(item(), 0..40), falses in 0..4usize) {
        let f = LocalFrame::new(GeoPoint::new(41.0, -96.0).unwrap());
        let node = |n: usize| ((n % 3) as f64 * 3000.0, (n / 3) as f64 * 3000.0);
        let mut body = String::new();
        for it in &items {
            body.push_str(&match it {
                Item::Point { node: n, name, control } => {
                    let (x, y) = node(*n);
                    let name = match name {
                        0 => "not-an-id".to_string(),
                        1..=7 => (*n as u64 + 1).to_string(),
                        _ => (*n as u64 + 100).to_string(),
                    };
                    let control = match control {
                        0 => Some("yield"),
                        1..=3 => None,
                        4..=6 => Some("stop"),
                        _ => Some("signal"),
                    };
                    placemark(Some(&name), &point_body(f.unproject(x, y).unwrap(), control))
                }
                Item::Polygon { node: n, dx } => {
                    let (x, y) = node(*n);
                    approach(&f, x + dx, y).0
                }
                Item::Line { node: n, dx } => {
                    let (x, y) = node(*n);
                    placemark(None, &line_body(&f, (x - 250.0 + dx, y), (x - 50.0 + dx, y)))
                }
                Item::Broken(0) => placemark(Some("empty"), ""),
                Item::Broken(1) => placemark(None, "<Point><coordinates>abc,def</coordinates></Point>"),
                Item::Broken(2) => placemark(None, "<LineString><coordinates>-96,41,0</coordinates></LineString>"),
                Item::Broken(_) => placemark(
                    None,
                    "<Polygon><outerBoundaryIs><LinearRing><coordinates>-96,41 -95.99,41.01 -95.99,41 -96,41.01 -96,41</coordinates></LinearRing></outerBoundaryIs></Polygon>",
                ),
            });
        }
        let discarded: String = (0..falses)
            .map(|i| placemark(Some(&(500 + i).to_string()), &point_body(f.unproject(-9000.0, i as f64 * 3000.0).unwrap(), None)))
            .collect();
        let imported = import_reviewed_kml(&document(&body, &discarded), &ImportParams::default()).unwrap();

        prop_assert_eq!(imported.placemarks, items.len() + falses);
        prop_assert_eq!(imported.items, imported.placemarks);
        let approaches: usize = imported.intersections.iter().map(|i| i.approaches.len()).sum();
        prop_assert_eq!(imported.items, imported.intersections.len() + 2 * approaches + imported.rejects.len());
        let rejected: BTreeSet<usize> = imported.rejects.iter().map(|r| r.placemark).collect();
        prop_assert_eq!(rejected.len(), imported.rejects.len(), "a placemark was rejected twice");

        let mut ids = BTreeSet::new();
        for ix in &imported.intersections {
            prop_assert!(ids.insert(ix.intxn_id));
            prop_assert!(!ix.approaches.is_empty());
            for leg in &ix.approaches {
                prop_assert!(leg.entering_line.len() >= 2);
            }
        }
    }

    #[test]
    fn template_columns_follow_standard_then_custom_order(
        names in prop::collection::btree_set("[a-z]{1,8}", 0..6),
        seed in any::<u64>(),
    ) {
        let mut names: Vec<String> = names.into_iter().filter(|n| !["subj", "drive"].contains(&n.as_str())).collect();
        let shift = if names.is_empty() { 0 } else { seed as usize % names.len() };
        names.rotate_left(shift);
        let fields: Vec<CustomField> = names.iter().map(|n| n.parse().unwrap()).collect();
        let template = build_review_template(&[], &[], &[], &fields, "").unwrap();
        let csv = String::from_utf8(template.to_csv().unwrap()).unwrap();
        let mut want: Vec<String> = ["stop_traj_id", "subj", "drive", "intxn_id", "ref_time_utc", "primary_sub_age", "primary_subj_gender", "jump_to_ref", "video_url"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        want.extend(names);
        prop_assert_eq!(csv.trim_end(), want.join(","));
    }
}

//! Uniform lat/lon grid for fixed-radius neighbour queries.

use std::collections::HashMap;

use crate::geo::{haversine_distance_ft, GeoPoint, EARTH_RADIUS_FT, FT_PER_DEGREE};

/// Read-only bucket index over a point set. Cells are square in degrees with
/// a side equal to `cell_ft` of latitude. Queries are exact: the candidate
/// window is a conservative spherical bounding box and every candidate is
/// checked with the haversine distance.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_deg: f64,
    points: Vec<GeoPoint>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub fn new(points: &[GeoPoint], cell_ft: f64) -> Self {
        assert!(cell_ft > 0.0, "grid cell size must be positive");
        let cell_deg = cell_ft / FT_PER_DEGREE;
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(cell_deg, *p)).or_default().push(i);
        }
        GridIndex {
            cell_deg,
            points: points.to_vec(),
            cells,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> GeoPoint {
        self.points[i]
    }

    /// Indices of all points with distance ≤ `radius_ft` from `center`,
    /// ascending.
    pub fn within(&self, center: GeoPoint, radius_ft: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let dlat = (radius_ft / FT_PER_DEGREE) * (1.0 + 1e-9) + 1e-12;
        let ang = radius_ft / EARTH_RADIUS_FT;
        let max_lat = (center.lat().abs() + dlat).min(90.0);
        let ratio = ang.sin() / max_lat.to_radians().cos();
        let dlon = if ang >= std::f64::consts::FRAC_PI_2 || !(0.0..1.0).contains(&ratio) {
            360.0
        } else {
            ratio.asin().to_degrees() * (1.0 + 1e-9) + 1e-12
        };

        let r0 = ((center.lat() - dlat) / self.cell_deg).floor() as i64;
        let r1 = ((center.lat() + dlat) / self.cell_deg).floor() as i64;
        let c0 = ((center.lon() - dlon) / self.cell_deg).floor() as i64;
        let c1 = ((center.lon() + dlon) / self.cell_deg).floor() as i64;
        let window = (r1 - r0 + 1) as f64 * (c1 - c0 + 1) as f64;

        let mut check = |ids: &Vec<usize>| {
            for &i in ids {
                if haversine_distance_ft(center, self.points[i]) <= radius_ft {
                    out.push(i);
                }
            }
        };
        if dlon >= 180.0 || window > self.cells.len() as f64 {
            for ((r, c), ids) in &self.cells {
                if (r0..=r1).contains(r) && (dlon >= 180.0 || (c0..=c1).contains(c)) {
                    check(ids);
                }
            }
        } else {
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if let Some(ids) = self.cells.get(&(r, c)) {
                        check(ids);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest point to `center` among those within `radius_ft`; ties resolve
    /// to the lower index.
    pub fn nearest_within(&self, center: GeoPoint, radius_ft: f64) -> Option<(usize, f64)> {
        self.within(center, radius_ft)
            .into_iter()
            .map(|i| (i, haversine_distance_ft(center, self.points[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }
}

fn cell_of(cell_deg: f64, p: GeoPoint) -> (i64, i64) {
    (
        (p.lat() / cell_deg).floor() as i64,
        (p.lon() / cell_deg).floor() as i64,
    )
}

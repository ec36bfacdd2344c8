//! Tract geometry: centroids, containment, GEOID resolution and projection
//! of trip end points into UTM meters.

mod geojson;
pub mod utm;

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TripRecord;

pub use geojson::{read_boundary_geojson, read_polygons_geojson, write_polygons_geojson};
pub use utm::{utm_to_wgs84, wgs84_to_utm, Hemisphere, ProjectionSpec, TransverseMercator};

/// Closed ring of (lon, lat) vertices, first == last.
pub type Ring = Vec<(f64, f64)>;

/// One simple polygon: exterior ring followed by holes.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Ring>,
}

/// A tract (or boundary piece). Single-polygon tracts have one part;
/// multipolygon features keep every part under the same GEOID.
#[derive(Debug, Clone, PartialEq)]
pub struct TractPolygon {
    pub geoid: String,
    pub parts: Vec<Polygon>,
}

impl TractPolygon {
    pub fn simple(geoid: impl Into<String>, rings: Vec<Ring>) -> Self {
        Self {
            geoid: geoid.into(),
            parts: vec![Polygon { rings }],
        }
    }

    /// Axis-aligned rectangle, counter-clockwise.
    pub fn rectangle(geoid: impl Into<String>, min: (f64, f64), max: (f64, f64)) -> Self {
        Self::simple(
            geoid,
            vec![vec![min, (max.0, min.1), max, (min.0, max.1), min]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidPolygon {
            geoid: self.geoid.clone(),
            reason: reason.to_string(),
        };
        if self.parts.is_empty() {
            return Err(invalid("no rings"));
        }
        for part in &self.parts {
            if part.rings.is_empty() {
                return Err(invalid("polygon part without an exterior ring"));
            }
            for ring in &part.rings {
                if ring.len() < 4 {
                    return Err(invalid("ring has fewer than 4 vertices"));
                }
                if ring.first() != ring.last() {
                    return Err(invalid("ring is not closed"));
                }
                if ring.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
                    return Err(invalid("non-finite vertex"));
                }
            }
            if ring_moments(&part.rings[0], part.rings[0][0]).0 == 0.0 {
                return Err(Error::DegeneratePolygon {
                    geoid: self.geoid.clone(),
                });
            }
        }
        Ok(())
    }

    /// Exterior vertices of every part (closing vertex excluded).
    pub fn exterior_vertices(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.parts.iter().flat_map(|p| {
            let ring = &p.rings[0];
            ring[..ring.len() - 1].iter().copied()
        })
    }
}

/// Signed area and first moments of a ring about `origin`
/// (area, Σ x-moment, Σ y-moment), shoelace form.
fn ring_moments(ring: &[(f64, f64)], origin: (f64, f64)) -> (f64, f64, f64) {
    let (mut a2, mut mx, mut my) = (0.0, 0.0, 0.0);
    for w in ring.windows(2) {
        let (x0, y0) = (w[0].0 - origin.0, w[0].1 - origin.1);
        let (x1, y1) = (w[1].0 - origin.0, w[1].1 - origin.1);
        let cross = x0 * y1 - x1 * y0;
        a2 += cross;
        mx += (x0 + x1) * cross;
        my += (y0 + y1) * cross;
    }
    (a2 / 2.0, mx / 6.0, my / 6.0)
}

/// Area-weighted planar centroid in degree space, holes subtracted.
pub fn polygon_centroid(poly: &TractPolygon) -> Result<(f64, f64)> {
    poly.validate()?;
    let origin = poly.parts[0].rings[0][0];
    let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
    let mut extent: f64 = 0.0;
    for part in &poly.parts {
        for (i, ring) in part.rings.iter().enumerate() {
            let (a, rx, ry) = ring_moments(ring, origin);
            // Exterior adds, holes subtract, whatever the winding direction.
            let sign = a.signum() * if i == 0 { 1.0 } else { -1.0 };
            area += sign * a;
            mx += sign * rx;
            my += sign * ry;
            for &(x, y) in ring {
                extent = extent.max((x - origin.0).abs()).max((y - origin.1).abs());
            }
        }
    }
    if !(area > 1e-14 * extent * extent) {
        return Err(Error::DegeneratePolygon {
            geoid: poly.geoid.clone(),
        });
    }
    Ok((origin.0 + mx / area, origin.1 + my / area))
}

fn is_left(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (p.0 - a.0) * (b.1 - a.1)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    is_left(a, b, p) == 0.0
        && p.0 >= a.0.min(b.0)
        && p.0 <= a.0.max(b.0)
        && p.1 >= a.1.min(b.1)
        && p.1 <= a.1.max(b.1)
}

fn winding_number(ring: &[(f64, f64)], p: (f64, f64)) -> i32 {
    let mut wn = 0;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.1 <= p.1 {
            if b.1 > p.1 && is_left(a, b, p) > 0.0 {
                wn += 1;
            }
        } else if b.1 <= p.1 && is_left(a, b, p) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn ring_touches(ring: &[(f64, f64)], p: (f64, f64)) -> bool {
    ring.windows(2).any(|w| on_segment(w[0], w[1], p))
}

/// Winding-number containment. Boundary points (on any ring, holes
/// included) count as inside; points strictly inside a hole do not.
pub fn point_in_polygon(pt: (f64, f64), poly: &TractPolygon) -> bool {
    poly.parts.iter().any(|part| {
        if part.rings.iter().any(|r| ring_touches(r, pt)) {
            return true;
        }
        winding_number(&part.rings[0], pt) != 0
            && part.rings[1..].iter().all(|hole| winding_number(hole, pt) == 0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidEntry {
    pub geoid: String,
    pub lon: f64,
    pub lat: f64,
    pub easting: f64,
    pub northing: f64,
    /// Exterior vertices, kept for any-vertex boundary tests. Empty when the
    /// table was loaded from a centroid CSV.
    #[serde(skip)]
    pub vertices: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableWarning {
    pub geoid: String,
    pub message: String,
}

/// GEOID → centroid lookup. Immutable once built.
#[derive(Debug, Clone)]
pub struct CentroidTable {
    spec: ProjectionSpec,
    entries: BTreeMap<String, CentroidEntry>,
    /// Last-six-digit suffix → unique full GEOID (`None` when ambiguous).
    suffixes: HashMap<String, Option<String>>,
}

const SUFFIX_LEN: usize = 6;

fn suffix(geoid: &str) -> Option<&str> {
    (geoid.len() >= SUFFIX_LEN && geoid.is_char_boundary(geoid.len() - SUFFIX_LEN))
        .then(|| &geoid[geoid.len() - SUFFIX_LEN..])
}

impl CentroidTable {
    fn from_entries(spec: ProjectionSpec, list: Vec<CentroidEntry>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut suffixes: HashMap<String, Option<String>> = HashMap::new();
        for e in list {
            if let Some(s) = suffix(&e.geoid) {
                suffixes
                    .entry(s.to_string())
                    .and_modify(|v| *v = None)
                    .or_insert_with(|| Some(e.geoid.clone()));
            }
            let geoid = e.geoid.clone();
            if entries.insert(geoid.clone(), e).is_some() {
                return Err(Error::DuplicateGeoid(geoid));
            }
        }
        Ok(Self {
            spec,
            entries,
            suffixes,
        })
    }

    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, geoid: &str) -> Option<&CentroidEntry> {
        self.entries.get(geoid)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CentroidEntry> {
        self.entries.values()
    }

    /// Exact GEOID match first, then a unique last-six-digit match.
    pub fn resolve(&self, geoid: &str) -> Option<&CentroidEntry> {
        if let Some(e) = self.entries.get(geoid) {
            return Some(e);
        }
        let full = self.suffixes.get(suffix(geoid)?)?.as_ref()?;
        self.entries.get(full)
    }

    /// Centroid CSV with columns geoid, lon, lat, easting, northing.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["geoid", "lon", "lat", "easting", "northing"])?;
        for e in self.entries.values() {
            out.write_record([
                e.geoid.clone(),
                format!("{:.10}", e.lon),
                format!("{:.10}", e.lat),
                format!("{:.4}", e.easting),
                format!("{:.4}", e.northing),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load precomputed centroids (geoid, lon, lat); projected coordinates
    /// are recomputed under `spec`.
    pub fn read_csv<R: Read>(r: R, spec: &ProjectionSpec) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            geoid: String,
            lon: f64,
            lat: f64,
        }
        let tm = spec.projector()?;
        let mut list = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            let (easting, northing) = tm.forward(row.lat, row.lon)?;
            list.push(CentroidEntry {
                geoid: row.geoid,
                lon: row.lon,
                lat: row.lat,
                easting,
                northing,
                vertices: Vec::new(),
            });
        }
        Self::from_entries(*spec, list)
    }
}

/// One entry per polygon. Duplicate GEOIDs are fatal; degenerate or invalid
/// polygons are skipped and reported as warnings.
pub fn build_centroid_table(
    polygons: &[TractPolygon],
    spec: &ProjectionSpec,
) -> Result<(CentroidTable, Vec<TableWarning>)> {
    let tm = spec.projector()?;
    let mut seen = std::collections::HashSet::new();
    for p in polygons {
        if !seen.insert(p.geoid.as_str()) {
            return Err(Error::DuplicateGeoid(p.geoid.clone()));
        }
    }
    let computed: Vec<Result<CentroidEntry>> = polygons
        .par_iter()
        .map(|p| {
            let (lon, lat) = polygon_centroid(p)?;
            let (easting, northing) = tm.forward(lat, lon)?;
            Ok(CentroidEntry {
                geoid: p.geoid.clone(),
                lon,
                lat,
                easting,
                northing,
                vertices: p.exterior_vertices().collect(),
            })
        })
        .collect();

    let mut entries = Vec::with_capacity(polygons.len());
    let mut warnings = Vec::new();
    for (p, r) in polygons.iter().zip(computed) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => warnings.push(TableWarning {
                geoid: p.geoid.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok((CentroidTable::from_entries(*spec, entries)?, warnings))
}

/// UTM bounding box (min_x, min_y, max_x, max_y) of every vertex of every
/// ring, e.g. of the municipal boundary the grid should span.
pub fn projected_bounds(polygons: &[TractPolygon], spec: &ProjectionSpec) -> Result<(f64, f64, f64, f64)> {
    let tm = spec.projector()?;
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in polygons {
        for ring in p.parts.iter().flat_map(|part| &part.rings) {
            for &(lon, lat) in ring {
                let (x, y) = tm.forward(lat, lon)?;
                b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
            }
        }
    }
    if !b.0.is_finite() {
        return Err(Error::EmptyInput("no polygon vertices"));
    }
    Ok(b)
}

/// Which tract property decides membership in the municipal boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// The tract centroid lies inside the boundary.
    #[default]
    Centroid,
    /// Any exterior vertex of the tract lies inside the boundary. Falls back
    /// to the centroid when the table has no vertices.
    AnyVertex,
}

pub fn inside_boundary(entry: &CentroidEntry, boundary: &[TractPolygon], mode: BoundaryMode) -> bool {
    let contains = |pt: (f64, f64)| boundary.iter().any(|b| point_in_polygon(pt, b));
    match mode {
        BoundaryMode::AnyVertex if !entry.vertices.is_empty() => {
            entry.vertices.iter().any(|&v| contains(v))
        }
        _ => contains((entry.lon, entry.lat)),
    }
}

/// A trip with UTM coordinates for both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocatedTrip {
    pub row_index: usize,
    pub start_time: chrono::NaiveDateTime,
    pub end_time: chrono::NaiveDateTime,
    /// (x^s, y^s), meters.
    pub origin: (f64, f64),
    /// (x^e, y^e), meters.
    pub dest: (f64, f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GeoRejections {
    pub unresolved_geoid: usize,
    pub outside_boundary: usize,
}

/// Attach centroid coordinates to each trip. With `boundary = None` no
/// boundary filtering is applied.
pub fn geolocate_trips<'a>(
    trips: &[TripRecord],
    table: &'a CentroidTable,
    boundary: Option<&[TractPolygon]>,
    mode: BoundaryMode,
) -> (Vec<LocatedTrip>, GeoRejections) {
    let mut inside: HashMap<&str, bool> = HashMap::new();
    let mut is_inside = |e: &'a CentroidEntry| -> bool {
        let Some(b) = boundary else { return true };
        *inside
            .entry(e.geoid.as_str())
            .or_insert_with(|| inside_boundary(e, b, mode))
    };

    let mut located = Vec::with_capacity(trips.len());
    let mut rejections = GeoRejections::default();
    for t in trips {
        let (Some(o), Some(d)) = (table.resolve(&t.origin_geoid), table.resolve(&t.dest_geoid)) else {
            rejections.unresolved_geoid += 1;
            continue;
        };
        if !is_inside(o) || !is_inside(d) {
            rejections.outside_boundary += 1;
            continue;
        }
        located.push(LocatedTrip {
            row_index: t.row_index,
            start_time: t.start_time,
            end_time: t.end_time,
            origin: (o.easting, o.northing),
            dest: (d.easting, d.northing),
        });
    }
    (located, rejections)
}

/// Located trips as CSV (row_index, start, end, origin/destination UTM).
pub fn write_located_csv<W: Write>(trips: &[LocatedTrip], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["row_index", "start_time", "end_time", "origin_x", "origin_y", "dest_x", "dest_y"])?;
    for t in trips {
        out.write_record([
            t.row_index.to_string(),
            crate::ingest::format_timestamp(&t.start_time),
            crate::ingest::format_timestamp(&t.end_time),
            format!("{:.4}", t.origin.0),
            format!("{:.4}", t.origin.1),
            format!("{:.4}", t.dest.0),
            format!("{:.4}", t.dest.1),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_located_csv<R: Read>(r: R) -> Result<Vec<LocatedTrip>> {
    #[derive(Deserialize)]
    struct Row {
        row_index: usize,
        start_time: String,
        end_time: String,
        origin_x: f64,
        origin_y: f64,
        dest_x: f64,
        dest_y: f64,
    }
    let ts = |s: &str| {
        crate::ingest::parse_timestamp(s).ok_or_else(|| Error::Parse(format!("bad timestamp `{s}`")))
    };
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| {
            let row: Row = row?;
            Ok(LocatedTrip {
                row_index: row.row_index,
                start_time: ts(&row.start_time)?,
                end_time: ts(&row.end_time)?,
                origin: (row.origin_x, row.origin_y),
                dest: (row.dest_x, row.dest_y),
            })
        })
        .collect()
}

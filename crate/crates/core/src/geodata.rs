//! Zone polygons, spatial weights, trajectory buffers and point-in-zone queries.
//!
//! All coordinates are planar meters. Zone order in a [`ZoneSet`] is the row
//! order of every per-zone vector and matrix produced downstream.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use geo::{
    unary_union, Area, Centroid, Coord, Intersects, LineString, MultiPolygon, Orient, Point,
    Polygon, Rect, Validation,
};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::warning::Warning;

/// Vertices per quarter circle when discretising round caps and joins.
pub const SEGMENTS_PER_QUARTER: usize = 32;

#[derive(Debug, Clone)]
pub struct Zone {
    pub id: String,
    pub boundary: Polygon<f64>,
    pub area_km2: f64,
    pub centroid: Coord<f64>,
    bbox: Rect<f64>,
}

impl Zone {
    /// Builds a zone from an exterior ring. The closing vertex may be repeated or omitted.
    pub fn new(id: impl Into<String>, ring: Vec<Coord<f64>>) -> Result<Self> {
        let id = id.into();
        let malformed = |reason: &str| Error::MalformedGeometry {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if ring.iter().any(|c| !c.x.is_finite() || !c.y.is_finite()) {
            return Err(malformed("non-finite coordinate"));
        }
        let mut ring = ring;
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        ring.dedup();
        if ring.len() < 3 {
            return Err(malformed("fewer than three distinct vertices"));
        }
        let polygon =
            Polygon::new(LineString::new(ring), vec![]).orient(geo::orient::Direction::Default);
        if let Some(problem) = polygon.validation_errors().into_iter().next() {
            return Err(malformed(&problem.to_string()));
        }
        let area_m2 = polygon.unsigned_area();
        if area_m2 <= 0.0 {
            return Err(malformed("zero area"));
        }
        let centroid = polygon
            .centroid()
            .map(|p| p.0)
            .ok_or_else(|| malformed("no centroid"))?;
        let bbox = geo::BoundingRect::bounding_rect(&polygon).ok_or_else(|| malformed("empty"))?;
        Ok(Zone {
            id,
            boundary: polygon,
            area_km2: area_m2 / 1e6,
            centroid,
            bbox,
        })
    }

    /// Axis-aligned square with lower-left corner `(x0, y0)`.
    pub fn square(id: impl Into<String>, x0: f64, y0: f64, side: f64) -> Result<Self> {
        Zone::new(
            id,
            vec![
                Coord { x: x0, y: y0 },
                Coord {
                    x: x0 + side,
                    y: y0,
                },
                Coord {
                    x: x0 + side,
                    y: y0 + side,
                },
                Coord {
                    x: x0,
                    y: y0 + side,
                },
            ],
        )
    }

    pub fn bbox(&self) -> Rect<f64> {
        self.bbox
    }

    fn ring(&self) -> &[Coord<f64>] {
        let coords = &self.boundary.exterior().0;
        &coords[..coords.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct ZoneSet {
    zones: Vec<Zone>,
    index: HashMap<String, usize>,
    pub crs_note: String,
}

impl ZoneSet {
    pub fn new(zones: Vec<Zone>, crs_note: impl Into<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(zones.len());
        for (i, z) in zones.iter().enumerate() {
            if index.insert(z.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(z.id.clone()));
            }
        }
        Ok(ZoneSet {
            zones,
            index,
            crs_note: crs_note.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn get(&self, i: usize) -> &Zone {
        &self.zones[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.zones.iter().map(|z| z.id.as_str())
    }

    pub fn centroids(&self) -> Vec<Coord<f64>> {
        self.zones.iter().map(|z| z.centroid).collect()
    }

    /// Index of the first zone (in set order) whose closed boundary contains `p`.
    pub fn locate(&self, p: Coord<f64>) -> Option<usize> {
        let point = Point(p);
        self.zones.iter().position(|z| {
            let b = z.bbox;
            p.x >= b.min().x
                && p.x <= b.max().x
                && p.y >= b.min().y
                && p.y <= b.max().y
                && z.boundary.intersects(&point)
        })
    }
}

/// Reads a GeoJSON FeatureCollection of polygons with an `id` property.
pub fn load_zones(path: &Path) -> Result<ZoneSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    zones_from_geojson(&value)
}

pub fn zones_from_geojson(value: &Value) -> Result<ZoneSet> {
    if value.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(Error::InvalidInput(
            "expected a GeoJSON FeatureCollection".into(),
        ));
    }
    if let Some(name) = value
        .pointer("/crs/properties/name")
        .and_then(Value::as_str)
    {
        let name = name.to_ascii_uppercase();
        if name.contains("CRS84") || name.ends_with(":4326") || name.ends_with("::4326") {
            return Err(Error::GeographicCoordinates);
        }
    }
    let features = value
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidInput("missing features array".into()))?;

    let mut zones = Vec::with_capacity(features.len());
    for (k, feature) in features.iter().enumerate() {
        let id = match feature.pointer("/properties/id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "feature {k} has no `id` property"
                )))
            }
        };
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| Error::InvalidInput(format!("feature {id} has no geometry")))?;
        let kind = geometry
            .get("type")
            .and_then(Value::as_str)
            .unwrap_or("null");
        if kind != "Polygon" {
            return Err(Error::UnsupportedGeometryType {
                id,
                kind: kind.to_string(),
            });
        }
        let rings = geometry
            .get("coordinates")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::InvalidInput(format!("feature {id} has no coordinates")))?;
        if rings.len() != 1 {
            return Err(Error::UnsupportedGeometryType {
                id,
                kind: "Polygon with holes".into(),
            });
        }
        let ring = parse_ring(&rings[0]).ok_or_else(|| Error::MalformedGeometry {
            id: id.clone(),
            reason: "coordinates are not [x, y] pairs".into(),
        })?;
        zones.push(Zone::new(id, ring)?);
    }
    refuse_geographic(&zones)?;
    ZoneSet::new(zones, "planar meters")
}

fn parse_ring(value: &Value) -> Option<Vec<Coord<f64>>> {
    value
        .as_array()?
        .iter()
        .map(|pos| {
            let pos = pos.as_array()?;
            Some(Coord {
                x: pos.first()?.as_f64()?,
                y: pos.get(1)?.as_f64()?,
            })
        })
        .collect()
}

// Every coordinate inside lon/lat bounds and every polygon tiny in squared
// units is what degree-valued input looks like.
fn refuse_geographic(zones: &[Zone]) -> Result<()> {
    if zones.is_empty() {
        return Ok(());
    }
    let in_lonlat = zones.iter().all(|z| {
        let b = z.bbox;
        b.min().x >= -180.0 && b.max().x <= 180.0 && b.min().y >= -90.0 && b.max().y <= 90.0
    });
    let tiny = zones.iter().all(|z| z.area_km2 * 1e6 < 1e-2);
    if in_lonlat && tiny {
        Err(Error::GeographicCoordinates)
    } else {
        Ok(())
    }
}

pub fn polygon_to_geojson(polygon: &Polygon<f64>) -> Value {
    let mut rings = vec![ring_to_json(polygon.exterior())];
    rings.extend(polygon.interiors().iter().map(ring_to_json));
    json!({ "type": "Polygon", "coordinates": rings })
}

pub fn multipolygon_to_geojson(mp: &MultiPolygon<f64>) -> Value {
    let polys: Vec<Value> =
        mp.0.iter()
            .map(|p| {
                let mut rings = vec![ring_to_json(p.exterior())];
                rings.extend(p.interiors().iter().map(ring_to_json));
                Value::Array(rings)
            })
            .collect();
    json!({ "type": "MultiPolygon", "coordinates": polys })
}

fn ring_to_json(ring: &LineString<f64>) -> Value {
    Value::Array(ring.0.iter().map(|c| json!([c.x, c.y])).collect())
}

/// Zone FeatureCollection with `id` plus the given extra properties per zone.
pub fn zones_to_geojson(
    zones: &ZoneSet,
    mut extra: impl FnMut(usize) -> Map<String, Value>,
) -> Value {
    let features: Vec<Value> = zones
        .zones()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut props = Map::new();
            props.insert("id".into(), Value::String(z.id.clone()));
            props.extend(extra(i));
            json!({
                "type": "Feature",
                "properties": props,
                "geometry": polygon_to_geojson(&z.boundary),
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contiguity {
    Queen,
    Rook,
}

/// Sparse non-negative weights with a zero diagonal; rows sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    rows: Vec<Vec<(usize, f64)>>,
    row_standardized: bool,
}

impl SpatialWeights {
    /// Binary weights from neighbour lists. Self-links and duplicates are dropped.
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let rows = neighbors
            .into_iter()
            .enumerate()
            .map(|(i, mut js)| {
                js.retain(|&j| j != i && j < n);
                js.sort_unstable();
                js.dedup();
                js.into_iter().map(|j| (j, 1.0)).collect()
            })
            .collect();
        SpatialWeights {
            rows,
            row_standardized: false,
        }
    }

    /// General weights from `(i, j, w)` triples; zero or diagonal entries are dropped.
    pub fn from_entries(
        n: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, w) in entries {
            if i >= n || j >= n || !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "bad weight entry ({i}, {j}, {w})"
                )));
            }
            if i != j && w > 0.0 {
                rows[i].push((j, w));
            }
        }
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(SpatialWeights {
            rows,
            row_standardized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row_standardized(&self) -> bool {
        self.row_standardized
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().map(|&(j, _)| j)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(k, _)| k)
            .map(|pos| self.rows[i][pos].1)
            .unwrap_or(0.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, w)| (i, j, w)))
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Sum of all weights.
    pub fn s0(&self) -> f64 {
        self.rows.iter().flatten().map(|&(_, w)| w).sum()
    }

    pub fn islands(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.rows[i].is_empty()).collect()
    }

    pub fn row_standardize(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let total: f64 = row.iter().map(|&(_, w)| w).sum();
                row.iter().map(|&(j, w)| (j, w / total)).collect()
            })
            .collect();
        SpatialWeights {
            rows,
            row_standardized: true,
        }
    }

    /// Weights restricted to `keep` (in that order), re-standardised if the
    /// original rows were.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut new_index = vec![usize::MAX; self.n()];
        for (k, &i) in keep.iter().enumerate() {
            new_index[i] = k;
        }
        let rows = keep
            .iter()
            .map(|&i| {
                let mut row: Vec<(usize, f64)> = self.rows[i]
                    .iter()
                    .filter(|&&(j, _)| new_index[j] != usize::MAX)
                    .map(|&(j, w)| (new_index[j], w))
                    .collect();
                row.sort_by_key(|&(j, _)| j);
                row
            })
            .collect();
        let sub = SpatialWeights {
            rows,
            row_standardized: false,
        };
        if self.row_standardized {
            sub.row_standardize()
        } else {
            sub
        }
    }

    pub fn has_symmetric_support(&self) -> bool {
        self.entries().all(|(i, j, _)| self.weight(j, i) > 0.0)
    }

    /// Connected components of the support graph, as a component index per node.
    pub fn components(&self) -> (usize, Vec<usize>) {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = count;
            while let Some(i) = stack.pop() {
                for j in self.neighbors(i) {
                    if comp[j] == usize::MAX {
                        comp[j] = count;
                        stack.push(j);
                    }
                }
            }
            count += 1;
        }
        (count, comp)
    }
}

/// Contiguity weights: queen links zones sharing any boundary point, rook
/// requires a shared segment of positive length.
pub fn contiguity_weights(
    zones: &ZoneSet,
    scheme: Contiguity,
    row_standardize: bool,
) -> Result<(SpatialWeights, Vec<Warning>)> {
    let n = zones.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "contiguity needs at least two zones".into(),
        ));
    }
    let extent = zones
        .zones()
        .iter()
        .map(|z| {
            let b = z.bbox;
            (b.max().x - b.min().x).max(b.max().y - b.min().y)
        })
        .fold(0.0_f64, f64::max);
    let eps = 1e-9 * extent.max(1.0);

    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        let zi = zones.get(i);
        for j in (i + 1)..n {
            let zj = zones.get(j);
            if !bbox_touch(zi.bbox, zj.bbox, eps) {
                continue;
            }
            let linked = match scheme {
                Contiguity::Queen => zi.boundary.intersects(&zj.boundary),
                Contiguity::Rook => share_edge(zi.ring(), zj.ring(), eps),
            };
            if linked {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let mut w = SpatialWeights::from_neighbors(neighbors);
    let warnings: Vec<Warning> = w
        .islands()
        .into_iter()
        .map(|i| Warning::IslandZone {
            zone: zones.get(i).id.clone(),
        })
        .collect();
    if row_standardize {
        w = w.row_standardize();
    }
    Ok((w, warnings))
}

fn bbox_touch(a: Rect<f64>, b: Rect<f64>, eps: f64) -> bool {
    a.min().x <= b.max().x + eps
        && b.min().x <= a.max().x + eps
        && a.min().y <= b.max().y + eps
        && b.min().y <= a.max().y + eps
}

fn share_edge(a: &[Coord<f64>], b: &[Coord<f64>], eps: f64) -> bool {
    let edges = |r: &[Coord<f64>]| {
        (0..r.len())
            .map(|k| (r[k], r[(k + 1) % r.len()]))
            .collect::<Vec<_>>()
    };
    let eb = edges(b);
    edges(a)
        .into_iter()
        .any(|(p, q)| eb.iter().any(|&(s, t)| collinear_overlap(p, q, s, t, eps)))
}

fn collinear_overlap(p: Coord<f64>, q: Coord<f64>, s: Coord<f64>, t: Coord<f64>, eps: f64) -> bool {
    let d = q - p;
    let len = d.x.hypot(d.y);
    if len == 0.0 {
        return false;
    }
    let off = |c: Coord<f64>| ((c - p).x * d.y - (c - p).y * d.x) / len;
    if off(s).abs() > eps || off(t).abs() > eps {
        return false;
    }
    let along = |c: Coord<f64>| ((c - p).x * d.x + (c - p).y * d.y) / len;
    let (lo, hi) = {
        let (u, v) = (along(s), along(t));
        (u.min(v), u.max(v))
    };
    hi.min(len) - lo.max(0.0) > eps
}

/// Binary k-nearest-neighbour graph over points, symmetrised by union.
/// Equal distances are broken by the lower index.
pub fn knn_connectivity(points: &[Coord<f64>], k: usize) -> Result<(SpatialWeights, Vec<Warning>)> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!(
            "knn needs 0 < k < n (k = {k}, n = {n})"
        )));
    }
    let mut warnings = Vec::new();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d = points[i] - points[j];
                (d.x * d.x + d.y * d.y, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d2, j) in &cand {
            if d2 == 0.0 && i < j {
                warnings.push(Warning::DegenerateDistance {
                    first: i,
                    second: j,
                });
            }
        }
        for &(_, j) in cand.iter().take(k) {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    Ok((SpatialWeights::from_neighbors(neighbors), warnings))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl TimedPoint {
    pub fn coord(&self) -> Coord<f64> {
        Coord {
            x: self.x,
            y: self.y,
        }
    }

    pub fn dist(&self, other: &TimedPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub trip_id: String,
    points: Vec<TimedPoint>,
}

impl Trajectory {
    pub fn new(trip_id: impl Into<String>, points: Vec<TimedPoint>) -> Result<Self> {
        let trip_id = trip_id.into();
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "trajectory {trip_id} needs at least two points"
            )));
        }
        if points.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidInput(format!(
                "trajectory {trip_id} timestamps are not strictly increasing"
            )));
        }
        Ok(Trajectory { trip_id, points })
    }

    pub fn points(&self) -> &[TimedPoint] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }
}

/// A region that can be tested against zone polygons.
pub trait Region {
    fn touches_polygon(&self, polygon: &Polygon<f64>) -> bool;
}

impl Region for Polygon<f64> {
    fn touches_polygon(&self, polygon: &Polygon<f64>) -> bool {
        self.intersects(polygon)
    }
}

impl Region for MultiPolygon<f64> {
    fn touches_polygon(&self, polygon: &Polygon<f64>) -> bool {
        self.intersects(polygon)
    }
}

/// Buffer around a polyline, held as the exact convex pieces (one stadium
/// per segment) whose union is the buffer.
#[derive(Debug, Clone)]
pub struct Buffer {
    pieces: Vec<Polygon<f64>>,
    bboxes: Vec<Rect<f64>>,
}

impl Buffer {
    pub fn pieces(&self) -> &[Polygon<f64>] {
        &self.pieces
    }

    /// Union of the pieces.
    pub fn to_multipolygon(&self) -> MultiPolygon<f64> {
        unary_union(self.pieces.iter())
    }

    pub fn area(&self) -> f64 {
        self.to_multipolygon().unsigned_area()
    }

    pub fn contains_point(&self, p: Coord<f64>) -> bool {
        let point = Point(p);
        self.pieces.iter().any(|piece| piece.intersects(&point))
    }

    /// Union with another buffer; the pieces are simply pooled.
    pub fn merge(mut self, other: Buffer) -> Buffer {
        self.pieces.extend(other.pieces);
        self.bboxes.extend(other.bboxes);
        self
    }

    pub fn empty() -> Buffer {
        Buffer {
            pieces: Vec::new(),
            bboxes: Vec::new(),
        }
    }

    fn from_pieces(pieces: Vec<Polygon<f64>>) -> Buffer {
        let bboxes = pieces
            .iter()
            .map(|p| geo::BoundingRect::bounding_rect(p).expect("non-empty piece"))
            .collect();
        Buffer { pieces, bboxes }
    }
}

impl Region for Buffer {
    fn touches_polygon(&self, polygon: &Polygon<f64>) -> bool {
        let Some(zb) = geo::BoundingRect::bounding_rect(polygon) else {
            return false;
        };
        self.pieces
            .iter()
            .zip(&self.bboxes)
            .any(|(piece, pb)| bbox_touch(*pb, zb, 0.0) && piece.intersects(polygon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Buffer the whole polyline.
    #[default]
    Polyline,
    /// Buffer only the first and last points.
    Endpoints,
}

pub fn buffer_trajectory(traj: &Trajectory, radius_m: f64) -> Result<Buffer> {
    buffer_trajectory_with(traj, radius_m, BufferMode::Polyline)
}

pub fn buffer_trajectory_with(
    traj: &Trajectory,
    radius_m: f64,
    mode: BufferMode,
) -> Result<Buffer> {
    if !(radius_m > 0.0) || !radius_m.is_finite() {
        return Err(Error::InvalidInput(format!(
            "buffer radius must be positive, got {radius_m}"
        )));
    }
    let pts = traj.points();
    let pieces = match mode {
        BufferMode::Polyline => pts
            .windows(2)
            .map(|w| stadium(w[0].coord(), w[1].coord(), radius_m))
            .collect(),
        BufferMode::Endpoints => {
            let (a, b) = (pts[0].coord(), pts[pts.len() - 1].coord());
            vec![disc(a, radius_m), disc(b, radius_m)]
        }
    };
    Ok(Buffer::from_pieces(pieces))
}

fn disc(c: Coord<f64>, r: f64) -> Polygon<f64> {
    let n = 4 * SEGMENTS_PER_QUARTER;
    let ring = (0..n)
        .map(|k| {
            let (s, co) = unit_at(k, n);
            Coord {
                x: c.x + r * co,
                y: c.y + r * s,
            }
        })
        .collect();
    Polygon::new(LineString::new(ring), vec![])
}

// (sin, cos) of 2πk/n, exact at multiples of a quarter turn.
fn unit_at(k: usize, n: usize) -> (f64, f64) {
    if (4 * k).is_multiple_of(n) {
        match (4 * k / n) % 4 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        (2.0 * std::f64::consts::PI * k as f64 / n as f64).sin_cos()
    }
}

/// Convex hull of two discs: two half circles joined by straight sides.
fn stadium(p: Coord<f64>, q: Coord<f64>, r: f64) -> Polygon<f64> {
    let d = q - p;
    let len = d.x.hypot(d.y);
    if len == 0.0 {
        return disc(p, r);
    }
    let (ux, uy) = (d.x / len, d.y / len);
    let half = 2 * SEGMENTS_PER_QUARTER;
    let step = FRAC_PI_2 / SEGMENTS_PER_QUARTER as f64;
    // Offset at angle k·step measured from the right-hand normal, turning
    // counter-clockwise; k = 0, half/2 and half are computed exactly.
    let offset = |k: usize| -> (f64, f64) {
        match k {
            0 => (uy, -ux),
            k if k == half / 2 => (ux, uy),
            k if k == half => (-uy, ux),
            k if k == 3 * half / 2 => (-ux, -uy),
            _ => {
                let (s, c) = (k as f64 * step).sin_cos();
                // rotate the right normal (uy, -ux) by the angle
                (uy * c - (-ux) * s, uy * s + (-ux) * c)
            }
        }
    };
    let mut ring = Vec::with_capacity(2 * half + 2);
    for k in 0..=half {
        let (ox, oy) = offset(k);
        ring.push(Coord {
            x: q.x + r * ox,
            y: q.y + r * oy,
        });
    }
    for k in half..=2 * half {
        let (ox, oy) = if k == 2 * half { offset(0) } else { offset(k) };
        ring.push(Coord {
            x: p.x + r * ox,
            y: p.y + r * oy,
        });
    }
    Polygon::new(LineString::new(ring), vec![])
}

/// Ids of zones whose closed boundary meets the region, in zone order.
pub fn zones_intersecting<R: Region + ?Sized>(zones: &ZoneSet, region: &R) -> Vec<String> {
    zone_indices_intersecting(zones, region)
        .into_iter()
        .map(|i| zones.get(i).id.clone())
        .collect()
}

pub fn zone_indices_intersecting<R: Region + ?Sized>(zones: &ZoneSet, region: &R) -> Vec<usize> {
    (0..zones.len())
        .filter(|&i| region.touches_polygon(&zones.get(i).boundary))
        .collect()
}

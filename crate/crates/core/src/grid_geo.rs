//! City tile geometry: GeoJSON parsing, tile centroids and the
//! fine-tile to coarse-cell spatial join.
//!
//! Coordinates stay in WGS84 degrees throughout. Neither centroids nor cell
//! membership need metric distances.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::raster::CoarseRaster;

pub const DEFAULT_ID_KEY: &str = "tile_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TileId(pub u64);

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One grid tile: its id and the exterior ring of its bounding polygon,
/// stored open (the closing vertex of the GeoJSON ring is dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: TileId,
    pub ring: Vec<(f64, f64)>,
}

impl Tile {
    /// Vertex centroid: the arithmetic mean of the distinct vertices.
    pub fn centroid(&self) -> Result<(f64, f64)> {
        tile_centroid(&self.ring)
    }

    /// Planar polygon area in squared degrees (shoelace formula).
    pub fn area(&self) -> f64 {
        let n = self.ring.len();
        let Some(&(ox, oy)) = self.ring.first() else {
            return 0.0;
        };
        // relative to the first vertex to avoid cancellation at large coordinates
        let mut twice = 0.0;
        for i in 0..n {
            let (x0, y0) = self.ring[i];
            let (x1, y1) = self.ring[(i + 1) % n];
            twice += (x0 - ox) * (y1 - oy) - (x1 - ox) * (y0 - oy);
        }
        (twice * 0.5).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityGrid {
    pub city: String,
    pub tiles: Vec<Tile>,
}

impl CityGrid {
    pub fn new(city: impl Into<String>, tiles: Vec<Tile>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(tiles.len());
        for t in &tiles {
            if !seen.insert(t.id) {
                return Err(Error::DuplicateTile(t.id.0));
            }
        }
        Ok(Self {
            city: city.into(),
            tiles,
        })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile_ids(&self) -> Vec<TileId> {
        self.tiles.iter().map(|t| t.id).collect()
    }

    pub fn centroids(&self) -> Result<Vec<(f64, f64)>> {
        self.tiles.iter().map(Tile::centroid).collect()
    }

    /// Serializes the grid as a GeoJSON FeatureCollection. `extra` may add
    /// properties per tile (by position).
    pub fn to_geojson_with<F>(&self, id_key: &str, mut extra: F) -> Value
    where
        F: FnMut(usize) -> Map<String, Value>,
    {
        let features: Vec<Value> = self
            .tiles
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut props = Map::new();
                props.insert(id_key.to_string(), json!(t.id.0));
                props.extend(extra(i));
                let mut ring: Vec<Value> = t.ring.iter().map(|&(x, y)| json!([x, y])).collect();
                if let Some(&(x, y)) = t.ring.first() {
                    ring.push(json!([x, y]));
                }
                json!({
                    "type": "Feature",
                    "properties": Value::Object(props),
                    "geometry": { "type": "Polygon", "coordinates": [ring] },
                })
            })
            .collect();
        json!({ "type": "FeatureCollection", "features": features })
    }

    pub fn to_geojson(&self, id_key: &str) -> Value {
        self.to_geojson_with(id_key, |_| Map::new())
    }
}

/// Parses a GeoJSON FeatureCollection of tile polygons. Feature order is
/// preserved. `id_key` names the property holding the tile identifier.
pub fn parse_city_geojson(bytes: &[u8], city: &str, id_key: &str) -> Result<CityGrid> {
    let root: Value = serde_json::from_slice(bytes)?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| {
            Error::Invalid("not a FeatureCollection: missing \"features\" array".into())
        })?;

    let mut tiles = Vec::with_capacity(features.len());
    let mut seen = HashSet::with_capacity(features.len());
    for (index, feature) in features.iter().enumerate() {
        let geom_err = |message: String| Error::Geometry { index, message };
        let id = feature
            .get("properties")
            .and_then(|p| p.get(id_key))
            .ok_or_else(|| geom_err(format!("missing id property \"{id_key}\"")))
            .and_then(|v| {
                parse_id(v).ok_or_else(|| geom_err(format!("non-integer tile id {v}")))
            })?;
        if !seen.insert(id) {
            return Err(Error::DuplicateTile(id));
        }
        let geometry = feature
            .get("geometry")
            .ok_or_else(|| geom_err("missing geometry".into()))?;
        let ring = exterior_ring(geometry).map_err(geom_err)?;
        tiles.push(Tile {
            id: TileId(id),
            ring,
        });
    }
    Ok(CityGrid {
        city: city.to_string(),
        tiles,
    })
}

fn parse_id(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64().or_else(|| {
            n.as_f64()
                .filter(|f| f.fract() == 0.0 && *f >= 0.0)
                .map(|f| f as u64)
        }),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn exterior_ring(geometry: &Value) -> std::result::Result<Vec<(f64, f64)>, String> {
    let kind = geometry.get("type").and_then(Value::as_str).unwrap_or("");
    let coords = geometry.get("coordinates").ok_or("missing coordinates")?;
    let ring = match kind {
        "Polygon" => coords.get(0),
        "MultiPolygon" => {
            let polys = coords.as_array().ok_or("coordinates not an array")?;
            if polys.len() != 1 {
                return Err(format!("MultiPolygon with {} parts", polys.len()));
            }
            polys[0].get(0)
        }
        other => return Err(format!("unsupported geometry type \"{other}\"")),
    }
    .and_then(Value::as_array)
    .ok_or("missing exterior ring")?;

    let mut pts = Vec::with_capacity(ring.len());
    for p in ring {
        let xy = p
            .as_array()
            .filter(|a| a.len() >= 2)
            .ok_or("bad position")?;
        let x = xy[0].as_f64().ok_or("non-numeric coordinate")?;
        let y = xy[1].as_f64().ok_or("non-numeric coordinate")?;
        if !x.is_finite() || !y.is_finite() {
            return Err("non-finite coordinate".into());
        }
        pts.push((x, y));
    }
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    if pts.len() < 3 {
        return Err(format!("ring has {} vertices", pts.len()));
    }
    Ok(pts)
}

/// Arithmetic mean of the distinct vertices of a ring.
pub fn tile_centroid(ring: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut distinct: Vec<(f64, f64)> = Vec::with_capacity(ring.len());
    for &p in ring {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::DegeneratePolygon(distinct.len()));
    }
    let n = distinct.len() as f64;
    let (sx, sy) = distinct
        .iter()
        .fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x, sy + y));
    Ok((sx / n, sy / n))
}

/// Row/column of a coarse raster cell. Rows count from the north edge, as in
/// the ESRI ASCII layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

/// Coarse cell containing `(x, y)`, with half-open `[lo, hi)` intervals on
/// both axes. `None` when outside the raster.
pub fn locate(raster: &CoarseRaster, x: f64, y: f64) -> Option<CellIndex> {
    let col = half_open_index(x, raster.xll, raster.cell_size, raster.ncols)?;
    let k = half_open_index(y, raster.yll, raster.cell_size, raster.nrows)?;
    Some(CellIndex {
        row: raster.nrows - 1 - k,
        col,
    })
}

/// Index `k` with `origin + k*size <= v < origin + (k+1)*size`, evaluated
/// with exactly those boundary expressions so that every caller agrees on
/// which side of an edge a point falls.
fn half_open_index(v: f64, origin: f64, size: f64, n: usize) -> Option<usize> {
    if !v.is_finite() {
        return None;
    }
    let guess = ((v - origin) / size).floor();
    if guess < -1.0 || guess > n as f64 {
        return None;
    }
    let mut k = guess as i64;
    while k > 0 && v < origin + k as f64 * size {
        k -= 1;
    }
    while v >= origin + (k + 1) as f64 * size {
        k += 1;
    }
    if k < 0 || v < origin + k as f64 * size || k >= n as i64 {
        return None;
    }
    Some(k as usize)
}

/// Maps every tile, by its vertex centroid, to the containing coarse cell.
pub fn map_fine_to_coarse(
    grid: &CityGrid,
    raster: &CoarseRaster,
) -> Result<Vec<Option<CellIndex>>> {
    grid.tiles
        .iter()
        .map(|t| t.centroid().map(|(x, y)| locate(raster, x, y)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: u64, x: f64, y: f64, s: f64) -> Value {
        json!({
            "type": "Feature",
            "properties": { "tile_id": id },
            "geometry": { "type": "Polygon", "coordinates": [[[x, y], [x + s, y], [x + s, y + s], [x, y + s], [x, y]]] }
        })
    }

    fn collection(features: Vec<Value>) -> Vec<u8> {
        serde_json::to_vec(&json!({ "type": "FeatureCollection", "features": features })).unwrap()
    }

    #[test]
    fn single_feature() {
        let g = parse_city_geojson(
            &collection(vec![square(0, 0.0, 0.0, 1.0)]),
            "c",
            DEFAULT_ID_KEY,
        )
        .unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.tiles[0].id, TileId(0));
        assert_eq!(g.tiles[0].ring.len(), 4);
    }

    #[test]
    fn duplicate_id_is_named() {
        let bytes = collection(vec![square(7, 0.0, 0.0, 1.0), square(7, 1.0, 0.0, 1.0)]);
        match parse_city_geojson(&bytes, "c", DEFAULT_ID_KEY) {
            Err(Error::DuplicateTile(7)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_id_reports_feature_index() {
        let mut f = square(1, 0.0, 0.0, 1.0);
        f["properties"] = json!({});
        let bytes = collection(vec![square(0, 0.0, 0.0, 1.0), f]);
        match parse_city_geojson(&bytes, "c", DEFAULT_ID_KEY) {
            Err(Error::Geometry { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_geometry_reports_feature_index() {
        let mut f = square(3, 0.0, 0.0, 1.0);
        f["geometry"]["coordinates"] = json!([[[0.0, 0.0], [1.0, 0.0]]]);
        match parse_city_geojson(&collection(vec![f]), "c", DEFAULT_ID_KEY) {
            Err(Error::Geometry { index: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn configurable_id_key_and_string_ids() {
        let f = json!({
            "type": "Feature",
            "properties": { "cell": "12" },
            "geometry": { "type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]] }
        });
        let g = parse_city_geojson(&collection(vec![f]), "c", "cell").unwrap();
        assert_eq!(g.tiles[0].id, TileId(12));
    }

    #[test]
    fn centroid_of_unit_square_and_translation() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert_eq!(tile_centroid(&sq).unwrap(), (0.5, 0.5));
        let moved: Vec<_> = sq.iter().map(|&(x, y)| (x + 10.0, y + 20.0)).collect();
        assert_eq!(tile_centroid(&moved).unwrap(), (10.5, 20.5));
        // closing vertex does not bias the mean
        let closed = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)];
        assert_eq!(tile_centroid(&closed).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn degenerate_centroid() {
        let r = tile_centroid(&[(0.0, 0.0), (1.0, 1.0), (0.0, 0.0)]);
        assert!(matches!(r, Err(Error::DegeneratePolygon(2))));
    }

    #[test]
    fn area_of_rectangle() {
        let t = Tile {
            id: TileId(0),
            ring: vec![(0.0, 0.0), (2.0, 0.0), (2.0, 3.0), (0.0, 3.0)],
        };
        assert_eq!(t.area(), 6.0);
    }

    fn raster(ncols: usize, nrows: usize) -> CoarseRaster {
        CoarseRaster::new(
            10.0,
            20.0,
            0.5,
            nrows,
            ncols,
            vec![0.0; nrows * ncols],
            -9999.0,
        )
        .unwrap()
    }

    #[test]
    fn locate_origin_cell_and_outside() {
        let r = raster(4, 3);
        // centre of the lower-left cell is the last (southernmost) row
        assert_eq!(locate(&r, 10.25, 20.25), Some(CellIndex { row: 2, col: 0 }));
        assert_eq!(locate(&r, 9.99, 20.25), None);
        assert_eq!(locate(&r, 12.0, 20.25), None);
        assert_eq!(locate(&r, 10.25, 21.5), None);
        assert_eq!(locate(&r, f64::NAN, 20.25), None);
    }

    #[test]
    fn locate_boundaries_are_half_open() {
        let r = raster(4, 3);
        // x on the edge between col 0 and col 1 belongs to col 1
        assert_eq!(locate(&r, 10.5, 20.25).unwrap().col, 1);
        // y on the edge between the two southern rows belongs to the northern one
        assert_eq!(locate(&r, 10.25, 20.5).unwrap().row, 1);
        // lower-left corner itself is inside
        assert_eq!(locate(&r, 10.0, 20.0), Some(CellIndex { row: 2, col: 0 }));
    }

    #[test]
    fn geojson_round_trip() {
        let g = parse_city_geojson(
            &collection(vec![
                square(4, 2.123456789012, 48.1, 0.001),
                square(9, 2.2, 48.2, 0.001),
            ]),
            "c",
            DEFAULT_ID_KEY,
        )
        .unwrap();
        let text = serde_json::to_vec(&g.to_geojson(DEFAULT_ID_KEY)).unwrap();
        let back = parse_city_geojson(&text, "c", DEFAULT_ID_KEY).unwrap();
        assert_eq!(g, back);
    }
}

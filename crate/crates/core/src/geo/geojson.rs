use std::io::{Read, Write};

use serde_json::{json, Map, Value};

use super::{Polygon, Ring, TractPolygon};
use crate::error::{Error, Result};

fn parse_ring(v: &Value) -> Result<Ring> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Parse("ring is not an array".into()))?;
    arr.iter()
        .map(|p| match p.as_array().map(Vec::as_slice) {
            Some([x, y, ..]) => match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) => Ok((x, y)),
                _ => Err(Error::Parse("non-numeric coordinate".into())),
            },
            _ => Err(Error::Parse("position needs two coordinates".into())),
        })
        .collect()
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::Parse("polygon coordinates are not an array".into()))?
        .iter()
        .map(parse_ring)
        .collect::<Result<Vec<_>>>()?;
    Ok(Polygon { rings })
}

fn property_string(props: &Map<String, Value>, key: &str) -> Option<String> {
    match props.get(key)? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Polygon and MultiPolygon features of a FeatureCollection. Features with
/// other geometry types are ignored; a missing GEOID property is an error.
pub fn read_polygons_geojson<R: Read>(r: R, geoid_key: &str) -> Result<Vec<TractPolygon>> {
    read_features(r, Some(geoid_key))
}

/// Polygon features of a boundary file, which need no id property; each
/// feature is named `boundary-{index}`.
pub fn read_boundary_geojson<R: Read>(r: R) -> Result<Vec<TractPolygon>> {
    read_features(r, None)
}

fn read_features<R: Read>(r: R, geoid_key: Option<&str>) -> Result<Vec<TractPolygon>> {
    let doc: Value = serde_json::from_reader(r)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("expected a FeatureCollection with `features`".into()))?;

    let mut out = Vec::with_capacity(features.len());
    for (i, f) in features.iter().enumerate() {
        let geom = match f.get("geometry") {
            Some(g) if !g.is_null() => g,
            _ => continue,
        };
        let coords = geom.get("coordinates").unwrap_or(&Value::Null);
        let parts = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| Error::Parse("multipolygon coordinates are not an array".into()))?
                .iter()
                .map(parse_polygon)
                .collect::<Result<_>>()?,
            _ => continue,
        };
        let geoid = match geoid_key {
            None => format!("boundary-{i}"),
            Some(key) => f
                .get("properties")
                .and_then(Value::as_object)
                .and_then(|p| property_string(p, key))
                .ok_or_else(|| Error::Parse(format!("feature {i} lacks property `{key}`")))?,
        };
        out.push(TractPolygon { geoid, parts });
    }
    Ok(out)
}

pub fn write_polygons_geojson<W: Write>(polys: &[TractPolygon], geoid_key: &str, w: W) -> Result<()> {
    let ring_json = |r: &Ring| Value::Array(r.iter().map(|&(x, y)| json!([x, y])).collect());
    let poly_json = |p: &Polygon| Value::Array(p.rings.iter().map(ring_json).collect());
    let features: Vec<Value> = polys
        .iter()
        .map(|t| {
            let geometry = if t.parts.len() == 1 {
                json!({"type": "Polygon", "coordinates": poly_json(&t.parts[0])})
            } else {
                json!({
                    "type": "MultiPolygon",
                    "coordinates": t.parts.iter().map(poly_json).collect::<Vec<_>>(),
                })
            };
            let mut props = Map::new();
            props.insert(geoid_key.to_string(), Value::String(t.geoid.clone()));
            json!({"type": "Feature", "properties": props, "geometry": geometry})
        })
        .collect();
    serde_json::to_writer(w, &json!({"type": "FeatureCollection", "features": features}))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_polygon_and_multipolygon() {
        let mut multi = TractPolygon::rectangle("2", (0.0, 0.0), (1.0, 1.0));
        multi.parts.push(TractPolygon::rectangle("2", (2.0, 0.0), (3.0, 1.0)).parts.remove(0));
        let polys = vec![TractPolygon::rectangle("1", (-97.8, 30.2), (-97.7, 30.3)), multi];
        let mut buf = Vec::new();
        write_polygons_geojson(&polys, "GEOID10", &mut buf).unwrap();
        assert_eq!(read_polygons_geojson(buf.as_slice(), "GEOID10").unwrap(), polys);
    }

    #[test]
    fn numeric_geoid_and_missing_key() {
        let doc = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"GEOID":48453000101},
             "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}},
            {"type":"Feature","properties":{},"geometry":{"type":"Point","coordinates":[0,0]}}]}"#;
        let polys = read_polygons_geojson(doc.as_bytes(), "GEOID").unwrap();
        assert_eq!(polys.len(), 1);
        assert_eq!(polys[0].geoid, "48453000101");
        assert!(read_polygons_geojson(doc.as_bytes(), "TRACTCE").is_err());
    }
}

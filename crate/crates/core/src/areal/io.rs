//! Boundary files (GeoJSON feature collections) and weight-matrix CSV.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ArealError, Point, PolygonPart, Ring, WeightMatrix, Zone};

/// Reads polygon and multipolygon features. The id comes from the
/// `id_property` property (string or number); the epoch from
/// `epoch_property` when present, otherwise `default_epoch`.
pub fn zones_from_geojson(
    text: &str,
    id_property: &str,
    epoch_property: &str,
    default_epoch: Option<i32>,
) -> Result<Vec<Zone>, ArealError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ArealError::Parse(e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| ArealError::Parse("expected a FeatureCollection with `features`".into()))?;

    features
        .iter()
        .enumerate()
        .map(|(k, feature)| {
            let props = feature.get("properties").unwrap_or(&Value::Null);
            let id = match props.get(id_property) {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => {
                    return Err(ArealError::Parse(format!(
                        "feature {k}: missing `{id_property}` property"
                    )))
                }
            };
            let epoch = props
                .get(epoch_property)
                .and_then(Value::as_i64)
                .map(|e| e as i32)
                .or(default_epoch)
                .ok_or_else(|| ArealError::Parse(format!("feature {id}: no epoch year")))?;
            let geometry = feature
                .get("geometry")
                .ok_or_else(|| ArealError::Parse(format!("feature {id}: no geometry")))?;
            let coords = geometry.get("coordinates").unwrap_or(&Value::Null);
            let parts = match geometry.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![parse_polygon(&id, coords)?],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| ArealError::Parse(format!("feature {id}: bad coordinates")))?
                    .iter()
                    .map(|p| parse_polygon(&id, p))
                    .collect::<Result<_, _>>()?,
                other => {
                    return Err(ArealError::Parse(format!(
                        "feature {id}: unsupported geometry {other:?}"
                    )))
                }
            };
            Zone::new(id, epoch, parts)
        })
        .collect()
}

fn parse_polygon(id: &str, value: &Value) -> Result<PolygonPart, ArealError> {
    let bad = || ArealError::Parse(format!("feature {id}: malformed polygon coordinates"));
    let rings = value.as_array().ok_or_else(bad)?;
    let mut rings = rings.iter().map(|ring| {
        let pts = ring
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|pos| {
                let xy = pos.as_array().filter(|a| a.len() >= 2).ok_or_else(bad)?;
                match (xy[0].as_f64(), xy[1].as_f64()) {
                    (Some(x), Some(y)) => Ok(Point::new(x, y)),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Ring::new(pts))
    });
    let outer = rings.next().ok_or_else(bad)??;
    let holes = rings.collect::<Result<Vec<_>, ArealError>>()?;
    Ok(PolygonPart { outer, holes })
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRow {
    target_id: String,
    source_id: String,
    weight: f64,
}

/// CSV with columns `target_id,source_id,weight`.
pub fn read_weights_csv(reader: impl Read) -> Result<WeightMatrix, ArealError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let rows: Vec<WeightRow> = rdr
        .deserialize()
        .enumerate()
        .map(|(k, r)| r.map_err(|e| ArealError::Parse(format!("weights row {}: {e}", k + 2))))
        .collect::<Result<_, _>>()?;
    WeightMatrix::from_triplets(
        rows.iter()
            .map(|r| (r.target_id.as_str(), r.source_id.as_str(), r.weight)),
    )
}

pub fn write_weights_csv(matrix: &WeightMatrix, writer: impl Write) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for (target_id, source_id, weight) in matrix.triplets() {
        w.serialize(WeightRow {
            target_id: target_id.to_string(),
            source_id: source_id.to_string(),
            weight,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::areal::polygon_area;

    #[test]
    fn reads_polygons_and_multipolygons() {
        let text = r#"{
          "type": "FeatureCollection",
          "features": [
            {"type": "Feature", "properties": {"id": "a", "epoch": 1931},
             "geometry": {"type": "Polygon", "coordinates": [[[0,0],[2,0],[2,2],[0,2],[0,0]]]}},
            {"type": "Feature", "properties": {"id": 7},
             "geometry": {"type": "MultiPolygon", "coordinates": [
                [[[0,0],[1,0],[1,1],[0,1],[0,0]]],
                [[[5,5],[6,5],[6,6],[5,6],[5,5]]]]}}
          ]}"#;
        let zones = zones_from_geojson(text, "id", "epoch", Some(1911)).unwrap();
        assert_eq!(zones[0].epoch_year, 1931);
        assert_eq!(zones[1].zone_id, "7");
        assert_eq!(zones[1].epoch_year, 1911);
        assert_eq!(polygon_area(&zones[0]), 4.0);
        assert_eq!(polygon_area(&zones[1]), 2.0);
    }

    #[test]
    fn missing_id_is_reported() {
        let text = r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{},
          "geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}}]}"#;
        assert!(matches!(
            zones_from_geojson(text, "id", "epoch", Some(1911)),
            Err(ArealError::Parse(_))
        ));
    }

    #[test]
    fn weights_csv_round_trip() {
        let csv = "target_id,source_id,weight\nT1,S1,0.25\nT2,S1,0.75\nT2,S2,1\n";
        let m = read_weights_csv(csv.as_bytes()).unwrap();
        assert_eq!(m.target_ids, vec!["T1", "T2"]);
        let mut out = Vec::new();
        write_weights_csv(&m, &mut out).unwrap();
        let back = read_weights_csv(out.as_slice()).unwrap();
        assert_eq!(m, back);
    }
}

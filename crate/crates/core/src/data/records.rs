use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One citizen-science observation before pairing with a satellite tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub id: String,
    pub image_path: String,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub date: Option<String>,
    pub species_id: u32,
    /// width, height, license, rights_holder, location_uncertainty, ...
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ObservationRecord {
    pub fn month(&self) -> Option<u32> {
        self.date.as_deref().and_then(parse_month)
    }
}

/// Month of an ISO-style date (`2019-05-03`, `2019-05-03 10:11:00+00:00`,
/// RFC 3339). `None` when unparseable.
pub fn parse_month(date: &str) -> Option<u32> {
    let date = date.trim();
    if let Ok(d) = DateTime::parse_from_rfc3339(date) {
        return Some(d.month());
    }
    if let Ok(d) = NaiveDateTime::parse_from_str(date, "%Y-%m-%d %H:%M:%S%:z") {
        return Some(d.month());
    }
    if let Ok(d) = NaiveDateTime::parse_from_str(date, "%Y-%m-%d %H:%M:%S") {
        return Some(d.month());
    }
    NaiveDate::parse_from_str(date, "%Y-%m-%d").ok().map(|d| d.month())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropReport {
    /// `(id, reason)` in input order.
    pub dropped: Vec<(String, String)>,
}

impl DropReport {
    pub fn len(&self) -> usize {
        self.dropped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "reason"])?;
        for (id, reason) in &self.dropped {
            w.write_record([id, reason])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_csv()?)
    }
}

pub const MISSING_GEOLOCATION: &str = "missing geolocation";
pub const INVALID_GEOLOCATION: &str = "invalid geolocation";
pub const MISSING_TIMESTAMP: &str = "missing timestamp";
pub const UNPARSEABLE_TIMESTAMP: &str = "unparseable timestamp";

fn drop_reason(r: &ObservationRecord) -> Option<&'static str> {
    let (Some(lat), Some(lon)) = (r.latitude, r.longitude) else {
        return Some(MISSING_GEOLOCATION);
    };
    if !lat.is_finite() || !lon.is_finite() || lat.abs() > 90.0 || lon.abs() > 180.0 {
        return Some(INVALID_GEOLOCATION);
    }
    match r.date.as_deref() {
        None => Some(MISSING_TIMESTAMP),
        Some(d) if d.trim().is_empty() => Some(MISSING_TIMESTAMP),
        Some(d) if parse_month(d).is_none() => Some(UNPARSEABLE_TIMESTAMP),
        Some(_) => None,
    }
}

/// Keeps records with a geolocation and a parseable date; everything else is
/// dropped and reported.
pub fn minimal_filter(records: Vec<ObservationRecord>) -> (Vec<ObservationRecord>, DropReport) {
    let mut kept = Vec::with_capacity(records.len());
    let mut report = DropReport::default();
    for r in records {
        match drop_reason(&r) {
            Some(reason) => report.dropped.push((r.id, reason.to_string())),
            None => kept.push(r),
        }
    }
    (kept, report)
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    file_name: String,
    latitude: Option<f64>,
    longitude: Option<f64>,
    date: Option<String>,
    #[serde(flatten)]
    rest: BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: serde_json::Value,
    category_id: u32,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Reads an iNaturalist-style COCO JSON (`images` + `annotations`). Images
/// without an annotation are skipped.
pub fn load_inat_json(path: &Path) -> Result<Vec<ObservationRecord>> {
    let file: CocoFile = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    let labels: HashMap<String, u32> = file.annotations.iter().map(|a| (id_string(&a.image_id), a.category_id)).collect();
    Ok(file
        .images
        .into_iter()
        .filter_map(|img| {
            let id = id_string(&img.id);
            let species_id = *labels.get(&id)?;
            Some(ObservationRecord {
                id,
                image_path: img.file_name,
                latitude: img.latitude,
                longitude: img.longitude,
                date: img.date,
                species_id,
                extra: img.rest,
            })
        })
        .collect())
}

/// Reads records stored one JSON object per line.
pub fn load_records_jsonl(path: &Path) -> Result<Vec<ObservationRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format { path: path.into(), reason: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, lat: Option<f64>, lon: Option<f64>, date: Option<&str>) -> ObservationRecord {
        ObservationRecord {
            id: id.into(),
            image_path: format!("{id}.jpg"),
            latitude: lat,
            longitude: lon,
            date: date.map(String::from),
            species_id: 3,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn filter_examples() {
        let (kept, report) = minimal_filter(vec![
            rec("a", None, Some(1.0), Some("2020-01-01")),
            rec("b", Some(1.0), Some(2.0), Some("2020-06-01 10:00:00+00:00")),
            rec("c", Some(1.0), Some(2.0), None),
            rec("d", Some(1.0), Some(2.0), Some("june")),
            rec("e", Some(95.0), Some(2.0), Some("2020-01-01")),
        ]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");
        assert_eq!(kept[0].month(), Some(6));
        let reasons: Vec<_> = report.dropped.iter().map(|(i, r)| (i.as_str(), r.as_str())).collect();
        assert_eq!(
            reasons,
            [("a", MISSING_GEOLOCATION), ("c", MISSING_TIMESTAMP), ("d", UNPARSEABLE_TIMESTAMP), ("e", INVALID_GEOLOCATION)]
        );
        let csv = String::from_utf8(report.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("id,reason\na,missing geolocation\n"));
    }

    #[test]
    fn date_formats() {
        assert_eq!(parse_month("2019-05-03"), Some(5));
        assert_eq!(parse_month("2019-12-03T01:02:03Z"), Some(12));
        assert_eq!(parse_month("2019-02-03 01:02:03"), Some(2));
        assert_eq!(parse_month("2019-13-03"), None);
        assert_eq!(parse_month(""), None);
    }

    #[test]
    fn reads_inat_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.json");
        std::fs::write(
            &p,
            r#"{"images":[{"id":1,"file_name":"x/1.jpg","width":500,"height":400,"latitude":40.1,"longitude":-70.2,"date":"2018-07-01 08:00:00+00:00","license":"CC"},
                         {"id":2,"file_name":"x/2.jpg","latitude":null,"longitude":null,"date":null}],
                "annotations":[{"image_id":1,"category_id":7},{"image_id":2,"category_id":9}]}"#,
        )
        .unwrap();
        let recs = load_inat_json(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].species_id, 7);
        assert_eq!(recs[0].extra["width"], 500);
        let (kept, report) = minimal_filter(recs);
        assert_eq!((kept.len(), report.len()), (1, 1));
    }

    fn arb_record() -> impl Strategy<Value = ObservationRecord> {
        (
            0u32..1000,
            proptest::option::of(-100.0f64..100.0),
            proptest::option::of(-200.0f64..200.0),
            proptest::option::of(prop_oneof![Just("2020-02-02".to_string()), Just("bad".to_string()), Just(String::new())]),
        )
            .prop_map(|(i, lat, lon, date)| ObservationRecord {
                id: i.to_string(),
                image_path: String::new(),
                latitude: lat,
                longitude: lon,
                date,
                species_id: i % 7,
                extra: BTreeMap::new(),
            })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(records in proptest::collection::vec(arb_record(), 0..40)) {
            let (once, _) = minimal_filter(records);
            let (twice, report) = minimal_filter(once.clone());
            prop_assert_eq!(once, twice);
            prop_assert!(report.is_empty());
        }
    }
}

//! Bimanual contact annotations as JSON.
//!
//! ```json
//! {"version": 1, "records": [
//!   {"object_id": "mug-0", "num_points": 5000, "labels": [0, 1, 2, ...],
//!    "saliency": [0.1, ...], "annotator": "a01"}
//! ]}
//! ```
//!
//! `saliency` is optional and carries an externally predicted single-handed
//! map. Labels are 0 (none), 1 (right hand) or 2 (left hand); each record
//! needs at least one point of each hand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{ContactLabels, SaliencyMap};

pub const ANNOTATION_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub object_id: String,
    pub num_points: usize,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<Vec<f64>>,
    pub annotator: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    version: u32,
    records: Vec<AnnotationRecord>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::format("annotation", msg)
}

impl AnnotationRecord {
    pub fn new(object_id: impl Into<String>, labels: &ContactLabels, saliency: Option<&SaliencyMap>, annotator: impl Into<String>) -> Self {
        AnnotationRecord {
            object_id: object_id.into(),
            num_points: labels.len(),
            labels: labels.to_u8(),
            saliency: saliency.map(|s| s.values().to_vec()),
            annotator: annotator.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.object_id;
        if self.labels.len() != self.num_points {
            return Err(err(format!("{id}: {} labels for {} points", self.labels.len(), self.num_points)));
        }
        if let Some(v) = self.labels.iter().find(|&&v| v > 2) {
            return Err(err(format!("{id}: label value {v} outside {{0, 1, 2}}")));
        }
        if !self.labels.contains(&1) || !self.labels.contains(&2) {
            return Err(err(format!("{id}: record needs both right (1) and left (2) labels")));
        }
        if let Some(s) = &self.saliency {
            if s.len() != self.num_points {
                return Err(err(format!("{id}: {} saliency values for {} points", s.len(), self.num_points)));
            }
            if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(err(format!("{id}: saliency outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn contact_labels(&self) -> Result<ContactLabels> {
        ContactLabels::from_u8(&self.labels)
    }

    pub fn saliency_map(&self) -> Result<Option<SaliencyMap>> {
        self.saliency.clone().map(SaliencyMap::new).transpose()
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    let file: AnnotationFile = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    if file.version != ANNOTATION_FORMAT_VERSION {
        return Err(err(format!("unsupported version {}", file.version)));
    }
    for r in &file.records {
        r.validate()?;
    }
    Ok(file.records)
}

pub fn annotations_to_string(records: &[AnnotationRecord]) -> Result<String> {
    for r in records {
        r.validate()?;
    }
    let file = AnnotationFile {
        version: ANNOTATION_FORMAT_VERSION,
        records: records.to_vec(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn save_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<()> {
    fs::write(path, annotations_to_string(records)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize) -> AnnotationRecord {
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        AnnotationRecord {
            object_id: "mug-3".into(),
            num_points: n,
            labels,
            saliency: Some((0..n).map(|i| i as f64 / n as f64).collect()),
            annotator: "a7".into(),
        }
    }

    #[test]
    fn round_trips() {
        assert!(parse_annotations(&annotations_to_string(&[]).unwrap()).unwrap().is_empty());
        let mut recs = vec![record(5000)];
        recs.push(AnnotationRecord {
            saliency: None,
            ..record(10)
        });
        assert_eq!(parse_annotations(&annotations_to_string(&recs).unwrap()).unwrap(), recs);
    }

    #[test]
    fn rejects_schema_violations() {
        let ok = r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,2],"annotator":"x"}]}"#;
        assert_eq!(parse_annotations(ok).unwrap().len(), 1);
        for bad in [
            r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,3],"annotator":"x"}]}"#,
            r#"{"version":1,"records":[{"object_id":"a","num_points":4,"labels":[0,1,2],"annotator":"x"}]}"#,
            r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,1],"annotator":"x"}]}"#,
            r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,2],"annotator":"x","extra":1}]}"#,
            r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,2],"saliency":[0,2,0],"annotator":"x"}]}"#,
            r#"{"version":1,"records":[{"object_id":"a","num_points":3,"labels":[0,1,2]}]}"#,
            r#"{"version":2,"records":[]}"#,
            r#"not json"#,
        ] {
            assert!(parse_annotations(bad).is_err(), "{bad}");
        }
    }
}

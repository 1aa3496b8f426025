//! Polygon annotations read from JSON exports through a configurable key
//! mapping.
//!
//! Paths are `/`-separated keys; `*` iterates every element of an array or
//! every value of an object. The default mapping reads MD.ai-style exports
//! (`datasets/*/annotations`, vertices under `data/vertices`).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Where each field lives inside an annotation export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSchema {
    /// Path from the document root to the annotation records.
    pub annotations_path: String,
    /// Paths inside one record.
    pub study_uid_path: String,
    pub sop_uid_path: String,
    /// Either `[[x, y], ...]` or `[{"x": .., "y": ..}, ...]`, in pixels.
    pub vertices_path: String,
    /// Annotator identity; records without it share one anonymous annotator.
    pub annotator_path: Option<String>,
    /// Label identity, used with `label_filter`.
    pub label_path: Option<String>,
    /// Keep only records whose label is listed; all records when unset.
    pub label_filter: Option<Vec<String>>,
}

impl Default for AnnotationSchema {
    fn default() -> Self {
        AnnotationSchema {
            annotations_path: "datasets/*/annotations".into(),
            study_uid_path: "StudyInstanceUID".into(),
            sop_uid_path: "SOPInstanceUID".into(),
            vertices_path: "data/vertices".into(),
            annotator_path: Some("createdById".into()),
            label_path: Some("labelId".into()),
            label_filter: None,
        }
    }
}

/// Closed polygon, vertices `(x, y)` = (column, row) in pixel coordinates.
pub type Polygon = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationEntry {
    pub study_instance_uid: String,
    pub sop_instance_uid: String,
    pub annotator: String,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationDocument {
    pub entries: Vec<AnnotationEntry>,
}

impl AnnotationDocument {
    pub fn studies(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.study_instance_uid.as_str()).collect()
    }

    /// Entries of one study.
    pub fn for_study(&self, study: &str) -> AnnotationDocument {
        AnnotationDocument {
            entries: self
                .entries
                .iter()
                .filter(|e| e.study_instance_uid == study)
                .cloned()
                .collect(),
        }
    }
}

/// Every value reached by `path` from `root`.
pub fn select<'a>(root: &'a Value, path: &str) -> Vec<&'a Value> {
    let mut cur = vec![root];
    for key in path.split('/').filter(|k| !k.is_empty()) {
        let mut next = Vec::new();
        for v in cur {
            match (key, v) {
                ("*", Value::Array(a)) => next.extend(a.iter()),
                ("*", Value::Object(o)) => next.extend(o.values()),
                (k, Value::Object(o)) => next.extend(o.get(k)),
                (k, Value::Array(a)) => {
                    if let Some(x) = k.parse::<usize>().ok().and_then(|i| a.get(i)) {
                        next.push(x);
                    }
                }
                _ => {}
            }
        }
        cur = next;
    }
    cur
}

fn single<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    select(record, path).into_iter().next().filter(|v| !v.is_null())
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn vertex(v: &Value) -> Option<[f64; 2]> {
    match v {
        Value::Array(a) if a.len() >= 2 => Some([a[0].as_f64()?, a[1].as_f64()?]),
        Value::Object(o) => Some([o.get("x")?.as_f64()?, o.get("y")?.as_f64()?]),
        _ => None,
    }
}

/// Reads polygon vertices. A list of vertex lists is several polygons.
fn polygons(v: &Value, where_: &str) -> Result<Vec<Polygon>> {
    let Value::Array(items) = v else {
        return Err(Error::Annotation(format!("{where_}: vertices are not a list")));
    };
    let nested = items.first().is_some_and(|f| matches!(f, Value::Array(a) if a.first().is_some_and(Value::is_array)));
    let lists: Vec<&Vec<Value>> = if nested {
        items.iter().filter_map(Value::as_array).collect()
    } else {
        vec![items]
    };
    let mut out = Vec::new();
    for list in lists {
        let poly: Option<Polygon> = list.iter().map(vertex).collect();
        let poly = poly.ok_or_else(|| Error::Annotation(format!("{where_}: malformed vertex")))?;
        if poly.len() < 3 {
            return Err(Error::Annotation(format!(
                "{where_}: polygon has {} vertices, need at least 3",
                poly.len()
            )));
        }
        if poly.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Annotation(format!("{where_}: non-finite vertex")));
        }
        out.push(poly);
    }
    Ok(out)
}

/// Extracts polygon entries. Records without vertices (study- or
/// image-level labels) are skipped.
pub fn parse_annotations(root: &Value, schema: &AnnotationSchema) -> Result<AnnotationDocument> {
    let records: Vec<&Value> = select(root, &schema.annotations_path)
        .into_iter()
        .flat_map(|v| match v {
            Value::Array(a) => a.iter().collect::<Vec<_>>(),
            other => vec![other],
        })
        .collect();
    let mut entries = Vec::new();
    for (i, rec) in records.into_iter().enumerate() {
        if let (Some(filter), Some(path)) = (&schema.label_filter, &schema.label_path) {
            let label = single(rec, path).and_then(as_text);
            if !label.is_some_and(|l| filter.contains(&l)) {
                continue;
            }
        }
        let Some(verts) = single(rec, &schema.vertices_path) else {
            continue;
        };
        let where_ = format!("annotation record {i}");
        let field = |path: &str, name: &str| -> Result<String> {
            single(rec, path)
                .and_then(as_text)
                .ok_or_else(|| Error::Annotation(format!("{where_}: missing {name} at '{path}'")))
        };
        let study = field(&schema.study_uid_path, "study UID")?;
        let sop = field(&schema.sop_uid_path, "SOP instance UID")?;
        let annotator = schema
            .annotator_path
            .as_deref()
            .and_then(|p| single(rec, p))
            .and_then(as_text)
            .unwrap_or_default();
        entries.push(AnnotationEntry {
            study_instance_uid: study,
            sop_instance_uid: sop,
            annotator,
            polygons: polygons(verts, &where_)?,
        });
    }
    Ok(AnnotationDocument { entries })
}

pub fn read_annotations(path: &Path, schema: &AnnotationSchema) -> Result<AnnotationDocument> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let root: Value = serde_json::from_str(&text)?;
    parse_annotations(&root, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn reads_default_layout() {
        let doc = json!({"datasets": [{"annotations": [
            {"StudyInstanceUID": "1.2", "SOPInstanceUID": "1.2.3", "createdById": "U1",
             "labelId": "L1", "data": {"vertices": [[1, 1], [4, 1], [4, 4]]}},
            {"StudyInstanceUID": "1.2", "SOPInstanceUID": null, "labelId": "L2", "data": null}
        ]}]});
        let d = parse_annotations(&doc, &AnnotationSchema::default()).unwrap();
        assert_eq!(d.entries.len(), 1);
        assert_eq!(d.entries[0].annotator, "U1");
        assert_eq!(d.entries[0].polygons[0][1], [4.0, 1.0]);
    }

    #[test]
    fn object_vertices_and_label_filter() {
        let doc = json!({"datasets": [{"annotations": [
            {"StudyInstanceUID": "s", "SOPInstanceUID": "a", "labelId": "keep",
             "data": {"vertices": [{"x": 0, "y": 0}, {"x": 2, "y": 0}, {"x": 0, "y": 2}]}},
            {"StudyInstanceUID": "s", "SOPInstanceUID": "b", "labelId": "drop",
             "data": {"vertices": [[0, 0], [2, 0], [0, 2]]}}
        ]}]});
        let schema = AnnotationSchema {
            label_filter: Some(vec!["keep".into()]),
            ..AnnotationSchema::default()
        };
        let d = parse_annotations(&doc, &schema).unwrap();
        assert_eq!(d.entries.len(), 1);
        assert_eq!(d.entries[0].sop_instance_uid, "a");
    }

    #[test]
    fn degenerate_polygon_is_an_error() {
        let doc = json!({"datasets": [{"annotations": [
            {"StudyInstanceUID": "s", "SOPInstanceUID": "a", "data": {"vertices": [[0, 0], [1, 1]]}}
        ]}]});
        assert!(parse_annotations(&doc, &AnnotationSchema::default()).is_err());
    }

    #[test]
    fn wildcard_over_object_values() {
        let v = json!({"a": {"x": 1}, "b": {"x": 2}});
        let got: Vec<i64> = select(&v, "*/x").iter().filter_map(|v| v.as_i64()).collect();
        assert_eq!(got, vec![1, 2]);
    }
}

//! Polygon filling on the pixel grid. Pixel `(row, col)` has its centre at
//! `(x, y) = (col, row)`; it is inside when the centre lies on the polygon
//! boundary or inside it by the even-odd rule.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, LabelMask};

use super::annotations::{AnnotationDocument, Polygon};

/// How masks from several annotators of one study become one mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    #[default]
    Union,
    Intersection,
    /// One mask per annotator, no merging.
    PerAnnotator,
}

fn on_segment(x: f64, y: f64, a: [f64; 2], b: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
    cross == 0.0
        && x >= a[0].min(b[0])
        && x <= a[0].max(b[0])
        && y >= a[1].min(b[1])
        && y <= a[1].max(b[1])
}

fn edges(poly: &Polygon) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
    (0..poly.len()).map(move |i| (poly[i], poly[(i + 1) % poly.len()]))
}

/// Sets every pixel of `poly` to 1 in a `(rows, cols)` slice.
pub fn fill_polygon(poly: &Polygon, slice: &mut Array2<u8>) {
    let (rows, cols) = slice.dim();
    if poly.len() < 3 || rows == 0 || cols == 0 {
        return;
    }
    let ymin = poly.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
    let ymax = poly.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
    let r0 = ymin.ceil().max(0.0) as usize;
    let r1 = (ymax.floor().min(rows as f64 - 1.0)).max(-1.0);
    if r1 < 0.0 {
        return;
    }
    let mut crossings = Vec::new();
    for row in r0..=r1 as usize {
        let y = row as f64;
        crossings.clear();
        for (a, b) in edges(poly) {
            // Half-open in y so a vertex on the scanline counts once.
            if (a[1] > y) != (b[1] > y) {
                crossings.push(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        crossings.sort_by(f64::total_cmp);
        let mut set = |x: f64| {
            if x >= 0.0 && x < cols as f64 {
                slice[[row, x as usize]] = 1;
            }
        };
        // Interior: a centre x is inside when an odd number of crossings
        // lie strictly to its right, i.e. c[2i] <= x < c[2i+1].
        for pair in crossings.chunks_exact(2) {
            let lo = pair[0].ceil().max(0.0);
            let hi = pair[1].ceil().min(cols as f64);
            let mut x = lo;
            while x < hi {
                set(x);
                x += 1.0;
            }
        }
        // Boundary pixels.
        for (a, b) in edges(poly) {
            if y < a[1].min(b[1]) || y > a[1].max(b[1]) {
                continue;
            }
            if a[1] == b[1] {
                let mut x = a[0].min(b[0]).ceil().max(0.0);
                let hi = a[0].max(b[0]);
                while x <= hi {
                    set(x);
                    x += 1.0;
                }
            } else {
                let xc = a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                let base = xc.floor();
                for x in [base - 1.0, base, base + 1.0, base + 2.0] {
                    if on_segment(x, y, a, b) {
                        set(x);
                    }
                }
            }
        }
    }
}

/// Rasterizes each annotator's polygons separately.
pub fn rasterize_by_annotator(
    doc: &AnnotationDocument,
    volume: &CtVolume,
) -> Result<BTreeMap<String, LabelMask>> {
    let study = &volume.study_instance_uid;
    if let Some(e) = doc.entries.iter().find(|e| &e.study_instance_uid != study) {
        return Err(Error::Annotation(format!(
            "annotation for study {} applied to volume of study {study}",
            e.study_instance_uid
        )));
    }
    let index: HashMap<&str, usize> = volume
        .slice_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let orphans: BTreeSet<&str> = doc
        .entries
        .iter()
        .map(|e| e.sop_instance_uid.as_str())
        .filter(|s| !index.contains_key(s))
        .collect();
    if !orphans.is_empty() {
        return Err(Error::OrphanAnnotations(orphans.into_iter().map(String::from).collect()));
    }
    let shape = volume.shape();
    let mut out: BTreeMap<String, LabelMask> = BTreeMap::new();
    for e in &doc.entries {
        let mask = out
            .entry(e.annotator.clone())
            .or_insert_with(|| LabelMask::zeros(shape, volume.spacing));
        let k = index[e.sop_instance_uid.as_str()];
        let mut slice = mask.voxels.index_axis(Axis(0), k).to_owned();
        for poly in &e.polygons {
            fill_polygon(poly, &mut slice);
        }
        mask.voxels.index_axis_mut(Axis(0), k).assign(&slice);
    }
    Ok(out)
}

/// Combines per-annotator masks. `PerAnnotator` is not a merge and is
/// rejected here.
pub fn merge_masks(
    masks: &BTreeMap<String, LabelMask>,
    rule: MergeRule,
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Result<LabelMask> {
    if rule == MergeRule::PerAnnotator {
        return Err(Error::InvalidArgument("per-annotator output has no merged mask".into()));
    }
    let mut it = masks.values();
    let Some(first) = it.next() else {
        return Ok(LabelMask::zeros(shape, spacing));
    };
    let mut acc = first.voxels.clone();
    for m in it {
        ndarray::Zip::from(&mut acc).and(&m.voxels).for_each(|a, &b| {
            *a = match rule {
                MergeRule::Union => *a | b,
                _ => *a & b,
            }
        });
    }
    Ok(LabelMask {
        voxels: acc,
        spacing,
    })
}

/// Union of all polygons of the document on the volume's slices.
pub fn rasterize_annotations(doc: &AnnotationDocument, volume: &CtVolume) -> Result<LabelMask> {
    let masks = rasterize_by_annotator(doc, volume)?;
    merge_masks(&masks, MergeRule::Union, volume.shape(), volume.spacing)
}

//! Per-patient volumetric Dice and normalized surface Dice, macro-averaged
//! reports, and contour overlays.

mod overlap;
mod overlay;
mod report;
mod surface;

pub use overlap::volumetric_dice;
pub use overlay::{
    contour_2d, evenly_spaced_slices, overlay_slice, render_overlay, window_gray, Overlay,
    GT_COLOR, LUNG_WINDOW, PRED_COLOR, SHARED_COLOR,
};
pub use report::{format_table, macro_average, MetricsReport, PatientScore, Summary, TableMetric};
pub use surface::{extract_surface, normalized_surface_dice, squared_edt, surface_mask, SurfaceSet};

use crate::error::Result;
use crate::volume::LabelMask;

/// Default NSD tolerance in millimetres.
pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 3.0;

/// Dice and NSD of one prediction against its ground truth, at the ground
/// truth's spacing.
pub fn score_patient(
    study_id: &str,
    pred: &LabelMask,
    gt: &LabelMask,
    tolerance_mm: f64,
) -> Result<PatientScore> {
    Ok(PatientScore {
        study_id: study_id.to_string(),
        dice: volumetric_dice(pred.voxels.view(), gt.voxels.view())?,
        nsd: normalized_surface_dice(pred.voxels.view(), gt.voxels.view(), gt.spacing, tolerance_mm)?,
        gt_positive_voxels: gt.positive_count() as u64,
        pred_positive_voxels: pred.positive_count() as u64,
    })
}

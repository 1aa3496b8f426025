//! DICOM series and polygon annotations to paired NIfTI files.

pub mod annotations;
pub mod convert;
pub mod dicom;
pub mod manifest;
pub mod nifti_io;
pub mod rasterize;

pub use annotations::{read_annotations, AnnotationDocument, AnnotationEntry, AnnotationSchema, Polygon};
pub use convert::{
    convert_dicom_dataset, index_nifti_dataset, ConversionOutcome, DatasetKind, DicomConversion,
    StudySummary,
};
pub use dicom::{read_dicom_series, rescale_and_clip, DicomSeries, DicomSliceMeta};
pub use manifest::{Manifest, ManifestEntry};
pub use nifti_io::{read_mask, read_volume, write_mask, write_nifti_pair, write_volume};
pub use rasterize::{fill_polygon, merge_masks, rasterize_annotations, rasterize_by_annotator, MergeRule};

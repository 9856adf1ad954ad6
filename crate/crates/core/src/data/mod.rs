//! Volume ingestion, preprocessing, cube tiling, augmentation, patch
//! extraction and synthetic phantoms.

mod augment;
mod io;
mod patches;
mod phantom;
mod preprocess;
mod tiling;
mod volume;

pub use augment::{apply_signed_perm, augment, resize, rotate_free, translate, AugOp, AugmentConfig, SignedPerm};
pub use io::{
    read_annotations, read_detections, read_metaimage, read_scan, read_volume_bin, write_annotations,
    write_detections, write_mask_mhd, write_metaimage, write_text, write_volume_bin, write_volume_mhd,
    DetectionRecord, ElementType,
};
pub use patches::{crop_patches, PatchConfig, PatchSet};
pub use phantom::{generate_phantom, measured_contrast, PhantomSpec};
pub use preprocess::{
    apply_lung_mask, crop, mask_bounds, normalize_intensity, preprocess, resample_isotropic, PreprocessConfig,
};
pub use tiling::{axis_origins, cube_at, cube_origins, extract_cubes, scan_boxes, stitch_detections, CubeSample};
pub use volume::{Intensity, Nodule, ScanAnnotation, Volume};

//! Dataset plumbing: annotation parsing, image I/O, manifests,
//! augmentation, and the gradient-histogram descriptor used for
//! reference-image selection.

mod augment;
mod describe;
mod manifest;
mod pnm;
mod pts;

pub use augment::{augment, warp_by_affine, AppliedAugmentation, AugmentationPolicy};
pub use describe::{describe, select_reference, ImageDescriptor};
pub use manifest::{DatasetManifest, LandmarkConventions, ManifestEntry};
pub use pnm::{grid_to_pgm_bytes, load_image, read_pnm, save_image, write_pgm, write_ppm, ImageU8};
pub use pts::{parse_pts, write_pts, PtsAnnotation};

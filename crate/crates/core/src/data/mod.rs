//! Annotation ingestion, tokenisation, MLM masking, augmentation and the
//! synthetic identity/caption generator.

pub mod annotations;
pub mod augment;
pub mod image;
pub mod masking;
pub mod synthetic;
pub mod vocab;

pub use annotations::{load_annotations, AnnotationRecord, Dataset, ImageRef, Split};
pub use augment::{augment_image, AugmentConfig};
pub use image::Image;
pub use masking::{mask_tokens, MaskConfig, MaskedCaption, MaskedPositions, Replacement};
pub use synthetic::{generate_synthetic, validate_synthetic, Attributes, SyntheticConfig};
pub use vocab::Vocab;

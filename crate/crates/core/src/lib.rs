//! Road segmentation refinement from similar-place priors.
//!
//! A query image's segmentation logits are fused with a prior built from the
//! most similar reference images (by descriptor cosine distance, excluding
//! geographically overlapping ones). The prior's spread is tempered per class
//! by how consistent the query's class coverage is with the retrieved set.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations. The batch [`engine`] runs in `f64`.

pub mod engine;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod manifest;
pub mod npy;
pub mod prior;
pub mod retrieval;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use eval::{class_iou, Iou, Method};
pub use fusion::{
    compute_tempering, fuse, gt_to_pseudologits, posterior_update, prior_only_predict,
    road_candidate_mask, dataset_avg_prior, FusionConfig, FusedResult, PosteriorMode, UpdateScope,
};
pub use io::{read_descriptor, read_label_grid, read_logit_map, write_logit_map};
pub use manifest::{load_manifest, DatasetManifest};
pub use prior::{build_template, class_coverage, class_std, coverage_over_set, TemplatePrior};
pub use retrieval::{build_index, cosine_distance, retrieve_similar, DescriptorIndex, GeoExclusion, GeoTag};
pub use scalar::Scalar;
pub use tensor::{ClassGrid, Descriptor, LabelGrid, LogitMap};

pub type LogitMapF32 = tensor::LogitMap<f32>;
pub type LogitMapF64 = tensor::LogitMap<f64>;
pub type DescriptorF32 = tensor::Descriptor<f32>;
pub type DescriptorF64 = tensor::Descriptor<f64>;
pub type DescriptorIndexF32 = retrieval::DescriptorIndex<f32>;
pub type DescriptorIndexF64 = retrieval::DescriptorIndex<f64>;
pub type TemplatePriorF64 = prior::TemplatePrior<f64>;
pub type ClassStatsF64 = prior::ClassStats<f64>;
pub type CoverageVectorF64 = prior::CoverageVector<f64>;
pub type FusionConfigF32 = fusion::FusionConfig<f32>;
pub type FusionConfigF64 = fusion::FusionConfig<f64>;
pub type FusedResultF64 = fusion::FusedResult<f64>;

//! Zero-shot bias-field correction for 3-D volumes.
//!
//! A small depthwise-separable CNN is optimized from scratch on each input
//! volume. It predicts a per-voxel correction-strength map, used to refine
//! the image with the iterated curve `I + alpha * I * (1 - I)`, and a smooth
//! multiplicative bias map that must reproduce the input when multiplied by
//! the refined image.
//!
//! ```no_run
//! use zsbc_core::{correct_volume, read_volume, write_volume, CorrectionConfig};
//!
//! let input = read_volume("t1.nii.gz")?;
//! let result = correct_volume(&input, &CorrectionConfig::default())?;
//! write_volume(&result.corrected, "t1_corrected.nii.gz")?;
//! # Ok::<(), zsbc_core::Error>(())
//! ```

pub mod correction;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod ops;
pub mod optimizer;
pub mod synthetic;
pub mod tensor;
pub mod volume;

pub use correction::{
    correct_volume, denormalize, hc_iterate, hc_step, normalize, CorrectionConfig,
    CorrectionResult, NormStats,
};
pub use error::{Error, Result};
pub use evaluation::{coefficient_of_variation, evaluate_correction, EvalReport};
pub use losses::{LossBreakdown, LossWeights, Neighborhood};
pub use network::{Architecture, NetworkParams, ParametricMaps};
pub use optimizer::{adam_step, optimize, AdamState, VolumeContext};
pub use synthetic::{corrupt, make_bias_field, make_phantom, BiasSpec, PhantomSpec};
pub use tensor::{GradPair, Tensor};
pub use volume::{read_mask, read_volume, write_mask, write_volume, LabelMask, Volume};

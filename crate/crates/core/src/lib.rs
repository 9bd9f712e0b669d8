//! Desk-scale gigapixel whole-slide segmentation.
//!
//! The crate covers the full path from a raw raster to an evaluated
//! slide-level mask:
//!
//! - [`pyramid`]: chunked multi-resolution `.hhpy` storage with region reads.
//! - [`foreground`]: Otsu tissue masks, random ROI sampling, tile plans.
//! - [`vq`]: patch encoder and nearest-code quantization into token grids.
//! - [`attention`]: ReLU linear attention and the multi-scale backbone.
//! - [`model`]: the segmentation network, its loss, training and checkpoints.
//! - [`stitch`]: tiled whole-slide inference with overlap averaging.
//! - [`metrics`]: patch and slide Dice, Wilcoxon signed-rank test.
//! - [`synth`]: synthetic slides with exact ground truth.

pub mod attention;
pub mod error;
pub mod foreground;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pyramid;
pub mod raster;
pub mod rng;
pub mod stitch;
pub mod synth;
pub mod vq;

pub use error::{Error, Result};
pub use foreground::{ForegroundMask, SamplerConfig, TileRef};
pub use mask::{BitGrid, WsiMask};
pub use metrics::{dice, wilcoxon_signed_rank, wsi_dice, DiceReport};
pub use model::{Checkpoint, ModelConfig, SegModel, TrainConfig};
pub use pyramid::{PyramidImage, Region};
pub use raster::RgbImage;
pub use stitch::{infer_wsi, TileConfig, TileModel};
pub use synth::SynthSlideSpec;

//! Pose-guided segmentation prompting toolkit: COCO-compatible binary masks
//! and RLE, keypoint-based prompt selection, iterative click refinement with
//! deterministic replay, a simulation harness with an oracle segmenter and a
//! newline-delimited JSON wire protocol, and COCO-protocol mask evaluation.

pub mod coco;
pub mod mask;
pub mod pose;
pub mod prompt;
pub mod refine;
pub mod rng;
pub mod sim;
pub mod wire;

pub use coco::{evaluate, load_dets, load_gt, DetInstance, EvalParams, EvalResult, GtDataset};
pub use mask::{
    inflate_bbox, iou, rasterize, rle_compress, rle_decode, rle_decompress, rle_encode, BBox,
    BinaryMask, MaskDims, MaskError, Polygon, Rle,
};
pub use pose::{Keypoint, KeypointName, Pose, ScoreField, KEYPOINT_COUNT};
pub use prompt::{PromptLabel, PromptPoint, PromptSet, MAX_PROMPT_POINTS};
pub use refine::{SamplerConfig, SamplerKind};
pub use sim::{
    run_refine_loop, run_refine_loop_with, run_suite, IterationTrace, RefineOutcome, OracleConfig, OracleSegmenter, Segmenter,
    SegmenterRequest, SegmenterResponse,
};
pub use wire::{ExternalSegmenter, WireError};

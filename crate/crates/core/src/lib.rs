//! Toolkit for iterative pseudo-label self-training of object detectors.
//!
//! The crate covers the whole loop around a detector: COCO-style dataset
//! handling ([`coco`]), prediction post-processing ([`boxes`]), mAP@0.5
//! evaluation ([`eval`]), pseudo-label fusion ([`merge`]), a pluggable
//! detector protocol ([`backend`]), a seeded synthetic detector
//! ([`sim`]) and the round driver itself ([`pipeline`]).
//!
//! Geometry and precision/recall math are generic over the scalar type
//! (see [`geometry::BBox`] and [`eval::ap_from_flags`]); dataset records
//! are stored as `f64`, which is what COCO JSON carries.

pub mod backend;
pub mod boxes;
pub mod coco;
pub mod error;
pub mod eval;
pub mod geometry;
mod io;
pub mod merge;
pub mod pipeline;
pub mod sim;

pub use backend::{
    BackendDescriptor, CommandBackend, CommandSettings, DetectorBackend, FileBackend,
    PredictRequest, SimulatorBackend, TrainRequest,
};
pub use boxes::{class_wise_nms, filter_by_score, Detection, PredictionSet};
pub use coco::{AnnotationRecord, CategoryRecord, Dataset, ImageRecord, Source, Violation};
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, match_detections, EvalReport, MatchRecord};
pub use geometry::{iou, Scalar};
pub use merge::{merge_datasets, merge_pseudo, to_pseudo_annotations, CrossRound, MergePolicy};
pub use pipeline::{run_pipeline, sweep, PipelineConfig, PipelineOutcome, RoundReport};
pub use sim::{SimulatorConfig, World};

/// Box with `f64` coordinates; the representation used by dataset records.
pub type BBox = geometry::BBox<f64>;
/// Single-precision box, for callers feeding detector outputs directly.
pub type BBox32 = geometry::BBox<f32>;

//! Desk-scale differential morphing-attack detection.
//!
//! Two LoRA-adapted instances of a frozen toy vision transformer embed a
//! suspected image and a trusted live capture; their embedding difference
//! feeds a linear head trained with focal loss. Detection quality is
//! evaluated with MACER/BSCER/D-EER and DET curves over threshold sweeps.
//! A procedural generator supplies identity-structured image pairs with
//! controllable morphing artefacts so the whole pipeline is trainable and
//! testable without external data.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod vit;

pub use autodiff::{finite_difference_check, Graph, Node, Tensor};
pub use error::{Error, Result};
pub use lora::{trainable_fraction, LoraAdapter, LoraConfig, ParamRegistry, ScalingMode};
pub use metrics::{Label, MetricsReport, ScoreRecord};
pub use model::{Detector, DetectorMode, PairSample};
pub use synth::{ArtefactModel, SynthConfig};
pub use trainer::{train, FocalLossConfig, TrainConfig};
pub use vit::{EncoderWeights, ViTConfig};

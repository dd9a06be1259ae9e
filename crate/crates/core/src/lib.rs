//! Few-shot classification over pre-extracted embedding features with an
//! ICA-disentangled cache model, cross-modal attention fusion and a
//! fine-tuning engine.
//!
//! Pipeline: load a [`FewShotTask`] from `CCAF` packs, fit an [`IcaModel`]
//! on a source pack, build a [`CacheModel`] whose keys are disentangled
//! cache features, fine-tune the adapter and text weights with
//! [`trainer::train`], and tune the balance factors with
//! [`search::grid_search`].

pub mod adapter;
pub mod crossmodal;
pub mod error;
pub mod featurepack;
pub mod ica;
pub mod linalg;
pub mod model;
pub mod search;
pub mod synth;
pub mod trainer;

pub use adapter::CacheModel;
pub use crossmodal::{CrossModalHead, FusionContext, HeadParams};
pub use error::{Error, Result};
pub use featurepack::{FeatureMatrix, FewShotTask, LabelVector, Manifest, Split};
pub use ica::{Disentangler, IcaConfig, IcaModel, Nonlinearity};
pub use linalg::Mat;
pub use model::{Balance, CcaModel};
pub use search::{SearchGrid, SearchMode, SearchResult};
pub use synth::{GenerativeSpec, LabelRule, LatentDist, SynthTaskSpec};
pub use trainer::{Ablations, Checkpoint, TrainConfig, TrainLog, TrainState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Clarity-gated underwater image enhancement.
//!
//! The crate is organised around a batch pipeline:
//!
//! 1. [`embed`] obtains unit-norm image/text embeddings and turns the
//!    similarity to a fixed set of water-condition prompts into a clarity score.
//! 2. [`enhance::gate`] skips images whose clarity score clears a threshold.
//! 3. [`adaptive`] builds a per-tile depth plan from a local-contrast
//!    degradation map, and [`enhance`] spends that many refinement passes per tile.
//! 4. [`uncertainty`] estimates per-pixel variance over stochastic passes.
//! 5. [`metrics`] scores results (PSNR, SSIM, FSIM, UIQM, UCIQE) and
//!    [`report`] serialises runs, ablations, and audit tables.
//!
//! [`audit`] is the dataset-level companion: cluster-occupancy entropy,
//! inverse-frequency weights, prompt-similarity tables and exact t-SNE.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.
//! Every reduction runs in a fixed order, so results do not depend on the
//! number of worker threads.

pub mod adaptive;
pub mod audit;
pub mod embed;
pub mod enhance;
pub mod imaging;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod uncertainty;

pub use adaptive::{AdaptiveParams, CostUnits, DegradationMap, DepthPlan};
pub use embed::{Embedding, EmbeddingProvider, PromptSet, SimilarityProfile};
pub use enhance::{BaselineConfig, BaselineEnhancer, Enhancer, GateAction, GateDecision};
pub use imaging::{DatasetManifest, ImageBuf, LumaBuf, ManifestEntry};
pub use metrics::MetricSet;
pub use uncertainty::{StochasticConfig, VarianceResult};

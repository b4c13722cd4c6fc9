//! Recurrent coupled topic model.
//!
//! Topics at each time slice evolve from every topic of the previous slice
//! through non-negative coupling weights. Inference is a Gibbs sampler: a
//! sparse topic-proportion sweep per document, then a backward filter that
//! propagates latent word counts down the chain, then closed-form forward
//! draws of topics, couplings and scales.
//!
//! ```no_run
//! use rctm::{synth, gibbs, HyperParams, TrainConfig};
//!
//! let (corpus, truth) = synth::generate(&synth::SynthConfig::new(200, 200, 5, 3, 7)).unwrap();
//! let (_, summary) = gibbs::train(&corpus, &HyperParams::default(), &TrainConfig::default()).unwrap();
//! let score = synth::score_recovery(&truth, &summary);
//! println!("coupling correlation {:.3}", score.correlation);
//! ```

pub mod chain;
pub mod checkpoint;
pub mod corpus;
pub mod distrib;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod model;
pub mod proportions;
pub mod synth;

pub use chain::FilterCache;
pub use corpus::{Document, SlicedCorpus, SplitCorpus};
pub use error::{CorpusError, DistribError, ModelError};
pub use eval::{EvalConfig, EvalResults, Metric};
pub use gibbs::{PosteriorSummary, TrainConfig};
pub use model::{HyperParams, Mode, ModelState};
pub use synth::{GroundTruth, SynthConfig};

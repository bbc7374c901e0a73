//! Desk-scale recipes for low-resource neural machine translation.
//!
//! The crate covers the whole path from raw corpora to scored translations:
//!
//! - [`corpus`]: cleaning, manifests, in/out-domain up-sampling and
//!   temperature-based language sampling.
//! - [`subword`]: a byte-level BPE vocabulary with language-id specials and
//!   the Sinhala zero-width-joiner repair.
//! - [`noising`]: span masking and sentence permutation for denoising
//!   continual pre-training.
//! - [`model`]: a small encoder-decoder transformer with hand-written
//!   gradients, an Adam trainer and a versioned checkpoint format.
//! - [`pipeline`]: continual pre-training cases and multistage fine-tuning
//!   recipes expressed as declarative stage lists.
//! - [`decode`]: beam search over single models and output-averaging
//!   ensembles.
//! - [`eval`]: corpus BLEU, validation likelihood and result tables with
//!   deltas against a baseline.
//! - [`synthetic`]: toy language pairs used by the examples and smoke tests.
//! - [`cli`]: the `lrlf` command line front end.

pub mod cli;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod noising;
pub mod pipeline;
pub mod rng;
pub mod subword;
pub mod synthetic;

pub use corpus::{CorpusManifest, DomainTag, LangCode, MonoDataset, ParallelDataset};
pub use decode::{beam_search, DecodeConfig, EnsembleSpec};
pub use eval::{corpus_bleu, BleuReport};

pub use model::{ModelCheckpoint, ModelConfig, TrainConfig};
pub use noising::{NoiseConfig, NoisedExample};
pub use pipeline::{PipelineRecipe, RunRecord, StageSpec};

pub use subword::Vocab;

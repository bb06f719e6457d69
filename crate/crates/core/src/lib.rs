//! Multi-scale example-based image synthesis with randomized patch EPLL,
//! and a likelihood / originality / spread assessment of generated sets.

pub mod archive;
pub mod assess;
pub mod corpus;
pub mod dictionary;
pub mod epll;
pub mod error;
pub mod image;
mod kdtree;
pub mod pgm;
pub mod provenance;
pub mod sampler;
pub mod synthesis;

pub use assess::{LlConfig, LlGrid, OriginalityIndex, ParzenStack, PixelMask, ScoreReport, SpreadConfig};
pub use dictionary::{ContextKind, ContextSpec, KnnBackend, LayerBank, PatchDictionary};
pub use epll::{AdmmState, IterationParams, SolverSettings};
pub use error::{Error, Result};
pub use image::{Image, Patch, PatchLocation};
pub use sampler::PosteriorParams;
pub use synthesis::{ClassModel, RunRecord, SynthesisSchedule};

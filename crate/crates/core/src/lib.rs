//! Progressive adaptive multimodal fusion for action quality assessment.
//!
//! The model regresses a normalized quality score from pre-extracted,
//! time-aligned RGB, optical-flow and audio segment features. Three
//! modality-specific branches feed a mixed-modality branch that starts from
//! zeros and, stage by stage, adds
//!
//! * a modality-specific decoder ([`msfd`]) that pulls in what the mixed
//!   feature has not absorbed yet (negated attention), and
//! * a cross-modal decoder ([`cmfd`]) over `K` ranked FusionNets, of which a
//!   PolicyNet ([`afm`]) enables the first `a` at each time step.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`autograd`]) so
//! that every gradient can be checked against finite differences
//! ([`gradcheck`]).
//!
//! ```
//! use pamfn::config::ModelConfig;
//! use pamfn::data::{generate_synthetic, Batch, SyntheticSpec};
//! use pamfn::network::Model;
//!
//! let spec = SyntheticSpec { n_videos: 2, n_test: 1, ..SyntheticSpec::default() };
//! let (_, videos) = generate_synthetic(&spec).unwrap();
//! let model = Model::init(ModelConfig::tiny(spec.dims), 0).unwrap();
//! let score = model.predict(&Batch::single(&videos[0]))[0];
//! assert!((0.0..=1.0).contains(&score));
//! ```

pub mod afm;
pub mod attention;
pub mod autograd;
pub mod branch;
pub mod cmfd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod msfd;
pub mod network;
pub mod params;
pub mod session;
pub mod tensor;
pub mod training;

pub use error::{PamfnError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    pub struct Quickstart;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/routing.md")]
    pub struct Routing;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub struct Gradients;
    #[doc = include_str!("../../../README.md")]
    pub struct Readme;
}

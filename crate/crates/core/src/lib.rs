pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod config;
pub mod container;
pub mod error;
pub mod experts;
pub mod harness;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod routing;
pub mod taskgen;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use backbone::{Backbone, BackboneConfig, Batch, ModuleSite, SiteAdapter};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

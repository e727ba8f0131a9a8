//! Chain-of-thought planned, hint-guided diffusion image editing at desk
//! scale.
//!
//! An instruction is split by a planner into at most `K` ordered
//! sub-prompts. For each one a region reasoner proposes an editing mask and
//! the diffusion editor rewrites that region under three-condition
//! classifier-free guidance. See the `examples/` directory for one runnable
//! walkthrough per capability.

pub mod backends;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod eval;
pub mod image;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod plan;
pub mod reasoner;
pub mod scene;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};

//! A desk-scale laboratory for instance-specific diffusion-model
//! watermarking with two-sided detection.
//!
//! The crate covers the full loop: deterministic DDIM sampling with exact
//! inversion ([`backend`]), ring-pattern injection in the centered Fourier
//! plane ([`freq`]), a semantics-keyed parameter selector ([`selector`]),
//! end-to-end injection and two-sided detection ([`pipeline`]), six
//! removal/forgery attacks ([`attacks`]), and robustness scoring
//! ([`eval`]). [`runtime`] ties everything into reproducible, manifest-driven
//! experiments behind the `latentmark` CLI.
//!
//! A narrative guide with runnable snippets lives in `book/`; its code
//! blocks are compiled and executed as doc-tests by the `latentmark-book`
//! crate.

pub mod attacks;
pub mod backend;
pub mod codec;
pub mod error;
pub mod eval;
pub mod fft;
pub mod freq;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod runtime;
pub mod selector;

pub use error::{LabError, Result};

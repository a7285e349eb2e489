//! Frequency-domain feature denoising.
//!
//! A feature map is moved to the spectral domain, split into amplitude and
//! phase, and each part is rescaled by a per-bin gate produced by attention
//! over bands of the centrally shifted spectrum. Everything is differentiable
//! through a small reverse-mode tape.

pub mod attention;
pub mod bands;
pub mod conformance;
pub mod denodet;
pub mod error;
pub mod harness;
pub mod imageio;
pub mod spectral;
pub mod tape;
pub mod tensor;

pub use attention::{bpsa, pate, GateMlp, Modality, ModalityParams, ModulationMap, SqrtScaling};
pub use bands::{fold, unfold, BandGrouping, PartitionSpec};
pub use denodet::{enumerate_configs, DenoConfig, DenoModule, DenoParams, ForwardOutput};
pub use error::{Error, Result};
pub use imageio::{export_gray, load_gray, load_tensor, save_tensor};
pub use spectral::{dft2_forward, dft2_inverse, from_polar, harmonize_phase, to_polar, PolarSpectrum, Spectrum};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

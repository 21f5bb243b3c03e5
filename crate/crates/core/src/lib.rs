//! Speech enhancement for microphone arrays mounted on noisy robots.

pub mod checkpoint;
pub mod dsp;
pub mod linalg;
pub mod vae;
pub mod mnmf;
pub mod mcem;
pub mod wiener;
pub mod scenes;
pub mod metrics;
pub mod pipeline;
pub mod cli;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/speech-prior.md")]
    mod speech_prior {}
    #[doc = include_str!("../../../book/src/noise-model.md")]
    mod noise_model {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

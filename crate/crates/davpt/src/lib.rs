//! Distribution-aware visual prompt tuning on a desk-scale vision transformer.
//!
//! The crate trains per-layer prompt tokens under a joint objective: softmax
//! cross-entropy plus metric losses that pull each prompt toward the token
//! distribution of the classes mapped to it. Everything runs on plain `f64`
//! with a reverse-mode tape, so every gradient in the system can be checked
//! against finite differences.
//!
//! Module map:
//! - [`tensor`]: row-major tensors, the autodiff tape, finite-difference checks
//! - [`vit`]: the miniature ViT backbone with prompt insertion and tracing
//! - [`metric`]: proxy-anchor and NCA guidance losses, margin auditing
//! - [`mapping`]: class representations and the k-means class-to-prompt map
//! - [`train`]: schedule, AdamW, the training loop, deterministic reports
//! - [`data`]: synthetic dataset generation and the on-disk formats
//! - [`analysis`]: attention-shift verification, attention export, manifests
//! - [`cli`]: the `davpt` command-line tool

pub mod analysis;
pub mod cli;
pub mod data;
pub mod mapping;
pub mod metric;
pub mod streams;
pub mod tensor;
pub mod train;
pub mod vit;

#[cfg(doctest)]
mod book;

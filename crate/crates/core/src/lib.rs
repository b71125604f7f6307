//! Workbench for studying how keyed random selection of deep features blunts
//! the transfer of adversarial examples to retrained image-manipulation
//! detectors.
//!
//! The pipeline, end to end:
//!
//! 1. [`image`] builds labeled grayscale patch sets: originals (H0) against
//!    manipulated copies (H1: bilinear downsize, median filtering, CLAHE).
//! 2. [`detectors`] trains a small constrained CNN (or a deeper unconstrained
//!    one) on the patches and exposes its flatten-layer feature vector.
//! 3. [`attacks`] crafts white-box adversarial examples against the trained
//!    CNN with iterative FGSM, PGD, and a box-constrained L-BFGS attack.
//! 4. [`rdfs`] selects K of the N flatten features under a secret key and
//!    retrains lightweight detectors (FC head or SVM) on the selection.
//! 5. [`harness`] orchestrates the repeated K-sweep, evaluates how well the
//!    cached adversarial examples transfer to the reduced detectors, and
//!    aggregates the accuracy tables.
//!
//! Everything is CPU-only and deterministic for a fixed master seed.

pub mod attacks;
pub mod container;
pub mod detectors;
pub mod error;
pub mod harness;
pub mod image;
pub mod rdfs;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

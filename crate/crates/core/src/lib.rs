//! Speech feature fusion with independent vector analysis.
//!
//! Time-domain (LPC) and frequency-domain (MFCC) features of a sentence are
//! stacked into an `N x T x K` tensor, demixed by a Newton-method IVA under a
//! multivariate Gaussian source-component-vector prior, and classified by small
//! parallel CNNs with statistics pooling.

pub mod audio_io;
pub mod error;
pub mod features;
pub mod formats;
pub mod iva;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

//! Token-level gradient conflict identification and elimination for a toy
//! mixture-of-experts classifier, with everything needed to train it and
//! measure the effect.

pub mod analysis;
pub mod conflict;
pub mod error;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod routing;
pub mod synthdata;
pub mod train;

pub use error::{Result, StgcError};

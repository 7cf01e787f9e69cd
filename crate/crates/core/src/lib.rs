//! Edit-distance robustness certificates for classifiers smoothed by random
//! token deletion, where the deletion rate may adapt to the input.

pub mod bounds;
pub mod calibration;
pub mod certification;
pub mod classifiers;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod mechanism;
pub mod numeric;
pub mod oracle;
pub mod report;
pub mod seeding;
pub mod sequence;

pub use error::{Error, Result};

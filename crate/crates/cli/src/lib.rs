//! Command implementations behind the `mvcnet` binary: dataset
//! generation, training, evaluation, property verification, and gradient
//! checking, each producing reproducible artifacts (manifest, metrics
//! stream, checkpoint).

pub mod commands;

use mvcnet_core::Error;

/// Process exit codes: 0 success, 1 validation error, 2 property
/// failure, 3 numerical abort.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_PROPERTY: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps a core error onto the documented exit codes.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::PoisonedGradient { .. }
        | Error::Divergence { .. }
        | Error::MeanNonConvergence { .. }
        | Error::EigenNonConvergence { .. }
        | Error::OutOfChart { .. }
        | Error::CutLocus { .. }
        | Error::NonUniqueMean { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::AtSite { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

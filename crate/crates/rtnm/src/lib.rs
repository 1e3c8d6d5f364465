//! Design-based estimation and inference for staggered-adoption panel data.
//!
//! The pipeline is: load and validate a balanced panel ([`panel`]), build a
//! nested matched design by matching cohorts backward in time with earlier
//! strata acting as pseudo-controls ([`design`]), estimate group-time average
//! treatment effects from the strata ([`estimator`]), estimate their
//! covariance by resampling the outermost blocks ([`bootstrap`]), and test
//! homogeneity of effects with a null-restricted bootstrap Wald statistic
//! ([`hypothesis`]). A simulator with known effects ([`sim`]) closes the loop
//! for validation.
//!
//! Numeric kernels (`linalg`, rank transforms, quadratic forms) are generic
//! over the scalar type via [`num::Scalar`]; the pipeline itself works in
//! [`Real`] (`f64`), which is what the file formats carry.

pub mod balance;
pub mod bootstrap;
pub mod design;
pub mod distance;
pub mod estimator;
pub mod hypothesis;
pub mod linalg;
pub mod manifest;
pub mod matcher;
pub mod num;
pub mod panel;
pub mod report;
pub mod rng;
pub mod sim;

/// Scalar type used throughout the pipeline and in all file formats.
pub type Real = f64;

/// Dense symmetric matrix over the pipeline scalar.
pub type SymMatrix = linalg::SymMat<Real>;

pub use design::{run_rtnm, NestedDesign, RtnmConfig};
pub use distance::{DistanceSpec, Metric};
pub use estimator::{estimate_att, naive_att, Adjustment, AttVector, GtIndex};
pub use matcher::{solve_full_match, FullMatchProblem, MatchBounds, Stratification};
pub use panel::{Cohort, PanelDataset, Period};

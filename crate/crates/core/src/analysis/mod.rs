//! Gradient checking, segmentation metrics and complexity accounting.

pub mod complexity;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;

pub use complexity::{count_flops, count_params, ComplexityReport, Convention};
pub use gradcheck::{finite_diff_gradcheck, GradcheckReport};
pub use metrics::{dsc, iou, Overlap};

//! Image quality metrics and set-level feature distances.
//!
//! FID and KID are computed on features of a frozen, randomly initialised
//! conv net rather than Inception-V3, so absolute values are only
//! comparable between runs of this crate.

mod distance;
mod features;
mod image;
mod report;

pub use distance::{fid, kid};
pub use features::{FeatureExtractor, FEATURE_SEED, FEATURE_WIDTHS};
pub use image::{l1, mse, psnr, ssim, tv, PSNR_IDENTICAL_DB, SSIM_WINDOW};
pub use report::{
    evaluate_dir, evaluate_pairs, write_pair_metrics, write_report, Evaluation, MetricReport,
    PairMetrics, METRIC_CSV_HEADER,
};

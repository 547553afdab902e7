//! Training objective over the low- and high-resolution paths, and the
//! evaluation metrics (per-organ Dice, mDice, HD95).

mod losses;
mod metrics;

pub use losses::{
    ce_loss, class_softmax, combined_loss, combined_loss_graph, dice_loss, downsample_labels, one_hot, path_terms,
    target_ids, LossBreakdown, LossConfig, DICE_EPS,
};
pub use metrics::{
    boundary, dice_score, evaluate_case, evaluate_volume, hd95, mdice, percentile, read_csv, squared_distance_transform,
    summarize, surface_distances, write_csv, MetricReport, MetricSummary,
};

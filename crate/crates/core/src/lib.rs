//! Query teamwork for DETR-style set prediction.
//!
//! Queries are split into scale groups that only see each other in
//! self-attention and are matched only against objects of their own scale
//! range. Predictions are kept close to their anchor centers, and anchors are
//! periodically replaced by the mean of each query's most confident boxes.

pub mod error;
pub mod geometry;
pub mod mask;
pub mod matching;
pub mod partition;
pub mod preference;
pub mod losses;
pub mod decoder;
pub mod harness;

pub use error::{Error, Result};
pub use geometry::{center_distance, giou, iou, l1_box_distance, relative_scale, BBox};
pub use mask::{build_attention_mask, AttentionMask};
pub use matching::{
    brute_force_match, cost_matrix, hungarian, team_match, team_match_with_groups, CostMatrix,
    CostWeights, GtObject, MatchResult, Prediction,
};
pub use partition::{assign_object_group, build_partition, init_team, QueryTeam, ScalePartition, ScaleRange};

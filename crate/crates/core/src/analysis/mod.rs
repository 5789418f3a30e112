//! Diagnostics over the U-Net: attention reach, operator latency,
//! feature duplication, and feature-map export.

mod distance;
mod duplication;
mod pgm;
mod profile;

pub use distance::{mean_attention_distance, AttentionRecorder, AttnMap, DistanceAccumulator, SiteKey};
pub use duplication::duplication_score;
pub use pgm::{dump_feature_pgm, encode_pgm, parse_pgm, reduce_channels, ChannelReduce, Pgm};
pub use profile::{profile_forward, profile_forward_with, LatencyReport, LatencyRow};

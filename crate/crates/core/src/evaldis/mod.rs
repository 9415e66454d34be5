//! Role parsing, diff metrics and the latent-influence protocol.

mod diff;
mod influence;
mod parse;
mod wired;

pub use diff::{diff_statistics, AbstainTag, AlterPayload, DiffRecord, Metric};
pub use influence::{
    aggregate_influence, diff_external, metric_labels, read_external_couples, run_influence_experiment, stream_rng,
    summarize, top_influencers, ExternalCouple, InfluenceMatrix, InfluenceSummary, LatentGenerator, NeuralGenerator,
    TopInfluencer,
};
pub use parse::{match_template, parse_roles, OieRole, ParseStatus, RoleParse, DEP_LABELS, ROOT_CHILD_LABELS};
pub use wired::{
    wired_decoder_check, RoleRecovery, WiredGenerator, WiredReport, DEFAULT_WIRING, WIRED_MAX_INERT, WIRED_MIN_PLANTED,
};

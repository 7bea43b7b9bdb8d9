//! Hierarchical MAPPO under centralized training and decentralized
//! execution: macro-action (waypoint) and local-action actor-critic pairs.

mod losses;
mod model;
mod rollout;
mod train;

pub use losses::{actor_loss, critic_loss, gae, gae_discounted, normalize};
pub use model::{
    gaussian_log_prob, local_action_from_raw, waypoint_feature, waypoint_from_raw, ActorSet,
    Architecture, CriticSet, GaussianHead, Model, ModelConfig, ACTOR_GROUP, CHECKPOINT_VERSION,
    CRITIC_GROUP, LA_DIM, MA_DIM, WAYPOINT_BOX,
};
pub use rollout::{
    collect_episode, collect_rollout, critic_values, episode_seed, rotated, ActionMode,
    EpisodeStats, LaSample, MaSample, PolicyRunner, RobotDecision, RolloutBuffer, RolloutParams,
};
pub use train::{
    mappo_loss, train, update, validation_success, EarlyStop, LossConfig, LossTerms, RunDir,
    TrainConfig, TrainOutcome, TrainRun, UpdateStats, VALIDATION_SEED_BASE,
};

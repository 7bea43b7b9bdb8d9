//! Evaluation: per-episode summaries, joint success rate, the weighted
//! multi-robot social score, baseline policies, reports and trajectory plots.

mod metrics;
mod plot;
mod runner;

pub use metrics::{
    mrsan_social_score, robot_social_score, success_rate, EpisodeSummary, RobotSummary,
    SocialScoreWeights, SIMPLEX_TOL,
};
pub use plot::{plot_episode, render_svg};
pub use runner::{
    eval_seeds, orca_robot_action, random_action, run_policy_eval, velocity_command, EvalOutcome,
    EvalPolicy, EvalReport, Evaluator,
};

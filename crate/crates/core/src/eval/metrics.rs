use serde::{Deserialize, Serialize};

use crate::env::{EpisodeStatus, DISCOMFORT_DIST};
use crate::episode_log::EpisodeTrace;
use crate::error::{Error, Result};

/// Allowed deviation of the weight sum from 1.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSummary {
    pub reached: bool,
    /// Seconds until arrival, or the whole episode when the goal was not reached.
    pub navigation_time: f64,
    pub path_length: f64,
    /// Smallest surface distance to any human while navigating; `None`
    /// without humans.
    pub min_human_distance: Option<f64>,
    /// Fraction of navigating steps that ended within the discomfort distance.
    pub discomfort_fraction: f64,
    /// Start-to-goal distance.
    pub straight_line: f64,
    pub v_pref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub status: EpisodeStatus,
    pub steps: usize,
    pub robots: Vec<RobotSummary>,
    pub collision: bool,
    pub timeout: bool,
}

impl EpisodeSummary {
    /// Derives the summary from a trace alone, so logs on disk and traces in
    /// memory yield the same numbers.
    pub fn from_trace(trace: &EpisodeTrace) -> Self {
        let n = trace.n_robots();
        let dt = trace.reset.dt;
        let start = &trace.reset.agents;
        let mut prev: Vec<[f64; 2]> = start.iter().map(|a| a.public.position()).collect();
        let mut done = vec![false; n];
        let mut arrival: Vec<Option<usize>> = vec![None; n];
        let mut path = vec![0.0; n];
        let mut min_h: Vec<Option<f64>> = vec![None; n];
        let mut active = vec![0usize; n];
        let mut uneasy = vec![0usize; n];

        for s in &trace.steps {
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let me = &s.states[i];
                active[i] += 1;
                path[i] += (me.px - prev[i][0]).hypot(me.py - prev[i][1]);
                let d = s.states[n..]
                    .iter()
                    .map(|h| me.surface_distance(h))
                    .fold(f64::INFINITY, f64::min);
                if d.is_finite() {
                    min_h[i] = Some(min_h[i].map_or(d, |m: f64| m.min(d)));
                    if d <= DISCOMFORT_DIST {
                        uneasy[i] += 1;
                    }
                }
                if s.done[i] {
                    done[i] = true;
                    arrival[i] = Some(s.t);
                }
            }
            prev = s.states.iter().map(|p| p.position()).collect();
        }

        let steps = trace.steps.len();
        let robots = (0..n)
            .map(|i| {
                let a = &start[i];
                RobotSummary {
                    reached: arrival[i].is_some(),
                    navigation_time: arrival[i].unwrap_or(steps) as f64 * dt,
                    path_length: path[i],
                    min_human_distance: min_h[i],
                    discomfort_fraction: if active[i] == 0 {
                        0.0
                    } else {
                        uneasy[i] as f64 / active[i] as f64
                    },
                    straight_line: a.goal_distance(),
                    v_pref: a.private.v_pref,
                }
            })
            .collect();
        let status = trace.status();
        Self {
            seed: trace.reset.seed,
            status,
            steps,
            robots,
            collision: status == EpisodeStatus::Collision,
            timeout: status == EpisodeStatus::Timeout,
        }
    }

    /// Joint success: every robot reached its goal without collision in time.
    pub fn success(&self) -> bool {
        self.status == EpisodeStatus::AllSuccess
    }
}

pub fn success_rate(summaries: &[EpisodeSummary]) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::Usage("success rate of an empty evaluation".into()));
    }
    Ok(summaries.iter().filter(|s| s.success()).count() as f64 / summaries.len() as f64)
}

/// Per-robot social score in [0, 100].
///
/// This is a stand-in with a documented formula, not a published metric:
/// `100 * (0.5 + 0.25 * time_efficiency + 0.25 * comfort)` for a robot that
/// reached its goal and 0 otherwise. `time_efficiency` is the straight-line
/// travel time at the preferred speed over the actual navigation time,
/// clipped to [0, 1]; `comfort` is one minus the discomfort fraction.
pub fn robot_social_score(summary: &EpisodeSummary, robot: usize) -> f64 {
    let r = &summary.robots[robot];
    if !r.reached {
        return 0.0;
    }
    let efficiency = if r.navigation_time > 0.0 {
        (r.straight_line / r.v_pref / r.navigation_time).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let comfort = 1.0 - r.discomfort_fraction;
    100.0 * (0.5 + 0.25 * efficiency + 0.25 * comfort)
}

/// Nonnegative weights over robots summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialScoreWeights(Vec<f64>);

impl SocialScoreWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Usage("no social score weights".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Usage(
                "social score weights must be nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Usage(format!(
                "social score weights sum to {sum}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn equal(n: usize) -> Self {
        assert!(n > 0, "at least one robot");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Weighted sum over robots of each robot's mean score across episodes.
pub fn mrsan_social_score(
    summaries: &[EpisodeSummary],
    weights: &SocialScoreWeights,
) -> Result<f64> {
    if summaries.is_empty() {
        return Err(Error::Usage("social score of an empty evaluation".into()));
    }
    let w = weights.as_slice();
    if summaries.iter().any(|s| s.robots.len() != w.len()) {
        return Err(Error::Usage(format!(
            "{} weights for episodes with a different robot count",
            w.len()
        )));
    }
    let m = summaries.len() as f64;
    Ok(w.iter()
        .enumerate()
        .map(|(i, wi)| {
            wi * summaries
                .iter()
                .map(|s| robot_social_score(s, i))
                .sum::<f64>()
                / m
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn robot(reached: bool, time: f64, discomfort: f64) -> RobotSummary {
        RobotSummary {
            reached,
            navigation_time: time,
            path_length: 10.0,
            min_human_distance: None,
            discomfort_fraction: discomfort,
            straight_line: 10.0,
            v_pref: 1.0,
        }
    }

    fn episode(status: EpisodeStatus, robots: Vec<RobotSummary>) -> EpisodeSummary {
        EpisodeSummary {
            seed: 0,
            status,
            steps: 40,
            robots,
            collision: status == EpisodeStatus::Collision,
            timeout: status == EpisodeStatus::Timeout,
        }
    }

    #[test]
    fn success_rate_cases() {
        let ok = episode(EpisodeStatus::AllSuccess, vec![robot(true, 10.0, 0.0)]);
        assert_eq!(success_rate(&[ok.clone(), ok.clone()]).unwrap(), 1.0);
        let partial = episode(
            EpisodeStatus::Timeout,
            vec![
                robot(true, 10.0, 0.0),
                robot(true, 10.0, 0.0),
                robot(false, 10.0, 0.0),
            ],
        );
        assert_eq!(success_rate(&[partial.clone(), partial]).unwrap(), 0.0);
        assert!(matches!(success_rate(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn social_score_cases() {
        let e = episode(EpisodeStatus::Timeout, vec![robot(false, 10.0, 0.0)]);
        assert_eq!(robot_social_score(&e, 0), 0.0);
        let e = episode(EpisodeStatus::AllSuccess, vec![robot(true, 10.0, 0.0)]);
        assert_eq!(robot_social_score(&e, 0), 100.0);
        // straight 10 m at 1 m/s in 12.5 s: efficiency 0.8; half the steps uneasy.
        let e = episode(EpisodeStatus::AllSuccess, vec![robot(true, 12.5, 0.5)]);
        assert!((robot_social_score(&e, 0) - 82.5).abs() < 1e-12);
    }

    #[test]
    fn weights_validate_simplex() {
        assert!(SocialScoreWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SocialScoreWeights::new(vec![0.6, 0.5]).is_err());
        assert!(SocialScoreWeights::new(vec![1.5, -0.5]).is_err());
        assert!(SocialScoreWeights::new(vec![]).is_err());
        let w = SocialScoreWeights::equal(3);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
    }

    fn scored(scores: &[f64]) -> EpisodeSummary {
        // Efficiency x and comfort x give 50 + 50 x.
        let robots = scores
            .iter()
            .map(|s| {
                let x = (s - 50.0) / 50.0;
                robot(true, 10.0 / x, 1.0 - x)
            })
            .collect();
        episode(EpisodeStatus::AllSuccess, robots)
    }

    #[test]
    fn mrsan_cases() {
        let eq = SocialScoreWeights::equal(3);
        let e = scored(&[90.0, 90.0, 90.0]);
        assert!((mrsan_social_score(&[e], &eq).unwrap() - 90.0).abs() < 1e-9);

        let vertex = SocialScoreWeights::new(vec![1.0, 0.0, 0.0]).unwrap();
        let eps = [scored(&[80.0, 100.0, 100.0]), scored(&[90.0, 75.0, 75.0])];
        assert!((mrsan_social_score(&eps, &vertex).unwrap() - 85.0).abs() < 1e-9);

        let half = SocialScoreWeights::new(vec![0.5, 0.5]).unwrap();
        assert!((mrsan_social_score(&[scored(&[80.0, 60.0])], &half).unwrap() - 70.0).abs() < 1e-9);
        let e = scored(&[80.0, 75.0]);
        let mut e2 = e.clone();
        e2.robots[1].reached = false;
        // robot 2 averages (75 + 0) / 2 = 37.5 over two episodes; robot 1 averages 80.
        assert!((mrsan_social_score(&[e.clone(), e2], &half).unwrap() - 58.75).abs() < 1e-9);
        let two = [scored(&[80.0, 75.0]), scored(&[80.0, 75.0])];
        assert!((mrsan_social_score(&two, &half).unwrap() - 77.5).abs() < 1e-9);

        assert!(mrsan_social_score(&[e], &eq).is_err());
    }

    proptest! {
        #[test]
        fn mrsan_is_bounded_and_linear(
            a in prop::collection::vec(51.0f64..100.0, 3),
            b in prop::collection::vec(51.0f64..100.0, 3),
            w1 in prop::collection::vec(0.0f64..1.0, 3),
            w2 in prop::collection::vec(0.0f64..1.0, 3),
            lambda in 0.0f64..1.0,
        ) {
            let eps = [scored(&a), scored(&b)];
            let norm = |w: &[f64]| {
                let s: f64 = w.iter().sum::<f64>() + 1e-3;
                let mut v: Vec<f64> = w.iter().map(|x| (x + 1e-3 / 3.0) / s).collect();
                let total: f64 = v.iter().sum();
                v[0] += 1.0 - total;
                v[0] = v[0].max(0.0);
                v
            };
            let (u, v) = (norm(&w1), norm(&w2));
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let f = |w: Vec<f64>| mrsan_social_score(&eps, &SocialScoreWeights::new(w).unwrap()).unwrap();
            let (fu, fv, fm) = (f(u), f(v), f(mix));
            prop_assert!((fm - (lambda * fu + (1.0 - lambda) * fv)).abs() < 1e-9);
            let means: Vec<f64> = (0..3).map(|i| 0.5 * (a[i] + b[i])).collect();
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fm >= lo - 1e-9 && fm <= hi + 1e-9);
        }
    }
}

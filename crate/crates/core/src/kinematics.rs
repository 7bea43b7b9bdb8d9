//! Non-uniform linear motion with in-place rotation, and the actuation
//! constraints applied to raw robot commands.

use serde::{Deserialize, Serialize};

use crate::scenario::{wrap_angle, KinematicLimits, PublicState};

/// Below this speed a robot may rotate without regard to its turning radius.
pub const TURN_RADIUS_SPEED_FLOOR: f64 = 1e-6;

const TURN_BISECTION_ITERS: usize = 60;

/// One per-step robot command: planar acceleration plus commanded heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalAction {
    pub ax: f64,
    pub ay: f64,
    pub theta: f64,
}

impl LocalAction {
    pub fn new(ax: f64, ay: f64, theta: f64) -> Self {
        Self { ax, ay, theta }
    }

    pub fn accel_norm(&self) -> f64 {
        self.ax.hypot(self.ay)
    }
}

/// Clamps a raw command against the acceleration cap, the per-step rotation
/// cap and the turning-radius rule `speed_next * dt / |dtheta| >= r_min`.
///
/// `speed_next` is taken as given; [`clamp_for_state`] resolves it against
/// the motion the clamped command actually produces.
pub fn clamp_action(
    raw: LocalAction,
    prev_theta: f64,
    speed_next: f64,
    dt: f64,
    limits: &KinematicLimits,
) -> LocalAction {
    let (ax, ay) = clamp_accel(raw.ax, raw.ay, limits.a_max);
    let mut dtheta = clamp_rotation(raw.theta, prev_theta, limits.dtheta_max);
    if speed_next >= TURN_RADIUS_SPEED_FLOOR {
        let max_turn = speed_next * dt / limits.r_min;
        dtheta = dtheta.clamp(-max_turn, max_turn);
    }
    LocalAction {
        ax,
        ay,
        theta: wrap_angle(prev_theta + dtheta),
    }
}

/// Clamps a raw command for a robot in `state` heading `theta`.
///
/// The turning-radius bound depends on the speed after the step, which in
/// turn depends on the heading chosen. The largest feasible turn toward the
/// requested heading is found by bisection, so the returned command always
/// satisfies the constraint against the speed [`integrate`] will produce.
/// The constraint is waived while the robot is (numerically) at rest.
pub fn clamp_for_state(
    raw: LocalAction,
    state: &PublicState,
    theta: f64,
    dt: f64,
    limits: &KinematicLimits,
) -> LocalAction {
    let (ax, ay) = clamp_accel(raw.ax, raw.ay, limits.a_max);
    let requested = clamp_rotation(raw.theta, theta, limits.dtheta_max);
    let speed = state.speed();
    if speed < TURN_RADIUS_SPEED_FLOOR || requested == 0.0 {
        return LocalAction {
            ax,
            ay,
            theta: wrap_angle(theta + requested),
        };
    }
    let next_speed = |turn: f64| {
        let heading = theta + turn;
        let vx = speed * heading.cos() + ax * dt;
        let vy = speed * heading.sin() + ay * dt;
        vx.hypot(vy).min(limits.v_max)
    };
    let feasible = |turn: f64| next_speed(turn) * dt >= turn.abs() * limits.r_min;

    let turn = if feasible(requested) {
        requested
    } else {
        // lo stays feasible (turn = 0 always is), hi stays infeasible.
        let (mut lo, mut hi) = (0.0, requested);
        for _ in 0..TURN_BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    LocalAction {
        ax,
        ay,
        theta: wrap_angle(theta + turn),
    }
}

fn clamp_accel(ax: f64, ay: f64, a_max: f64) -> (f64, f64) {
    let norm = ax.hypot(ay);
    if norm > a_max {
        let s = a_max / norm;
        (ax * s, ay * s)
    } else {
        (ax, ay)
    }
}

fn clamp_rotation(target: f64, prev: f64, dtheta_max: f64) -> f64 {
    wrap_angle(target - prev).clamp(-dtheta_max, dtheta_max)
}

/// Advances a robot one step under an already-clamped command: rotate the
/// velocity in place to the commanded heading, then apply the acceleration.
/// Returns the new public state and heading.
pub fn integrate(
    state: &PublicState,
    action: &LocalAction,
    dt: f64,
    v_max: f64,
) -> (PublicState, f64) {
    let (vx, vy) = rotate_velocity(state, action.theta);
    let px = state.px + vx * dt + 0.5 * action.ax * dt * dt;
    let py = state.py + vy * dt + 0.5 * action.ay * dt * dt;
    let mut nvx = vx + action.ax * dt;
    let mut nvy = vy + action.ay * dt;
    let speed = nvx.hypot(nvy);
    if speed > v_max {
        let s = v_max / speed;
        nvx *= s;
        nvy *= s;
    }
    (
        PublicState {
            px,
            py,
            vx: nvx,
            vy: nvy,
            rho: state.rho,
        },
        action.theta,
    )
}

/// In-place rotation: keeps the speed, points the velocity along `theta`.
pub fn rotate_velocity(state: &PublicState, theta: f64) -> (f64, f64) {
    let speed = state.speed();
    (speed * theta.cos(), speed * theta.sin())
}

/// First-order holonomic motion used for pedestrians.
pub fn integrate_human(
    state: &PublicState,
    target_velocity: [f64; 2],
    v_pref: f64,
    dt: f64,
) -> PublicState {
    let [mut vx, mut vy] = target_velocity;
    let speed = vx.hypot(vy);
    if speed > v_pref {
        let s = v_pref / speed;
        vx *= s;
        vy *= s;
    }
    PublicState {
        px: state.px + vx * dt,
        py: state.py + vy * dt,
        vx,
        vy,
        rho: state.rho,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn at_rest() -> PublicState {
        PublicState {
            px: 0.0,
            py: 0.0,
            vx: 0.0,
            vy: 0.0,
            rho: 0.3,
        }
    }

    #[test]
    fn acceleration_rescaled_to_cap() {
        let limits = KinematicLimits::default();
        let a = clamp_action(LocalAction::new(6.0, 0.0, 0.0), 0.0, 1.0, 0.25, &limits);
        assert!((a.ax - 5.0).abs() < 1e-12);
        assert_eq!(a.ay, 0.0);
    }

    #[test]
    fn unchanged_heading_passes_through() {
        let limits = KinematicLimits::default();
        let a = clamp_action(LocalAction::new(0.0, 0.0, 0.7), 0.7, 1.0, 0.25, &limits);
        assert_eq!(a.theta, 0.7);
    }

    #[test]
    fn rotation_clipped_to_step_cap() {
        let limits = KinematicLimits::default();
        // speed_next = 0 waives the turning radius so only the step cap applies.
        let a = clamp_action(
            LocalAction::new(0.0, 0.0, PI / 2.0),
            0.0,
            0.0,
            0.25,
            &limits,
        );
        assert!((a.theta - PI / 12.0).abs() < 1e-12);
        let a = clamp_action(
            LocalAction::new(0.0, 0.0, -PI / 2.0),
            0.0,
            0.0,
            0.25,
            &limits,
        );
        assert!((a.theta + PI / 12.0).abs() < 1e-12);
    }

    #[test]
    fn turning_radius_limits_slow_turns() {
        let limits = KinematicLimits::default();
        // 0.4 m/s for 0.25 s allows at most 0.1 rad with r_min = 1.
        let a = clamp_action(LocalAction::new(0.0, 0.0, 0.2), 0.0, 0.4, 0.25, &limits);
        assert!((a.theta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rotation_wraps_across_pi() {
        let limits = KinematicLimits::default();
        let a = clamp_action(
            LocalAction::new(0.0, 0.0, -PI + 0.1),
            PI - 0.1,
            0.0,
            0.25,
            &limits,
        );
        assert!((wrap_angle(a.theta - (-PI + 0.1))).abs() < 1e-12);
    }

    #[test]
    fn stationary_robot_may_turn_up_to_step_cap() {
        let limits = KinematicLimits::default();
        let a = clamp_for_state(
            LocalAction::new(0.0, 0.0, 1.0),
            &at_rest(),
            0.0,
            0.25,
            &limits,
        );
        assert!((a.theta - PI / 12.0).abs() < 1e-12);
    }

    #[test]
    fn integrate_from_rest() {
        let (s, th) = integrate(&at_rest(), &LocalAction::new(1.0, 0.0, 0.0), 0.25, 2.0);
        assert!((s.vx - 0.25).abs() < 1e-15 && s.vy == 0.0);
        assert!((s.px - 0.03125).abs() < 1e-15 && s.py == 0.0);
        assert_eq!(th, 0.0);
    }

    #[test]
    fn uniform_motion() {
        let st = PublicState {
            vx: 1.0,
            ..at_rest()
        };
        let (s, _) = integrate(&st, &LocalAction::new(0.0, 0.0, 0.0), 0.25, 2.0);
        assert_eq!((s.vx, s.vy), (1.0, 0.0));
        assert_eq!((s.px, s.py), (0.25, 0.0));
    }

    #[test]
    fn in_place_rotation_preserves_speed() {
        let st = PublicState {
            vx: 1.0,
            ..at_rest()
        };
        let (s, th) = integrate(&st, &LocalAction::new(0.0, 0.0, PI / 2.0), 0.25, 2.0);
        assert!(s.vx.abs() < 1e-15 && (s.vy - 1.0).abs() < 1e-15);
        assert_eq!(th, PI / 2.0);
    }

    #[test]
    fn speed_cap_applies() {
        let st = PublicState {
            vx: 1.9,
            ..at_rest()
        };
        let (s, _) = integrate(&st, &LocalAction::new(5.0, 0.0, 0.0), 0.25, 2.0);
        assert!((s.speed() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn human_motion() {
        let st = at_rest();
        let s = integrate_human(&st, [1.0, 0.0], 1.0, 0.25);
        assert_eq!((s.px, s.vx), (0.25, 1.0));
        let s = integrate_human(&st, [3.0, 0.0], 1.0, 0.25);
        assert_eq!((s.vx, s.vy), (1.0, 0.0));
        let s = integrate_human(&st, [0.0, 0.0], 1.0, 0.25);
        assert_eq!((s.px, s.py), (0.0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn rotation_keeps_speed(vx in -3.0f64..3.0, vy in -3.0f64..3.0, th in -4.0f64..4.0) {
            let st = PublicState { vx, vy, ..at_rest() };
            let (rx, ry) = rotate_velocity(&st, th);
            proptest::prop_assert!((rx.hypot(ry) - st.speed()).abs() < 1e-12);
        }
    }
}

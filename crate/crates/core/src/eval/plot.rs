use std::fmt::Write as _;
use std::path::Path;

use crate::env::EpisodeStatus;
use crate::episode_log::EpisodeTrace;
use crate::error::{Error, Result};

const PX_PER_M: f64 = 40.0;
const MARGIN_M: f64 = 1.0;

fn colour(id: usize, n_robots: usize, n_humans: usize) -> String {
    if id < n_robots {
        format!("hsl({},75%,40%)", id * 360 / n_robots.max(1))
    } else {
        let k = id - n_robots;
        format!(
            "hsl({},20%,{}%)",
            k * 360 / n_humans.max(1),
            55 + (k % 3) * 8
        )
    }
}

/// Trajectories of every agent as an SVG document: one polyline per agent,
/// robot goals as squares, final positions as discs and a red marker where a
/// robot collided.
pub fn render_svg(trace: &EpisodeTrace) -> String {
    let n_agents = trace.n_agents();
    let n_robots = trace.n_robots();
    let paths: Vec<Vec<[f64; 2]>> = (0..n_agents).map(|i| trace.trajectory(i)).collect();
    let goals: Vec<[f64; 2]> = trace.reset.agents[..n_robots]
        .iter()
        .map(|a| [a.private.gx, a.private.gy])
        .collect();

    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in paths.iter().flatten().chain(&goals) {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    x0 -= MARGIN_M;
    y0 -= MARGIN_M;
    x1 += MARGIN_M;
    y1 += MARGIN_M;
    let (w, h) = ((x1 - x0) * PX_PER_M, (y1 - y0) * PX_PER_M);
    let sx = |x: f64| (x - x0) * PX_PER_M;
    let sy = |y: f64| (y1 - y) * PX_PER_M;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1}" height="{h:.1}" viewBox="0 0 {w:.1} {h:.1}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, path) in paths.iter().enumerate() {
        let kind = if i < n_robots { "robot" } else { "human" };
        let c = colour(i, n_robots, n_agents - n_robots);
        let pts: Vec<String> = path
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
            .collect();
        let width = if i < n_robots { 2.5 } else { 1.5 };
        let _ = writeln!(
            svg,
            r#"<polyline class="{kind}" data-agent="{i}" fill="none" stroke="{c}" stroke-width="{width}" points="{}"/>"#,
            pts.join(" ")
        );
        let last = path.last().expect("trajectory has the reset point");
        let r = trace.reset.agents[i].public.rho * PX_PER_M;
        let _ = writeln!(
            svg,
            r#"<circle class="{kind}-final" cx="{:.2}" cy="{:.2}" r="{r:.2}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
            sx(last[0]),
            sy(last[1])
        );
    }
    for (i, g) in goals.iter().enumerate() {
        let c = colour(i, n_robots, n_agents - n_robots);
        let s = 8.0;
        let _ = writeln!(
            svg,
            r#"<rect class="goal" x="{:.2}" y="{:.2}" width="{s}" height="{s}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            sx(g[0]) - s / 2.0,
            sy(g[1]) - s / 2.0
        );
    }
    if let Some(last) = trace
        .steps
        .last()
        .filter(|s| s.status == EpisodeStatus::Collision)
    {
        for i in (0..n_robots).filter(|i| last.collided[*i]) {
            let p = &last.states[i];
            let _ = writeln!(
                svg,
                r#"<circle class="collision" cx="{:.2}" cy="{:.2}" r="10" fill="none" stroke="red" stroke-width="3"/>"#,
                sx(p.px),
                sy(p.py)
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="8" y="18" font-family="monospace" font-size="14">seed {}, {:?}, {} steps</text>"#,
        trace.reset.seed,
        trace.status(),
        trace.steps.len()
    );
    svg.push_str("</svg>\n");
    svg
}

/// Reads a JSONL episode log and writes its SVG rendering to `out`.
pub fn plot_episode(log: &Path, out: &Path) -> Result<()> {
    let trace = EpisodeTrace::load(log)?;
    std::fs::write(out, render_svg(&trace)).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;
    use crate::kinematics::LocalAction;
    use crate::scenario::ScenarioConfig;

    fn run(cfg: &ScenarioConfig, seed: u64, action: LocalAction) -> EpisodeTrace {
        let (mut world, _) = reset(cfg, seed).unwrap();
        let mut trace = EpisodeTrace::start(&world, seed);
        while !world.status.is_terminal() {
            let res = world.step(&vec![action; cfg.n_robots]).unwrap();
            trace.record(&world, &res);
        }
        trace
    }

    fn count(svg: &str, needle: &str) -> usize {
        svg.matches(needle).count()
    }

    #[test]
    fn one_polyline_per_agent() {
        let cfg = ScenarioConfig {
            n_robots: 3,
            n_humans: 10,
            t_k_max: 3,
            ..Default::default()
        };
        let svg = render_svg(&run(&cfg, 2, LocalAction::new(0.0, 0.0, 0.0)));
        assert_eq!(count(&svg, "<polyline"), 13);
        assert_eq!(count(&svg, r#"class="robot""#), 3);
        assert_eq!(count(&svg, r#"class="goal""#), 3);
        let strokes: std::collections::HashSet<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| l.split("stroke=\"").nth(1).unwrap())
            .collect();
        assert_eq!(strokes.len(), 13);
    }

    #[test]
    fn empty_crowd_draws_robot_only() {
        let cfg = ScenarioConfig {
            n_robots: 1,
            n_humans: 0,
            t_k_max: 2,
            ..Default::default()
        };
        let svg = render_svg(&run(&cfg, 4, LocalAction::new(1.0, 0.0, 0.0)));
        assert_eq!(count(&svg, "<polyline"), 1);
        assert_eq!(count(&svg, r#"class="human""#), 0);
        assert_eq!(count(&svg, r#"class="collision""#), 0);
    }

    #[test]
    fn collision_is_marked() {
        use crate::scenario::{AgentKind, AgentState, PrivateState, PublicState};
        let cfg = ScenarioConfig {
            n_robots: 1,
            n_humans: 1,
            ..Default::default()
        };
        let agent = |id, kind, px: f64, gx: f64| AgentState {
            id,
            kind,
            public: PublicState {
                px,
                py: 0.0,
                vx: 0.0,
                vy: 0.0,
                rho: 0.3,
            },
            private: PrivateState {
                gx,
                gy: 0.0,
                v_pref: 1.0,
                theta: 0.0,
            },
        };
        let agents = vec![
            agent(0, AgentKind::Robot, -1.0, 4.0),
            agent(1, AgentKind::Human, 1.0, -4.0),
        ];
        let mut world = crate::env::World::from_agents(cfg, Default::default(), agents).unwrap();
        let mut trace = EpisodeTrace::start(&world, 0);
        while !world.status.is_terminal() {
            let res = world.step(&[LocalAction::new(5.0, 0.0, 0.0)]).unwrap();
            trace.record(&world, &res);
        }
        assert_eq!(trace.status(), EpisodeStatus::Collision);
        assert_eq!(count(&render_svg(&trace), r#"class="collision""#), 1);
    }
}

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

/// Generalized advantage estimation over one trajectory.
///
/// `dones[t]` cuts the trajectory after transition `t`; `bootstrap` is the
/// value of the state after the last transition (ignored if that one is
/// terminal). Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
    dones: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let discounts = vec![gamma; rewards.len()];
    gae_discounted(rewards, values, bootstrap, &discounts, lambda, dones)
}

/// [`gae`] with a per-transition discount, for transitions of varying
/// duration (a macro step of `k` primitive steps discounts by `gamma^k`).
pub fn gae_discounted(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    discounts: &[f64],
    lambda: f64,
    dones: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Usage("gae needs at least one transition".into()));
    }
    if values.len() != n || dones.len() != n || discounts.len() != n {
        return Err(Error::Usage(format!(
            "gae length mismatch: {n} rewards, {} values, {} dones, {} discounts",
            values.len(),
            dones.len(),
            discounts.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discounts[t] * next_value * live - values[t];
        next_adv = delta + discounts[t] * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Zero mean, unit variance (left centered only when the spread vanishes).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if std > 1e-8 {
            *x /= std;
        }
    }
}

fn column(g: &mut Graph, xs: &[f64]) -> Var {
    g.input(Tensor::from_vec([xs.len(), 1, 1], xs.to_vec()))
}

/// Clipped surrogate: `mean(-min(r A, clip(r, 1-eps, 1+eps) A)) - kappa * entropy`
/// with `r = exp(new_logp - old_logp)`. `new_logp` is `[n, 1, 1]`, `entropy`
/// a scalar node.
pub fn actor_loss(
    g: &mut Graph,
    new_logp: Var,
    old_logp: &[f64],
    advantages: &[f64],
    entropy: Var,
    clip: f64,
    kappa: f64,
) -> Var {
    let old = column(g, old_logp);
    let adv = column(g, advantages);
    let diff = g.sub(new_logp, old);
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv);
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = g.mul(clipped, adv);
    let surr = g.min(s1, s2);
    let m = g.mean(surr);
    let ent = g.scale(entropy, kappa);
    let l = g.neg(m);
    g.sub(l, ent)
}

/// `mean(max((V - R)^2, (clip(V, V_old - eps, V_old + eps) - R)^2))`.
pub fn critic_loss(
    g: &mut Graph,
    values: Var,
    old_values: &[f64],
    returns: &[f64],
    value_clip: f64,
) -> Var {
    let old = column(g, old_values);
    let ret = column(g, returns);
    let e1 = g.sub(values, ret);
    let e1 = g.square(e1);
    let delta = g.sub(values, old);
    let delta = g.clamp(delta, -value_clip, value_clip);
    let clipped = g.add(old, delta);
    let e2 = g.sub(clipped, ret);
    let e2 = g.square(e2);
    let worst = g.max(e1, e2);
    g.mean(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use proptest::prelude::*;

    /// Explicit lambda-weighted mix of k-step advantages for a trajectory
    /// without interior terminals.
    fn oracle(
        r: &[f64],
        v: &[f64],
        boot: f64,
        gamma: f64,
        lambda: f64,
        last_done: bool,
    ) -> Vec<f64> {
        let n = r.len();
        let value_at = |k: usize| {
            if k < n {
                v[k]
            } else if last_done {
                0.0
            } else {
                boot
            }
        };
        (0..n)
            .map(|t| {
                let horizon = n - t;
                let k_step = |k: usize| {
                    let mut g = 0.0;
                    for j in 0..k {
                        g += gamma.powi(j as i32) * r[t + j];
                    }
                    g + gamma.powi(k as i32) * value_at(t + k) - v[t]
                };
                let mut a = 0.0;
                for k in 1..horizon {
                    a += (1.0 - lambda) * lambda.powi(k as i32 - 1) * k_step(k);
                }
                a + lambda.powi(horizon as i32 - 1) * k_step(horizon)
            })
            .collect()
    }

    #[test]
    fn lambda_zero_is_td() {
        let (a, _) = gae(&[1.0, 2.0], &[0.5, 0.3], 0.7, 0.9, 0.0, &[false, false]).unwrap();
        assert!((a[0] - (1.0 + 0.9 * 0.3 - 0.5)).abs() < 1e-15);
        assert!((a[1] - (2.0 + 0.9 * 0.7 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn lambda_one_is_suffix_sum() {
        let (a, ret) = gae(
            &[1.0, 2.0, 3.0],
            &[0.0; 3],
            0.0,
            1.0,
            1.0,
            &[false, false, true],
        )
        .unwrap();
        assert_eq!(a, vec![6.0, 5.0, 3.0]);
        assert_eq!(ret, a);
    }

    #[test]
    fn small_example_matches_oracle() {
        let (a, _) = gae(&[1.0, 0.5], &[0.2, 0.1], 0.0, 0.9, 0.8, &[false, false]).unwrap();
        let o = oracle(&[1.0, 0.5], &[0.2, 0.1], 0.0, 0.9, 0.8, false);
        for (x, y) in a.iter().zip(&o) {
            assert!((x - y).abs() < 1e-9);
        }
        // Hand evaluation: delta1 = 0.4, delta0 = 0.89, A0 = 0.89 + 0.72 * 0.4.
        assert!((a[1] - 0.4).abs() < 1e-12);
        assert!((a[0] - 1.178).abs() < 1e-12);
    }

    #[test]
    fn interior_terminal_cuts() {
        let (a, _) = gae(&[1.0, 1.0], &[0.5, 0.5], 9.0, 0.9, 0.95, &[true, false]).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors_on_empty_or_ragged() {
        assert!(matches!(
            gae(&[], &[], 0.0, 0.9, 0.9, &[]),
            Err(Error::Usage(_))
        ));
        assert!(gae(&[1.0], &[], 0.0, 0.9, 0.9, &[false]).is_err());
    }

    proptest! {
        #[test]
        fn gae_matches_oracle(
            r in prop::collection::vec(-5.0f64..5.0, 10),
            v in prop::collection::vec(-5.0f64..5.0, 10),
            boot in -5.0f64..5.0,
            gamma in 0.0f64..1.0,
            lambda in 0.0f64..1.0,
            last_done: bool,
        ) {
            let mut dones = vec![false; 10];
            dones[9] = last_done;
            let (a, ret) = gae(&r, &v, boot, gamma, lambda, &dones).unwrap();
            let o = oracle(&r, &v, boot, gamma, lambda, last_done);
            for t in 0..10 {
                prop_assert!((a[t] - o[t]).abs() < 1e-9);
                prop_assert!((ret[t] - a[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    fn eval_actor(new: &[f64], old: &[f64], adv: &[f64], ent: f64, clip: f64, kappa: f64) -> f64 {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let nl = column(&mut g, new);
        let e = g.constant(ent);
        let l = actor_loss(&mut g, nl, old, adv, e, clip, kappa);
        g.value(l).item()
    }

    #[test]
    fn actor_loss_clips_large_ratio() {
        let l = eval_actor(&[2f64.ln()], &[0.0], &[1.5], 0.0, 0.2, 0.0);
        assert!((l + 1.2 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn actor_loss_zero_advantage_is_entropy_only() {
        let l = eval_actor(&[0.3, -0.2], &[0.1, 0.1], &[0.0, 0.0], 1.7, 0.2, 0.01);
        assert!((l + 0.017).abs() < 1e-15);
    }

    #[test]
    fn ratio_one_gives_policy_gradient() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let nl = g.variable(Tensor::from_vec([2, 1, 1], vec![0.4, -0.1]));
        let e = g.constant(0.0);
        let l = actor_loss(&mut g, nl, &[0.4, -0.1], &[1.0, -2.0], e, 0.2, 0.0);
        let grads = g.backward(l);
        let d = &grads.of(nl).unwrap().data;
        assert!((d[0] + 0.5).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn actor_loss_shift_invariant(
            new in prop::collection::vec(-1.0f64..1.0, 5),
            old in prop::collection::vec(-1.0f64..1.0, 5),
            adv in prop::collection::vec(-2.0f64..2.0, 5),
            c in -50.0f64..50.0,
        ) {
            let a = eval_actor(&new, &old, &adv, 0.5, 0.2, 0.01);
            let ns: Vec<f64> = new.iter().map(|x| x + c).collect();
            let os: Vec<f64> = old.iter().map(|x| x + c).collect();
            let b = eval_actor(&ns, &os, &adv, 0.5, 0.2, 0.01);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn unclipped_gradient_is_importance_weighted(
            old in prop::collection::vec(-1.0f64..1.0, 4),
            shift in prop::collection::vec(-0.15f64..0.15, 4),
            adv in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let new: Vec<f64> = old.iter().zip(&shift).map(|(o, s)| o + s).collect();
            let store = ParamStore::default();
            let mut g = Graph::new(&store);
            let nl = g.variable(Tensor::from_vec([4, 1, 1], new.clone()));
            let e = g.constant(0.0);
            let l = actor_loss(&mut g, nl, &old, &adv, e, 0.2, 0.0);
            let grads = g.backward(l);
            let d = &grads.of(nl).unwrap().data;
            for k in 0..4 {
                let expect = -(new[k] - old[k]).exp() * adv[k] / 4.0;
                prop_assert!((d[k] - expect).abs() < 1e-9);
            }
        }
    }

    fn eval_critic(v: &[f64], old: &[f64], ret: &[f64], clip: f64) -> f64 {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let vv = column(&mut g, v);
        let l = critic_loss(&mut g, vv, old, ret, clip);
        g.value(l).item()
    }

    #[test]
    fn critic_loss_cases() {
        assert_eq!(eval_critic(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 0.2), 0.0);
        // V = 2, V_old = 0, R = 1: unclipped 1, clipped (0.2 - 1)^2 = 0.64 -> max 1.
        assert!((eval_critic(&[2.0], &[0.0], &[1.0], 0.2) - 1.0).abs() < 1e-12);
        // V = 2, V_old = 0, R = 3: unclipped 1, clipped 2.8^2 = 7.84 -> clipped branch.
        assert!((eval_critic(&[2.0], &[0.0], &[3.0], 0.2) - 7.84).abs() < 1e-12);
        let mse = (0.25f64 + 4.0) / 2.0;
        assert!((eval_critic(&[0.5, 3.0], &[-9.0, 9.0], &[0.0, 1.0], 1e9) - mse).abs() < 1e-12);
    }

    #[test]
    fn normalize_moments() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut x);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let mut c = vec![2.0, 2.0];
        normalize(&mut c);
        assert_eq!(c, vec![0.0, 0.0]);
    }
}

//! Helpers shared by the integration tests: random radial models and a
//! power flow written directly in complex phasors, independent of the
//! branch-flow solver in the library.

#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64 as C;
use rand::Rng;
use rollout_core::NetworkModel;

/// Parents before children.
pub fn top_down_order(parent: &[Option<usize>]) -> Vec<usize> {
    let n = parent.len();
    let mut children = vec![Vec::new(); n];
    let mut stack = Vec::new();
    for (k, p) in parent.iter().enumerate() {
        match p {
            Some(p) => children[*p].push(k),
            None => stack.push(k),
        }
    }
    let mut order = Vec::with_capacity(n);
    while let Some(k) = stack.pop() {
        order.push(k);
        stack.extend(children[k].iter().copied());
    }
    order
}

/// Squared voltages and squared line currents for net injections `p + jq`,
/// by current-summation sweeps on bus phasors. `None` if the sweep does not
/// settle.
pub fn phasor_power_flow(model: &NetworkModel, p: &[f64], q: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = model.n();
    let order = top_down_order(&model.parent);
    let v0 = C::new(model.v0_sq.sqrt(), 0.0);
    let mut v = vec![v0; n];
    let mut line = vec![C::new(0.0, 0.0); n];
    for _ in 0..1000 {
        // bus load currents, then line currents from the leaves up
        line.iter_mut().enumerate().for_each(|(k, i)| {
            *i = (C::new(-p[k], -q[k]) / v[k]).conj();
        });
        for &k in order.iter().rev() {
            if let Some(a) = model.parent[k] {
                let i = line[k];
                line[a] += i;
            }
        }
        let mut change: f64 = 0.0;
        for &k in &order {
            let up = model.parent[k].map_or(v0, |a| v[a]);
            let next = up - C::new(model.r[k], model.x[k]) * line[k];
            change = change.max((next - v[k]).norm());
            v[k] = next;
        }
        if !v.iter().all(|z| z.norm_sqr().is_finite() && z.norm_sqr() > 1e-6) {
            return None;
        }
        if change < 1e-14 {
            return Some((
                v.iter().map(|z| z.norm_sqr()).collect(),
                line.iter().map(|i| i.norm_sqr()).collect(),
            ));
        }
    }
    None
}

/// Knobs for [`random_model`].
#[derive(Debug, Clone, Copy)]
pub struct RandomModel {
    pub impedance: (f64, f64),
    pub p_load: (f64, f64),
    pub q_load: (f64, f64),
    pub rating: (f64, f64),
    /// Probability that a bus has zero rating.
    pub zero_rating: f64,
}

impl Default for RandomModel {
    fn default() -> Self {
        RandomModel {
            impedance: (0.005, 0.05),
            p_load: (0.0, 0.1),
            q_load: (-0.02, 0.05),
            rating: (0.0, 0.1),
            zero_rating: 0.1,
        }
    }
}

/// Random tree with `parent[k] < k`, several buses possibly on the slack,
/// loose limits and nominal set points inside each half-disk.
pub fn random_model<R: Rng>(rng: &mut R, n: usize, spec: RandomModel) -> NetworkModel {
    let mut u = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let mut parent = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut p_load = Vec::with_capacity(n);
    let mut q_load = Vec::with_capacity(n);
    let mut rating = Vec::with_capacity(n);
    let mut p_gen = Vec::with_capacity(n);
    let mut q_gen = Vec::with_capacity(n);
    for k in 0..n {
        let pick = u((0.0, 1.0));
        parent.push(if k == 0 || pick < 0.15 {
            None
        } else {
            Some(((pick * k as f64) as usize).min(k - 1))
        });
        r.push(u(spec.impedance));
        x.push(u(spec.impedance));
        p_load.push(u(spec.p_load));
        q_load.push(u(spec.q_load));
        let c = if u((0.0, 1.0)) < spec.zero_rating {
            0.0
        } else {
            u(spec.rating)
        };
        rating.push(c);
        let (a, rad) = (u((-FRAC_PI_2, FRAC_PI_2)), c * u((0.0, 1.0)));
        p_gen.push((rad * a.cos()).max(0.0));
        q_gen.push(rad * a.sin());
    }
    NetworkModel {
        ids: (1..=n as u64).collect(),
        slack_id: 0,
        parent,
        r,
        x,
        v0_sq: 1.0,
        p_load,
        q_load,
        p_gen,
        q_gen,
        rating,
        v_sq_min: vec![0.5; n],
        v_sq_max: vec![2.0; n],
        i_sq_max: vec![100.0; n],
        fault_clearing_time: 1.0,
        base_mva: 1.0,
        base_kv: 12.47,
    }
}

/// A point of the half-disk `{p >= 0, p^2 + q^2 <= c^2}`: an extreme point,
/// a boundary point or an interior point.
pub fn half_disk_sample<R: Rng>(rng: &mut R, c: f64, load: (f64, f64)) -> (f64, f64) {
    let a = rng.gen_range(-FRAC_PI_2..=FRAC_PI_2);
    let (p, q) = match rng.gen_range(0..7) {
        0 => (0.0, c),
        1 => (0.0, -c),
        2 => (c, 0.0),
        3 => (0.0, 0.0),
        4 => {
            // direction of the local load, reflected into p >= 0
            let t = if load.0 == 0.0 {
                FRAC_PI_2.copysign(load.1)
            } else {
                (load.1 / load.0).atan()
            };
            (c * t.cos(), c * t.sin())
        }
        5 => (c * a.cos(), c * a.sin()),
        _ => {
            let rad = c * rng.gen::<f64>().sqrt();
            (rad * a.cos(), rad * a.sin())
        }
    };
    (p.max(0.0), q)
}

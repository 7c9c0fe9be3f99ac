//! Universal squared-voltage lower bound and squared-current upper bound.
//!
//! The bounds come from a fixed-point iteration on
//!
//! ```text
//! v <- sqrt(nu0 1 - 2 R p^L - 2 X (q^L + C) + M i^2)
//! i <- (S_bar + |(D - I) diag(z) i^2|) / v
//! ```
//!
//! where `S_bar` is the largest aggregated apparent power a subtree can see
//! when every inverter may inject anything in its half-disk
//! `{p >= 0, |p + jq| <= C}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{DerivedTopology, NetworkModel};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error(
        "voltage lower bound collapsed at bus index {bus} in iteration {iteration} \
         (radicand {radicand:e}); the instance cannot be scheduled with these bounds"
    )]
    Collapse {
        bus: usize,
        iteration: usize,
        radicand: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Angle used by the half-disk maximization: `atan(b / a)`, which lies in
/// `[-pi/2, pi/2]` so `r e^{j theta}` stays on the half-disk boundary. For
/// `a = 0` this is `+-pi/2` by the sign of `b`, and `0` when `a = b = 0`.
pub fn half_disk_angle(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else if a == 0.0 {
        std::f64::consts::FRAC_PI_2.copysign(b)
    } else {
        (b / a).atan()
    }
}

/// `max |(a + jb) - (p + jq)|` over the half-disk `p >= 0, |p + jq| <= r`.
///
/// The maximizer lies on the arc, at one of its endpoints `+-jr` or at the
/// single stationary point `r e^{j theta}`.
pub fn half_disk_max_distance(a: f64, b: f64, r: f64) -> f64 {
    debug_assert!(r >= 0.0);
    if r == 0.0 {
        return a.hypot(b);
    }
    let theta = half_disk_angle(a, b);
    let top = a.hypot(b + r);
    let bottom = a.hypot(b - r);
    let stationary = (a - r * theta.cos()).hypot(b - r * theta.sin());
    top.max(bottom).max(stationary)
}

/// Per-subtree aggregates with every bus failed: `a = D p^L`, `b = D q^L`,
/// `r = D C`, the half-disk angle and `S_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseAggregates {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub r_cap: Vec<f64>,
    pub theta: Vec<f64>,
    pub s_bar: Vec<f64>,
}

pub fn aggregate_worst_apparent(model: &NetworkModel, topo: &DerivedTopology) -> WorstCaseAggregates {
    let a = topo.subtree_sum(&model.p_load);
    let b = topo.subtree_sum(&model.q_load);
    let r_cap = topo.subtree_sum(&model.rating);
    let theta = a.iter().zip(&b).map(|(&a, &b)| half_disk_angle(a, b)).collect();
    let s_bar = (0..a.len())
        .map(|k| half_disk_max_distance(a[k], b[k], r_cap[k]))
        .collect();
    WorstCaseAggregates {
        a,
        b,
        r_cap,
        theta,
        s_bar,
    }
}

/// Largest `|D (p + jq)|_n` over all injections where the buses in `failed`
/// may move anywhere in their half-disks and the rest hold their set points.
pub fn aggregated_injection_max(model: &NetworkModel, topo: &DerivedTopology, failed: &[bool]) -> Vec<f64> {
    let n = model.n();
    let keep = |v: &[f64]| -> Vec<f64> { (0..n).map(|k| if failed[k] { 0.0 } else { v[k] }).collect() };
    let pa: Vec<f64> = model
        .p_load
        .iter()
        .zip(keep(&model.p_gen))
        .map(|(l, g)| l - g)
        .collect();
    let qb: Vec<f64> = model
        .q_load
        .iter()
        .zip(keep(&model.q_gen))
        .map(|(l, g)| l - g)
        .collect();
    let rc: Vec<f64> = (0..n).map(|k| if failed[k] { model.rating[k] } else { 0.0 }).collect();
    let a = topo.subtree_sum(&pa);
    let b = topo.subtree_sum(&qb);
    let r = topo.subtree_sum(&rc);
    (0..n).map(|k| half_disk_max_distance(a[k], b[k], r[k])).collect()
}

/// One iterate `(v^k, i^k)` of the fixed-point scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointIterate {
    pub v: Vec<f64>,
    pub i: Vec<f64>,
}

impl FixedPointIterate {
    /// `v = 1`, `i = 0`.
    pub fn flat(n: usize) -> Self {
        FixedPointIterate {
            v: vec![1.0; n],
            i: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsResult {
    /// Squared-voltage lower bound per bus.
    pub v_sq_lo: Vec<f64>,
    /// Squared-current upper bound per line.
    pub i_sq_hi: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Relative max-norm step of the last iteration.
    pub final_delta: f64,
}

impl BoundsResult {
    /// `sqrt` of the voltage bound.
    pub fn v_lo(&self) -> Vec<f64> {
        self.v_sq_lo.iter().map(|v| v.sqrt()).collect()
    }

    /// `sqrt` of the current bound.
    pub fn i_hi(&self) -> Vec<f64> {
        self.i_sq_hi.iter().map(|v| v.sqrt()).collect()
    }
}

/// Runs the fixed-point iteration from a flat start.
///
/// Stops once both the voltage and current iterates move by at most `eps`
/// relative to their max norm, or after `max_iter` iterations; in the latter
/// case the last iterate is returned with `converged = false`.
pub fn universal_bounds(
    model: &NetworkModel,
    topo: &DerivedTopology,
    eps: f64,
    max_iter: usize,
) -> Result<BoundsResult, BoundsError> {
    universal_bounds_from(
        model,
        topo,
        eps,
        max_iter,
        FixedPointIterate::flat(model.n()),
        |_, _| {},
    )
}

/// Same as [`universal_bounds`] with an explicit start; `observe` sees every
/// iterate `k >= 1` as it is produced.
pub fn universal_bounds_from<F>(
    model: &NetworkModel,
    topo: &DerivedTopology,
    eps: f64,
    max_iter: usize,
    start: FixedPointIterate,
    mut observe: F,
) -> Result<BoundsResult, BoundsError>
where
    F: FnMut(usize, &FixedPointIterate),
{
    let n = model.n();
    if !(eps > 0.0) || max_iter == 0 {
        return Err(BoundsError::InvalidArgument(
            "eps must be positive and max_iter at least 1".into(),
        ));
    }
    if start.v.len() != n || start.i.len() != n || start.v.iter().any(|&v| !(v > 0.0)) {
        return Err(BoundsError::InvalidArgument(
            "start iterate must have length n and positive voltages".into(),
        ));
    }

    let agg = aggregate_worst_apparent(model, topo);
    // nu0 1 - 2 R p^L - 2 X (q^L + C)
    let q_low: Vec<f64> = model.q_load.iter().zip(&model.rating).map(|(q, c)| q + c).collect();
    let rp = topo.r_mul(&model.p_load);
    let xq = topo.x_mul(&q_low);
    let base: Vec<f64> = (0..n).map(|k| model.v0_sq - 2.0 * rp[k] - 2.0 * xq[k]).collect();

    let mut cur = start;
    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    let mut converged = false;
    while iterations < max_iter {
        let i_sq: Vec<f64> = cur.i.iter().map(|i| i * i).collect();
        let loss = topo.m_mul(&i_sq);
        let mut v = Vec::with_capacity(n);
        for k in 0..n {
            let radicand = base[k] + loss[k];
            if !(radicand > 0.0) {
                return Err(BoundsError::Collapse {
                    bus: k,
                    iteration: iterations + 1,
                    radicand,
                });
            }
            v.push(radicand.sqrt());
        }
        let (lr, lx) = topo.strict_subtree_impedance_sum(&i_sq);
        let i: Vec<f64> = (0..n).map(|k| (agg.s_bar[k] + lr[k].hypot(lx[k])) / cur.v[k]).collect();
        let next = FixedPointIterate { v, i };
        iterations += 1;
        delta = relative_step(&cur.v, &next.v).max(relative_step(&cur.i, &next.i));
        observe(iterations, &next);
        cur = next;
        if delta <= eps {
            converged = true;
            break;
        }
    }

    Ok(BoundsResult {
        v_sq_lo: cur.v.iter().map(|v| v * v).collect(),
        i_sq_hi: cur.i.iter().map(|i| i * i).collect(),
        iterations,
        converged,
        final_delta: delta,
    })
}

fn relative_step(prev: &[f64], next: &[f64]) -> f64 {
    let step = prev.iter().zip(next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if step == 0.0 {
        return 0.0;
    }
    let scale = next.iter().map(|v| v.abs()).fold(0.0, f64::max);
    step / scale
}

//! Nonlinear DistFlow power flow for radial networks.
//!
//! With `A` the reduced line-bus incidence matrix and `pi(n)` the parent of
//! bus `n`, the solution satisfies
//!
//! ```text
//! p = A^T P + diag(r) l
//! q = A^T Q + diag(x) l
//! nu(pi(n)) - nu(n) = 2 r_n P_n + 2 x_n Q_n - (r_n^2 + x_n^2) l_n
//! l_n nu(pi(n)) = P_n^2 + Q_n^2
//! ```
//!
//! and is found by backward/forward sweeps from a flat start `l = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{DerivedTopology, NetworkModel};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Squared bus voltage magnitudes.
    pub v_sq: Vec<f64>,
    /// Squared line current magnitudes.
    pub i_sq: Vec<f64>,
    /// Sending-end active flows.
    pub p_flow: Vec<f64>,
    /// Sending-end reactive flows.
    pub q_flow: Vec<f64>,
    /// Largest absolute violation of the four DistFlow equations.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow did not converge in {iterations} iterations (residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },
    #[error("voltage collapse at bus index {bus} (squared voltage {v_sq})")]
    VoltageCollapse { bus: usize, v_sq: f64 },
    #[error("injection vectors must have length {expected}")]
    Dimension { expected: usize },
}

pub fn solve_distflow(
    model: &NetworkModel,
    topo: &DerivedTopology,
    p: &[f64],
    q: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = topo.n();
    if p.len() != n || q.len() != n {
        return Err(PowerFlowError::Dimension { expected: n });
    }
    let (r, x) = (topo.r(), topo.x());
    let v0 = model.v0_sq;

    let mut ell = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut v_sq = vec![v0; n];
    let mut residual = f64::INFINITY;

    for iteration in 1..=max_iter {
        // backward sweep: sending-end flows carry downstream load plus losses
        let pf: Vec<f64> = (0..n).map(|k| r[k] * ell[k] - p[k]).collect();
        let qf: Vec<f64> = (0..n).map(|k| x[k] * ell[k] - q[k]).collect();
        let pf = topo.subtree_sum(&pf);
        let qf = topo.subtree_sum(&qf);

        // forward sweep: voltage drops along each line, then new currents
        residual = 0.0;
        for &b in topo.preorder() {
            let up = topo.parent(b).map_or(v0, |a| v_sq[a]);
            let v = up - 2.0 * (r[b] * pf[b] + x[b] * qf[b]) + (r[b] * r[b] + x[b] * x[b]) * ell[b];
            if !(v > 0.0) {
                return Err(PowerFlowError::VoltageCollapse { bus: b, v_sq: v });
            }
            v_sq[b] = v;
            let s2 = pf[b] * pf[b] + qf[b] * qf[b];
            next[b] = s2 / up;
            residual = f64::max(residual, (ell[b] * up - s2).abs());
        }
        if !residual.is_finite() {
            return Err(PowerFlowError::Divergence {
                iterations: iteration,
                residual,
            });
        }
        if residual <= tol {
            let mut sol = PowerFlowSolution {
                v_sq,
                i_sq: ell,
                p_flow: pf,
                q_flow: qf,
                residual,
                iterations: iteration,
            };
            sol.residual = distflow_residual(model, topo, p, q, &sol);
            return Ok(sol);
        }
        std::mem::swap(&mut ell, &mut next);
    }
    Err(PowerFlowError::Divergence {
        iterations: max_iter,
        residual,
    })
}

/// Largest absolute violation of the four DistFlow equations at `sol`,
/// evaluated line by line from the incidence form.
pub fn distflow_residual(
    model: &NetworkModel,
    topo: &DerivedTopology,
    p: &[f64],
    q: &[f64],
    sol: &PowerFlowSolution,
) -> f64 {
    let n = topo.n();
    let (r, x) = (topo.r(), topo.x());
    let (pf, qf, v, l) = (&sol.p_flow, &sol.q_flow, &sol.v_sq, &sol.i_sq);
    // (A^T P)_n = sum over child lines of P - P_n
    let mut atp: Vec<f64> = pf.iter().map(|v| -v).collect();
    let mut atq: Vec<f64> = qf.iter().map(|v| -v).collect();
    for k in 0..n {
        if let Some(a) = topo.parent(k) {
            atp[a] += pf[k];
            atq[a] += qf[k];
        }
    }
    let mut worst = 0.0f64;
    for k in 0..n {
        let up = topo.parent(k).map_or(model.v0_sq, |a| v[a]);
        let ohm = up - v[k] - (2.0 * r[k] * pf[k] + 2.0 * x[k] * qf[k]) + (r[k] * r[k] + x[k] * x[k]) * l[k];
        let res = [
            p[k] - atp[k] - r[k] * l[k],
            q[k] - atq[k] - x[k] * l[k],
            ohm,
            l[k] * up - (pf[k] * pf[k] + qf[k] * qf[k]),
        ];
        for e in res {
            worst = worst.max(e.abs());
        }
    }
    worst
}

/// Grid-code margins of a power-flow solution. Nonnegative everywhere iff
/// the voltage and current limits hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCodeMargins {
    /// `nu - nu_min` per bus.
    pub v_lower: Vec<f64>,
    /// `nu_max - nu` per bus.
    pub v_upper: Vec<f64>,
    /// `min(v_lower, v_upper)` per bus.
    pub voltage: Vec<f64>,
    /// `l_max - l` per line.
    pub current: Vec<f64>,
}

impl GridCodeMargins {
    pub fn min(&self) -> f64 {
        self.voltage
            .iter()
            .chain(&self.current)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_satisfied(&self) -> bool {
        self.min() >= 0.0
    }
}

pub fn check_grid_code(sol: &PowerFlowSolution, model: &NetworkModel) -> GridCodeMargins {
    let v_lower: Vec<f64> = sol.v_sq.iter().zip(&model.v_sq_min).map(|(v, lo)| v - lo).collect();
    let v_upper: Vec<f64> = sol.v_sq.iter().zip(&model.v_sq_max).map(|(v, hi)| hi - v).collect();
    let voltage = v_lower.iter().zip(&v_upper).map(|(a, b)| a.min(*b)).collect();
    let current = sol.i_sq.iter().zip(&model.i_sq_max).map(|(l, hi)| hi - l).collect();
    GridCodeMargins {
        v_lower,
        v_upper,
        voltage,
        current,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::derive_topology;
    use crate::network::fixtures::{model, one_line};
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_injection_is_flat() {
        let m = model(vec![None, Some(0), Some(0)], vec![0.01; 3], vec![0.02; 3]);
        let t = derive_topology(&m).unwrap();
        let sol = solve_distflow(&m, &t, &[0.0; 3], &[0.0; 3], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.v_sq, vec![1.0; 3]);
        assert_eq!(sol.i_sq, vec![0.0; 3]);
        assert_eq!(sol.p_flow, vec![0.0; 3]);
        assert_eq!(sol.q_flow, vec![0.0; 3]);
    }

    /// Scalar Newton on the one-line system: l = (P^2 + Q^2) / nu0 with
    /// P = 0.1 + r l, Q = x l.
    fn one_line_newton(r: f64, x: f64, load: f64) -> (f64, f64) {
        let mut l = 0.0f64;
        for _ in 0..50 {
            let (pf, qf) = (load + r * l, x * l);
            let f = l - (pf * pf + qf * qf);
            let df = 1.0 - (2.0 * pf * r + 2.0 * qf * x);
            l -= f / df;
        }
        let (pf, qf) = (load + r * l, x * l);
        let v = 1.0 - 2.0 * r * pf - 2.0 * x * qf + (r * r + x * x) * l;
        (v, l)
    }

    #[test]
    fn one_line_matches_newton() {
        let m = one_line();
        let t = derive_topology(&m).unwrap();
        let sol = solve_distflow(&m, &t, &[-0.1], &[0.0], 1e-15, DEFAULT_MAX_ITER).unwrap();
        let (v, l) = one_line_newton(0.01, 0.01, 0.1);
        assert_abs_diff_eq!(sol.v_sq[0], v, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.i_sq[0], l, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.v_sq[0], 0.99799, epsilon = 1e-5);
        assert!(sol.residual <= 1e-15);
    }

    #[test]
    fn collapse_reported() {
        let mut m = one_line();
        m.r = vec![0.5];
        m.x = vec![0.5];
        let t = derive_topology(&m).unwrap();
        let err = solve_distflow(&m, &t, &[-5.0], &[-5.0], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap_err();
        assert!(matches!(
            err,
            PowerFlowError::VoltageCollapse { .. } | PowerFlowError::Divergence { .. }
        ));
    }

    #[test]
    fn max_iter_exhaustion_is_divergence() {
        let m = one_line();
        let t = derive_topology(&m).unwrap();
        let err = solve_distflow(&m, &t, &[-0.1], &[0.0], 1e-300, 3).unwrap_err();
        assert!(matches!(err, PowerFlowError::Divergence { iterations: 3, .. }));
    }

    #[test]
    fn margins_at_boundary_and_no_load() {
        let m = model(vec![None, Some(0)], vec![0.01; 2], vec![0.01; 2]);
        let t = derive_topology(&m).unwrap();
        let sol = solve_distflow(&m, &t, &[0.0; 2], &[0.0; 2], DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let g = check_grid_code(&sol, &m);
        assert!(g.voltage.iter().all(|&v| v >= 0.19 - 1e-12));
        assert!(g.is_satisfied());

        let mut at_min = m.clone();
        at_min.v_sq_min = vec![1.0; 2];
        at_min.v_sq_max = vec![1.5; 2];
        let g = check_grid_code(&sol, &at_min);
        assert_eq!(g.voltage, vec![0.0, 0.0]);
    }

    #[test]
    fn overloaded_line_flagged_alone() {
        // tight limit on the head line only; grow the load until it is crossed
        let mut m = model(vec![None, Some(0), Some(1)], vec![0.01; 3], vec![0.01; 3]);
        m.i_sq_max = vec![0.01, 1.0, 1.0];
        let t = derive_topology(&m).unwrap();
        let mut load = 0.01;
        let sol = loop {
            m.p_load = vec![0.0, 0.0, load];
            let (p, q) = m.nominal_injections();
            let sol = solve_distflow(&m, &t, &p, &q, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            if sol.i_sq[0] > m.i_sq_max[0] {
                break sol;
            }
            load *= 1.1;
        };
        let g = check_grid_code(&sol, &m);
        let negative: Vec<_> = (0..3).filter(|&k| g.current[k] < 0.0).collect();
        assert_eq!(negative, vec![0]);
    }
}

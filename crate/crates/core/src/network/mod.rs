//! Radial network description and the topology-derived matrices.
//!
//! Buses are indexed `0..n` internally. The slack bus has no index; a bus whose
//! parent is `None` hangs directly off the slack. Line `n` is the line entering
//! bus `n`, so lines and buses share indices.

mod case;
mod synthetic;
mod topology;

pub use case::{parse_case, BusRecord, CaseDocument};
pub use synthetic::{generate_synthetic_feeder, CurrentLimitPolicy, FeederSpec, GenerationPolicy, RatingPolicy};
pub use topology::{derive_topology, derive_topology_with, DerivedTopology, DEFAULT_DENSE_THRESHOLD};

use thiserror::Error;

/// Relative slack allowed when checking set points against inverter ratings.
const RATING_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("cycle: bus {bus} does not reach the slack bus")]
    Cycle { bus: u64 },
    #[error("line {bus}: nonpositive impedance (r = {r}, x = {x})")]
    Impedance { bus: u64, r: f64, x: f64 },
    #[error("bus {bus}: set point exceeds rating (|{p} + j{q}| > {rating})")]
    SetPointExceedsRating { bus: u64, p: f64, q: f64, rating: f64 },
    #[error("bus {bus}: negative active set point {p}")]
    NegativeGeneration { bus: u64, p: f64 },
    #[error("bus {bus}: {message}")]
    Limits { bus: u64, message: String },
    #[error("synthetic feeder generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },
}

/// Immutable radial grid: topology, impedances, loads, set points, ratings
/// and safety limits, all per unit on one system base.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    /// External bus identifiers in internal index order.
    pub ids: Vec<u64>,
    /// External identifier of the slack bus.
    pub slack_id: u64,
    pub parent: Vec<Option<usize>>,
    pub r: Vec<f64>,
    pub x: Vec<f64>,
    /// Squared slack voltage magnitude.
    pub v0_sq: f64,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    /// Inverter apparent-power ratings.
    pub rating: Vec<f64>,
    pub v_sq_min: Vec<f64>,
    pub v_sq_max: Vec<f64>,
    pub i_sq_max: Vec<f64>,
    /// Fault clearing time in seconds; only labels slot boundaries.
    pub fault_clearing_time: f64,
    pub base_mva: f64,
    pub base_kv: f64,
}

impl NetworkModel {
    pub fn n(&self) -> usize {
        self.parent.len()
    }

    /// Nominal net injections `p = p^G - p^L`, `q = q^G - q^L`.
    pub fn nominal_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.p_gen.iter().zip(&self.p_load).map(|(g, l)| g - l).collect();
        let q = self.q_gen.iter().zip(&self.q_load).map(|(g, l)| g - l).collect();
        (p, q)
    }

    /// Base current in amperes for the three-phase system base.
    pub fn base_current_amps(&self) -> f64 {
        self.base_mva * 1e3 / (3f64.sqrt() * self.base_kv)
    }

    /// Checks every model invariant: lengths, spanning tree, impedances,
    /// limits and set points against ratings.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let n = self.n();
        if n == 0 {
            return Err(field("buses", "at least one non-reference bus is required"));
        }
        if self.ids.len() != n {
            return Err(field("ids", &format!("length {} != {}", self.ids.len(), n)));
        }
        let vectors: [(&str, &Vec<f64>); 10] = [
            ("r", &self.r),
            ("x", &self.x),
            ("p_load", &self.p_load),
            ("q_load", &self.q_load),
            ("p_gen", &self.p_gen),
            ("q_gen", &self.q_gen),
            ("rating", &self.rating),
            ("v_sq_min", &self.v_sq_min),
            ("v_sq_max", &self.v_sq_max),
            ("i_sq_max", &self.i_sq_max),
        ];
        for (name, v) in vectors {
            if v.len() != n {
                return Err(field(name, &format!("length {} != {}", v.len(), n)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(field(name, "non-finite entry"));
            }
        }
        if !(self.v0_sq.is_finite() && self.v0_sq > 0.0) {
            return Err(field("v0_sq", "must be positive"));
        }
        if !(self.fault_clearing_time.is_finite() && self.fault_clearing_time > 0.0) {
            return Err(field("fault_clearing_time", "must be positive"));
        }
        self.check_tree()?;
        for k in 0..n {
            let bus = self.ids[k];
            if !(self.r[k] > 0.0 && self.x[k] > 0.0) {
                return Err(NetworkError::Impedance {
                    bus,
                    r: self.r[k],
                    x: self.x[k],
                });
            }
            if !(0.0 <= self.v_sq_min[k] && self.v_sq_min[k] < self.v_sq_max[k]) {
                return Err(NetworkError::Limits {
                    bus,
                    message: format!(
                        "voltage limits must satisfy 0 <= min < max (got {} / {})",
                        self.v_sq_min[k], self.v_sq_max[k]
                    ),
                });
            }
            if self.i_sq_max[k] <= 0.0 {
                return Err(NetworkError::Limits {
                    bus,
                    message: format!("current limit must be positive (got {})", self.i_sq_max[k]),
                });
            }
            if self.rating[k] < 0.0 {
                return Err(NetworkError::Limits {
                    bus,
                    message: format!("rating must be nonnegative (got {})", self.rating[k]),
                });
            }
            if self.p_gen[k] < 0.0 {
                return Err(NetworkError::NegativeGeneration { bus, p: self.p_gen[k] });
            }
            let s = self.p_gen[k].hypot(self.q_gen[k]);
            if s > self.rating[k] * (1.0 + RATING_TOL) + RATING_TOL {
                return Err(NetworkError::SetPointExceedsRating {
                    bus,
                    p: self.p_gen[k],
                    q: self.q_gen[k],
                    rating: self.rating[k],
                });
            }
        }
        Ok(())
    }

    /// Every bus must reach the slack by following parents without revisiting.
    fn check_tree(&self) -> Result<(), NetworkError> {
        let n = self.n();
        // 0 = unvisited, 1 = on current walk, 2 = known to reach the slack
        let mut state = vec![0u8; n];
        let mut walk = Vec::new();
        for start in 0..n {
            let mut cur = Some(start);
            walk.clear();
            while let Some(b) = cur {
                if b >= n {
                    return Err(field("parent", &format!("index {b} out of range")));
                }
                match state[b] {
                    2 => break,
                    1 => return Err(NetworkError::Cycle { bus: self.ids[b] }),
                    _ => {
                        state[b] = 1;
                        walk.push(b);
                        cur = self.parent[b];
                    }
                }
            }
            for &b in &walk {
                state[b] = 2;
            }
        }
        Ok(())
    }
}

fn field(name: &str, message: &str) -> NetworkError {
    NetworkError::Field {
        field: name.to_string(),
        message: message.to_string(),
    }
}

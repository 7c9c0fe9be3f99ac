//! Vector bin packing of updates into time slots.
//!
//! Each update `i` is a column `H[:, i]`; a slot holding the set `S` is safe
//! iff `H 1_S <= b`. Best-fit decreasing assigns updates in order of
//! decreasing column sum, each to the open slot with the least total residual
//! capacity that still fits it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkModel;
use crate::sparse::SparseColumns;

/// Slack allowed when re-checking a finished schedule.
pub const VALIDATION_TOL: f64 = 1e-9;
/// Largest instance [`enumerate_optimal`] accepts by default.
pub const DEFAULT_ENUMERATION_LIMIT: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackingError {
    #[error("update {update} cannot be scheduled even alone: row {row} needs {need:e} but capacity is {capacity:e}")]
    Infeasible {
        update: usize,
        row: usize,
        need: f64,
        capacity: f64,
    },
    #[error("internal packing error: {0}")]
    Internal(String),
    #[error("exact enumeration refused for {n} updates (limit {limit})")]
    TooLarge { n: usize, limit: usize },
    #[error("dimension mismatch: H has {rows} rows but b has {b_len} entries")]
    Dimension { rows: usize, b_len: usize },
    #[error("schedule document: {0}")]
    Document(String),
}

/// Updates that cannot be scheduled even in a slot of their own.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub infeasible: Vec<usize>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_empty()
    }
}

fn check_dims(h: &SparseColumns, b: &[f64]) -> Result<(), PackingError> {
    if h.rows() != b.len() {
        return Err(PackingError::Dimension {
            rows: h.rows(),
            b_len: b.len(),
        });
    }
    Ok(())
}

/// First row where column `j` exceeds `cap`, if any.
fn first_violation(h: &SparseColumns, j: usize, cap: &[f64]) -> Option<usize> {
    let (rows, vals) = h.column(j);
    rows.iter().zip(vals).find(|(&r, &v)| v > cap[r]).map(|(&r, _)| r)
}

pub fn feasibility_check(h: &SparseColumns, b: &[f64]) -> Result<Feasibility, PackingError> {
    check_dims(h, b)?;
    Ok(Feasibility {
        infeasible: (0..h.cols()).filter(|&j| first_violation(h, j, b).is_some()).collect(),
    })
}

/// A partition of the updates into consecutive slots, by internal bus index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub slots: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDocument {
    pub slot_duration_s: f64,
    pub slots: Vec<Vec<u64>>,
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slot index of every update.
    pub fn slot_of(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (j, slot) in self.slots.iter().enumerate() {
            for &i in slot {
                if i < n {
                    out[i] = Some(j);
                }
            }
        }
        out
    }

    pub fn to_document(&self, model: &NetworkModel) -> ScheduleDocument {
        ScheduleDocument {
            slot_duration_s: model.fault_clearing_time,
            slots: self
                .slots
                .iter()
                .map(|s| s.iter().map(|&i| model.ids[i]).collect())
                .collect(),
        }
    }

    pub fn to_json(&self, model: &NetworkModel) -> String {
        serde_json::to_string_pretty(&self.to_document(model)).expect("schedule serializes")
    }

    pub fn from_document(doc: &ScheduleDocument, model: &NetworkModel) -> Result<Self, PackingError> {
        let slots = doc
            .slots
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&id| {
                        model
                            .index_of(id)
                            .ok_or_else(|| PackingError::Document(format!("unknown bus id {id}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let schedule = Schedule { slots };
        schedule.check_partition(model.n())?;
        Ok(schedule)
    }

    /// Gantt rows `bus_id,slot_index,t_start_s,t_end_s`.
    pub fn to_csv(&self, model: &NetworkModel) -> String {
        let dt = model.fault_clearing_time;
        let mut out = String::from("bus_id,slot_index,t_start_s,t_end_s\n");
        for (j, slot) in self.slots.iter().enumerate() {
            for &i in slot {
                let t = j as f64 * dt;
                writeln!(out, "{},{},{},{}", model.ids[i], j, t, t + dt).expect("write to string");
            }
        }
        out
    }

    /// Every update in `0..n` appears in exactly one slot and no slot is empty.
    pub fn check_partition(&self, n: usize) -> Result<(), PackingError> {
        let mut seen = vec![false; n];
        for (j, slot) in self.slots.iter().enumerate() {
            if slot.is_empty() {
                return Err(PackingError::Internal(format!("slot {j} is empty")));
            }
            for &i in slot {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(PackingError::Internal(format!("update {i} repeated or out of range")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PackingError::Internal(format!("update {i} not scheduled")));
        }
        Ok(())
    }
}

/// Re-checks a schedule from scratch: partition validity and
/// `H 1_S <= b + tol` for every slot.
pub fn validate_schedule(h: &SparseColumns, b: &[f64], schedule: &Schedule, tol: f64) -> Result<(), PackingError> {
    check_dims(h, b)?;
    schedule.check_partition(h.cols())?;
    for (j, slot) in schedule.slots.iter().enumerate() {
        let load = h.sum_columns(slot);
        if let Some(r) = (0..b.len()).find(|&r| load[r] > b[r] + tol) {
            return Err(PackingError::Internal(format!(
                "slot {j} exceeds row {r}: {:e} > {:e}",
                load[r], b[r]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PackingOptions {
    /// Re-check every fit against all rows, not only the column's nonzeros.
    pub dense_check: bool,
}

struct Slot {
    members: Vec<usize>,
    residual: Vec<f64>,
    sum: f64,
}

pub fn best_fit_decreasing(h: &SparseColumns, b: &[f64]) -> Result<Schedule, PackingError> {
    best_fit_decreasing_with(h, b, PackingOptions::default())
}

pub fn best_fit_decreasing_with(
    h: &SparseColumns,
    b: &[f64],
    options: PackingOptions,
) -> Result<Schedule, PackingError> {
    check_dims(h, b)?;
    if let Some(&j) = feasibility_check(h, b)?.infeasible.first() {
        let r = first_violation(h, j, b).expect("infeasible column has a violating row");
        return Err(PackingError::Infeasible {
            update: j,
            row: r,
            need: h.get(r, j),
            capacity: b[r],
        });
    }
    if b.iter().any(|&v| !(v >= 0.0)) {
        return Err(PackingError::Internal("capacity vector has a negative entry".into()));
    }

    let sizes = h.col_sums();
    let mut order: Vec<usize> = (0..h.cols()).collect();
    order.sort_by(|&a, &c| sizes[c].total_cmp(&sizes[a]).then(a.cmp(&c)));
    let total: f64 = b.iter().sum();

    let mut slots: Vec<Slot> = Vec::new();
    // slot ids by ascending sum of residual capacity
    let mut sorted: Vec<usize> = Vec::new();

    for &i in &order {
        let fits = |slot: &Slot| {
            let sparse_ok = first_violation(h, i, &slot.residual).is_none();
            if options.dense_check {
                let mut col = vec![0.0; b.len()];
                let (rows, vals) = h.column(i);
                for (&r, &v) in rows.iter().zip(vals) {
                    col[r] = v;
                }
                let dense_ok = col.iter().zip(&slot.residual).all(|(c, r)| c <= r);
                assert_eq!(sparse_ok, dense_ok, "sparse fit check disagrees with dense check");
            }
            sparse_ok
        };
        let mut pos = match sorted.iter().position(|&s| fits(&slots[s])) {
            Some(p) => p,
            None => {
                slots.push(Slot {
                    members: Vec::new(),
                    residual: b.to_vec(),
                    sum: total,
                });
                sorted.push(slots.len() - 1);
                sorted.len() - 1
            }
        };
        let id = sorted[pos];
        let slot = &mut slots[id];
        let (rows, vals) = h.column(i);
        for (&r, &v) in rows.iter().zip(vals) {
            slot.residual[r] -= v;
            if slot.residual[r] < 0.0 {
                return Err(PackingError::Internal(format!(
                    "residual of slot {id} became negative in row {r}"
                )));
            }
        }
        slot.members.push(i);
        slot.sum -= sizes[i];

        // keep `sorted` ordered; equal sums keep their relative order
        while pos > 0 && slots[sorted[pos - 1]].sum > slots[id].sum {
            sorted.swap(pos - 1, pos);
            pos -= 1;
        }
        while pos + 1 < sorted.len() && slots[sorted[pos + 1]].sum < slots[id].sum {
            sorted.swap(pos, pos + 1);
            pos += 1;
        }
    }

    let schedule = Schedule {
        slots: slots
            .into_iter()
            .map(|mut s| {
                s.members.sort_unstable();
                s.members
            })
            .collect(),
    };
    validate_schedule(h, b, &schedule, VALIDATION_TOL)?;
    Ok(schedule)
}

/// Exact minimum slot count by dynamic programming over subsets.
pub fn enumerate_optimal(h: &SparseColumns, b: &[f64], limit: usize) -> Result<usize, PackingError> {
    check_dims(h, b)?;
    let n = h.cols();
    if n > limit || n >= usize::BITS as usize {
        return Err(PackingError::TooLarge { n, limit });
    }
    if n == 0 {
        return Ok(0);
    }
    let full = (1usize << n) - 1;
    let dense = h.to_dense();
    let k = b.len();
    let mut load = vec![0.0; k << n];
    let mut fits = vec![true; 1 << n];
    for mask in 1..=full {
        let j = mask.trailing_zeros() as usize;
        let prev = mask & (mask - 1);
        for r in 0..k {
            let v = load[(prev * k) + r] + dense[(r, j)];
            load[mask * k + r] = v;
            if v > b[r] + VALIDATION_TOL {
                fits[mask] = false;
            }
        }
    }
    if let Some(j) = (0..n).find(|&j| !fits[1 << j]) {
        let r = (0..k).find(|&r| dense[(r, j)] > b[r] + VALIDATION_TOL).unwrap_or(0);
        return Err(PackingError::Infeasible {
            update: j,
            row: r,
            need: dense[(r, j)],
            capacity: b[r],
        });
    }
    let mut best = vec![usize::MAX; 1 << n];
    best[0] = 0;
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg();
        let rest = mask ^ low;
        // subsets of `mask` that contain its lowest element
        let mut sub = rest;
        loop {
            let cand = sub | low;
            if fits[cand] && best[mask ^ cand] != usize::MAX {
                best[mask] = best[mask].min(best[mask ^ cand] + 1);
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    Ok(best[full])
}

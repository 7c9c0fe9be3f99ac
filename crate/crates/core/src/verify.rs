//! Sampled worst-case verification of a schedule.
//!
//! For each slot the buses updated in it may fail and inject anything in
//! their half-disks. We sample such injections, solve the power flow for each
//! and record the worst voltages and currents. Sampling can only find
//! violations; a clean report means no violation was found among the samples.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::half_disk_angle;
use crate::distflow::{solve_distflow, PowerFlowError, PowerFlowSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::network::{DerivedTopology, NetworkModel};
use crate::packing::Schedule;
use crate::par;

pub const DEFAULT_SAMPLES: usize = 512;
/// Cap on the number of exhaustively enumerated candidate combinations.
pub const ENUMERATION_CAP: usize = 4096;
/// Margins below `-VIOLATION_TOL` count as violations.
pub const VIOLATION_TOL: f64 = 1e-8;

/// Failed buses with their injections; every other bus holds its set point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureScenario {
    pub failed: Vec<usize>,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl FailureScenario {
    pub fn nominal() -> Self {
        FailureScenario {
            failed: Vec::new(),
            p_gen: Vec::new(),
            q_gen: Vec::new(),
        }
    }

    /// Net injections `p = p_G - p_L`, `q = q_G - q_L` for the whole grid.
    pub fn injections(&self, model: &NetworkModel) -> (Vec<f64>, Vec<f64>) {
        let mut pg = model.p_gen.clone();
        let mut qg = model.q_gen.clone();
        for (k, &b) in self.failed.iter().enumerate() {
            pg[b] = self.p_gen[k];
            qg[b] = self.q_gen[k];
        }
        let p = pg.iter().zip(&model.p_load).map(|(g, l)| g - l).collect();
        let q = qg.iter().zip(&model.q_load).map(|(g, l)| g - l).collect();
        (p, q)
    }

    /// Half-disk membership of every failed injection.
    pub fn is_admissible(&self, model: &NetworkModel, tol: f64) -> bool {
        self.failed.iter().enumerate().all(|(k, &b)| {
            let (p, q) = (self.p_gen[k], self.q_gen[k]);
            p >= -tol && p.hypot(q) <= model.rating[b] * (1.0 + tol) + tol
        })
    }
}

/// Extreme-point candidates of bus `b`'s half-disk.
fn candidates(model: &NetworkModel, path_r: &[f64], path_x: &[f64], b: usize) -> [(f64, f64); 6] {
    let c = model.rating[b];
    let theta = half_disk_angle(model.p_load[b], model.q_load[b]);
    let z = path_r[b].hypot(path_x[b]);
    [
        (0.0, c),
        (0.0, -c),
        (c * theta.cos(), c * theta.sin()),
        (c, 0.0),
        (0.0, 0.0),
        (c * path_r[b] / z, c * path_x[b] / z),
    ]
}

fn path_impedance(model: &NetworkModel) -> (Vec<f64>, Vec<f64>) {
    let n = model.n();
    let walk = |w: &[f64], b: usize| {
        let mut s = 0.0;
        let mut cur = Some(b);
        while let Some(k) = cur {
            s += w[k];
            cur = model.parent[k];
        }
        s
    };
    (
        (0..n).map(|b| walk(&model.r, b)).collect(),
        (0..n).map(|b| walk(&model.x, b)).collect(),
    )
}

/// Seeded scenarios for one failed set: the half-disk extreme points of every
/// bus (all-same combinations always, every combination when there are at
/// most [`ENUMERATION_CAP`]) plus `count` random mixtures of extreme points,
/// boundary points and interior points.
pub fn sample_failure_injections(
    model: &NetworkModel,
    failed: &[usize],
    count: usize,
    seed: u64,
) -> Vec<FailureScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(model, failed, count, &mut rng)
}

fn sample_with(model: &NetworkModel, failed: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<FailureScenario> {
    if failed.is_empty() {
        return vec![FailureScenario::nominal()];
    }
    let (pr, px) = path_impedance(model);
    let cands: Vec<[(f64, f64); 6]> = failed.iter().map(|&b| candidates(model, &pr, &px, b)).collect();
    let k = failed.len();
    let make = |pick: &dyn Fn(usize) -> (f64, f64)| {
        let (p_gen, q_gen) = (0..k).map(pick).unzip();
        FailureScenario {
            failed: failed.to_vec(),
            p_gen,
            q_gen,
        }
    };

    let mut out = Vec::new();
    let combos = 6f64.powi(k.min(64) as i32);
    if combos <= ENUMERATION_CAP as f64 {
        for mut code in 0..combos as usize {
            let digits: Vec<usize> = (0..k)
                .map(|_| {
                    let d = code % 6;
                    code /= 6;
                    d
                })
                .collect();
            out.push(make(&|j| cands[j][digits[j]]));
        }
    } else {
        for d in 0..6 {
            out.push(make(&|j| cands[j][d]));
        }
    }

    for _ in 0..count {
        let picks: Vec<(f64, f64)> = (0..k)
            .map(|j| {
                let c = model.rating[failed[j]];
                let u: f64 = rng.gen();
                if u < 0.25 {
                    cands[j][rng.gen_range(0..6)]
                } else if u < 0.65 {
                    let a = rng.gen_range(-FRAC_PI_2..=FRAC_PI_2);
                    (c * a.cos(), c * a.sin())
                } else {
                    let a = rng.gen_range(-FRAC_PI_2..=FRAC_PI_2);
                    let rad = c * rng.gen::<f64>().sqrt();
                    (rad * a.cos(), rad * a.sin())
                }
            })
            .collect();
        out.push(make(&|j| picks[j]));
    }
    // cos(pi/2) is not exactly zero; clamp tiny negatives onto the half-disk
    for s in &mut out {
        for p in &mut s.p_gen {
            *p = p.max(0.0);
        }
    }
    out
}

pub fn evaluate_scenario(
    model: &NetworkModel,
    topo: &DerivedTopology,
    scenario: &FailureScenario,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let (p, q) = scenario.injections(model);
    solve_distflow(model, topo, &p, &q, tol, max_iter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub samples_per_slot: usize,
    pub seed: u64,
    pub pf_tol: f64,
    pub pf_max_iter: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            samples_per_slot: DEFAULT_SAMPLES,
            seed: 0,
            pf_tol: DEFAULT_TOL,
            pf_max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// The scenario attaining an extreme, with the bus and value it attains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub bus: usize,
    pub bus_id: u64,
    pub value: f64,
    pub margin: f64,
    pub scenario: FailureScenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: usize,
    pub failed_ids: Vec<u64>,
    pub samples: usize,
    /// Scenarios whose power flow failed to converge.
    pub inconclusive: usize,
    /// Worst sampled squared voltage per bus (minimum).
    pub v_sq_min: Vec<f64>,
    /// Worst sampled squared voltage per bus (maximum).
    pub v_sq_max: Vec<f64>,
    /// Worst sampled squared current per line.
    pub i_sq_max: Vec<f64>,
    pub v_lower: Option<Witness>,
    pub v_upper: Option<Witness>,
    pub current: Option<Witness>,
}

impl SlotReport {
    /// Smallest margin over the three limit families.
    pub fn min_margin(&self) -> f64 {
        [&self.v_lower, &self.v_upper, &self.current]
            .iter()
            .filter_map(|w| w.as_ref().map(|w| w.margin))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub samples_per_slot: usize,
    pub seed: u64,
    pub slots: Vec<SlotReport>,
    pub label: String,
}

impl MarginReport {
    pub fn min_margin(&self) -> f64 {
        self.slots
            .iter()
            .map(SlotReport::min_margin)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn violation_found(&self, tol: f64) -> bool {
        self.min_margin() < -tol
    }

    pub fn inconclusive(&self) -> usize {
        self.slots.iter().map(|s| s.inconclusive).sum()
    }

    /// One row per slot: `slot_index,samples,inconclusive,v_lower_margin,
    /// v_upper_margin,current_margin`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot_index,samples,inconclusive,v_lower_margin,v_upper_margin,current_margin\n");
        let m = |w: &Option<Witness>| w.as_ref().map_or(f64::NAN, |w| w.margin);
        for s in &self.slots {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.slot,
                s.samples,
                s.inconclusive,
                m(&s.v_lower),
                m(&s.v_upper),
                m(&s.current)
            )
            .expect("write to string");
        }
        out
    }
}

/// Samples every slot of `schedule` and reports worst-case margins.
pub fn worst_case_margins(
    model: &NetworkModel,
    topo: &DerivedTopology,
    schedule: &Schedule,
    options: &VerifyOptions,
) -> MarginReport {
    let slots = schedule
        .slots
        .iter()
        .enumerate()
        .map(|(j, failed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(j as u64);
            let scenarios = sample_with(model, failed, options.samples_per_slot, &mut rng);
            slot_report(model, topo, j, failed, &scenarios, options)
        })
        .collect::<Vec<_>>();
    let total: usize = slots.iter().map(|s| s.samples).sum();
    let label = if slots.iter().any(|s| s.min_margin() < -VIOLATION_TOL) {
        format!("violation found among {total} samples")
    } else {
        format!("no violation found among {total} samples")
    };
    MarginReport {
        samples_per_slot: options.samples_per_slot,
        seed: options.seed,
        slots,
        label,
    }
}

/// Worst-case extremes over an explicit list of scenarios.
pub fn slot_report(
    model: &NetworkModel,
    topo: &DerivedTopology,
    slot: usize,
    failed: &[usize],
    scenarios: &[FailureScenario],
    options: &VerifyOptions,
) -> SlotReport {
    let n = model.n();
    let results = par::map_indexed(scenarios.len(), |k| {
        evaluate_scenario(model, topo, &scenarios[k], options.pf_tol, options.pf_max_iter).ok()
    });
    let mut v_min = vec![f64::INFINITY; n];
    let mut v_max = vec![f64::NEG_INFINITY; n];
    let mut i_max = vec![f64::NEG_INFINITY; n];
    let mut arg_v_min = vec![0; n];
    let mut arg_v_max = vec![0; n];
    let mut arg_i_max = vec![0; n];
    let mut inconclusive = 0;
    for (k, res) in results.iter().enumerate() {
        let Some(sol) = res else {
            inconclusive += 1;
            continue;
        };
        for b in 0..n {
            if sol.v_sq[b] < v_min[b] {
                v_min[b] = sol.v_sq[b];
                arg_v_min[b] = k;
            }
            if sol.v_sq[b] > v_max[b] {
                v_max[b] = sol.v_sq[b];
                arg_v_max[b] = k;
            }
            if sol.i_sq[b] > i_max[b] {
                i_max[b] = sol.i_sq[b];
                arg_i_max[b] = k;
            }
        }
    }
    let witness = |margins: Vec<f64>, values: &[f64], args: &[usize]| -> Option<Witness> {
        let (bus, margin) = margins
            .into_iter()
            .enumerate()
            .filter(|(_, m)| m.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        Some(Witness {
            bus,
            bus_id: model.ids[bus],
            value: values[bus],
            margin,
            scenario: scenarios[args[bus]].clone(),
        })
    };
    let v_lower = witness(
        (0..n).map(|b| v_min[b] - model.v_sq_min[b]).collect(),
        &v_min,
        &arg_v_min,
    );
    let v_upper = witness(
        (0..n).map(|b| model.v_sq_max[b] - v_max[b]).collect(),
        &v_max,
        &arg_v_max,
    );
    let current = witness(
        (0..n).map(|b| model.i_sq_max[b] - i_max[b]).collect(),
        &i_max,
        &arg_i_max,
    );
    SlotReport {
        slot,
        failed_ids: failed.iter().map(|&b| model.ids[b]).collect(),
        samples: scenarios.len(),
        inconclusive,
        v_sq_min: v_min,
        v_sq_max: v_max,
        i_sq_max: i_max,
        v_lower,
        v_upper,
        current,
    }
}

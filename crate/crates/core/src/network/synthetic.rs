//! Seeded random radial feeders for tests, benches and the `gen` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_topology, NetworkError, NetworkModel};
use crate::distflow::{check_grid_code, solve_distflow, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// How inverter ratings are assigned to buses that host an inverter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RatingPolicy {
    /// Every inverter gets `factor * total_load / n_buses`, where
    /// `total_load` is the sum of active loads.
    ShareOfTotalLoad { factor: f64 },
    /// Independent uniform draws in `[min, max]`.
    Uniform { min: f64, max: f64 },
}

/// Nominal inverter set points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GenerationPolicy {
    Zero,
    /// `p^G = fraction * C`, `q^G = 0`.
    FractionOfRating {
        fraction: f64,
    },
}

/// How line current limits are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CurrentLimitPolicy {
    /// Same squared per-unit limit on every line.
    Uniform { i_sq_max: f64 },
    /// `max(floor, (factor * |i_nom|)^2)` per line, with `i_nom` the current
    /// at the nominal operating point.
    Headroom { factor: f64, floor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederSpec {
    pub n_buses: usize,
    /// Maximum children per bus.
    pub branching: usize,
    /// Maximum lines leaving the slack bus.
    pub feeders: usize,
    pub r_range: (f64, f64),
    pub x_range: (f64, f64),
    pub p_load_range: (f64, f64),
    /// `q^L / p^L` drawn from this range.
    pub q_ratio_range: (f64, f64),
    pub load_scale: f64,
    /// Probability that a bus hosts an inverter.
    pub inverter_fraction: f64,
    pub rating: RatingPolicy,
    pub generation: GenerationPolicy,
    pub current_limit: CurrentLimitPolicy,
    pub v0_sq: f64,
    pub v_sq_min: f64,
    pub v_sq_max: f64,
    pub fault_clearing_time: f64,
    pub base_mva: f64,
    pub base_kv: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl FeederSpec {
    /// A small lightly loaded feeder; adjust fields for other regimes.
    pub fn new(n_buses: usize, seed: u64) -> Self {
        FeederSpec {
            n_buses,
            branching: 3,
            feeders: 1,
            r_range: (0.002, 0.01),
            x_range: (0.002, 0.01),
            p_load_range: (0.005, 0.02),
            q_ratio_range: (0.2, 0.5),
            load_scale: 1.0,
            inverter_fraction: 1.0,
            rating: RatingPolicy::Uniform { min: 0.002, max: 0.01 },
            generation: GenerationPolicy::Zero,
            current_limit: CurrentLimitPolicy::Headroom {
                factor: 3.0,
                floor: 1e-3,
            },
            v0_sq: 1.0,
            v_sq_min: 0.81,
            v_sq_max: 1.21,
            fault_clearing_time: 1.0,
            base_mva: 1.0,
            base_kv: 12.47,
            seed,
            max_retries: 20,
        }
    }

    /// Long, heavily loaded feeder with no nominal generation. Inverter
    /// ratings scale with the total load.
    pub fn heavy_load(n_buses: usize, seed: u64) -> Self {
        FeederSpec {
            r_range: (0.05 / 3.0, 0.05),
            x_range: (0.05 / 3.0, 0.05),
            load_scale: 1.3,
            rating: RatingPolicy::ShareOfTotalLoad { factor: 0.7 },
            current_limit: CurrentLimitPolicy::Headroom {
                factor: 3.0,
                floor: 1e-4,
            },
            ..FeederSpec::new(n_buses, seed)
        }
    }

    /// Heavy-load feeder whose inverters export their full rating at the
    /// nominal point.
    pub fn significant_dg(n_buses: usize, seed: u64) -> Self {
        FeederSpec {
            rating: RatingPolicy::ShareOfTotalLoad { factor: 1.0 },
            generation: GenerationPolicy::FractionOfRating { fraction: 1.0 },
            current_limit: CurrentLimitPolicy::Headroom {
                factor: 3.0,
                floor: 0.2,
            },
            ..FeederSpec::heavy_load(n_buses, seed)
        }
    }

    /// Many short feeders of roughly 200 buses each.
    pub fn utility_scale(n_buses: usize, seed: u64) -> Self {
        FeederSpec {
            feeders: (n_buses / 200).max(1),
            p_load_range: (0.0005, 0.002),
            rating: RatingPolicy::Uniform { min: 0.001, max: 0.005 },
            ..FeederSpec::new(n_buses, seed)
        }
    }

    fn check(&self) -> Result<(), String> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.n_buses == 0 || self.branching == 0 || self.feeders == 0 {
            return Err("n_buses, branching and feeders must be positive".into());
        }
        if !(ordered(self.r_range) && self.r_range.0 > 0.0 && ordered(self.x_range) && self.x_range.0 > 0.0) {
            return Err("impedance ranges must be positive and ordered".into());
        }
        if !(ordered(self.p_load_range) && ordered(self.q_ratio_range)) {
            return Err("load ranges must be ordered".into());
        }
        if !(0.0..=1.0).contains(&self.inverter_fraction) {
            return Err("inverter_fraction must lie in [0, 1]".into());
        }
        if self.max_retries == 0 {
            return Err("max_retries must be positive".into());
        }
        Ok(())
    }
}

/// Draws a feeder whose nominal operating point meets every voltage and
/// current limit. Identical specs give identical models.
pub fn generate_synthetic_feeder(spec: &FeederSpec) -> Result<NetworkModel, NetworkError> {
    spec.check()
        .map_err(|reason| NetworkError::Generation { attempts: 0, reason })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last = String::new();
    for attempt in 1..=spec.max_retries {
        let model = draw(spec, &mut rng);
        match nominal_check(model, spec.current_limit) {
            Ok(model) => return Ok(model),
            Err(reason) => last = format!("attempt {attempt}: {reason}"),
        }
    }
    Err(NetworkError::Generation {
        attempts: spec.max_retries,
        reason: last,
    })
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn draw(spec: &FeederSpec, rng: &mut ChaCha8Rng) -> NetworkModel {
    let n = spec.n_buses;
    let mut parent = Vec::with_capacity(n);
    let mut children = vec![0usize; n];
    // buses that can still take a child
    let mut open: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        if k < spec.feeders {
            parent.push(None);
        } else {
            let slot = rng.gen_range(0..open.len());
            let p = open[slot];
            parent.push(Some(p));
            children[p] += 1;
            if children[p] == spec.branching {
                open.swap_remove(slot);
            }
        }
        open.push(k);
    }

    let r: Vec<f64> = (0..n).map(|_| uniform(rng, spec.r_range)).collect();
    let x: Vec<f64> = (0..n).map(|_| uniform(rng, spec.x_range)).collect();
    let p_load: Vec<f64> = (0..n)
        .map(|_| spec.load_scale * uniform(rng, spec.p_load_range))
        .collect();
    let q_load: Vec<f64> = p_load.iter().map(|p| p * uniform(rng, spec.q_ratio_range)).collect();
    let hosts: Vec<bool> = (0..n).map(|_| rng.gen_bool(spec.inverter_fraction)).collect();
    let total_load: f64 = p_load.iter().sum();
    let rating: Vec<f64> = hosts
        .iter()
        .map(|&h| match (h, spec.rating) {
            (false, _) => 0.0,
            (true, RatingPolicy::ShareOfTotalLoad { factor }) => factor * total_load / n as f64,
            (true, RatingPolicy::Uniform { min, max }) => uniform(rng, (min, max)),
        })
        .collect();
    let p_gen = rating
        .iter()
        .map(|c| match spec.generation {
            GenerationPolicy::Zero => 0.0,
            GenerationPolicy::FractionOfRating { fraction } => fraction * c,
        })
        .collect();
    let i_sq_max = match spec.current_limit {
        CurrentLimitPolicy::Uniform { i_sq_max } => vec![i_sq_max; n],
        // replaced once the nominal flow is known
        CurrentLimitPolicy::Headroom { .. } => vec![f64::MAX; n],
    };

    NetworkModel {
        ids: (1..=n as u64).collect(),
        slack_id: 0,
        parent,
        r,
        x,
        v0_sq: spec.v0_sq,
        p_load,
        q_load,
        p_gen,
        q_gen: vec![0.0; n],
        rating,
        v_sq_min: vec![spec.v_sq_min; n],
        v_sq_max: vec![spec.v_sq_max; n],
        i_sq_max,
        fault_clearing_time: spec.fault_clearing_time,
        base_mva: spec.base_mva,
        base_kv: spec.base_kv,
    }
}

fn nominal_check(mut model: NetworkModel, policy: CurrentLimitPolicy) -> Result<NetworkModel, String> {
    model.validate().map_err(|e| e.to_string())?;
    let topo = derive_topology(&model).map_err(|e| e.to_string())?;
    let (p, q) = model.nominal_injections();
    let sol = solve_distflow(&model, &topo, &p, &q, DEFAULT_TOL, DEFAULT_MAX_ITER).map_err(|e| e.to_string())?;
    if let CurrentLimitPolicy::Headroom { factor, floor } = policy {
        model.i_sq_max = sol.i_sq.iter().map(|l| (factor * factor * l).max(floor)).collect();
    }
    let margins = check_grid_code(&sol, &model);
    if !margins.is_satisfied() {
        return Err(format!(
            "nominal point violates limits (min margin {:e})",
            margins.min()
        ));
    }
    Ok(model)
}

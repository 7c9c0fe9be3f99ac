use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{NetworkError, NetworkModel};

/// On-disk case document. Quantities are per unit on the system base given by
/// `base_mva` / `base_kv`; current limits may be given in amperes
/// (`i_max_amps`) or directly as squared per-unit current (`i_sq_max`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub base_mva: f64,
    pub base_kv: f64,
    pub v0_sq: f64,
    #[serde(default)]
    pub slack_id: u64,
    pub buses: Vec<BusRecord>,
    pub fault_clearing_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: u64,
    pub parent: u64,
    pub r: f64,
    pub x: f64,
    pub p_load: f64,
    pub q_load: f64,
    pub p_gen: f64,
    pub q_gen: f64,
    pub rating: f64,
    pub v_sq_min: f64,
    pub v_sq_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max_amps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_sq_max: Option<f64>,
}

/// Parses and validates a case document.
pub fn parse_case(text: &str) -> Result<NetworkModel, NetworkError> {
    let doc: CaseDocument = serde_json::from_str(text).map_err(|e| NetworkError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    NetworkModel::from_document(&doc)
}

impl NetworkModel {
    pub fn from_document(doc: &CaseDocument) -> Result<Self, NetworkError> {
        let n = doc.buses.len();
        let mut index = HashMap::with_capacity(n);
        for (k, bus) in doc.buses.iter().enumerate() {
            if bus.id == doc.slack_id {
                return Err(NetworkError::Field {
                    field: format!("buses[{k}].id"),
                    message: format!("id {} is reserved for the slack bus", bus.id),
                });
            }
            if index.insert(bus.id, k).is_some() {
                return Err(NetworkError::Field {
                    field: format!("buses[{k}].id"),
                    message: format!("duplicate bus id {}", bus.id),
                });
            }
        }
        if !(doc.base_mva > 0.0 && doc.base_kv > 0.0) {
            return Err(NetworkError::Field {
                field: "base_mva/base_kv".into(),
                message: "system base must be positive".into(),
            });
        }
        let base_amps = doc.base_mva * 1e3 / (3f64.sqrt() * doc.base_kv);

        let mut parent = Vec::with_capacity(n);
        let mut i_sq_max = Vec::with_capacity(n);
        for (k, bus) in doc.buses.iter().enumerate() {
            parent.push(if bus.parent == doc.slack_id {
                None
            } else {
                Some(*index.get(&bus.parent).ok_or_else(|| NetworkError::Field {
                    field: format!("buses[{k}].parent"),
                    message: format!("unknown parent id {}", bus.parent),
                })?)
            });
            let limit = match (bus.i_max_amps, bus.i_sq_max) {
                (Some(a), None) => (a / base_amps).powi(2),
                (None, Some(l)) => l,
                _ => {
                    return Err(NetworkError::Field {
                        field: format!("buses[{k}]"),
                        message: "exactly one of i_max_amps / i_sq_max is required".into(),
                    })
                }
            };
            i_sq_max.push(limit);
        }

        let col = |f: fn(&BusRecord) -> f64| doc.buses.iter().map(f).collect::<Vec<_>>();
        let model = NetworkModel {
            ids: doc.buses.iter().map(|b| b.id).collect(),
            slack_id: doc.slack_id,
            parent,
            r: col(|b| b.r),
            x: col(|b| b.x),
            v0_sq: doc.v0_sq,
            p_load: col(|b| b.p_load),
            q_load: col(|b| b.q_load),
            p_gen: col(|b| b.p_gen),
            q_gen: col(|b| b.q_gen),
            rating: col(|b| b.rating),
            v_sq_min: col(|b| b.v_sq_min),
            v_sq_max: col(|b| b.v_sq_max),
            i_sq_max,
            fault_clearing_time: doc.fault_clearing_time,
            base_mva: doc.base_mva,
            base_kv: doc.base_kv,
        };
        model.validate()?;
        Ok(model)
    }

    /// Serializes back to a case document. Current limits are written as
    /// `i_sq_max` so the round trip is exact.
    pub fn to_document(&self) -> CaseDocument {
        let buses = (0..self.n())
            .map(|k| BusRecord {
                id: self.ids[k],
                parent: self.parent[k].map_or(self.slack_id, |p| self.ids[p]),
                r: self.r[k],
                x: self.x[k],
                p_load: self.p_load[k],
                q_load: self.q_load[k],
                p_gen: self.p_gen[k],
                q_gen: self.q_gen[k],
                rating: self.rating[k],
                v_sq_min: self.v_sq_min[k],
                v_sq_max: self.v_sq_max[k],
                i_max_amps: None,
                i_sq_max: Some(self.i_sq_max[k]),
            })
            .collect();
        CaseDocument {
            base_mva: self.base_mva,
            base_kv: self.base_kv,
            v0_sq: self.v0_sq,
            slack_id: self.slack_id,
            buses,
            fault_clearing_time: self.fault_clearing_time,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("case document serializes")
    }

    /// Internal index of an external bus id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&b| b == id)
    }
}

//! Linear safety constraints and the bin-packing instance `(H, b)`.
//!
//! For a set `I` of buses updated in the same slot, every bus voltage and line
//! current stays within limits for any worst-case failure injection as long
//! as `H 1_I <= b`. The nonlinear variant stacks three blocks:
//!
//! * current: `N' N''` rows per line from polygonal bounds on the aggregated
//!   injection and on the loss term,
//! * voltage upper: `nu_nom + W_vub 1_I <= nu_max`,
//! * voltage lower: `nu_nom + M(i_hi . I_iub1) - W_vlb 1_I >= nu_min`.
//!
//! The linearized variant keeps only the two voltage blocks and drops the
//! loss term of `W_vlb`.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{half_disk_max_distance, BoundsResult};
use crate::network::{DerivedTopology, NetworkModel};
use crate::par;
use crate::sparse::SparseColumns;

pub const DEFAULT_SIDES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nonlinear,
    Linearized,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Nonlinear => "nonlinear",
            Variant::Linearized => "linearized",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nonlinear" => Ok(Variant::Nonlinear),
            "linearized" => Ok(Variant::Linearized),
            other => Err(format!("unknown variant `{other}` (expected nonlinear or linearized)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Current,
    VoltageUpper,
    VoltageLower,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Current => "current",
            BlockKind::VoltageUpper => "voltage upper",
            BlockKind::VoltageLower => "voltage lower",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("polygon needs at least 4 sides (got {0})")]
    Sides(usize),
    #[error("voltage lower bound at bus index {bus} is not positive ({v_sq})")]
    BoundFailure { bus: usize, v_sq: f64 },
    #[error(
        "nominal point unsafe under model: {block} constraint row {row} (bus index {bus}) \
         has negative capacity {value:e}"
    )]
    NominalUnsafe {
        block: BlockKind,
        row: usize,
        bus: usize,
        value: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Normalized polygon directions: `|x + jy| <= max_k (c_k x + s_k y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub sides: usize,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl Polygon {
    /// `max_k (c_k x + s_k y)`.
    pub fn bound(&self, x: f64, y: f64) -> f64 {
        self.c
            .iter()
            .zip(&self.s)
            .map(|(c, s)| c * x + s * y)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn polygon_vectors(sides: usize) -> Result<Polygon, ConstraintError> {
    if sides < 4 {
        return Err(ConstraintError::Sides(sides));
    }
    let m = sides as f64;
    let scale = (PI / m).cos();
    let angle = |k: usize| (2 * k - 1) as f64 * PI / m;
    Ok(Polygon {
        sides,
        c: (1..=sides).map(|k| angle(k).cos() / scale).collect(),
        s: (1..=sides).map(|k| angle(k).sin() / scale).collect(),
    })
}

/// Affine current-magnitude bound `I_iub1 + W_iub1 1_I` with
/// `W_iub1 = D diag(weights)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentBound {
    pub offset: Vec<f64>,
    pub weights: Vec<f64>,
}

impl CurrentBound {
    /// `I_iub1 + W_iub1 1_I` for the bus subset given as a mask.
    pub fn evaluate(&self, topo: &DerivedTopology, mask: &[bool]) -> Vec<f64> {
        let on: Vec<f64> = self
            .weights
            .iter()
            .zip(mask)
            .map(|(w, &m)| if m { *w } else { 0.0 })
            .collect();
        let agg = topo.subtree_sum(&on);
        self.offset.iter().zip(agg).map(|(a, b)| a + b).collect()
    }

    pub fn matrix(&self, topo: &DerivedTopology) -> SparseColumns {
        let n = self.weights.len();
        let columns = (0..n)
            .map(|i| topo.ancestors(i).map(|a| (a, self.weights[i])).collect())
            .collect();
        SparseColumns::from_columns(n, columns)
    }
}

/// An affine block `offset + matrix 1_I`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    pub offset: Vec<f64>,
    pub matrix: SparseColumns,
}

fn v_lo(bounds: &BoundsResult) -> Result<Vec<f64>, ConstraintError> {
    bounds
        .v_sq_lo
        .iter()
        .enumerate()
        .map(|(bus, &v_sq)| {
            if v_sq > 0.0 && v_sq.is_finite() {
                Ok(v_sq.sqrt())
            } else {
                Err(ConstraintError::BoundFailure { bus, v_sq })
            }
        })
        .collect()
}

fn check_dims(model: &NetworkModel, topo: &DerivedTopology, bounds: &BoundsResult) -> Result<(), ConstraintError> {
    let n = model.n();
    if topo.n() != n || bounds.v_sq_lo.len() != n || bounds.i_sq_hi.len() != n {
        return Err(ConstraintError::Dimension(format!(
            "model has {n} buses, topology {}, bounds {}/{}",
            topo.n(),
            bounds.v_sq_lo.len(),
            bounds.i_sq_hi.len()
        )));
    }
    Ok(())
}

/// Per-bus worst-case apparent power `|s*|` and nominal `|s_nom|`.
pub fn apparent_power_spread(model: &NetworkModel) -> (Vec<f64>, Vec<f64>) {
    let n = model.n();
    let star = (0..n)
        .map(|k| half_disk_max_distance(model.p_load[k], model.q_load[k], model.rating[k]))
        .collect();
    let nom = (0..n)
        .map(|k| (model.p_gen[k] - model.p_load[k]).hypot(model.q_gen[k] - model.q_load[k]))
        .collect();
    (star, nom)
}

pub fn build_iub1(
    model: &NetworkModel,
    topo: &DerivedTopology,
    bounds: &BoundsResult,
) -> Result<CurrentBound, ConstraintError> {
    check_dims(model, topo, bounds)?;
    let v = v_lo(bounds)?;
    let (star, nom) = apparent_power_spread(model);
    let base: Vec<f64> = nom.iter().zip(&v).map(|(s, v)| s / v).collect();
    let weights = (0..model.n()).map(|k| (star[k] - nom[k]) / v[k]).collect();
    Ok(CurrentBound {
        offset: topo.subtree_sum(&base),
        weights,
    })
}

/// `nu_nom = nu0 1 + 2 R (p_G - p_L) + 2 X (q_G - q_L)`.
pub fn nominal_voltage(model: &NetworkModel, topo: &DerivedTopology) -> Vec<f64> {
    let (p, q) = model.nominal_injections();
    let rp = topo.r_mul(&p);
    let xq = topo.x_mul(&q);
    (0..model.n())
        .map(|k| model.v0_sq + 2.0 * rp[k] + 2.0 * xq[k])
        .collect()
}

/// Which blocks a column pass emits, with their first row.
#[derive(Debug, Clone, Copy, Default)]
struct Layout {
    current: Option<usize>,
    vub: Option<usize>,
    vlb: Option<usize>,
    vlb_loss: bool,
}

/// Everything the per-column pass needs.
struct Columns<'a> {
    model: &'a NetworkModel,
    topo: &'a DerivedTopology,
    v: Vec<f64>,
    i_hi: Vec<f64>,
    weights: Vec<f64>,
    p1: Polygon,
    p2: Polygon,
}

struct Scratch {
    cr: Vec<f64>,
    cx: Vec<f64>,
    y: Vec<f64>,
    acc: Vec<f64>,
    path: Vec<usize>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            cr: vec![0.0; n],
            cx: vec![0.0; n],
            y: vec![0.0; n],
            acc: vec![0.0; n],
            path: Vec::new(),
        }
    }
}

impl Columns<'_> {
    fn column(&self, i: usize, layout: Layout, s: &mut Scratch) -> Vec<(usize, f64)> {
        let n = self.topo.n();
        let (pg, qg, c) = (self.model.p_gen[i], self.model.q_gen[i], self.model.rating[i]);
        let w = self.weights[i];
        let mut out = Vec::new();
        s.path.clear();
        s.path.extend(self.topo.ancestors(i));

        if let Some(base) = layout.current {
            let (m1, m2) = (self.p1.sides, self.p2.sides);
            let (r, x) = (self.topo.r(), self.topo.x());
            let (mut pre_r, mut pre_x) = (0.0, 0.0);
            for &a in &s.path {
                let inv = 1.0 / self.v[a];
                let (lr, lx) = (w * pre_r * inv, w * pre_x * inv);
                for k2 in 0..m2 {
                    let loss = self.p2.c[k2] * lr + self.p2.s[k2] * lx;
                    for k1 in 0..m1 {
                        let inj = (self.p1.c[k1] * pg + self.p1.s[k1] * qg + c) * inv;
                        out.push((base + (k2 * m1 + k1) * n + a, inj + loss));
                    }
                }
                pre_r += r[a] * self.i_hi[a];
                pre_x += x[a] * self.i_hi[a];
            }
        }

        if layout.vub.is_none() && layout.vlb.is_none() {
            return out;
        }
        let feeder = self.topo.rx_column_into(i, &mut s.cr, &mut s.cx);
        if layout.vlb_loss && w != 0.0 {
            self.loss_column(feeder, w, s);
        }
        for &k in feeder {
            let (rk, xk) = (s.cr[k], s.cx[k]);
            if let Some(base) = layout.vub {
                out.push((base + k, 2.0 * rk.hypot(xk) * c - 2.0 * rk * pg - 2.0 * xk * qg));
            }
            if let Some(base) = layout.vlb {
                let mut v = 2.0 * xk * c + 2.0 * rk * pg + 2.0 * xk * qg;
                if layout.vlb_loss && w != 0.0 {
                    v -= s.acc[k];
                }
                out.push((base + k, v));
            }
        }
        out
    }

    /// `acc = M u` over the feeder for `u = w (i_hi . 1)` on the path of `i`.
    fn loss_column(&self, feeder: &[usize], w: f64, s: &mut Scratch) {
        let (r, x) = (self.topo.r(), self.topo.x());
        // y_k = sum over {r, x} of z_k (u_k z_k - 2 sum_{m in d(k), m on path} z_m u_m)
        let (mut suf_r, mut suf_x) = (0.0, 0.0);
        for &a in &s.path {
            let u = w * self.i_hi[a];
            suf_r += r[a] * u;
            suf_x += x[a] * u;
            s.y[a] = r[a] * (r[a] * u - 2.0 * suf_r) + x[a] * (x[a] * u - 2.0 * suf_x);
        }
        for &k in feeder {
            let up = self.topo.parent(k).map_or(0.0, |p| s.acc[p]);
            s.acc[k] = up + s.y[k];
        }
        for &a in &s.path {
            s.y[a] = 0.0;
        }
    }

    fn assemble(&self, rows: usize, layout: Layout) -> SparseColumns {
        let n = self.topo.n();
        let columns = par::map_indexed_with(n, || Scratch::new(n), |s, i| self.column(i, layout, s));
        SparseColumns::from_columns(rows, columns)
    }
}

fn columns<'a>(
    model: &'a NetworkModel,
    topo: &'a DerivedTopology,
    bounds: &BoundsResult,
    iub1: &CurrentBound,
    sides_prime: usize,
    sides_dblprime: usize,
) -> Result<Columns<'a>, ConstraintError> {
    check_dims(model, topo, bounds)?;
    Ok(Columns {
        model,
        topo,
        v: v_lo(bounds)?,
        i_hi: bounds.i_hi(),
        weights: iub1.weights.clone(),
        p1: polygon_vectors(sides_prime)?,
        p2: polygon_vectors(sides_dblprime)?,
    })
}

/// Offset of the current block, row `(k'' N' + k') N + n`.
fn iub2_offset(model: &NetworkModel, topo: &DerivedTopology, cols: &Columns<'_>, iub1: &CurrentBound) -> Vec<f64> {
    let n = model.n();
    let sub = |v: Vec<f64>| -> Vec<f64> { topo.subtree_sum(&v).iter().zip(&cols.v).map(|(a, v)| a / v).collect() };
    let ap = sub((0..n).map(|k| model.p_load[k] - model.p_gen[k]).collect());
    let aq = sub((0..n).map(|k| model.q_load[k] - model.q_gen[k]).collect());
    let strict = |z: &[f64]| -> Vec<f64> {
        let u: Vec<f64> = (0..n).map(|k| z[k] * cols.i_hi[k] * iub1.offset[k]).collect();
        let s = topo.subtree_sum(&u);
        (0..n).map(|k| (s[k] - u[k]) / cols.v[k]).collect()
    };
    let br = strict(topo.r());
    let bx = strict(topo.x());
    let (m1, m2) = (cols.p1.sides, cols.p2.sides);
    let mut out = Vec::with_capacity(n * m1 * m2);
    for k2 in 0..m2 {
        for k1 in 0..m1 {
            for b in 0..n {
                out.push(cols.p1.c[k1] * ap[b] + cols.p1.s[k1] * aq[b] + cols.p2.c[k2] * br[b] + cols.p2.s[k2] * bx[b]);
            }
        }
    }
    out
}

pub fn build_iub2(
    model: &NetworkModel,
    topo: &DerivedTopology,
    bounds: &BoundsResult,
    iub1: &CurrentBound,
    sides_prime: usize,
    sides_dblprime: usize,
) -> Result<AffineBlock, ConstraintError> {
    let cols = columns(model, topo, bounds, iub1, sides_prime, sides_dblprime)?;
    let rows = model.n() * sides_prime * sides_dblprime;
    Ok(AffineBlock {
        offset: iub2_offset(model, topo, &cols, iub1),
        matrix: cols.assemble(
            rows,
            Layout {
                current: Some(0),
                ..Layout::default()
            },
        ),
    })
}

/// Upper voltage envelope; the offset is `nu_nom`.
pub fn build_vub(model: &NetworkModel, topo: &DerivedTopology) -> AffineBlock {
    let n = model.n();
    let cols = Columns {
        model,
        topo,
        v: vec![1.0; n],
        i_hi: vec![0.0; n],
        weights: vec![0.0; n],
        p1: polygon_vectors(4).expect("4 sides"),
        p2: polygon_vectors(4).expect("4 sides"),
    };
    AffineBlock {
        offset: nominal_voltage(model, topo),
        matrix: cols.assemble(
            n,
            Layout {
                vub: Some(0),
                ..Layout::default()
            },
        ),
    }
}

/// Lower voltage envelope; the offset is `nu_nom + M (i_hi . I_iub1)`.
pub fn build_vlb(
    model: &NetworkModel,
    topo: &DerivedTopology,
    bounds: &BoundsResult,
    iub1: &CurrentBound,
) -> Result<AffineBlock, ConstraintError> {
    let cols = columns(model, topo, bounds, iub1, 4, 4)?;
    Ok(AffineBlock {
        offset: vlb_offset(model, topo, &cols.i_hi, iub1),
        matrix: cols.assemble(
            model.n(),
            Layout {
                vlb: Some(0),
                vlb_loss: true,
                ..Layout::default()
            },
        ),
    })
}

fn vlb_offset(model: &NetworkModel, topo: &DerivedTopology, i_hi: &[f64], iub1: &CurrentBound) -> Vec<f64> {
    let u: Vec<f64> = i_hi.iter().zip(&iub1.offset).map(|(a, b)| a * b).collect();
    let m = topo.m_mul(&u);
    nominal_voltage(model, topo).iter().zip(m).map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRange {
    pub kind: BlockKind,
    pub start: usize,
    pub end: usize,
}

/// The assembled instance and the intermediate vectors it came from.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub variant: Variant,
    pub sides_prime: usize,
    pub sides_dblprime: usize,
    pub polygon_prime: Polygon,
    pub polygon_dblprime: Polygon,
    pub iub1: CurrentBound,
    /// Empty for the linearized variant.
    pub iub2_offset: Vec<f64>,
    pub vnom: Vec<f64>,
    pub vlb_offset: Vec<f64>,
    pub h: SparseColumns,
    pub b: Vec<f64>,
    pub blocks: Vec<BlockRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetadata {
    pub variant: Variant,
    pub sides_prime: usize,
    pub sides_dblprime: usize,
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub blocks: Vec<BlockRange>,
    /// External bus id of each column.
    pub bus_ids: Vec<u64>,
}

impl ConstraintSystem {
    pub fn metadata(&self, model: &NetworkModel) -> InstanceMetadata {
        InstanceMetadata {
            variant: self.variant,
            sides_prime: self.sides_prime,
            sides_dblprime: self.sides_dblprime,
            rows: self.h.rows(),
            cols: self.h.cols(),
            nnz: self.h.nnz(),
            blocks: self.blocks.clone(),
            bus_ids: model.ids.clone(),
        }
    }

    pub fn write_binary<W: Write>(&self, w: W) -> io::Result<()> {
        self.h.write_with_rhs(&self.b, w)
    }

    /// Block containing row `row` and the bus that row refers to.
    pub fn locate_row(&self, row: usize) -> Option<(BlockKind, usize)> {
        let n = self.h.cols();
        self.blocks
            .iter()
            .find(|b| b.start <= row && row < b.end)
            .map(|b| (b.kind, (row - b.start) % n))
    }
}

/// Builds `(H, b)` for the chosen variant and rejects it if the empty
/// update set is already unsafe (`b` has a negative entry).
pub fn assemble_instance(
    model: &NetworkModel,
    topo: &DerivedTopology,
    bounds: &BoundsResult,
    variant: Variant,
    sides_prime: usize,
    sides_dblprime: usize,
) -> Result<ConstraintSystem, ConstraintError> {
    let n = model.n();
    let iub1 = build_iub1(model, topo, bounds)?;
    let cols = columns(model, topo, bounds, &iub1, sides_prime, sides_dblprime)?;
    let vnom = nominal_voltage(model, topo);
    let vlb_off = vlb_offset(model, topo, &cols.i_hi, &iub1);
    let n_cur = n * sides_prime * sides_dblprime;

    let (layout, blocks, b, iub2_off) = match variant {
        Variant::Nonlinear => {
            let off = iub2_offset(model, topo, &cols, &iub1);
            let mut b = Vec::with_capacity(n_cur + 2 * n);
            b.extend(
                off.iter()
                    .enumerate()
                    .map(|(row, o)| model.i_sq_max[row % n].sqrt() - o),
            );
            b.extend((0..n).map(|k| model.v_sq_max[k] - vnom[k]));
            b.extend((0..n).map(|k| vlb_off[k] - model.v_sq_min[k]));
            let layout = Layout {
                current: Some(0),
                vub: Some(n_cur),
                vlb: Some(n_cur + n),
                vlb_loss: true,
            };
            let blocks = vec![
                BlockRange {
                    kind: BlockKind::Current,
                    start: 0,
                    end: n_cur,
                },
                BlockRange {
                    kind: BlockKind::VoltageUpper,
                    start: n_cur,
                    end: n_cur + n,
                },
                BlockRange {
                    kind: BlockKind::VoltageLower,
                    start: n_cur + n,
                    end: n_cur + 2 * n,
                },
            ];
            (layout, blocks, b, off)
        }
        Variant::Linearized => {
            let mut b = Vec::with_capacity(2 * n);
            b.extend((0..n).map(|k| model.v_sq_max[k] - vnom[k]));
            b.extend((0..n).map(|k| vnom[k] - model.v_sq_min[k]));
            let layout = Layout {
                vub: Some(0),
                vlb: Some(n),
                ..Layout::default()
            };
            let blocks = vec![
                BlockRange {
                    kind: BlockKind::VoltageUpper,
                    start: 0,
                    end: n,
                },
                BlockRange {
                    kind: BlockKind::VoltageLower,
                    start: n,
                    end: 2 * n,
                },
            ];
            (layout, blocks, b, Vec::new())
        }
    };

    let mut system = ConstraintSystem {
        variant,
        sides_prime,
        sides_dblprime,
        polygon_prime: cols.p1.clone(),
        polygon_dblprime: cols.p2.clone(),
        iub1: iub1.clone(),
        iub2_offset: iub2_off,
        vnom,
        vlb_offset: vlb_off,
        h: SparseColumns::zeros(b.len(), n),
        b,
        blocks,
    };
    if let Some(row) = system.b.iter().position(|v| !(*v >= 0.0)) {
        let (block, bus) = system.locate_row(row).expect("row inside a block");
        return Err(ConstraintError::NominalUnsafe {
            block,
            row,
            bus,
            value: system.b[row],
        });
    }
    system.h = cols.assemble(system.b.len(), layout);
    Ok(system)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{universal_bounds, DEFAULT_EPS, DEFAULT_MAX_ITER};
    use crate::network::derive_topology;
    use crate::network::fixtures::{model, one_line};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn square_polygon() {
        let p = polygon_vectors(4).unwrap();
        let expect_c = [1.0, -1.0, -1.0, 1.0];
        let expect_s = [1.0, 1.0, -1.0, -1.0];
        for k in 0..4 {
            assert_abs_diff_eq!(p.c[k], expect_c[k], epsilon = 1e-15);
            assert_abs_diff_eq!(p.s[k], expect_s[k], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.bound(0.3, -0.4), 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(polygon_vectors(8).unwrap().c[0], 1.0, epsilon = 1e-15);
        assert_eq!(polygon_vectors(3), Err(ConstraintError::Sides(3)));
    }

    proptest! {
        #[test]
        fn polygon_dominates_modulus(x in -10.0f64..10.0, y in -10.0f64..10.0, sides in 4usize..40) {
            let p = polygon_vectors(sides).unwrap();
            let m = x.hypot(y);
            let b = p.bound(x, y);
            prop_assert!(b >= m * (1.0 - 1e-12) - 1e-15);
            prop_assert!(b <= m / (PI / sides as f64).cos() * (1.0 + 1e-12) + 1e-15);
        }
    }

    fn one_line_bounds() -> (NetworkModel, DerivedTopology, BoundsResult) {
        let m = one_line();
        let t = derive_topology(&m).unwrap();
        let b = universal_bounds(&m, &t, 1e-12, DEFAULT_MAX_ITER).unwrap();
        (m, t, b)
    }

    #[test]
    fn one_line_iub1() {
        let (m, t, b) = one_line_bounds();
        let v = b.v_sq_lo[0].sqrt();
        let iub1 = build_iub1(&m, &t, &b).unwrap();
        assert_abs_diff_eq!(iub1.offset[0], 0.1 / v, epsilon = 1e-15);
        assert_abs_diff_eq!(iub1.weights[0], (0.05f64.sqrt() - 0.1) / v, epsilon = 1e-15);
    }

    #[test]
    fn one_line_vub() {
        let (m, t, _) = one_line_bounds();
        let vub = build_vub(&m, &t);
        assert_abs_diff_eq!(vub.offset[0], 1.0 - 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(vub.matrix.get(0, 0), 2.0 * 2f64.sqrt() * 0.01 * 0.2, epsilon = 1e-15);
    }

    #[test]
    fn one_line_full_instance() {
        let (m, t, b) = one_line_bounds();
        let sys = assemble_instance(&m, &t, &b, Variant::Nonlinear, 4, 4).unwrap();
        let v = b.v_sq_lo[0].sqrt();
        let i = b.i_sq_hi[0].sqrt();
        let w = (0.05f64.sqrt() - 0.1) / v;
        let c = [1.0, -1.0, -1.0, 1.0];
        assert_eq!(sys.h.rows(), 18);
        for row in 0..16 {
            let k1 = row % 4;
            // no generation, no strict descendants: injection rows only
            assert_abs_diff_eq!(sys.b[row], 1.0 - c[k1] * 0.1 / v, epsilon = 1e-14);
            assert_abs_diff_eq!(sys.h.get(row, 0), 0.2 / v, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(sys.b[16], 1.21 - 0.998, epsilon = 1e-14);
        // vlb: M = -2e-4, so offset = 0.998 - 2e-4 i (0.1 / v)
        let vlb_off = 0.998 - 2e-4 * i * 0.1 / v;
        assert_abs_diff_eq!(sys.b[17], vlb_off - 0.81, epsilon = 1e-14);
        assert_abs_diff_eq!(sys.h.get(17, 0), 2.0 * 0.01 * 0.2 + 2e-4 * i * w, epsilon = 1e-15);

        let lin = assemble_instance(&m, &t, &b, Variant::Linearized, 4, 4).unwrap();
        assert_eq!(lin.h.rows(), 2);
        assert_abs_diff_eq!(lin.b[1], 0.998 - 0.81, epsilon = 1e-14);
        assert_abs_diff_eq!(lin.h.get(1, 0), 2.0 * 0.01 * 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zero_rating_gives_zero_columns() {
        let mut m = model(vec![None, Some(0), Some(0), Some(1)], vec![0.01; 4], vec![0.02; 4]);
        m.p_load = vec![0.05; 4];
        m.q_load = vec![0.01; 4];
        let t = derive_topology(&m).unwrap();
        let b = universal_bounds(&m, &t, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        for variant in [Variant::Nonlinear, Variant::Linearized] {
            let sys = assemble_instance(&m, &t, &b, variant, 4, 8).unwrap();
            assert_eq!(sys.h.nnz(), 0);
            assert!(sys.b.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn unsafe_nominal_rejected() {
        let mut m = one_line();
        m.i_sq_max = vec![0.001];
        let t = derive_topology(&m).unwrap();
        let b = universal_bounds(&m, &t, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        let err = assemble_instance(&m, &t, &b, Variant::Nonlinear, 4, 4).unwrap_err();
        assert!(matches!(
            err,
            ConstraintError::NominalUnsafe {
                block: BlockKind::Current,
                bus: 0,
                ..
            }
        ));
        assert!(err.to_string().contains("nominal point unsafe"));
    }

    /// Dense random feeder with generation on every bus.
    fn random_case(parents: &[usize], seed: u64) -> NetworkModel {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = parents.len();
        let parent = parents
            .iter()
            .enumerate()
            .map(|(k, &p)| if k == 0 || p >= k { None } else { Some(p) })
            .collect();
        let r = (0..n).map(|_| rng.gen_range(0.005..0.03)).collect();
        let x = (0..n).map(|_| rng.gen_range(0.005..0.03)).collect();
        let mut m = model(parent, r, x);
        m.p_load = (0..n).map(|_| rng.gen_range(0.0..0.05)).collect();
        m.q_load = (0..n).map(|_| rng.gen_range(-0.01..0.03)).collect();
        m.rating = (0..n).map(|_| rng.gen_range(0.0..0.05)).collect();
        m.p_gen = m.rating.iter().map(|c| c * rng.gen_range(0.0..0.7)).collect();
        m.q_gen = m.rating.iter().map(|c| c * rng.gen_range(-0.5..0.5)).collect();
        m
    }

    /// Dense oracle of every block using the matrix formulas directly.
    fn dense_oracle(
        m: &NetworkModel,
        t: &DerivedTopology,
        b: &BoundsResult,
        s1: usize,
        s2: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let n = m.n();
        let d = t.descendant_dense();
        let dm = t.compute_dense();
        let eye = DMatrix::<f64>::identity(n, n);
        let v = DVector::from_vec(b.v_lo());
        let ihi = DVector::from_vec(b.i_hi());
        let vinv = DMatrix::from_diagonal(&v.map(|x| 1.0 / x));
        let (star, nom) = apparent_power_spread(m);
        let star = DVector::from_vec(star);
        let nom = DVector::from_vec(nom);
        let i1 = &d * nom.component_div(&v);
        let w1 = &d * DMatrix::from_diagonal(&(&star - &nom).component_div(&v));
        let dv = |x: &[f64]| DVector::from_row_slice(x);
        let diag = |x: &[f64]| DMatrix::from_diagonal(&dv(x));
        let (pl, ql, pg, qg, c) = (dv(&m.p_load), dv(&m.q_load), dv(&m.p_gen), dv(&m.q_gen), dv(&m.rating));
        let rdi = DMatrix::from_diagonal(&dv(t.r()).component_mul(&ihi));
        let xdi = DMatrix::from_diagonal(&dv(t.x()).component_mul(&ihi));
        let p1 = polygon_vectors(s1).unwrap();
        let p2 = polygon_vectors(s2).unwrap();
        let k = n * s1 * s2;
        let mut h = DMatrix::zeros(k + 2 * n, n);
        let mut rhs = DVector::zeros(k + 2 * n);
        let ap = &vinv * &d * (&pl - &pg);
        let aq = &vinv * &d * (&ql - &qg);
        let br = &vinv * (&d - &eye) * &rdi * &i1;
        let bx = &vinv * (&d - &eye) * &xdi * &i1;
        let wp = &vinv * &d * diag(&m.p_gen);
        let wq = &vinv * &d * diag(&m.q_gen);
        let wc = &vinv * &d * diag(&m.rating);
        let wr = &vinv * (&d - &eye) * &rdi * &w1;
        let wx = &vinv * (&d - &eye) * &xdi * &w1;
        for k2 in 0..s2 {
            for k1 in 0..s1 {
                let base = (k2 * s1 + k1) * n;
                let blk = &wp * p1.c[k1] + &wq * p1.s[k1] + &wc + &wr * p2.c[k2] + &wx * p2.s[k2];
                h.view_mut((base, 0), (n, n)).copy_from(&blk);
                for a in 0..n {
                    let off = p1.c[k1] * ap[a] + p1.s[k1] * aq[a] + p2.c[k2] * br[a] + p2.s[k2] * bx[a];
                    rhs[base + a] = m.i_sq_max[a].sqrt() - off;
                }
            }
        }
        let vnom = DVector::from_element(n, m.v0_sq) + &dm.r * (&pg - &pl) * 2.0 + &dm.x * (&qg - &ql) * 2.0;
        let wvub = &dm.z * diag(&m.rating) * 2.0 - &dm.r * diag(&m.p_gen) * 2.0 - &dm.x * diag(&m.q_gen) * 2.0;
        let wvlb = &dm.x * diag(&m.rating) * 2.0 + &dm.r * diag(&m.p_gen) * 2.0 + &dm.x * diag(&m.q_gen) * 2.0
            - &dm.m * DMatrix::from_diagonal(&ihi) * &w1;
        let vlb_off = &vnom + &dm.m * ihi.component_mul(&i1);
        h.view_mut((k, 0), (n, n)).copy_from(&wvub);
        h.view_mut((k + n, 0), (n, n)).copy_from(&wvlb);
        for a in 0..n {
            rhs[k + a] = m.v_sq_max[a] - vnom[a];
            rhs[k + n + a] = vlb_off[a] - m.v_sq_min[a];
        }
        let _ = c;
        (h, rhs)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn sparse_assembly_matches_dense(
            parents in proptest::collection::vec(0usize..8, 1..=8),
            seed in any::<u64>(),
            s1 in prop_oneof![Just(4usize), Just(5), Just(8)],
            s2 in prop_oneof![Just(4usize), Just(6)],
        ) {
            let m = random_case(&parents, seed);
            let t = derive_topology(&m).unwrap();
            let b = universal_bounds(&m, &t, 1e-10, 200).unwrap();
            let sys = match assemble_instance(&m, &t, &b, Variant::Nonlinear, s1, s2) {
                Ok(s) => s,
                Err(ConstraintError::NominalUnsafe { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            let (h, rhs) = dense_oracle(&m, &t, &b, s1, s2);
            let got = sys.h.to_dense();
            prop_assert_eq!(got.shape(), h.shape());
            for (a, e) in got.iter().zip(h.iter()) {
                prop_assert!((a - e).abs() <= 1e-12, "H entry {} vs {}", a, e);
            }
            for (a, e) in sys.b.iter().zip(rhs.iter()) {
                prop_assert!((a - e).abs() <= 1e-12, "b entry {} vs {}", a, e);
            }
            // iub1 entrywise nonnegative weights
            prop_assert!(sys.iub1.weights.iter().all(|&w| w >= -1e-15));
        }
    }

    #[test]
    fn full_failure_identity() {
        let m = random_case(&[0, 0, 1, 1, 2], 11);
        let t = derive_topology(&m).unwrap();
        let b = universal_bounds(&m, &t, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        let iub1 = build_iub1(&m, &t, &b).unwrap();
        let all = iub1.evaluate(&t, &[true; 5]);
        let (star, _) = apparent_power_spread(&m);
        let v = b.v_lo();
        let expect = t.subtree_sum(&star.iter().zip(&v).map(|(s, v)| s / v).collect::<Vec<_>>());
        for k in 0..5 {
            assert_abs_diff_eq!(all[k], expect[k], epsilon = 1e-14);
        }
        let dense = iub1.matrix(&t).to_dense();
        let ones = DVector::from_element(5, 1.0);
        let via = DVector::from_vec(iub1.offset.clone()) + dense * ones;
        for k in 0..5 {
            assert_abs_diff_eq!(via[k], expect[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn separate_blocks_match_assembly() {
        let m = random_case(&[0, 0, 1, 2, 2, 0], 5);
        let t = derive_topology(&m).unwrap();
        let b = universal_bounds(&m, &t, DEFAULT_EPS, DEFAULT_MAX_ITER).unwrap();
        let sys = assemble_instance(&m, &t, &b, Variant::Nonlinear, 4, 4).unwrap();
        let iub1 = build_iub1(&m, &t, &b).unwrap();
        let cur = build_iub2(&m, &t, &b, &iub1, 4, 4).unwrap();
        let vub = build_vub(&m, &t);
        let vlb = build_vlb(&m, &t, &b, &iub1).unwrap();
        assert_eq!(SparseColumns::vstack(&[&cur.matrix, &vub.matrix, &vlb.matrix]), sys.h);
        assert_eq!(cur.offset, sys.iub2_offset);
        assert_eq!(vub.offset, sys.vnom);
        assert_eq!(vlb.offset, sys.vlb_offset);
    }

    #[test]
    fn locate_rows() {
        let (m, t, b) = one_line_bounds();
        let sys = assemble_instance(&m, &t, &b, Variant::Nonlinear, 4, 4).unwrap();
        assert_eq!(sys.locate_row(3), Some((BlockKind::Current, 0)));
        assert_eq!(sys.locate_row(16), Some((BlockKind::VoltageUpper, 0)));
        assert_eq!(sys.locate_row(17), Some((BlockKind::VoltageLower, 0)));
        assert_eq!(sys.locate_row(18), None);
    }
}

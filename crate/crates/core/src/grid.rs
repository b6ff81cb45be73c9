//! Network data: Matpower case parsing, branch π-model parameters and the nodal
//! admittance matrix.
//!
//! Every quantity is stored in per-unit on the case's MVA base. Buses are addressed by
//! their position in [`GridCase::buses`] (the internal index); the Matpower bus number is
//! kept in [`BusRecord::id`].

use std::collections::HashMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("missing {0} table")]
    MissingTable(&'static str),
    #[error("missing baseMVA")]
    MissingBaseMva,
    #[error("malformed {table} table, row {row}: {msg}")]
    MalformedTable {
        table: &'static str,
        row: usize,
        msg: String,
    },
    #[error("multiple slack buses")]
    MultipleSlack,
    #[error("missing slack bus")]
    MissingSlack,
    #[error("duplicate bus id {0}")]
    DuplicateBusId(usize),
    #[error("branch {branch} references unknown bus {bus}")]
    UnknownBranchEndpoint { branch: usize, bus: usize },
    #[error("generator {gen} references unknown bus {bus}")]
    UnknownGeneratorBus { gen: usize, bus: usize },
    #[error("invalid branch {branch}: {msg}")]
    InvalidBranch { branch: usize, msg: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("bus index {0} out of range")]
    BusOutOfRange(usize),
    #[error("invalid permutation")]
    InvalidPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    Slack,
    PV,
    PQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    /// Matpower bus number.
    pub id: usize,
    pub bus_type: BusType,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub base_kv: f64,
    /// Voltage magnitude from the case file, used as the setpoint when no generator
    /// provides one.
    pub vm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    /// Internal bus index.
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub vg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    /// Internal index of the tap (from) side.
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b_c: f64,
    /// Off-nominal turns ratio; 1 for lines.
    pub k_t: f64,
    pub in_service: bool,
}

impl BranchRecord {
    pub fn line(from: usize, to: usize, r: f64, x: f64, b_c: f64) -> Self {
        Self {
            from,
            to,
            r,
            x,
            b_c,
            k_t: 1.0,
            in_service: true,
        }
    }

    /// Series admittance `g_s + j b_s = 1 / (r + jx)`.
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.from == self.to {
            return Err("from and to bus coincide".into());
        }
        if !(self.r >= 0.0) {
            return Err(format!("negative resistance {}", self.r));
        }
        if self.r == 0.0 && self.x == 0.0 {
            return Err("zero series impedance".into());
        }
        if !(self.k_t > 0.0) {
            return Err(format!("non-positive turns ratio {}", self.k_t));
        }
        Ok(())
    }
}

/// One parsed network. Out-of-service branches and generators are dropped at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub gens: Vec<GenRecord>,
}

/// π-model coefficients of a branch as seen from each end.
///
/// The from side carries the off-nominal tap: `g_ij = g_s/k`, `g_si = (1-k) g_s / k²`,
/// `b_si = (1-k) b_s / k² + b_c/2`. The to side uses the mirrored shunt
/// `(k-1) y_s / k + j b_c/2`, which keeps the assembled admittance matrix identical to the
/// standard tap-at-from transformer model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedBranchParams {
    /// Mutual conductance `g_ij`.
    pub g_mutual: f64,
    /// Mutual susceptance `b_ij`.
    pub b_mutual: f64,
    pub g_shunt_from: f64,
    pub b_shunt_from: f64,
    pub g_shunt_to: f64,
    pub b_shunt_to: f64,
    /// `ĝ = g_si + g_ij` at the from end.
    pub g_hat_from: f64,
    pub b_hat_from: f64,
    pub g_hat_to: f64,
    pub b_hat_to: f64,
    /// Off-diagonal admittance contribution `G_ij = -g_ij`.
    pub g_offdiag: f64,
    /// Off-diagonal admittance contribution `B_ij = -b_ij`.
    pub b_offdiag: f64,
}

/// Coefficients of the flow equations at one metered branch end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndCoefficients {
    pub g_hat: f64,
    pub b_hat: f64,
    pub g: f64,
    pub b: f64,
}

impl DerivedBranchParams {
    pub fn end(&self, from_side: bool) -> EndCoefficients {
        if from_side {
            EndCoefficients {
                g_hat: self.g_hat_from,
                b_hat: self.b_hat_from,
                g: self.g_mutual,
                b: self.b_mutual,
            }
        } else {
            EndCoefficients {
                g_hat: self.g_hat_to,
                b_hat: self.b_hat_to,
                g: self.g_mutual,
                b: self.b_mutual,
            }
        }
    }
}

/// Computes the π-model coefficients of one branch.
pub fn derive_branch_params(branch: &BranchRecord) -> Result<DerivedBranchParams, GridError> {
    if !(branch.k_t > 0.0) {
        return Err(GridError::Domain(format!(
            "turns ratio must be positive, got {}",
            branch.k_t
        )));
    }
    let ys = branch.series_admittance();
    Ok(derive_from_series(ys.re, ys.im, branch.b_c, branch.k_t))
}

/// Same as [`derive_branch_params`] but from the series admittance directly.
pub fn derive_from_series(g_s: f64, b_s: f64, b_c: f64, k_t: f64) -> DerivedBranchParams {
    let k = k_t;
    let g_mutual = g_s / k;
    let b_mutual = b_s / k;
    let g_shunt_from = (1.0 - k) * g_s / (k * k);
    let b_shunt_from = (1.0 - k) * b_s / (k * k) + b_c / 2.0;
    let g_shunt_to = (k - 1.0) * g_s / k;
    let b_shunt_to = (k - 1.0) * b_s / k + b_c / 2.0;
    DerivedBranchParams {
        g_mutual,
        b_mutual,
        g_shunt_from,
        b_shunt_from,
        g_shunt_to,
        b_shunt_to,
        g_hat_from: g_shunt_from + g_mutual,
        b_hat_from: b_shunt_from + b_mutual,
        g_hat_to: g_shunt_to + g_mutual,
        b_hat_to: b_shunt_to + b_mutual,
        g_offdiag: -g_mutual,
        b_offdiag: -b_mutual,
    }
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    pub fn bus_types(&self) -> Vec<BusType> {
        self.buses.iter().map(|b| b.bus_type).collect()
    }

    /// Internal index of a Matpower bus number.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Checks the structural invariants (one slack, unique ids, valid branches).
    pub fn validate(&self) -> Result<(), ParseError> {
        let mut seen = HashMap::new();
        for b in &self.buses {
            if seen.insert(b.id, ()).is_some() {
                return Err(ParseError::DuplicateBusId(b.id));
            }
        }
        match self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count()
        {
            0 => return Err(ParseError::MissingSlack),
            1 => {}
            _ => return Err(ParseError::MultipleSlack),
        }
        for (k, br) in self.branches.iter().enumerate() {
            for bus in [br.from, br.to] {
                if bus >= self.buses.len() {
                    return Err(ParseError::UnknownBranchEndpoint { branch: k, bus });
                }
            }
            br.validate()
                .map_err(|msg| ParseError::InvalidBranch { branch: k, msg })?;
        }
        Ok(())
    }

    /// Reorders the buses so that new bus `i` is old bus `perm[i]`, remapping every branch
    /// and generator reference.
    pub fn renumber(&self, perm: &[usize]) -> Result<GridCase, GridError> {
        let n = self.buses.len();
        if perm.len() != n {
            return Err(GridError::InvalidPermutation);
        }
        let mut inv = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inv[old] != usize::MAX {
                return Err(GridError::InvalidPermutation);
            }
            inv[old] = new;
        }
        Ok(GridCase {
            name: self.name.clone(),
            base_mva: self.base_mva,
            buses: perm.iter().map(|&old| self.buses[old].clone()).collect(),
            branches: self
                .branches
                .iter()
                .map(|br| BranchRecord {
                    from: inv[br.from],
                    to: inv[br.to],
                    ..br.clone()
                })
                .collect(),
            gens: self
                .gens
                .iter()
                .map(|g| GenRecord {
                    bus: inv[g.bus],
                    ..g.clone()
                })
                .collect(),
        })
    }

    /// Active/reactive injection `P_g - P_d` per bus from the case data.
    pub fn net_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.pd).collect();
        let mut q: Vec<f64> = self.buses.iter().map(|b| -b.qd).collect();
        for g in &self.gens {
            p[g.bus] += g.pg;
            q[g.bus] += g.qg;
        }
        (p, q)
    }

    /// Voltage setpoint per bus: the generator setpoint where one exists, otherwise the
    /// case's initial magnitude.
    pub fn voltage_setpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.buses.iter().map(|b| b.vm).collect();
        for g in &self.gens {
            v[g.bus] = g.vg;
        }
        v
    }
}

// --- Matpower parsing -------------------------------------------------------------

const BUS_COLS: usize = 13;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

/// Parses a Matpower case body (`mpc.baseMVA`, `mpc.bus`, `mpc.branch`, `mpc.gen`).
///
/// Values are converted to per-unit on the system base; a zero turns ratio means 1.
/// Generator cost tables and any other fields are ignored.
pub fn parse_case(text: &str) -> Result<GridCase, ParseError> {
    let clean = strip_comments(text);
    let bus_rows = matrix_rows(&clean, "bus")?.ok_or(ParseError::MissingTable("bus"))?;
    let branch_rows = matrix_rows(&clean, "branch")?.ok_or(ParseError::MissingTable("branch"))?;
    let gen_rows = matrix_rows(&clean, "gen")?.ok_or(ParseError::MissingTable("gen"))?;
    let base_mva = scalar_field(&clean, "baseMVA").ok_or(ParseError::MissingBaseMva)?;
    if !(base_mva > 0.0) {
        return Err(ParseError::Unsupported(format!("baseMVA = {base_mva}")));
    }

    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut index: HashMap<usize, usize> = HashMap::new();
    for (row_no, row) in bus_rows.iter().enumerate() {
        check_width("bus", row_no, row, BUS_COLS)?;
        let id = as_index("bus", row_no, row[0])?;
        let bus_type = match row[1] as i64 {
            1 => BusType::PQ,
            2 => BusType::PV,
            3 => BusType::Slack,
            other => {
                return Err(ParseError::Unsupported(format!(
                    "bus {id} has type {other}"
                )))
            }
        };
        if index.insert(id, buses.len()).is_some() {
            return Err(ParseError::DuplicateBusId(id));
        }
        buses.push(BusRecord {
            id,
            bus_type,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            gs: row[4] / base_mva,
            bs: row[5] / base_mva,
            vm: row[7],
            base_kv: row[9],
        });
    }
    match buses
        .iter()
        .filter(|b| b.bus_type == BusType::Slack)
        .count()
    {
        0 => return Err(ParseError::MissingSlack),
        1 => {}
        _ => return Err(ParseError::MultipleSlack),
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (row_no, row) in branch_rows.iter().enumerate() {
        check_width("branch", row_no, row, BRANCH_COLS)?;
        let f = as_index("branch", row_no, row[0])?;
        let t = as_index("branch", row_no, row[1])?;
        let from = *index.get(&f).ok_or(ParseError::UnknownBranchEndpoint {
            branch: row_no,
            bus: f,
        })?;
        let to = *index.get(&t).ok_or(ParseError::UnknownBranchEndpoint {
            branch: row_no,
            bus: t,
        })?;
        if row[9] != 0.0 {
            return Err(ParseError::Unsupported(format!(
                "phase-shifting transformer on branch {row_no}"
            )));
        }
        let br = BranchRecord {
            from,
            to,
            r: row[2],
            x: row[3],
            b_c: row[4],
            k_t: if row[8] == 0.0 { 1.0 } else { row[8] },
            in_service: row[10] != 0.0,
        };
        if !br.in_service {
            continue;
        }
        br.validate().map_err(|msg| ParseError::InvalidBranch {
            branch: row_no,
            msg,
        })?;
        branches.push(br);
    }

    let mut gens = Vec::new();
    for (row_no, row) in gen_rows.iter().enumerate() {
        check_width("gen", row_no, row, GEN_COLS)?;
        let b = as_index("gen", row_no, row[0])?;
        let bus = *index.get(&b).ok_or(ParseError::UnknownGeneratorBus {
            gen: row_no,
            bus: b,
        })?;
        if row[7] == 0.0 {
            continue;
        }
        gens.push(GenRecord {
            bus,
            pg: row[1] / base_mva,
            qg: row[2] / base_mva,
            vg: row[5],
        });
    }

    // A PV bus without an in-service generator has nothing holding its voltage.
    for (i, bus) in buses.iter_mut().enumerate() {
        if bus.bus_type == BusType::PV && !gens.iter().any(|g| g.bus == i) {
            bus.bus_type = BusType::PQ;
        }
    }

    Ok(GridCase {
        name: function_name(text).unwrap_or_else(|| "case".to_string()),
        base_mva,
        buses,
        branches,
        gens,
    })
}

fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| match l.find('%') {
            Some(i) => &l[..i],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn function_name(text: &str) -> Option<String> {
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with("function"))?;
    let rhs = line.split('=').nth(1)?;
    Some(rhs.trim().trim_end_matches(';').to_string())
}

/// Byte offset just past `mpc.<name>` followed by optional whitespace and `=`.
fn field_start(text: &str, name: &str) -> Option<usize> {
    let key = format!("mpc.{name}");
    let mut from = 0;
    while let Some(pos) = text[from..].find(&key) {
        let after = from + pos + key.len();
        let rest = text[after..].trim_start();
        if let Some(stripped) = rest.strip_prefix('=') {
            return Some(text.len() - stripped.len());
        }
        from = after;
    }
    None
}

fn scalar_field(text: &str, name: &str) -> Option<f64> {
    let start = field_start(text, name)?;
    let end = text[start..].find([';', '\n']).map(|e| start + e)?;
    text[start..end].trim().parse().ok()
}

fn matrix_rows(text: &str, name: &'static str) -> Result<Option<Vec<Vec<f64>>>, ParseError> {
    let Some(start) = field_start(text, name) else {
        return Ok(None);
    };
    let body = text[start..].trim_start();
    let Some(body) = body.strip_prefix('[') else {
        return Err(ParseError::MalformedTable {
            table: name,
            row: 0,
            msg: "expected '['".into(),
        });
    };
    let Some(end) = body.find(']') else {
        return Err(ParseError::MalformedTable {
            table: name,
            row: 0,
            msg: "unterminated matrix".into(),
        });
    };
    let mut rows = Vec::new();
    for chunk in body[..end].split([';', '\n']) {
        let chunk = chunk.trim();
        if chunk.is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>())
            .collect();
        let row = row.map_err(|e| ParseError::MalformedTable {
            table: name,
            row: rows.len(),
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(Some(rows))
}

fn check_width(table: &'static str, row: usize, r: &[f64], min: usize) -> Result<(), ParseError> {
    if r.len() < min {
        return Err(ParseError::MalformedTable {
            table,
            row,
            msg: format!("expected at least {min} columns, found {}", r.len()),
        });
    }
    Ok(())
}

fn as_index(table: &'static str, row: usize, v: f64) -> Result<usize, ParseError> {
    if v < 0.0 || v.fract() != 0.0 {
        return Err(ParseError::MalformedTable {
            table,
            row,
            msg: format!("bad bus number {v}"),
        });
    }
    Ok(v as usize)
}

// --- Admittance -------------------------------------------------------------------

/// Nodal admittance matrix plus per-branch coefficients and adjacency.
#[derive(Debug, Clone)]
pub struct AdmittanceModel {
    pub n_buses: usize,
    /// Sparse rows of `Y`, sorted by column. The diagonal is always stored.
    pub rows: Vec<Vec<(usize, Complex64)>>,
    /// `(from, to)` per branch, same order as the case.
    pub endpoints: Vec<(usize, usize)>,
    pub branch_params: Vec<DerivedBranchParams>,
    /// Adjacent buses of each bus, sorted, excluding the bus itself.
    pub neighbors: Vec<Vec<usize>>,
    pub bus_types: Vec<BusType>,
    pub slack: usize,
}

/// Assembles `Y` from the branch π-models and bus shunts.
pub fn build_admittance(case: &GridCase) -> Result<AdmittanceModel, GridError> {
    let n = case.n_buses();
    let mut dense: Vec<HashMap<usize, Complex64>> = vec![HashMap::new(); n];
    for (i, bus) in case.buses.iter().enumerate() {
        *dense[i].entry(i).or_default() += Complex64::new(bus.gs, bus.bs);
    }
    let mut params = Vec::with_capacity(case.branches.len());
    let mut endpoints = Vec::with_capacity(case.branches.len());
    for br in &case.branches {
        if br.from >= n || br.to >= n {
            return Err(GridError::BusOutOfRange(br.from.max(br.to)));
        }
        let p = derive_branch_params(br)?;
        let y_mut = Complex64::new(p.g_mutual, p.b_mutual);
        let (f, t) = (br.from, br.to);
        *dense[f].entry(f).or_default() += y_mut + Complex64::new(p.g_shunt_from, p.b_shunt_from);
        *dense[t].entry(t).or_default() += y_mut + Complex64::new(p.g_shunt_to, p.b_shunt_to);
        *dense[f].entry(t).or_default() -= y_mut;
        *dense[t].entry(f).or_default() -= y_mut;
        params.push(p);
        endpoints.push((f, t));
    }
    let rows: Vec<Vec<(usize, Complex64)>> = dense
        .into_iter()
        .map(|m| {
            let mut r: Vec<_> = m.into_iter().collect();
            r.sort_by_key(|e| e.0);
            r
        })
        .collect();
    let neighbors = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|e| e.0).filter(|&j| j != i).collect())
        .collect();
    Ok(AdmittanceModel {
        n_buses: n,
        rows,
        endpoints,
        branch_params: params,
        neighbors,
        bus_types: case.bus_types(),
        slack: case.slack(),
    })
}

impl AdmittanceModel {
    pub fn from_case(case: &GridCase) -> Result<Self, GridError> {
        build_admittance(case)
    }

    pub fn y(&self, i: usize, j: usize) -> Complex64 {
        self.rows[i]
            .binary_search_by_key(&j, |e| e.0)
            .map(|k| self.rows[i][k].1)
            .unwrap_or_default()
    }

    /// Number of structurally stored entries.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn n_branches(&self) -> usize {
        self.endpoints.len()
    }

    /// Branch index and metered side for a flow located at bus `at` towards bus `toward`.
    pub fn find_branch_end(&self, at: usize, toward: usize) -> Option<(usize, bool)> {
        self.endpoints.iter().enumerate().find_map(|(k, &(f, t))| {
            if f == at && t == toward {
                Some((k, true))
            } else if t == at && f == toward {
                Some((k, false))
            } else {
                None
            }
        })
    }

    /// Complex injections `S_i = V_i (Σ_j Y_ij V_j)*` for a phasor vector.
    pub fn complex_injections(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let current: Complex64 = row.iter().map(|&(j, y)| y * v[j]).sum();
                v[i] * current.conj()
            })
            .collect()
    }

    /// Dense copy of `Y`, mostly for tests and diagnostics.
    pub fn dense(&self) -> Vec<Vec<Complex64>> {
        let mut d = vec![vec![Complex64::default(); self.n_buses]; self.n_buses];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, y) in row {
                d[i][j] = y;
            }
        }
        d
    }
}

//! Grid case model, MATPOWER case-file parsing and the canonical
//! `gridcase/1` JSON representation.
//!
//! All quantities are stored in per-unit on the case MVA base and angles are
//! stored in radians. Bus ids are re-indexed to `0..N` in file order; the
//! original MATPOWER numbers are kept in [`GridCase::external_ids`].

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRIDCASE_SCHEMA: &str = "gridcase/1";

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("missing required section `mpc.{0}`")]
    MissingSection(&'static str),
    #[error("more than one slack bus (external ids {first} and {second})")]
    MultipleSlack { first: i64, second: i64 },
    #[error("case has no slack bus")]
    NoSlack,
    #[error("case has no PQ bus")]
    NoPqBus,
    #[error("branch {branch} references unknown bus {bus}")]
    DanglingBranch { branch: usize, bus: i64 },
    #[error("generator {generator} references unknown bus {bus}")]
    DanglingGenerator { generator: usize, bus: i64 },
    #[error("malformed number `{token}` in `mpc.{section}`")]
    MalformedNumber { section: String, token: String },
    #[error("row {row} of `mpc.{section}` has {found} columns, need at least {expected}")]
    ShortRow {
        section: &'static str,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),
    #[error("unsupported bus type {code} at bus {bus}")]
    UnsupportedBusType { bus: i64, code: i64 },
    #[error("branch {0} has zero series impedance")]
    ZeroImpedanceBranch(usize),
    #[error("branch {branch} has non-positive tap ratio {tap}")]
    InvalidTap { branch: usize, tap: f64 },
    #[error("bus {0} needs a positive voltage setpoint")]
    InvalidSetpoint(usize),
    #[error("bus {index} carries id {id}, ids must be 0..N in order")]
    NonContiguousIds { index: usize, id: usize },
    #[error("schema mismatch: expected `{expected}`, found {found}")]
    SchemaMismatch { expected: &'static str, found: String },
    #[error("invariant violated on load: {0}")]
    InvariantViolation(String),
    #[error("json: {0}")]
    Json(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    PQ,
    PV,
    Slack,
}

impl BusType {
    fn from_matpower(code: i64) -> Option<Self> {
        match code {
            1 => Some(BusType::PQ),
            2 => Some(BusType::PV),
            3 => Some(BusType::Slack),
            _ => None,
        }
    }
}

impl fmt::Display for BusType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BusType::PQ => "PQ",
            BusType::PV => "PV",
            BusType::Slack => "Slack",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub bus_type: BusType,
    pub p_load: f64,
    pub q_load: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm_setpoint: f64,
    pub va_setpoint: f64,
    pub base_kv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    pub tap: f64,
    pub shift: f64,
    pub status: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_gen: f64,
    pub q_gen: f64,
    pub vm_set: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    /// MATPOWER bus number of each internal bus index.
    pub external_ids: Vec<i64>,
}

/// Bus indices grouped by type, each list ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BusPartition {
    pub pq: Vec<usize>,
    pub pv: Vec<usize>,
    pub slack: Vec<usize>,
}

impl BusPartition {
    /// PV buses followed by PQ buses: the buses with an active power balance.
    pub fn pvpq(&self) -> Vec<usize> {
        self.pv.iter().chain(self.pq.iter()).copied().collect()
    }
}

impl GridCase {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn partition(&self) -> BusPartition {
        let mut part = BusPartition::default();
        for bus in &self.buses {
            match bus.bus_type {
                BusType::PQ => part.pq.push(bus.id),
                BusType::PV => part.pv.push(bus.id),
                BusType::Slack => part.slack.push(bus.id),
            }
        }
        part
    }

    pub fn slack_bus(&self) -> Option<usize> {
        self.buses
            .iter()
            .find(|b| b.bus_type == BusType::Slack)
            .map(|b| b.id)
    }

    /// Net per-bus injections `(P, Q)` in per-unit: generation minus load.
    pub fn net_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.p_load).collect();
        let mut q: Vec<f64> = self.buses.iter().map(|b| -b.q_load).collect();
        for g in &self.generators {
            p[g.bus] += g.p_gen;
            q[g.bus] += g.q_gen;
        }
        (p, q)
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, br)| br.status)
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let mut slack: Option<usize> = None;
        for (index, bus) in self.buses.iter().enumerate() {
            if bus.id != index {
                return Err(CaseError::NonContiguousIds { index, id: bus.id });
            }
            if bus.bus_type == BusType::Slack {
                if let Some(first) = slack {
                    return Err(CaseError::MultipleSlack {
                        first: self.external_id(first),
                        second: self.external_id(index),
                    });
                }
                slack = Some(index);
            }
            if bus.bus_type != BusType::PQ && !(bus.vm_setpoint > 0.0) {
                return Err(CaseError::InvalidSetpoint(index));
            }
        }
        if slack.is_none() {
            return Err(CaseError::NoSlack);
        }
        if !self.buses.iter().any(|b| b.bus_type == BusType::PQ) {
            return Err(CaseError::NoPqBus);
        }
        let n = self.buses.len();
        for (k, br) in self.branches.iter().enumerate() {
            for end in [br.from_bus, br.to_bus] {
                if end >= n {
                    return Err(CaseError::DanglingBranch {
                        branch: k,
                        bus: end as i64,
                    });
                }
            }
            if br.r * br.r + br.x * br.x <= 0.0 {
                return Err(CaseError::ZeroImpedanceBranch(k));
            }
            if !(br.tap > 0.0) {
                return Err(CaseError::InvalidTap { branch: k, tap: br.tap });
            }
        }
        for (k, g) in self.generators.iter().enumerate() {
            if g.bus >= n {
                return Err(CaseError::DanglingGenerator {
                    generator: k,
                    bus: g.bus as i64,
                });
            }
        }
        if self.external_ids.len() != n {
            return Err(CaseError::InvariantViolation(format!(
                "{} external ids for {} buses",
                self.external_ids.len(),
                n
            )));
        }
        Ok(())
    }

    fn external_id(&self, index: usize) -> i64 {
        self.external_ids
            .get(index)
            .copied()
            .unwrap_or(index as i64)
    }
}

// ---------------------------------------------------------------------------
// MATPOWER subset
// ---------------------------------------------------------------------------

const BUS_COLS: usize = 10;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

/// Parses the `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and `mpc.branch`
/// assignments of a MATPOWER case file. Every other assignment is skipped.
pub fn parse_matpower(text: &str) -> Result<GridCase, CaseError> {
    let stripped = strip_comments(text);
    let name = case_name(text);

    let mut base_mva = None;
    let mut bus = None;
    let mut gen = None;
    let mut branch = None;

    let mut rest = stripped.as_str();
    while let Some(pos) = rest.find("mpc.") {
        rest = &rest[pos + 4..];
        let ident_len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        let ident = &rest[..ident_len];
        let after = rest[ident_len..].trim_start();
        let Some(value) = after.strip_prefix('=') else {
            continue;
        };
        let value = value.trim_start();
        let (body, consumed) = assignment_body(value);
        let offset = rest.len() - value.len() + consumed;
        match ident {
            "baseMVA" => base_mva = Some(parse_scalar("baseMVA", body)?),
            "bus" => bus = Some(parse_matrix("bus", body)?),
            "gen" => gen = Some(parse_matrix("gen", body)?),
            "branch" => branch = Some(parse_matrix("branch", body)?),
            _ => {}
        }
        rest = &rest[offset.min(rest.len())..];
    }

    let base_mva = base_mva.ok_or(CaseError::MissingSection("baseMVA"))?;
    let bus = bus.ok_or(CaseError::MissingSection("bus"))?;
    let gen = gen.ok_or(CaseError::MissingSection("gen"))?;
    let branch = branch.ok_or(CaseError::MissingSection("branch"))?;

    build_case(name, base_mva, &bus, &gen, &branch)
}

fn build_case(
    name: String,
    base_mva: f64,
    bus_rows: &[Vec<f64>],
    gen_rows: &[Vec<f64>],
    branch_rows: &[Vec<f64>],
) -> Result<GridCase, CaseError> {
    let mut index_of: HashMap<i64, usize> = HashMap::new();
    let mut buses = Vec::with_capacity(bus_rows.len());
    let mut external_ids = Vec::with_capacity(bus_rows.len());
    let mut slack: Option<i64> = None;

    for (row, cols) in bus_rows.iter().enumerate() {
        check_width("bus", row, cols, BUS_COLS)?;
        let ext = cols[0] as i64;
        if index_of.insert(ext, row).is_some() {
            return Err(CaseError::DuplicateBus(ext));
        }
        let code = cols[1] as i64;
        let bus_type =
            BusType::from_matpower(code).ok_or(CaseError::UnsupportedBusType { bus: ext, code })?;
        if bus_type == BusType::Slack {
            if let Some(first) = slack {
                return Err(CaseError::MultipleSlack { first, second: ext });
            }
            slack = Some(ext);
        }
        external_ids.push(ext);
        buses.push(Bus {
            id: row,
            bus_type,
            p_load: cols[2] / base_mva,
            q_load: cols[3] / base_mva,
            gs: cols[4] / base_mva,
            bs: cols[5] / base_mva,
            vm_setpoint: cols[7],
            va_setpoint: cols[8].to_radians(),
            base_kv: cols[9],
        });
    }

    let mut generators = Vec::new();
    let mut has_setpoint = vec![false; buses.len()];
    for (row, cols) in gen_rows.iter().enumerate() {
        check_width("gen", row, cols, GEN_COLS)?;
        if cols[7] <= 0.0 {
            continue;
        }
        let ext = cols[0] as i64;
        let &bus = index_of
            .get(&ext)
            .ok_or(CaseError::DanglingGenerator { generator: row, bus: ext })?;
        let vm_set = cols[5];
        // The first in-service generator at a bus fixes its voltage.
        if !has_setpoint[bus] && buses[bus].bus_type != BusType::PQ {
            buses[bus].vm_setpoint = vm_set;
            has_setpoint[bus] = true;
        }
        generators.push(Generator {
            bus,
            p_gen: cols[1] / base_mva,
            q_gen: cols[2] / base_mva,
            vm_set,
        });
    }

    let mut branches = Vec::with_capacity(branch_rows.len());
    for (row, cols) in branch_rows.iter().enumerate() {
        check_width("branch", row, cols, BRANCH_COLS)?;
        let mut ends = [0usize; 2];
        for (k, ext) in [cols[0] as i64, cols[1] as i64].into_iter().enumerate() {
            ends[k] = *index_of
                .get(&ext)
                .ok_or(CaseError::DanglingBranch { branch: row, bus: ext })?;
        }
        branches.push(Branch {
            from_bus: ends[0],
            to_bus: ends[1],
            r: cols[2],
            x: cols[3],
            b_charging: cols[4],
            tap: if cols[8] == 0.0 { 1.0 } else { cols[8] },
            shift: cols[9].to_radians(),
            status: cols[10] != 0.0,
        });
    }

    let case = GridCase {
        name,
        base_mva,
        buses,
        branches,
        generators,
        external_ids,
    };
    case.validate()?;
    Ok(case)
}

fn check_width(
    section: &'static str,
    row: usize,
    cols: &[f64],
    expected: usize,
) -> Result<(), CaseError> {
    if cols.len() < expected {
        return Err(CaseError::ShortRow {
            section,
            row,
            expected,
            found: cols.len(),
        });
    }
    Ok(())
}

fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_string = false;
        let mut prev = ' ';
        let mut end = line.len();
        for (i, c) in line.char_indices() {
            match c {
                // A quote after an identifier or bracket is a transpose, not a string.
                '\'' if in_string || !(prev.is_alphanumeric() || prev == ']' || prev == ')') => {
                    in_string = !in_string
                }
                '%' if !in_string => {
                    end = i;
                    break;
                }
                _ => {}
            }
            if !c.is_whitespace() {
                prev = c;
            }
        }
        out.push_str(&line[..end]);
        out.push('\n');
    }
    out
}

fn case_name(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix("function"))
        .and_then(|rest| rest.split('=').nth(1))
        .map(|n| n.trim().trim_end_matches(';').to_string())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "case".to_string())
}

/// Returns the right-hand side of an assignment and how many bytes it spans
/// including the terminating `;` (or closing bracket).
fn assignment_body(value: &str) -> (&str, usize) {
    let (open, close) = match value.chars().next() {
        Some('[') => ('[', ']'),
        Some('{') => ('{', '}'),
        _ => {
            let end = value.find(';').unwrap_or(value.len());
            return (&value[..end], (end + 1).min(value.len()));
        }
    };
    let mut depth = 0usize;
    for (i, c) in value.char_indices() {
        if c == open {
            depth += 1;
        } else if c == close {
            depth -= 1;
            if depth == 0 {
                return (&value[1..i], i + 1);
            }
        }
    }
    (&value[1..], value.len())
}

fn parse_number(section: &str, token: &str) -> Result<f64, CaseError> {
    let parsed = match token {
        "Inf" | "inf" => Ok(f64::INFINITY),
        "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
        _ => token.parse::<f64>(),
    };
    parsed.map_err(|_| CaseError::MalformedNumber {
        section: section.to_string(),
        token: token.to_string(),
    })
}

fn parse_scalar(section: &str, body: &str) -> Result<f64, CaseError> {
    parse_number(section, body.trim())
}

fn parse_matrix(section: &str, body: &str) -> Result<Vec<Vec<f64>>, CaseError> {
    let mut rows = Vec::new();
    for row in body.split(|c| c == ';' || c == '\n') {
        let cols = row
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty() && *t != "...")
            .map(|t| parse_number(section, t))
            .collect::<Result<Vec<_>, _>>()?;
        if !cols.is_empty() {
            rows.push(cols);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CaseDocRef<'a> {
    schema: &'static str,
    #[serde(flatten)]
    case: &'a GridCase,
}

/// Serializes a case as `gridcase/1` JSON with keys in sorted order.
pub fn to_json(case: &GridCase) -> String {
    let doc = CaseDocRef {
        schema: GRIDCASE_SCHEMA,
        case,
    };
    // `serde_json::Value` keeps object keys in a BTreeMap, which gives the
    // canonical (sorted) key order.
    let value = serde_json::to_value(&doc).expect("grid case is always representable as JSON");
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    text
}

pub fn from_json(text: &str) -> Result<GridCase, CaseError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CaseError::Json(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CaseError::Json("top level is not an object".into()))?;
    match obj.remove("schema") {
        Some(serde_json::Value::String(s)) if s == GRIDCASE_SCHEMA => {}
        Some(other) => {
            return Err(CaseError::SchemaMismatch {
                expected: GRIDCASE_SCHEMA,
                found: other.to_string(),
            })
        }
        None => {
            return Err(CaseError::SchemaMismatch {
                expected: GRIDCASE_SCHEMA,
                found: "no `schema` key".into(),
            })
        }
    }
    let case: GridCase =
        serde_json::from_value(value).map_err(|e| CaseError::Json(e.to_string()))?;
    case.validate()
        .map_err(|e| CaseError::InvariantViolation(e.to_string()))?;
    Ok(case)
}

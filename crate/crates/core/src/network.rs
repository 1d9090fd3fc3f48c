//! Nodal admittance matrix and the typed graph view of a case.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

use crate::case_io::{BusType, GridCase};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("branch {0} has zero series impedance")]
    ZeroImpedanceBranch(usize),
}

/// Sparse `G + jB` in compressed-row form. Column indices within each row
/// are ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    g: Vec<f64>,
    b: Vec<f64>,
}

impl AdmittanceMatrix {
    fn from_entries(n: usize, entries: BTreeMap<(usize, usize), Complex64>) -> Self {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut g = Vec::with_capacity(entries.len());
        let mut b = Vec::with_capacity(entries.len());
        for (&(i, j), y) in &entries {
            row_ptr[i + 1] += 1;
            cols.push(j);
            g.push(y.re);
            b.push(y.im);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        AdmittanceMatrix {
            n,
            row_ptr,
            cols,
            g,
            b,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// `(column, g, b)` for the stored entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        span.map(move |k| (self.cols[k], self.g[k], self.b[k]))
    }

    /// All stored entries as `(i, j, g, b)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, g, b)| (i, j, g, b)))
    }

    pub fn get(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        let cols = &self.cols[span.clone()];
        cols.binary_search(&j)
            .ok()
            .map(|k| (self.g[span.start + k], self.b[span.start + k]))
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let mut dense = vec![vec![Complex64::new(0.0, 0.0); self.n]; self.n];
        for (i, j, g, b) in self.entries() {
            dense[i][j] = Complex64::new(g, b);
        }
        dense
    }
}

/// Series admittance `1 / (r + jx)` split into `(g, b)`.
pub fn series_admittance(r: f64, x: f64) -> (f64, f64) {
    let den = r * r + x * x;
    (r / den, -x / den)
}

/// Builds the bus admittance matrix from the in-service branches and bus
/// shunts of `case`.
pub fn build_ybus(case: &GridCase) -> Result<AdmittanceMatrix, NetworkError> {
    let mut entries: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
    for (k, br) in case.in_service_branches() {
        if br.r == 0.0 && br.x == 0.0 {
            return Err(NetworkError::ZeroImpedanceBranch(k));
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let charging = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap, br.shift);
        let ytt = ys + charging;
        let yff = ytt / (br.tap * br.tap);
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        let (f, t) = (br.from_bus, br.to_bus);
        *entries.entry((f, f)).or_default() += yff;
        *entries.entry((t, t)).or_default() += ytt;
        *entries.entry((f, t)).or_default() += yft;
        *entries.entry((t, f)).or_default() += ytf;
    }
    for bus in &case.buses {
        if bus.gs != 0.0 || bus.bs != 0.0 {
            *entries.entry((bus.id, bus.id)).or_default() += Complex64::new(bus.gs, bus.bs);
        }
    }
    Ok(AdmittanceMatrix::from_entries(case.n_buses(), entries))
}

pub const EDGE_FEATURES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub branch: usize,
    /// `[g_series, b_series, b_charging / 2, tap, shift]`
    pub feat: [f64; EDGE_FEATURES],
}

/// Buses grouped by type plus both directions of every in-service branch.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub n_buses: usize,
    pub pq: Vec<usize>,
    pub pv: Vec<usize>,
    pub slack: Vec<usize>,
    pub edges: Vec<Edge>,
}

impl HeteroGraph {
    pub fn bus_types(&self) -> Vec<BusType> {
        let mut types = vec![BusType::PQ; self.n_buses];
        for &i in &self.pv {
            types[i] = BusType::PV;
        }
        for &i in &self.slack {
            types[i] = BusType::Slack;
        }
        types
    }
}

pub fn build_hetero_graph(case: &GridCase) -> HeteroGraph {
    let part = case.partition();
    let mut edges = Vec::with_capacity(2 * case.branches.len());
    for (k, br) in case.in_service_branches() {
        let (g, b) = series_admittance(br.r, br.x);
        let feat = [g, b, br.b_charging / 2.0, br.tap, br.shift];
        edges.push(Edge {
            from: br.from_bus,
            to: br.to_bus,
            branch: k,
            feat,
        });
        edges.push(Edge {
            from: br.to_bus,
            to: br.from_bus,
            branch: k,
            feat,
        });
    }
    HeteroGraph {
        n_buses: case.n_buses(),
        pq: part.pq,
        pv: part.pv,
        slack: part.slack,
        edges,
    }
}

/// Disjoint-set forest with path halving.
pub struct UnionFind {
    parent: Vec<usize>,
    components: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            components: n,
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
            self.components -= 1;
        }
    }

    pub fn components(&self) -> usize {
        self.components
    }
}

/// True when the in-service branches, minus `removed`, connect every bus.
pub fn is_connected_without(case: &GridCase, removed: &[usize]) -> bool {
    let mut uf = UnionFind::new(case.n_buses());
    for (k, br) in case.in_service_branches() {
        if !removed.contains(&k) {
            uf.union(br.from_bus, br.to_bus);
        }
    }
    uf.components() <= 1
}

pub fn is_connected(case: &GridCase) -> bool {
    is_connected_without(case, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{Branch, Bus, Generator};

    pub(crate) fn two_bus(r: f64, x: f64) -> GridCase {
        let bus = |id, bus_type, p_load| Bus {
            id,
            bus_type,
            p_load,
            q_load: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm_setpoint: 1.0,
            va_setpoint: 0.0,
            base_kv: 230.0,
        };
        GridCase {
            name: "two".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack, 0.0), bus(1, BusType::PQ, 0.0)],
            branches: vec![Branch {
                from_bus: 0,
                to_bus: 1,
                r,
                x,
                b_charging: 0.0,
                tap: 1.0,
                shift: 0.0,
                status: true,
            }],
            generators: vec![Generator {
                bus: 0,
                p_gen: 0.0,
                q_gen: 0.0,
                vm_set: 1.0,
            }],
            external_ids: vec![1, 2],
        }
    }

    #[test]
    fn pure_reactance_branch() {
        let y = build_ybus(&two_bus(0.0, 0.1)).unwrap();
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(close(y.get(0, 0).unwrap(), (0.0, -10.0)));
        assert!(close(y.get(0, 1).unwrap(), (0.0, 10.0)));
        assert!(close(y.get(1, 0).unwrap(), (0.0, 10.0)));
        assert!(close(y.get(1, 1).unwrap(), (0.0, -10.0)));
    }

    #[test]
    fn zero_impedance_is_rejected() {
        assert_eq!(
            build_ybus(&two_bus(0.0, 0.0)),
            Err(NetworkError::ZeroImpedanceBranch(0))
        );
    }

    #[test]
    fn out_of_service_branch_contributes_nothing() {
        let mut case = two_bus(0.01, 0.1);
        case.branches[0].status = false;
        let y = build_ybus(&case).unwrap();
        assert_eq!(y.nnz(), 0);
        let g = build_hetero_graph(&case);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn off_nominal_tap_and_shift() {
        let mut case = two_bus(0.0, 0.1);
        case.branches[0].tap = 1.1;
        case.branches[0].shift = 0.2;
        let y = build_ybus(&case).unwrap();
        let ys = Complex64::new(0.0, -10.0);
        let a = Complex64::from_polar(1.1, 0.2);
        let yft = Complex64::new(y.get(0, 1).unwrap().0, y.get(0, 1).unwrap().1);
        let ytf = Complex64::new(y.get(1, 0).unwrap().0, y.get(1, 0).unwrap().1);
        assert!((yft - (-ys / a.conj())).norm() < 1e-12);
        assert!((ytf - (-ys / a)).norm() < 1e-12);
        assert!((y.get(0, 0).unwrap().1 - (-10.0 / 1.21)).abs() < 1e-12);
    }

    #[test]
    fn two_bus_graph_groups() {
        let g = build_hetero_graph(&two_bus(0.01, 0.1));
        assert_eq!(g.pq, vec![1]);
        assert_eq!(g.slack, vec![0]);
        assert!(g.pv.is_empty());
        assert_eq!(g.edges.len(), 2);
        assert_eq!((g.edges[0].from, g.edges[0].to), (0, 1));
        assert_eq!((g.edges[1].from, g.edges[1].to), (1, 0));
    }

    #[test]
    fn connectivity() {
        let case = two_bus(0.01, 0.1);
        assert!(is_connected(&case));
        assert!(!is_connected_without(&case, &[0]));
    }
}

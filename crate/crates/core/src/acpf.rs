//! Power balance mismatches and a Newton-Raphson AC power flow solver in
//! polar coordinates.

use thiserror::Error;

use crate::case_io::{BusPartition, BusType, GridCase};
use crate::network::{build_ybus, AdmittanceMatrix, NetworkError};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 20;
const PIVOT_MIN: f64 = 1e-12;
const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum AcpfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular Jacobian at iteration {iteration} (pivot {pivot:e})")]
    SingularJacobian { iteration: usize, pivot: f64 },
    #[error("diverged at iteration {iteration}: mismatch norm {norm:e}")]
    Diverged { iteration: usize, norm: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Voltage magnitude (p.u.) and angle (rad) per bus.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowState {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl PowerFlowState {
    /// Unknown magnitudes at 1 p.u., known magnitudes at their setpoints and
    /// every angle at the slack reference.
    pub fn flat_start(case: &GridCase) -> Self {
        let va_ref = case
            .slack_bus()
            .map(|s| case.buses[s].va_setpoint)
            .unwrap_or(0.0);
        let vm = case
            .buses
            .iter()
            .map(|b| match b.bus_type {
                BusType::PQ => 1.0,
                BusType::PV | BusType::Slack => b.vm_setpoint,
            })
            .collect();
        PowerFlowState {
            vm,
            va: vec![va_ref; case.n_buses()],
        }
    }

    pub fn len(&self) -> usize {
        self.vm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vm.is_empty()
    }
}

/// Net scheduled injections (generation minus load) per bus.
#[derive(Clone, Debug, PartialEq)]
pub struct Injections {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl Injections {
    pub fn from_case(case: &GridCase) -> Self {
        let (p, q) = case.net_injections();
        Injections { p, q }
    }
}

/// `dp` over PV then PQ buses, `dq` over PQ buses.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub pvpq: Vec<usize>,
    pub pq: Vec<usize>,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl Mismatch {
    pub fn max_abs(&self) -> f64 {
        self.dp
            .iter()
            .chain(self.dq.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Stacked `[dp; dq]`, the right-hand side of a Newton step.
    pub fn stacked(&self) -> Vec<f64> {
        self.dp.iter().chain(self.dq.iter()).copied().collect()
    }
}

/// Injections implied by the state: `(P_calc, Q_calc)` per bus.
pub fn calc_injections(state: &PowerFlowState, y: &AdmittanceMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = y.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (mut pi, mut qi) = (0.0, 0.0);
        for (j, g, b) in y.row(i) {
            let theta = state.va[i] - state.va[j];
            let (s, c) = theta.sin_cos();
            let vv = state.vm[i] * state.vm[j];
            pi += vv * (g * c + b * s);
            qi += vv * (g * s - b * c);
        }
        p[i] = pi;
        q[i] = qi;
    }
    (p, q)
}

/// Full per-bus mismatch vectors `(dP, dQ)`.
pub fn bus_mismatch(
    state: &PowerFlowState,
    y: &AdmittanceMatrix,
    inj: &Injections,
) -> Result<(Vec<f64>, Vec<f64>), AcpfError> {
    let n = y.n();
    if state.vm.len() != n || state.va.len() != n || inj.p.len() != n || inj.q.len() != n {
        return Err(AcpfError::DimensionMismatch(format!(
            "ybus {n}, vm {}, va {}, p {}, q {}",
            state.vm.len(),
            state.va.len(),
            inj.p.len(),
            inj.q.len()
        )));
    }
    let (pc, qc) = calc_injections(state, y);
    let dp = inj.p.iter().zip(&pc).map(|(s, c)| s - c).collect();
    let dq = inj.q.iter().zip(&qc).map(|(s, c)| s - c).collect();
    Ok((dp, dq))
}

pub fn mismatch(
    state: &PowerFlowState,
    y: &AdmittanceMatrix,
    inj: &Injections,
    part: &BusPartition,
) -> Result<Mismatch, AcpfError> {
    let (dp_all, dq_all) = bus_mismatch(state, y, inj)?;
    let pvpq = part.pvpq();
    let pq = part.pq.clone();
    if pvpq.iter().any(|&i| i >= y.n()) {
        return Err(AcpfError::DimensionMismatch(
            "partition references a bus outside the admittance matrix".into(),
        ));
    }
    let dp = pvpq.iter().map(|&i| dp_all[i]).collect();
    let dq = pq.iter().map(|&i| dq_all[i]).collect();
    Ok(Mismatch { pvpq, pq, dp, dq })
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }
}

/// Jacobian of `[P_calc(pvpq); Q_calc(pq)]` with respect to
/// `[va(pvpq); vm(pq)]`.
pub fn jacobian(state: &PowerFlowState, y: &AdmittanceMatrix, part: &BusPartition) -> DenseMatrix {
    let n = y.n();
    let pvpq = part.pvpq();
    let npvpq = pvpq.len();
    let dim = npvpq + part.pq.len();
    let mut va_col = vec![None; n];
    let mut vm_col = vec![None; n];
    for (k, &i) in pvpq.iter().enumerate() {
        va_col[i] = Some(k);
    }
    for (k, &i) in part.pq.iter().enumerate() {
        vm_col[i] = Some(npvpq + k);
    }
    let mut p_row = vec![None; n];
    let mut q_row = vec![None; n];
    for (k, &i) in pvpq.iter().enumerate() {
        p_row[i] = Some(k);
    }
    for (k, &i) in part.pq.iter().enumerate() {
        q_row[i] = Some(npvpq + k);
    }

    let (pc, qc) = calc_injections(state, y);
    let mut jac = DenseMatrix::zeros(dim, dim);
    for i in 0..n {
        if p_row[i].is_none() && q_row[i].is_none() {
            continue;
        }
        let vmi = state.vm[i];
        let (mut gii, mut bii) = (0.0, 0.0);
        for (j, g, b) in y.row(i) {
            if j == i {
                gii = g;
                bii = b;
                continue;
            }
            let theta = state.va[i] - state.va[j];
            let (s, c) = theta.sin_cos();
            let vv = vmi * state.vm[j];
            let gs_bc = g * s - b * c;
            let gc_bs = g * c + b * s;
            if let Some(r) = p_row[i] {
                if let Some(col) = va_col[j] {
                    jac.add(r, col, vv * gs_bc);
                }
                if let Some(col) = vm_col[j] {
                    jac.add(r, col, vmi * gc_bs);
                }
            }
            if let Some(r) = q_row[i] {
                if let Some(col) = va_col[j] {
                    jac.add(r, col, -vv * gc_bs);
                }
                if let Some(col) = vm_col[j] {
                    jac.add(r, col, vmi * gs_bc);
                }
            }
        }
        if let Some(r) = p_row[i] {
            if let Some(col) = va_col[i] {
                jac.add(r, col, -qc[i] - bii * vmi * vmi);
            }
            if let Some(col) = vm_col[i] {
                jac.add(r, col, pc[i] / vmi + gii * vmi);
            }
        }
        if let Some(r) = q_row[i] {
            if let Some(col) = va_col[i] {
                jac.add(r, col, pc[i] - gii * vmi * vmi);
            }
            if let Some(col) = vm_col[i] {
                jac.add(r, col, qc[i] / vmi - bii * vmi);
            }
        }
    }
    jac
}

/// Solves `a x = b` by LU with partial pivoting. Returns the offending
/// pivot magnitude when it falls below the singularity threshold.
pub fn lu_solve(mut a: DenseMatrix, mut b: Vec<f64>) -> Result<Vec<f64>, f64> {
    let n = a.rows;
    debug_assert_eq!(a.cols, n);
    debug_assert_eq!(b.len(), n);
    for k in 0..n {
        let (piv, piv_abs) = (k..n)
            .map(|r| (r, a.at(r, k).abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs < PIVOT_MIN {
            return Err(piv_abs);
        }
        if piv != k {
            for c in 0..n {
                a.data.swap(k * n + c, piv * n + c);
            }
            b.swap(k, piv);
        }
        let pivot = a.at(k, k);
        for r in k + 1..n {
            let factor = a.at(r, k) / pivot;
            if factor == 0.0 {
                continue;
            }
            a.data[r * n + k] = factor;
            for c in k + 1..n {
                a.data[r * n + c] -= factor * a.data[k * n + c];
            }
            b[r] -= factor * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut acc = b[k];
        for c in k + 1..n {
            acc -= a.at(k, c) * b[c];
        }
        b[k] = acc / a.at(k, k);
    }
    Ok(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NrOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NrOptions {
    fn default() -> Self {
        NrOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NrSolution {
    pub state: PowerFlowState,
    pub iterations: usize,
    pub converged: bool,
    pub max_mismatch: f64,
}

fn check_state(case: &GridCase, state: &PowerFlowState) -> Result<(), AcpfError> {
    let n = case.n_buses();
    if state.vm.len() != n || state.va.len() != n {
        return Err(AcpfError::DimensionMismatch(format!(
            "{n} buses but state has {} / {} entries",
            state.vm.len(),
            state.va.len()
        )));
    }
    if let Some(i) = state.vm.iter().position(|&v| !(v > 0.0)) {
        return Err(AcpfError::InvalidState(format!(
            "non-positive voltage magnitude at bus {i}"
        )));
    }
    Ok(())
}

/// Newton-Raphson from `init`. Slack magnitude and angle and PV magnitudes
/// are never modified.
pub fn solve_nr(
    case: &GridCase,
    init: &PowerFlowState,
    opts: NrOptions,
) -> Result<NrSolution, AcpfError> {
    if !(opts.tol > 0.0) {
        return Err(AcpfError::InvalidTolerance(opts.tol));
    }
    check_state(case, init)?;
    let y = build_ybus(case)?;
    let inj = Injections::from_case(case);
    let part = case.partition();
    solve_nr_with(&y, &inj, &part, init, opts)
}

/// Newton-Raphson on a prebuilt admittance matrix.
pub fn solve_nr_with(
    y: &AdmittanceMatrix,
    inj: &Injections,
    part: &BusPartition,
    init: &PowerFlowState,
    opts: NrOptions,
) -> Result<NrSolution, AcpfError> {
    let mut state = init.clone();
    let npvpq = part.pv.len() + part.pq.len();
    for iteration in 0..=opts.max_iter {
        let mis = mismatch(&state, y, inj, part)?;
        let norm = mis.max_abs();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(AcpfError::Diverged { iteration, norm });
        }
        if norm < opts.tol {
            return Ok(NrSolution {
                state,
                iterations: iteration,
                converged: true,
                max_mismatch: norm,
            });
        }
        if iteration == opts.max_iter {
            return Ok(NrSolution {
                state,
                iterations: iteration,
                converged: false,
                max_mismatch: norm,
            });
        }
        let jac = jacobian(&state, y, part);
        let dx = lu_solve(jac, mis.stacked())
            .map_err(|pivot| AcpfError::SingularJacobian { iteration, pivot })?;
        for (k, &i) in mis.pvpq.iter().enumerate() {
            state.va[i] += dx[k];
        }
        for (k, &i) in mis.pq.iter().enumerate() {
            state.vm[i] += dx[npvpq + k];
        }
    }
    unreachable!("loop returns on its final iteration")
}

/// Largest relative deviation between the analytic Jacobian and central
/// finite differences of the calculated injections, over entries whose
/// magnitude exceeds `1e-8`.
pub fn jacobian_fd_check(
    case: &GridCase,
    state: &PowerFlowState,
    eps: f64,
) -> Result<f64, AcpfError> {
    if !(eps > 0.0) {
        return Err(AcpfError::InvalidStep(eps));
    }
    check_state(case, state)?;
    let y = build_ybus(case)?;
    let part = case.partition();
    let analytic = jacobian(state, &y, &part);
    let pvpq = part.pvpq();
    let npvpq = pvpq.len();
    let dim = npvpq + part.pq.len();

    let eval = |s: &PowerFlowState| -> Vec<f64> {
        let (p, q) = calc_injections(s, &y);
        pvpq.iter()
            .map(|&i| p[i])
            .chain(part.pq.iter().map(|&i| q[i]))
            .collect()
    };
    let perturbed = |col: usize, delta: f64| -> PowerFlowState {
        let mut s = state.clone();
        if col < npvpq {
            s.va[pvpq[col]] += delta;
        } else {
            s.vm[part.pq[col - npvpq]] += delta;
        }
        s
    };

    let mut worst = 0.0f64;
    for col in 0..dim {
        let plus = eval(&perturbed(col, eps));
        let minus = eval(&perturbed(col, -eps));
        for row in 0..dim {
            let fd = (plus[row] - minus[row]) / (2.0 * eps);
            let an = analytic.at(row, col);
            if fd.abs().max(an.abs()) <= 1e-8 {
                continue;
            }
            worst = worst.max((an - fd).abs() / fd.abs().max(1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{Branch, Bus, Generator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bus(id: usize, bus_type: BusType, p_load: f64, q_load: f64) -> Bus {
        Bus {
            id,
            bus_type,
            p_load,
            q_load,
            gs: 0.0,
            bs: 0.0,
            vm_setpoint: 1.0,
            va_setpoint: 0.0,
            base_kv: 230.0,
        }
    }

    fn line(from_bus: usize, to_bus: usize, r: f64, x: f64) -> Branch {
        Branch {
            from_bus,
            to_bus,
            r,
            x,
            b_charging: 0.0,
            tap: 1.0,
            shift: 0.0,
            status: true,
        }
    }

    fn two_bus(r: f64, x: f64, p_load: f64) -> GridCase {
        GridCase {
            name: "two".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack, 0.0, 0.0), bus(1, BusType::PQ, p_load, 0.2 * p_load)],
            branches: vec![line(0, 1, r, x)],
            generators: vec![Generator {
                bus: 0,
                p_gen: 0.0,
                q_gen: 0.0,
                vm_set: 1.0,
            }],
            external_ids: vec![1, 2],
        }
    }

    fn three_bus() -> GridCase {
        let mut pv = bus(2, BusType::PV, 0.0, 0.0);
        pv.vm_setpoint = 1.02;
        let mut case = GridCase {
            name: "three".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack, 0.0, 0.0), bus(1, BusType::PQ, 0.9, 0.3), pv],
            branches: vec![line(0, 1, 0.02, 0.08), line(1, 2, 0.01, 0.06), line(0, 2, 0.03, 0.1)],
            generators: vec![
                Generator { bus: 0, p_gen: 0.0, q_gen: 0.0, vm_set: 1.0 },
                Generator { bus: 2, p_gen: 0.5, q_gen: 0.0, vm_set: 1.02 },
            ],
            external_ids: vec![1, 2, 3],
        };
        case.branches[1].b_charging = 0.04;
        case.branches[2].tap = 0.98;
        case.branches[2].shift = 0.05;
        case.buses[1].bs = 0.05;
        case
    }

    #[test]
    fn isolated_bus_has_zero_mismatch() {
        let mut case = two_bus(0.01, 0.1, 0.0);
        case.branches[0].status = false;
        let y = build_ybus(&case).unwrap();
        let state = PowerFlowState::flat_start(&case);
        let (dp, dq) = bus_mismatch(&state, &y, &Injections::from_case(&case)).unwrap();
        assert_eq!(dp, vec![0.0, 0.0]);
        assert_eq!(dq, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_identical_voltages_carry_no_flow() {
        let case = two_bus(0.0, 0.1, 0.0);
        let y = build_ybus(&case).unwrap();
        let state = PowerFlowState::flat_start(&case);
        let m = mismatch(&state, &y, &Injections::from_case(&case), &case.partition()).unwrap();
        assert!(m.dp[0].abs() < 1e-15);
        assert!(m.dq[0].abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let case = two_bus(0.0, 0.1, 0.0);
        let y = build_ybus(&case).unwrap();
        let state = PowerFlowState { vm: vec![1.0], va: vec![0.0] };
        assert!(matches!(
            bus_mismatch(&state, &y, &Injections::from_case(&case)),
            Err(AcpfError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn slack_only_case_is_trivially_converged() {
        let case = GridCase {
            name: "one".into(),
            base_mva: 100.0,
            buses: vec![bus(0, BusType::Slack, 0.0, 0.0)],
            branches: vec![],
            generators: vec![],
            external_ids: vec![1],
        };
        let init = PowerFlowState::flat_start(&case);
        let sol = solve_nr(&case, &init, NrOptions::default()).unwrap();
        assert_eq!(sol.state, init);
        assert_eq!(sol.iterations, 0);
        assert!(sol.converged);
    }

    #[test]
    fn three_bus_converges_and_keeps_setpoints() {
        let case = three_bus();
        let init = PowerFlowState::flat_start(&case);
        let sol = solve_nr(&case, &init, NrOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 6);
        assert!(sol.max_mismatch < 1e-8);
        assert_eq!(sol.state.vm[0], 1.0);
        assert_eq!(sol.state.va[0], 0.0);
        assert_eq!(sol.state.vm[2], 1.02);
    }

    #[test]
    fn infeasible_load_does_not_converge() {
        let case = two_bus(0.01, 0.1, 100.0);
        let init = PowerFlowState::flat_start(&case);
        match solve_nr(&case, &init, NrOptions::default()) {
            Err(AcpfError::Diverged { .. }) => {}
            Ok(sol) => assert!(!sol.converged),
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn fd_check_rejects_zero_step() {
        let case = two_bus(0.01, 0.1, 0.5);
        let state = PowerFlowState::flat_start(&case);
        assert_eq!(
            jacobian_fd_check(&case, &state, 0.0),
            Err(AcpfError::InvalidStep(0.0))
        );
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences_near_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in [two_bus(0.01, 0.1, 0.5), three_bus()] {
            for _ in 0..10 {
                let mut state = PowerFlowState::flat_start(&case);
                for i in 0..state.len() {
                    state.vm[i] += rng.gen_range(-0.05..0.05);
                    state.va[i] += rng.gen_range(-0.1..0.1);
                }
                let err = jacobian_fd_check(&case, &state, 1e-6).unwrap();
                assert!(err < 1e-6, "relative error {err}");
            }
        }
    }

    #[test]
    fn mismatch_is_invariant_to_reference_shift() {
        let case = three_bus();
        let y = build_ybus(&case).unwrap();
        let inj = Injections::from_case(&case);
        let state = PowerFlowState {
            vm: vec![1.0, 0.97, 1.02],
            va: vec![0.0, -0.08, 0.03],
        };
        let shifted = PowerFlowState {
            vm: state.vm.clone(),
            va: state.va.iter().map(|a| a + 0.7).collect(),
        };
        let (a_p, a_q) = bus_mismatch(&state, &y, &inj).unwrap();
        let (b_p, b_q) = bus_mismatch(&shifted, &y, &inj).unwrap();
        for k in 0..3 {
            assert!((a_p[k] - b_p[k]).abs() < 1e-12);
            assert!((a_q[k] - b_q[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn lu_detects_singular_matrix() {
        let a = DenseMatrix {
            rows: 2,
            cols: 2,
            data: vec![1.0, 2.0, 2.0, 4.0],
        };
        assert!(lu_solve(a, vec![1.0, 2.0]).is_err());
        let a = DenseMatrix {
            rows: 2,
            cols: 2,
            data: vec![0.0, 2.0, 3.0, 1.0],
        };
        let x = lu_solve(a, vec![4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }
}

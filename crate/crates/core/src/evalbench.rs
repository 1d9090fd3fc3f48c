//! Accuracy metrics, ablation grids, loop and missing-Q sweeps, and N-2
//! contingency timing.

use std::io;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acpf::{solve_nr, NrOptions, PowerFlowState};
use crate::case_io::GridCase;
use crate::datagen::Prepared;
use crate::flownet::FlowNetConfig;
use crate::network::is_connected_without;
use crate::seiter::{self, MaskGroup, SeIterConfig, SeIterError};
use crate::tensor::ParamStore;

pub const TIMING_REPEATS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no values to compare")]
    EmptyGroup,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample {0} has no label")]
    MissingLabel(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    SeIter(#[from] SeIterError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Root mean squared difference of two aligned arrays.
pub fn rmse(pred: &[f64], labels: &[f64]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyGroup);
    }
    let sq: f64 = pred.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// RMSE of PQ magnitude, PQ angle and PV angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRmse {
    pub pq_vm: f64,
    pub pq_va: f64,
    pub pv_va: f64,
}

/// Pools every PQ and PV bus of every sample and compares `states` with the
/// labels.
pub fn group_rmse(samples: &[Prepared], states: &[&PowerFlowState]) -> Result<GroupRmse> {
    if samples.len() != states.len() {
        return Err(EvalError::DimensionMismatch(format!(
            "{} states for {} samples",
            states.len(),
            samples.len()
        )));
    }
    let (mut pvm, mut lvm, mut ppa, mut lpa, mut pva, mut lva) = Default::default();
    let push = |dst: &mut Vec<f64>, src: &[f64], idx: &[usize]| dst.extend(idx.iter().map(|&i| src[i]));
    for (s, st) in samples.iter().zip(states) {
        let label = s.label.as_ref().ok_or(EvalError::MissingLabel(s.index))?;
        let g = &s.graph;
        if st.vm.len() != g.n_buses || st.va.len() != g.n_buses {
            return Err(EvalError::DimensionMismatch(format!("state of sample {}", s.index)));
        }
        push(&mut pvm, &st.vm, &g.pq);
        push(&mut lvm, &label.vm, &g.pq);
        push(&mut ppa, &st.va, &g.pq);
        push(&mut lpa, &label.va, &g.pq);
        push(&mut pva, &st.va, &g.pv);
        push(&mut lva, &label.va, &g.pv);
    }
    Ok(GroupRmse {
        pq_vm: rmse(&pvm, &lvm)?,
        pq_va: rmse(&ppa, &lpa)?,
        pv_va: rmse(&pva, &lva)?,
    })
}

/// Hash of a model configuration and its parameter values.
pub fn fingerprint(model: &FlowNetConfig, params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(model.to_json().to_string().as_bytes());
    for (name, p) in params.iter() {
        h.update(name.as_bytes());
        for v in &p.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_pq_vm: f64,
    pub rmse_pq_va: f64,
    pub rmse_pv_va: f64,
    pub n_samples: usize,
    pub loops: usize,
    pub mask_fraction: f64,
    pub mask_group: MaskGroup,
    pub fingerprint: String,
    /// RMSE after each loop; the last entry equals the headline values.
    pub per_loop: Vec<GroupRmse>,
}

impl EvalReport {
    pub fn rmse(&self) -> GroupRmse {
        GroupRmse {
            pq_vm: self.rmse_pq_vm,
            pq_va: self.rmse_pq_va,
            pv_va: self.rmse_pv_va,
        }
    }
}

/// Masks that withhold Q on exactly `round(rho * |group|)` buses of each
/// sample, chosen per sample from `seed`.
pub fn q_masks(samples: &[Prepared], rho: f64, group: MaskGroup, seed: u64) -> Result<Vec<Vec<bool>>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(EvalError::InvalidArgument(format!("mask fraction {rho} outside [0, 1]")));
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut mask = vec![true; s.graph.n_buses];
            let buses = group.buses(&s.graph);
            let k = (rho * buses.len() as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s.index as u64);
            for j in sample_indices(&mut rng, buses.len(), k) {
                mask[buses[j]] = false;
            }
            mask
        })
        .collect())
}

fn report(
    samples: &[Prepared],
    params: &ParamStore,
    model: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
    masks: &[Vec<bool>],
    rho: f64,
    group: MaskGroup,
) -> Result<EvalReport> {
    let per_loop = seiter::evaluate_per_loop(samples, params, model, loops, batch_size, masks)?;
    let last = per_loop[loops - 1].clone();
    Ok(EvalReport {
        rmse_pq_vm: last.pq_vm,
        rmse_pq_va: last.pq_va,
        rmse_pv_va: last.pv_va,
        n_samples: samples.len(),
        loops,
        mask_fraction: rho,
        mask_group: group,
        fingerprint: fingerprint(model, params),
        per_loop,
    })
}

/// Iterative inference over `samples` with every Q present.
pub fn evaluate(
    samples: &[Prepared],
    params: &ParamStore,
    model: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    let masks = seiter::all_present(samples);
    report(samples, params, model, loops, batch_size, &masks, 0.0, MaskGroup::Pq)
}

/// Evaluation with Q withheld on a `rho` fraction of the `group` buses.
#[allow(clippy::too_many_arguments)]
pub fn missing_q_eval(
    samples: &[Prepared],
    params: &ParamStore,
    model: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
    rho: f64,
    group: MaskGroup,
    seed: u64,
) -> Result<EvalReport> {
    let masks = q_masks(samples, rho, group, seed)?;
    report(samples, params, model, loops, batch_size, &masks, rho, group)
}

/// RMSE for each loop count in `loops_list`. A run of `L` loops passes
/// through the states of every shorter run, so one run at the largest count
/// serves every entry.
pub fn loop_sweep(
    samples: &[Prepared],
    params: &ParamStore,
    model: &FlowNetConfig,
    loops_list: &[usize],
    batch_size: usize,
) -> Result<Vec<(usize, GroupRmse)>> {
    let max = loops_list.iter().copied().max().ok_or(EvalError::EmptyGroup)?;
    if loops_list.contains(&0) {
        return Err(EvalError::InvalidArgument("loop counts must be positive".into()));
    }
    let masks = seiter::all_present(samples);
    let per_loop = seiter::evaluate_per_loop(samples, params, model, max, batch_size, &masks)?;
    Ok(loops_list.iter().map(|&l| (l, per_loop[l - 1].clone())).collect())
}

/// One row of an ablation grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub fusion: bool,
    pub vna: bool,
    pub sgf: bool,
    pub seiter: bool,
}

impl AblationSpec {
    pub fn new(fusion: bool, vna: bool, sgf: bool, seiter: bool) -> Self {
        let mut name = String::from("base");
        for (on, part) in [(fusion, "+fusion"), (vna, "+vna"), (sgf, "+sgf"), (seiter, "+seiter")] {
            if on {
                name.push_str(part);
            }
        }
        AblationSpec {
            name,
            fusion,
            vna,
            sgf,
            seiter,
        }
    }

    /// `base` with the model and loop settings of this row applied.
    pub fn apply(&self, base: &SeIterConfig) -> SeIterConfig {
        let mut cfg = base.clone();
        cfg.model.fusion = self.fusion;
        cfg.model.vna = self.vna;
        cfg.model.sgf = self.sgf;
        if !self.seiter {
            cfg = cfg.without_seiter();
        }
        cfg
    }
}

/// Base, +fusion, +fusion+vna, +fusion+sgf and the full model, each without
/// and with iterative estimation.
pub fn default_grid() -> Vec<AblationSpec> {
    let models = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, false, true),
        (true, true, true),
    ];
    [false, true]
        .iter()
        .flat_map(|&s| models.iter().map(move |&(f, v, g)| AblationSpec::new(f, v, g, s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub report: EvalReport,
}

/// Trains and evaluates one grid row.
pub fn run_ablation_row(
    train: &[Prepared],
    test: &[Prepared],
    base_case: &GridCase,
    base_cfg: &SeIterConfig,
    spec: &AblationSpec,
    out_dir: Option<&Path>,
) -> Result<AblationRow> {
    let cfg = spec.apply(base_cfg);
    let dir = out_dir.map(|d| d.join(&spec.name));
    let outcome = seiter::train(train, test, base_case, &cfg, dir.as_deref())?;
    let report = evaluate(test, &outcome.teacher, &outcome.model, cfg.loops, cfg.batch_size)?;
    Ok(AblationRow {
        spec: spec.clone(),
        report,
    })
}

pub fn ablate(
    train: &[Prepared],
    test: &[Prepared],
    base_case: &GridCase,
    base_cfg: &SeIterConfig,
    grid: &[AblationSpec],
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for spec in grid {
        let row = run_ablation_row(train, test, base_case, base_cfg, spec, out_dir)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], w: impl io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["name", "seiter", "fusion", "vna", "sgf", "pq_vm", "pq_va", "pv_va"])?;
    for r in rows {
        let s = &r.spec;
        out.write_record([
            s.name.clone(),
            s.seiter.to_string(),
            s.fusion.to_string(),
            s.vna.to_string(),
            s.sgf.to_string(),
            r.report.rmse_pq_vm.to_string(),
            r.report.rmse_pq_va.to_string(),
            r.report.rmse_pv_va.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Unordered pairs of distinct in-service branches whose removal leaves the
/// network connected, in lexicographic order.
pub fn n2_pairs(case: &GridCase) -> Vec<[usize; 2]> {
    let live: Vec<usize> = case.in_service_branches().map(|(k, _)| k).collect();
    let mut pairs = Vec::new();
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            if is_connected_without(case, &[i, j]) {
                pairs.push([i, j]);
            }
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyResult {
    pub dropped: [usize; 2],
    pub converged: bool,
    pub nr_iterations: usize,
    pub nr_seconds: f64,
    /// Share of the batched model time attributed to this case.
    pub model_seconds: f64,
    /// Largest `|vm|` or `|va|` difference between the model and the solver;
    /// absent when the solver did not converge.
    pub max_discrepancy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub n_cases: usize,
    pub n_converged: usize,
    pub nr_total_seconds: f64,
    pub model_total_seconds: f64,
    pub nr_mean_seconds: f64,
    pub model_mean_seconds: f64,
    pub repeats: usize,
    pub max_discrepancy: f64,
    pub median_discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyReport {
    pub case: String,
    pub loops: usize,
    pub results: Vec<ContingencyResult>,
    pub summary: TimingSummary,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(mut f: impl FnMut() -> T) -> (T, f64) {
    let mut times = Vec::with_capacity(TIMING_REPEATS);
    let mut out = None;
    for _ in 0..TIMING_REPEATS {
        let start = Instant::now();
        out = Some(f());
        times.push(start.elapsed().as_secs_f64());
    }
    (out.expect("at least one repeat"), median(times))
}

/// Solves every connected N-2 topology of `case` with Newton-Raphson and with
/// the model, timing each method as the median of three repetitions of its
/// numeric work.
pub fn contingency_n2(
    case: &GridCase,
    teacher: &ParamStore,
    model: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
) -> Result<ContingencyReport> {
    let pairs = n2_pairs(case);
    let variants: Vec<GridCase> = pairs
        .iter()
        .map(|p| {
            let mut c = case.clone();
            for &k in p {
                c.branches[k].status = false;
            }
            c
        })
        .collect();
    let prepared = variants
        .iter()
        .enumerate()
        .map(|(i, c)| Prepared::from_case(i, c))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| EvalError::InvalidArgument(e.to_string()))?;

    let nr: Vec<_> = variants
        .par_iter()
        .zip(&prepared)
        .map(|(c, p)| timed(|| solve_nr(c, &p.init, NrOptions::default())))
        .collect();

    let masks = seiter::all_present(&prepared);
    let mut model_states = Vec::with_capacity(prepared.len());
    let mut model_seconds = Vec::with_capacity(prepared.len());
    for (chunk, mchunk) in prepared.chunks(batch_size).zip(masks.chunks(batch_size)) {
        let (out, secs) = timed(|| seiter::infer_batch(chunk, teacher, model, loops, batch_size, mchunk));
        let out = out?;
        model_seconds.extend(std::iter::repeat(secs / chunk.len() as f64).take(chunk.len()));
        model_states.extend(out.into_iter().map(|r| r.state));
    }

    let mut results = Vec::with_capacity(pairs.len());
    for (((pair, (sol, nr_secs)), state), m_secs) in pairs.iter().zip(nr).zip(&model_states).zip(&model_seconds) {
        let (converged, iterations, discrepancy) = match sol {
            Ok(sol) if sol.converged => {
                let d = sol
                    .state
                    .vm
                    .iter()
                    .zip(&state.vm)
                    .chain(sol.state.va.iter().zip(&state.va))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                (true, sol.iterations, Some(d))
            }
            Ok(sol) => (false, sol.iterations, None),
            Err(_) => (false, 0, None),
        };
        results.push(ContingencyResult {
            dropped: *pair,
            converged,
            nr_iterations: iterations,
            nr_seconds: nr_secs,
            model_seconds: *m_secs,
            max_discrepancy: discrepancy,
        });
    }
    let n = results.len();
    let nr_total: f64 = results.iter().map(|r| r.nr_seconds).sum();
    let model_total: f64 = results.iter().map(|r| r.model_seconds).sum();
    let discrepancies: Vec<f64> = results.iter().filter_map(|r| r.max_discrepancy).collect();
    let summary = TimingSummary {
        n_cases: n,
        n_converged: discrepancies.len(),
        nr_total_seconds: nr_total,
        model_total_seconds: model_total,
        nr_mean_seconds: nr_total / n.max(1) as f64,
        model_mean_seconds: model_total / n.max(1) as f64,
        repeats: TIMING_REPEATS,
        max_discrepancy: discrepancies.iter().copied().fold(0.0, f64::max),
        median_discrepancy: median(discrepancies),
    };
    Ok(ContingencyReport {
        case: case.name.clone(),
        loops,
        results,
        summary,
    })
}

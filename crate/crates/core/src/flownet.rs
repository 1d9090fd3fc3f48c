//! Graph network over the PQ, PV and slack buses of a case.
//!
//! Node features of a batch live in one matrix whose rows are stacked by
//! type: every PQ row of every graph, then every PV row, then one slack row
//! per graph. Each block applies a mean-aggregation graph convolution,
//! virtual-node attention and a slack-gated feed-forward layer; a predictor
//! maps the block outputs to voltage increments.

use std::ops::Range;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{bus_mismatch, Injections, PowerFlowState};
use crate::case_io::GridCase;
use crate::network::{build_hetero_graph, build_ybus, HeteroGraph, EDGE_FEATURES};
use crate::tensor::params::Leaves;
use crate::tensor::{ParamStore, ParamTensor, SparseMatrix, Tensor, TensorError};

pub const FLOWNET_SCHEMA: &str = "flownet/1";
pub const RAW_FEATURES: usize = 7;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum FlowNetError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph has no slack bus")]
    MissingSlack,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout does not match the config: {0}")]
    ParamLayout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, FlowNetError>;

/// Per-column divisors applied to raw node and edge features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScale {
    pub pq: Vec<f64>,
    pub pv: Vec<f64>,
    pub slack: Vec<f64>,
    pub edge: Vec<f64>,
}

impl Default for InputScale {
    fn default() -> Self {
        InputScale {
            pq: vec![1.0; RAW_FEATURES],
            pv: vec![1.0; RAW_FEATURES],
            slack: vec![1.0; RAW_FEATURES],
            edge: vec![1.0; EDGE_FEATURES],
        }
    }
}

fn column_mean_abs(rows: &[f64], width: usize) -> Vec<f64> {
    let n = rows.len() / width;
    (0..width)
        .map(|c| {
            let m = (0..n).map(|r| rows[r * width + c].abs()).sum::<f64>() / n.max(1) as f64;
            if m > 1e-6 {
                m
            } else {
                1.0
            }
        })
        .collect()
}

impl InputScale {
    /// Mean absolute value of each raw feature column on `case` at its flat
    /// start; columns that are (near) zero keep a divisor of 1.
    pub fn from_case(case: &GridCase) -> Result<Self> {
        let graph = build_hetero_graph(case);
        let y = build_ybus(case).map_err(|e| FlowNetError::InvalidConfig(e.to_string()))?;
        let inj = Injections::from_case(case);
        let state = PowerFlowState::flat_start(case);
        let (dp, dq) = bus_mismatch(&state, &y, &inj)
            .map_err(|e| FlowNetError::DimensionMismatch(e.to_string()))?;
        let q_present = vec![true; case.n_buses()];
        let setpoints = Setpoints::from_case(case);
        let view = SampleInputs {
            inj: &inj,
            setpoints: &setpoints,
            state: &state,
            dp: &dp,
            dq: &dq,
            q_present: &q_present,
        };
        let raw = RawFeatures::build(&graph, &[view])?;
        let edge_rows: Vec<f64> = graph.edges.iter().flat_map(|e| e.feat).collect();
        Ok(InputScale {
            pq: column_mean_abs(&raw.pq, RAW_FEATURES),
            pv: column_mean_abs(&raw.pv, RAW_FEATURES),
            slack: column_mean_abs(&raw.slack, RAW_FEATURES),
            edge: column_mean_abs(&edge_rows, EDGE_FEATURES),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    pub schema: String,
    pub d: usize,
    pub d_k: usize,
    pub k_blocks: usize,
    pub gcn_layers_per_block: usize,
    /// Predictor reads every block output (true) or only the last one.
    pub fusion: bool,
    pub vna: bool,
    pub sgf: bool,
    pub scale: InputScale,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        Self::with_width(64)
    }
}

impl FlowNetConfig {
    pub fn with_width(d: usize) -> Self {
        FlowNetConfig {
            schema: FLOWNET_SCHEMA.into(),
            d,
            d_k: 2 * d,
            k_blocks: 4,
            gcn_layers_per_block: 2,
            fusion: true,
            vna: true,
            sgf: true,
            scale: InputScale::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self::with_width(128)
    }

    /// Plain graph convolution: no attention, no gating, last block only.
    pub fn gcn_only(mut self) -> Self {
        self.fusion = false;
        self.vna = false;
        self.sgf = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowNetError::InvalidConfig(m));
        if self.schema != FLOWNET_SCHEMA {
            return bad(format!("schema {:?}, expected {FLOWNET_SCHEMA:?}", self.schema));
        }
        if self.d == 0 || self.k_blocks == 0 || self.gcn_layers_per_block == 0 {
            return bad("d, k_blocks and gcn_layers_per_block must be positive".into());
        }
        if self.d_k != 2 * self.d {
            return bad(format!("d_k must be 2*d = {}, got {}", 2 * self.d, self.d_k));
        }
        let s = &self.scale;
        if s.pq.len() != RAW_FEATURES
            || s.pv.len() != RAW_FEATURES
            || s.slack.len() != RAW_FEATURES
            || s.edge.len() != EDGE_FEATURES
        {
            return bad("input scale has the wrong width".into());
        }
        if s.pq.iter().chain(&s.pv).chain(&s.slack).chain(&s.edge).any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("input scale entries must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: FlowNetConfig =
            serde_json::from_value(v.clone()).map_err(|e| FlowNetError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width of the predictor input.
    pub fn head_width(&self) -> usize {
        if self.fusion {
            self.k_blocks * self.d
        } else {
            self.d
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter the config uses.
fn param_specs(cfg: &FlowNetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Glorot));
        if bias {
            out.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        out.push((format!("{name}.gain"), vec![d], Init::Ones));
        out.push((format!("{name}.bias"), vec![d], Init::Zeros));
    };
    for t in ["pq", "pv", "slack"] {
        linear(&mut out, &format!("embed.{t}"), RAW_FEATURES, d, true);
    }
    for k in 0..cfg.k_blocks {
        for l in 0..cfg.gcn_layers_per_block {
            let p = format!("block{k}.gcn{l}");
            linear(&mut out, &format!("{p}.self"), d, d, true);
            linear(&mut out, &format!("{p}.nbr"), d, d, false);
            linear(&mut out, &format!("{p}.edge"), EDGE_FEATURES, d, false);
        }
        if cfg.vna {
            let p = format!("block{k}.vna");
            linear(&mut out, &format!("{p}.fuse"), d, d, true);
            linear(&mut out, &format!("{p}.query"), d, 2 * d, false);
            linear(&mut out, &format!("{p}.out"), 2 * d, d, true);
            for t in ["pq", "pv", "slack"] {
                norm(&mut out, &format!("{p}.norm_{t}"));
            }
        }
        if cfg.sgf {
            for t in ["pq", "pv"] {
                let p = format!("block{k}.sgf_{t}");
                linear(&mut out, &format!("{p}.value"), 2 * d, d, true);
                linear(&mut out, &format!("{p}.gate"), 2 * d, d, true);
                linear(&mut out, &format!("{p}.out"), d, d, true);
                norm(&mut out, &format!("{p}.norm"));
            }
        }
    }
    let w = cfg.head_width();
    for (t, outputs) in [("pq", 2), ("pv", 1)] {
        linear(&mut out, &format!("head_{t}.hidden"), w, d, true);
        out.push((format!("head_{t}.out.w"), vec![d, outputs], Init::Zeros));
        out.push((format!("head_{t}.out.b"), vec![outputs], Init::Zeros));
    }
    out
}

/// Glorot-uniform weights, zero biases, unit norm gains. With
/// `zero_output`, the predictor's output layer starts at zero so that the
/// untrained model returns its input state unchanged.
pub fn init_params(cfg: &FlowNetConfig, seed: u64, zero_output: bool) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let is_output = name.starts_with("head_") && name.contains(".out.w");
        let init = if is_output && !zero_output { Init::Glorot } else { init };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Glorot => {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        store.insert(name, ParamTensor::new(&shape, data)?);
    }
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` needs.
pub fn check_params(cfg: &FlowNetConfig, store: &ParamStore) -> Result<()> {
    let specs = param_specs(cfg);
    if specs.len() != store.len() {
        return Err(FlowNetError::ParamLayout(format!(
            "expected {} tensors, found {}",
            specs.len(),
            store.len()
        )));
    }
    for (name, shape, _) in specs {
        match store.get(&name) {
            None => return Err(FlowNetError::ParamLayout(format!("missing {name}"))),
            Some(p) if p.shape != shape => {
                return Err(FlowNetError::ParamLayout(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    p.shape
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Topology of a batch of graphs sharing one bus typing, as the disjoint
/// union of the graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub n_buses: usize,
    pub pq: Vec<usize>,
    pub pv: Vec<usize>,
    pub slack: usize,
    graph_of_row: Vec<usize>,
    attention_group: Vec<usize>,
    adj: Rc<SparseMatrix>,
    edge_mean: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&HeteroGraph], scale: &InputScale) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| FlowNetError::DimensionMismatch("empty batch".into()))?;
        let slack = match first.slack.as_slice() {
            [] => return Err(FlowNetError::MissingSlack),
            [s] => *s,
            more => {
                return Err(FlowNetError::DimensionMismatch(format!(
                    "{} slack buses in one graph",
                    more.len()
                )))
            }
        };
        for g in graphs {
            if g.n_buses != first.n_buses || g.pq != first.pq || g.pv != first.pv || g.slack != first.slack {
                return Err(FlowNetError::DimensionMismatch(
                    "graphs in a batch must share the bus typing".into(),
                ));
            }
        }
        let b = graphs.len();
        let n = first.n_buses;
        let (npq, npv) = (first.pq.len(), first.pv.len());
        let mut local_row = vec![0usize; n];
        let mut kind = vec![0usize; n];
        for (p, &i) in first.pq.iter().enumerate() {
            local_row[i] = p;
        }
        for (p, &i) in first.pv.iter().enumerate() {
            local_row[i] = p;
            kind[i] = 1;
        }
        kind[slack] = 2;
        let row_of = |s: usize, i: usize| match kind[i] {
            0 => s * npq + local_row[i],
            1 => b * npq + s * npv + local_row[i],
            _ => b * (npq + npv) + s,
        };
        let rows = b * n;
        let mut graph_of_row = vec![0usize; rows];
        let mut attention_group = vec![0usize; rows];
        let mut degree = vec![0usize; rows];
        let mut edge_sum = vec![0.0; rows * EDGE_FEATURES];
        let mut triplets = Vec::new();
        for (s, g) in graphs.iter().enumerate() {
            for i in 0..n {
                let r = row_of(s, i);
                graph_of_row[r] = s;
                attention_group[r] = 3 * s + kind[i];
            }
            for e in &g.edges {
                let (dst, src) = (row_of(s, e.to), row_of(s, e.from));
                degree[dst] += 1;
                triplets.push((dst, src, 1.0));
                for (c, v) in e.feat.iter().enumerate() {
                    edge_sum[dst * EDGE_FEATURES + c] += v / scale.edge[c];
                }
            }
        }
        for t in &mut triplets {
            t.2 = 1.0 / degree[t.0] as f64;
        }
        for (r, &deg) in degree.iter().enumerate() {
            if deg > 0 {
                edge_sum[r * EDGE_FEATURES..(r + 1) * EDGE_FEATURES]
                    .iter_mut()
                    .for_each(|v| *v /= deg as f64);
            }
        }
        Ok(GraphBatch {
            n_graphs: b,
            n_buses: n,
            pq: first.pq.clone(),
            pv: first.pv.clone(),
            slack,
            graph_of_row,
            attention_group,
            adj: Rc::new(SparseMatrix::from_triplets(rows, rows, triplets)?),
            edge_mean: Tensor::new(&[rows, EDGE_FEATURES], edge_sum)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.n_graphs * self.n_buses
    }

    pub fn pq_rows(&self) -> Range<usize> {
        0..self.n_graphs * self.pq.len()
    }

    pub fn pv_rows(&self) -> Range<usize> {
        let start = self.n_graphs * self.pq.len();
        start..start + self.n_graphs * self.pv.len()
    }

    pub fn slack_rows(&self) -> Range<usize> {
        let start = self.n_graphs * (self.pq.len() + self.pv.len());
        start..start + self.n_graphs
    }

    /// Graph index of each stacked row.
    pub fn graph_of_row(&self) -> &[usize] {
        &self.graph_of_row
    }

    /// Stacked row order as `(graph, bus)` pairs.
    pub fn row_buses(&self) -> Vec<(usize, usize)> {
        let b = self.n_graphs;
        let mut out = Vec::with_capacity(self.rows());
        for group in [&self.pq, &self.pv] {
            for s in 0..b {
                out.extend(group.iter().map(|&i| (s, i)));
            }
        }
        out.extend((0..b).map(|s| (s, self.slack)));
        out
    }
}

/// Scheduled voltage magnitude and angle per bus.
#[derive(Clone, Debug, PartialEq)]
pub struct Setpoints {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
}

impl Setpoints {
    pub fn from_case(case: &GridCase) -> Self {
        Setpoints {
            vm: case.buses.iter().map(|b| b.vm_setpoint).collect(),
            va: case.buses.iter().map(|b| b.va_setpoint).collect(),
        }
    }
}

/// Everything the embedding reads for one graph, indexed by bus.
#[derive(Clone, Copy, Debug)]
pub struct SampleInputs<'a> {
    pub inj: &'a Injections,
    pub setpoints: &'a Setpoints,
    pub state: &'a PowerFlowState,
    pub dp: &'a [f64],
    pub dq: &'a [f64],
    /// False where the bus's reactive injection is withheld.
    pub q_present: &'a [bool],
}

/// Unscaled input rows per bus type, in stacked order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub pq: Vec<f64>,
    pub pv: Vec<f64>,
    pub slack: Vec<f64>,
}

impl RawFeatures {
    /// PQ: `[P, Q, vm, va, dP, dQ, q_present]`; a withheld Q zeroes the Q and
    /// dQ slots and the flag. PV: `[P, vm_set, va, dP, 0, 0, q_present]`.
    /// Slack: `[vm_set, va_set, 0, 0, 0, 0, 1]`.
    pub fn build(graph: &HeteroGraph, samples: &[SampleInputs<'_>]) -> Result<Self> {
        let n = graph.n_buses;
        let slack = *graph.slack.first().ok_or(FlowNetError::MissingSlack)?;
        for s in samples {
            let lens = [
                s.inj.p.len(),
                s.inj.q.len(),
                s.setpoints.vm.len(),
                s.setpoints.va.len(),
                s.state.vm.len(),
                s.state.va.len(),
                s.dp.len(),
                s.dq.len(),
                s.q_present.len(),
            ];
            if lens.iter().any(|&l| l != n) {
                return Err(FlowNetError::DimensionMismatch(format!(
                    "graph has {n} buses, sample vectors have lengths {lens:?}"
                )));
            }
        }
        let mut raw = RawFeatures {
            pq: Vec::with_capacity(samples.len() * graph.pq.len() * RAW_FEATURES),
            pv: Vec::with_capacity(samples.len() * graph.pv.len() * RAW_FEATURES),
            slack: Vec::with_capacity(samples.len() * RAW_FEATURES),
        };
        for s in samples {
            for &i in &graph.pq {
                let qp = s.q_present[i];
                let mask = |v: f64| if qp { v } else { 0.0 };
                raw.pq.extend_from_slice(&[
                    s.inj.p[i],
                    mask(s.inj.q[i]),
                    s.state.vm[i],
                    s.state.va[i],
                    s.dp[i],
                    mask(s.dq[i]),
                    mask(1.0),
                ]);
            }
        }
        for s in samples {
            for &i in &graph.pv {
                let flag = if s.q_present[i] { 1.0 } else { 0.0 };
                raw.pv.extend_from_slice(&[
                    s.inj.p[i],
                    s.setpoints.vm[i],
                    s.state.va[i],
                    s.dp[i],
                    0.0,
                    0.0,
                    flag,
                ]);
            }
        }
        for s in samples {
            raw.slack
                .extend_from_slice(&[s.setpoints.vm[slack], s.setpoints.va[slack], 0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        Ok(raw)
    }
}

fn linear(x: &Tensor, p: &Leaves, name: &str) -> Result<Tensor> {
    let w = p.get(&format!("{name}.w"));
    Ok(match p.try_get(&format!("{name}.b")) {
        Some(b) => x.affine(w, b)?,
        None => x.matmul(w)?,
    })
}

fn norm(x: &Tensor, p: &Leaves, name: &str) -> Result<Tensor> {
    Ok(x.layer_norm(p.get(&format!("{name}.gain")), p.get(&format!("{name}.bias")), LN_EPS)?)
}

fn scaled(rows: &[f64], scale: &[f64]) -> Vec<f64> {
    rows.chunks_exact(RAW_FEATURES)
        .flat_map(|r| r.iter().zip(scale).map(|(v, s)| v / s))
        .collect()
}

/// Type-specific linear embedding of the raw rows into width `d`, stacked.
pub fn embed(raw: &RawFeatures, batch: &GraphBatch, p: &Leaves, cfg: &FlowNetConfig) -> Result<Tensor> {
    let b = batch.n_graphs;
    let expect = [
        (raw.pq.len(), b * batch.pq.len()),
        (raw.pv.len(), b * batch.pv.len()),
        (raw.slack.len(), b),
    ];
    if expect.iter().any(|&(got, rows)| got != rows * RAW_FEATURES) {
        return Err(FlowNetError::DimensionMismatch(format!(
            "raw feature lengths {:?} for a batch of {b} graphs",
            expect.map(|e| e.0)
        )));
    }
    let group = |rows: &[f64], scale: &[f64], name: &str| -> Result<Tensor> {
        let x = Tensor::new(&[rows.len() / RAW_FEATURES, RAW_FEATURES], scaled(rows, scale))?;
        linear(&x, p, name)
    };
    let parts = [
        group(&raw.pq, &cfg.scale.pq, "embed.pq")?,
        group(&raw.pv, &cfg.scale.pv, "embed.pv")?,
        group(&raw.slack, &cfg.scale.slack, "embed.slack")?,
    ];
    Ok(Tensor::concat(&parts, 0)?)
}

/// `relu(h W_self + b + (mean_j h_j + mean_j e_ij W_edge) W_nbr)` per layer.
pub fn gcn_block(h: &Tensor, batch: &GraphBatch, p: &Leaves, block: usize, cfg: &FlowNetConfig) -> Result<Tensor> {
    let mut h = h.clone();
    for l in 0..cfg.gcn_layers_per_block {
        let name = format!("block{block}.gcn{l}");
        let nbr = h
            .spmm(&batch.adj)?
            .add(&batch.edge_mean.matmul(p.get(&format!("{name}.edge.w")))?)?;
        let w = Tensor::concat(&[p.get(&format!("{name}.self.w")).clone(), p.get(&format!("{name}.nbr.w")).clone()], 0)?;
        h = Tensor::concat(&[h, nbr], 1)?
            .affine(&w, p.get(&format!("{name}.self.b")))?
            .relu();
    }
    Ok(h)
}

fn per_type_norm(x: &Tensor, batch: &GraphBatch, p: &Leaves, prefix: &str) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(3);
    for (t, range) in [("pq", batch.pq_rows()), ("pv", batch.pv_rows()), ("slack", batch.slack_rows())] {
        let part = x.slice(0, range.start, range.len())?;
        parts.push(norm(&part, p, &format!("{prefix}_{t}"))?);
    }
    Ok(Tensor::concat(&parts, 0)?)
}

/// Pools a fused projection of every node into a per-graph virtual node
/// `[mean, max]` of width `2d`, attends it back to each node and applies a
/// residual plus per-type layer norm. Attention weights are normalized over
/// the nodes of one type within one graph.
pub fn virtual_node_attention(
    h: &Tensor,
    batch: &GraphBatch,
    p: &Leaves,
    block: usize,
    cfg: &FlowNetConfig,
) -> Result<Tensor> {
    let name = format!("block{block}.vna");
    let b = batch.n_graphs;
    let fused = linear(h, p, &format!("{name}.fuse"))?;
    let vnode = Tensor::concat(
        &[
            fused.segment_mean(&batch.graph_of_row, b)?,
            fused.segment_max(&batch.graph_of_row, b)?,
        ],
        1,
    )?;
    // h_i·(W_q v) and w_i·(v W_o) are evaluated per graph before the
    // gather, which keeps the row-sized products at width d.
    let key_query = vnode.matmul(&p.get(&format!("{name}.query.w")).transpose()?)?;
    let score = h
        .mul(&key_query.gather_rows(&batch.graph_of_row)?)?
        .sum_axis(1)?
        .scale(1.0 / (cfg.d_k as f64).sqrt());
    let weight = score.segment_softmax(&batch.attention_group, 3 * b)?;
    let value = vnode.matmul(p.get(&format!("{name}.out.w")))?;
    let attended = value
        .gather_rows(&batch.graph_of_row)?
        .mul_col(&weight)?
        .add_row(p.get(&format!("{name}.out.b")))?;
    per_type_norm(&h.add(&attended)?, batch, p, &format!("{name}.norm"))
}

/// `Linear([f_i, s_owner(i)])`, with the slack half of the weight applied once
/// per graph.
fn concat_linear(f: &Tensor, slack: &Tensor, owners: &[usize], p: &Leaves, name: &str) -> Result<Tensor> {
    let w = p.get(&format!("{name}.w"));
    let d = f.shape()[1];
    let shared = slack.matmul(&w.slice(0, d, d)?)?.gather_rows(owners)?;
    Ok(f.affine(&w.slice(0, 0, d)?, p.get(&format!("{name}.b")))?.add(&shared)?)
}

/// Gated feed-forward over `[node, slack]` for PQ and PV rows with a
/// residual and layer norm; slack rows pass through.
pub fn slack_gated_ff(h: &Tensor, batch: &GraphBatch, p: &Leaves, block: usize) -> Result<Tensor> {
    let slack_range = batch.slack_rows();
    if slack_range.len() != batch.n_graphs {
        return Err(FlowNetError::MissingSlack);
    }
    let slack = h.slice(0, slack_range.start, slack_range.len())?;
    let mut parts = Vec::with_capacity(3);
    for (t, range) in [("pq", batch.pq_rows()), ("pv", batch.pv_rows())] {
        let name = format!("block{block}.sgf_{t}");
        let f = h.slice(0, range.start, range.len())?;
        let owners: Vec<usize> = batch.graph_of_row[range].to_vec();
        let value = concat_linear(&f, &slack, &owners, p, &format!("{name}.value"))?;
        let gate = concat_linear(&f, &slack, &owners, p, &format!("{name}.gate"))?;
        let fused = value.mul(&gate.sigmoid())?;
        let out = linear(&fused, p, &format!("{name}.out"))?;
        parts.push(norm(&f.add(&out)?, p, &format!("{name}.norm"))?);
    }
    parts.push(slack);
    Ok(Tensor::concat(&parts, 0)?)
}

/// One full block: graph convolution, then the enabled global modules.
pub fn block(h: &Tensor, batch: &GraphBatch, p: &Leaves, k: usize, cfg: &FlowNetConfig) -> Result<Tensor> {
    let mut h = gcn_block(h, batch, p, k, cfg)?;
    if cfg.vna {
        h = virtual_node_attention(&h, batch, p, k, cfg)?;
    }
    if cfg.sgf {
        h = slack_gated_ff(&h, batch, p, k)?;
    }
    Ok(h)
}

/// Voltage increments, one column each, in stacked row order.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub dvm_pq: Tensor,
    pub dva_pq: Tensor,
    pub dva_pv: Tensor,
}

fn head(z: &Tensor, p: &Leaves, name: &str) -> Result<Tensor> {
    linear(&linear(z, p, &format!("{name}.hidden"))?.relu(), p, &format!("{name}.out"))
}

/// Blocks and predictor applied to already-embedded features.
pub fn forward_features(h0: &Tensor, batch: &GraphBatch, p: &Leaves, cfg: &FlowNetConfig) -> Result<Predictions> {
    if h0.shape() != [batch.rows(), cfg.d] {
        return Err(FlowNetError::DimensionMismatch(format!(
            "features {:?}, expected [{}, {}]",
            h0.shape(),
            batch.rows(),
            cfg.d
        )));
    }
    let mut h = h0.clone();
    let mut outputs = Vec::with_capacity(cfg.k_blocks);
    for k in 0..cfg.k_blocks {
        h = block(&h, batch, p, k, cfg)?;
        if cfg.fusion {
            outputs.push(h.clone());
        }
    }
    let z = if cfg.fusion { Tensor::concat(&outputs, 1)? } else { h };
    let (pq, pv) = (batch.pq_rows(), batch.pv_rows());
    let out_pq = head(&z.slice(0, pq.start, pq.len())?, p, "head_pq")?;
    Ok(Predictions {
        dvm_pq: out_pq.slice(1, 0, 1)?,
        dva_pq: out_pq.slice(1, 1, 1)?,
        dva_pv: head(&z.slice(0, pv.start, pv.len())?, p, "head_pv")?,
    })
}

pub fn forward(raw: &RawFeatures, batch: &GraphBatch, p: &Leaves, cfg: &FlowNetConfig) -> Result<Predictions> {
    forward_features(&embed(raw, batch, p, cfg)?, batch, p, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{Branch, Bus, BusType, Generator};
    use crate::tensor::gradcheck::{max_rel_error, random_values};
    use std::collections::BTreeMap;

    /// Slack 0, PV 1, PQ 2 and 3, in a line 0-1-2-3.
    pub(crate) fn toy_case() -> GridCase {
        let bus = |id, bus_type, p_load: f64| Bus {
            id,
            bus_type,
            p_load,
            q_load: p_load / 3.0,
            gs: 0.0,
            bs: 0.0,
            vm_setpoint: 1.02,
            va_setpoint: 0.0,
            base_kv: 230.0,
        };
        let line = |f, t| Branch {
            from_bus: f,
            to_bus: t,
            r: 0.01,
            x: 0.1,
            b_charging: 0.02,
            tap: 1.0,
            shift: 0.0,
            status: true,
        };
        GridCase {
            name: "toy4".into(),
            base_mva: 100.0,
            buses: vec![
                bus(0, BusType::Slack, 0.0),
                bus(1, BusType::PV, 0.0),
                bus(2, BusType::PQ, 0.6),
                bus(3, BusType::PQ, 0.4),
            ],
            branches: vec![line(0, 1), line(1, 2), line(2, 3)],
            generators: vec![
                Generator {
                    bus: 0,
                    p_gen: 0.0,
                    q_gen: 0.0,
                    vm_set: 1.02,
                },
                Generator {
                    bus: 1,
                    p_gen: 0.5,
                    q_gen: 0.0,
                    vm_set: 1.02,
                },
            ],
            external_ids: vec![1, 2, 3, 4],
        }
    }

    fn small_cfg() -> FlowNetConfig {
        let mut cfg = FlowNetConfig::with_width(4);
        cfg.k_blocks = 2;
        cfg
    }

    fn raw_for(case: &GridCase, state: &PowerFlowState, q_present: &[bool]) -> RawFeatures {
        let inj = Injections::from_case(case);
        let sp = Setpoints::from_case(case);
        let y = build_ybus(case).unwrap();
        let (dp, dq) = bus_mismatch(state, &y, &inj).unwrap();
        let view = SampleInputs {
            inj: &inj,
            setpoints: &sp,
            state,
            dp: &dp,
            dq: &dq,
            q_present,
        };
        RawFeatures::build(&build_hetero_graph(case), &[view]).unwrap()
    }

    fn single(case: &GridCase, cfg: &FlowNetConfig) -> GraphBatch {
        GraphBatch::new(&[&build_hetero_graph(case)], &cfg.scale).unwrap()
    }

    #[test]
    fn zero_output_layer_predicts_zero_increment() {
        let case = toy_case();
        let cfg = small_cfg();
        let params = init_params(&cfg, 1, true).unwrap();
        let raw = raw_for(&case, &PowerFlowState::flat_start(&case), &[true; 4]);
        let out = forward(&raw, &single(&case, &cfg), &params.constants(), &cfg).unwrap();
        assert_eq!(out.dvm_pq.shape(), [2, 1]);
        assert_eq!(out.dva_pv.shape(), [1, 1]);
        for t in [&out.dvm_pq, &out.dva_pq, &out.dva_pv] {
            assert!(t.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn embedding_of_zero_input_is_bias() {
        let case = toy_case();
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 2, true).unwrap();
        params.get_mut("embed.pq.b").unwrap().data = vec![0.5, -1.0, 2.0, 0.25];
        let batch = single(&case, &cfg);
        let raw = RawFeatures {
            pq: vec![0.0; 2 * RAW_FEATURES],
            pv: vec![0.0; RAW_FEATURES],
            slack: vec![0.0; RAW_FEATURES],
        };
        let h = embed(&raw, &batch, &params.constants(), &cfg).unwrap();
        assert_eq!(&h.data()[0..4], &[0.5, -1.0, 2.0, 0.25]);
        assert_eq!(&h.data()[4..8], &[0.5, -1.0, 2.0, 0.25]);
    }

    #[test]
    fn masking_q_changes_only_pq_embeddings() {
        let case = toy_case();
        let cfg = small_cfg();
        let params = init_params(&cfg, 3, true).unwrap();
        let batch = single(&case, &cfg);
        let state = PowerFlowState::flat_start(&case);
        let full = raw_for(&case, &state, &[true; 4]);
        let masked = raw_for(&case, &state, &[true, true, false, true]);
        assert_eq!(full.pv, masked.pv);
        assert_eq!(full.slack, masked.slack);
        let leaves = params.constants();
        let a = embed(&full, &batch, &leaves, &cfg).unwrap();
        let b = embed(&masked, &batch, &leaves, &cfg).unwrap();
        let d = cfg.d;
        assert_ne!(&a.data()[..d], &b.data()[..d]);
        assert_eq!(&a.data()[d..], &b.data()[d..]);
    }

    #[test]
    fn gcn_without_edges_is_self_map() {
        let mut case = toy_case();
        case.branches.iter_mut().for_each(|b| b.status = false);
        let cfg = small_cfg();
        let params = init_params(&cfg, 4, true).unwrap();
        let batch = single(&case, &cfg);
        let leaves = params.constants();
        let h = Tensor::new(&[4, 4], random_values(&mut ChaCha8Rng::seed_from_u64(5), 16)).unwrap();
        let mut expect = h.clone();
        for l in 0..cfg.gcn_layers_per_block {
            expect = linear(&expect, &leaves, &format!("block0.gcn{l}.self")).unwrap().relu();
        }
        let got = gcn_block(&h, &batch, &leaves, 0, &cfg).unwrap();
        assert_eq!(got.data(), expect.data());
    }

    #[test]
    fn sgf_gate_closed_reduces_to_layer_norm() {
        let case = toy_case();
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 6, true).unwrap();
        for t in ["pq", "pv"] {
            params.get_mut(&format!("block0.sgf_{t}.gate.b")).unwrap().data = vec![-1e4; 4];
        }
        let batch = single(&case, &cfg);
        let leaves = params.constants();
        let h = Tensor::new(&[4, 4], random_values(&mut ChaCha8Rng::seed_from_u64(7), 16)).unwrap();
        let out = slack_gated_ff(&h, &batch, &leaves, 0).unwrap();
        let ones = Tensor::new(&[4], vec![1.0; 4]).unwrap();
        let expect = h.layer_norm(&ones, &Tensor::zeros(&[4]), LN_EPS).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.data()[r * 4 + c] - expect.data()[r * 4 + c]).abs() < 1e-12);
            }
        }
        assert_eq!(&out.data()[12..], &h.data()[12..]);
    }

    #[test]
    fn sgf_slack_perturbation_reaches_every_other_row() {
        let case = toy_case();
        let cfg = small_cfg();
        let params = init_params(&cfg, 8, true).unwrap();
        let batch = single(&case, &cfg);
        let leaves = params.constants();
        let data = random_values(&mut ChaCha8Rng::seed_from_u64(9), 16);
        let h = Tensor::new(&[4, 4], data.clone()).unwrap();
        let mut bumped = data;
        bumped[12] += 0.5;
        let h2 = Tensor::new(&[4, 4], bumped.clone()).unwrap();
        let a = slack_gated_ff(&h, &batch, &leaves, 0).unwrap();
        let b = slack_gated_ff(&h2, &batch, &leaves, 0).unwrap();
        for r in 0..3 {
            let diff: f64 = (0..4).map(|c| (a.data()[r * 4 + c] - b.data()[r * 4 + c]).abs()).sum();
            assert!(diff > 1e-8, "row {r} unchanged");
        }
        assert_eq!(&b.data()[12..], &bumped[12..]);
    }

    #[test]
    fn vna_reaches_distant_node() {
        // Node 3 is three hops from node 0; scaling node 0 must still move it.
        let case = toy_case();
        let cfg = small_cfg();
        let params = init_params(&cfg, 10, true).unwrap();
        let batch = single(&case, &cfg);
        let leaves = params.constants();
        let rows = batch.row_buses();
        let data = random_values(&mut ChaCha8Rng::seed_from_u64(11), 16);
        let h = Tensor::new(&[4, 4], data.clone()).unwrap();
        let slack_row = rows.iter().position(|&(_, i)| i == 0).unwrap();
        let far_row = rows.iter().position(|&(_, i)| i == 3).unwrap();
        let mut doubled = data;
        doubled[slack_row * 4..slack_row * 4 + 4].iter_mut().for_each(|v| *v *= 2.0);
        let a = virtual_node_attention(&h, &batch, &leaves, 0, &cfg).unwrap();
        let b = virtual_node_attention(&Tensor::new(&[4, 4], doubled).unwrap(), &batch, &leaves, 0, &cfg).unwrap();
        let diff: f64 = (0..4).map(|c| (a.data()[far_row * 4 + c] - b.data()[far_row * 4 + c]).abs()).sum();
        assert!(diff > 1e-8);
    }

    #[test]
    fn single_slack_graph_attention() {
        let graph = HeteroGraph {
            n_buses: 1,
            pq: vec![],
            pv: vec![],
            slack: vec![0],
            edges: vec![],
        };
        let cfg = small_cfg();
        let params = init_params(&cfg, 12, true).unwrap();
        let batch = GraphBatch::new(&[&graph], &cfg.scale).unwrap();
        let leaves = params.constants();
        let h = Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let out = virtual_node_attention(&h, &batch, &leaves, 0, &cfg).unwrap();
        let fused = linear(&h, &leaves, "block0.vna.fuse").unwrap();
        let vnode = Tensor::concat(&[fused.clone(), fused], 1).unwrap();
        let expect = norm(
            &h.add(&linear(&vnode, &leaves, "block0.vna.out").unwrap()).unwrap(),
            &leaves,
            "block0.vna.norm_slack",
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_slack_is_rejected() {
        let graph = HeteroGraph {
            n_buses: 1,
            pq: vec![0],
            pv: vec![],
            slack: vec![],
            edges: vec![],
        };
        assert_eq!(
            GraphBatch::new(&[&graph], &InputScale::default()).unwrap_err(),
            FlowNetError::MissingSlack
        );
    }

    #[test]
    fn batch_equals_separate_graphs() {
        let case = toy_case();
        let mut other = toy_case();
        other.branches[2].status = false;
        other.buses[3].p_load = 0.9;
        let cfg = small_cfg();
        let params = init_params(&cfg, 13, false).unwrap();
        let leaves = params.constants();
        let state = PowerFlowState::flat_start(&case);
        let ga = build_hetero_graph(&case);
        let gb = build_hetero_graph(&other);
        let ra = raw_for(&case, &state, &[true; 4]);
        let rb = raw_for(&other, &state, &[true; 4]);
        let both = RawFeatures {
            pq: [ra.pq.clone(), rb.pq.clone()].concat(),
            pv: [ra.pv.clone(), rb.pv.clone()].concat(),
            slack: [ra.slack.clone(), rb.slack.clone()].concat(),
        };
        let batch = GraphBatch::new(&[&ga, &gb], &cfg.scale).unwrap();
        let joint = forward(&both, &batch, &leaves, &cfg).unwrap();
        let a = forward(&ra, &GraphBatch::new(&[&ga], &cfg.scale).unwrap(), &leaves, &cfg).unwrap();
        let b = forward(&rb, &GraphBatch::new(&[&gb], &cfg.scale).unwrap(), &leaves, &cfg).unwrap();
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&joint.dva_pq.data()[..2], a.dva_pq.data()));
        assert!(close(&joint.dva_pq.data()[2..], b.dva_pq.data()));
        assert!(close(&joint.dvm_pq.data()[2..], b.dvm_pq.data()));
        assert!(close(&joint.dva_pv.data()[1..], b.dva_pv.data()));
    }

    #[test]
    fn block_gradcheck_on_toy_graph() {
        let case = toy_case();
        let cfg = small_cfg();
        let params = init_params(&cfg, 14, false).unwrap();
        let batch = single(&case, &cfg);
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("block0."))
            .map(String::from)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut inputs = vec![(vec![4, 4], random_values(&mut rng, 16))];
        for n in &names {
            let p = params.get(n).unwrap();
            inputs.push((p.shape.clone(), p.data.clone()));
        }
        let err = max_rel_error(&inputs, |t| {
            let mut map = BTreeMap::new();
            for (n, tensor) in names.iter().zip(&t[1..]) {
                map.insert(n.clone(), tensor.clone());
            }
            let leaves = Leaves::from_map(map);
            Ok(block(&t[0], &batch, &leaves, 0, &cfg).map_err(|e| match e {
                FlowNetError::Tensor(t) => t,
                other => panic!("{other}"),
            })?)
        })
        .unwrap();
        assert!(err < 1e-3, "block gradcheck relative error {err}");
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = small_cfg();
        assert_eq!(FlowNetConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.d_k = 3;
        assert!(bad.validate().is_err());
        let params = init_params(&cfg, 0, true).unwrap();
        check_params(&cfg, &params).unwrap();
        assert!(check_params(&cfg.clone().gcn_only(), &params).is_err());
    }
}

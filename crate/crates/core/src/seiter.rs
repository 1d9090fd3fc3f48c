//! Self-ensembling iterative estimation.
//!
//! A batch starts from its initialization state. In every loop the student
//! predicts voltage increments from the current state and mismatch, takes one
//! optimizer step on the supervised plus physics loss, the EMA teacher is
//! updated, and the teacher's prediction becomes the state of the next loop.
//! States passed between loops are plain numbers, so no gradient crosses a
//! loop boundary.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acpf::{bus_mismatch, AcpfError, PowerFlowState};
use crate::case_io::GridCase;
use crate::datagen::{DatagenError, Dataset, Prepared};
use crate::evalbench::{self, GroupRmse};
use crate::flownet::{
    self, FlowNetConfig, FlowNetError, GraphBatch, InputScale, Predictions, RawFeatures, SampleInputs,
};
use crate::tensor::ckpt::{self, CkptError};
use crate::tensor::optim::{adam_step, cosine_lr, AdamConfig, AdamState, OptimError, LR_MAX, LR_MIN};
use crate::tensor::params::Leaves;
use crate::tensor::{ParamStore, Tensor, TensorError};

pub const SEITER_SCHEMA: &str = "seiter/1";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum SeIterError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("teacher and student parameters differ in names or shapes")]
    ParamMismatch,
    #[error("non-finite loss at epoch {epoch}, batch {batch}, loop {eta}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        eta: usize,
        last_good: Option<PathBuf>,
    },
    #[error("no data: {0}")]
    DataExhausted(String),
    #[error("sample {0} has no label")]
    MissingLabel(usize),
    #[error(transparent)]
    Model(#[from] FlowNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SeIterError>;

/// Buses whose reactive injection may be withheld from the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskGroup {
    Pq,
    Pv,
}

impl MaskGroup {
    pub fn buses<'a>(&self, graph: &'a crate::network::HeteroGraph) -> &'a [usize] {
        match self {
            MaskGroup::Pq => &graph.pq,
            MaskGroup::Pv => &graph.pv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeIterConfig {
    pub schema: String,
    pub loops: usize,
    pub lambda_equ: f64,
    pub alpha_ema: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Probability that a bus of `mask_group` has its Q withheld during training.
    pub q_dropout: f64,
    pub mask_group: MaskGroup,
    pub seed: u64,
    pub model: FlowNetConfig,
}

impl Default for SeIterConfig {
    fn default() -> Self {
        SeIterConfig {
            schema: SEITER_SCHEMA.into(),
            loops: 8,
            lambda_equ: 0.1,
            alpha_ema: 0.99,
            epochs: 20,
            batch_size: 64,
            lr_max: LR_MAX,
            lr_min: LR_MIN,
            q_dropout: 0.1,
            mask_group: MaskGroup::Pq,
            seed: 0,
            model: FlowNetConfig::default(),
        }
    }
}

impl SeIterConfig {
    pub fn full_scale() -> Self {
        SeIterConfig {
            epochs: 100,
            batch_size: 256,
            model: FlowNetConfig::full_scale(),
            ..Self::default()
        }
    }

    /// Single pass, supervised loss only.
    pub fn without_seiter(mut self) -> Self {
        self.loops = 1;
        self.lambda_equ = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SeIterError::InvalidConfig(m.into()));
        if self.schema != SEITER_SCHEMA {
            return Err(SeIterError::InvalidConfig(format!(
                "schema {:?}, expected {SEITER_SCHEMA:?}",
                self.schema
            )));
        }
        if self.loops == 0 {
            return bad("loops must be at least 1");
        }
        if !(self.lambda_equ >= 0.0 && self.lambda_equ.is_finite()) {
            return bad("lambda_equ must be finite and nonnegative");
        }
        if !(self.alpha_ema > 0.0 && self.alpha_ema < 1.0) {
            return bad("alpha_ema must lie strictly between 0 and 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.q_dropout) {
            return bad("q_dropout must lie in [0, 1)");
        }
        self.model.validate()?;
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SeIterError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(SeIterError::ParamMismatch);
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, b) in t.data.iter_mut().zip(&s.data) {
            *a = alpha * *a + (1.0 - alpha) * *b;
        }
    }
    Ok(())
}

/// Predicted unknowns in stacked row order, each `[rows, 1]`.
#[derive(Clone, Debug)]
pub struct StatePrediction {
    pub vm_pq: Tensor,
    pub va_pq: Tensor,
    pub va_pv: Tensor,
}

impl StatePrediction {
    /// Constant tensors holding the unknowns of `states`.
    pub fn from_states(states: &[&PowerFlowState], batch: &GraphBatch) -> Self {
        let cols = StateColumns::gather(states, batch);
        StatePrediction {
            vm_pq: Tensor::column(cols.vm_pq),
            va_pq: Tensor::column(cols.va_pq),
            va_pv: Tensor::column(cols.va_pv),
        }
    }

    fn from_increments(input: &StateColumns, pred: &Predictions) -> Result<Self> {
        Ok(StatePrediction {
            vm_pq: Tensor::column(input.vm_pq.clone()).add(&pred.dvm_pq)?,
            va_pq: Tensor::column(input.va_pq.clone()).add(&pred.dva_pq)?,
            va_pv: Tensor::column(input.va_pv.clone()).add(&pred.dva_pv)?,
        })
    }
}

/// Numeric unknowns of a batch in stacked row order.
#[derive(Clone, Debug, PartialEq)]
pub struct StateColumns {
    pub vm_pq: Vec<f64>,
    pub va_pq: Vec<f64>,
    pub va_pv: Vec<f64>,
}

impl StateColumns {
    pub fn gather(states: &[&PowerFlowState], batch: &GraphBatch) -> Self {
        let mut c = StateColumns {
            vm_pq: Vec::with_capacity(states.len() * batch.pq.len()),
            va_pq: Vec::with_capacity(states.len() * batch.pq.len()),
            va_pv: Vec::with_capacity(states.len() * batch.pv.len()),
        };
        for s in states {
            c.vm_pq.extend(batch.pq.iter().map(|&i| s.vm[i]));
            c.va_pq.extend(batch.pq.iter().map(|&i| s.va[i]));
        }
        for s in states {
            c.va_pv.extend(batch.pv.iter().map(|&i| s.va[i]));
        }
        c
    }

    fn scatter(&self, states: &mut [PowerFlowState], batch: &GraphBatch) {
        let (npq, npv) = (batch.pq.len(), batch.pv.len());
        for (s, state) in states.iter_mut().enumerate() {
            for (p, &i) in batch.pq.iter().enumerate() {
                state.vm[i] = self.vm_pq[s * npq + p];
                state.va[i] = self.va_pq[s * npq + p];
            }
            for (p, &i) in batch.pv.iter().enumerate() {
                state.va[i] = self.va_pv[s * npv + p];
            }
        }
    }
}

fn check_rows(what: &str, t: &Tensor, rows: usize) -> Result<()> {
    if t.shape() != [rows, 1] {
        return Err(SeIterError::DimensionMismatch(format!(
            "{what} has shape {:?}, expected [{rows}, 1]",
            t.shape()
        )));
    }
    Ok(())
}

/// Mean over PQ rows of `|vm err| + |va err|` plus mean over PV rows of
/// `|va err|`. An empty group contributes nothing.
pub fn loss_gt(pred: &StatePrediction, labels: &StateColumns) -> Result<Tensor> {
    let npq = labels.vm_pq.len();
    let npv = labels.va_pv.len();
    if labels.va_pq.len() != npq {
        return Err(SeIterError::DimensionMismatch("PQ label columns differ in length".into()));
    }
    check_rows("vm_pq", &pred.vm_pq, npq)?;
    check_rows("va_pq", &pred.va_pq, npq)?;
    check_rows("va_pv", &pred.va_pv, npv)?;
    let mut loss = Tensor::scalar(0.0);
    if npq > 0 {
        loss = loss
            .add(&pred.vm_pq.l1_loss(&Tensor::column(labels.vm_pq.clone()))?)?
            .add(&pred.va_pq.l1_loss(&Tensor::column(labels.va_pq.clone()))?)?;
    }
    if npv > 0 {
        loss = loss.add(&pred.va_pv.l1_loss(&Tensor::column(labels.va_pv.clone()))?)?;
    }
    Ok(loss)
}

/// Admittance entries, injections and known voltages of a batch laid out in
/// stacked row order.
#[derive(Clone, Debug)]
pub struct PhysicsBatch {
    rows: usize,
    n_pq: usize,
    n_pv: usize,
    from: Vec<usize>,
    to: Vec<usize>,
    g: Tensor,
    b: Tensor,
    p: Tensor,
    q: Tensor,
    /// vm of PV rows then slack rows.
    vm_known: Tensor,
    /// va of slack rows.
    va_known: Tensor,
}

impl PhysicsBatch {
    pub fn new(samples: &[&Prepared], batch: &GraphBatch) -> Result<Self> {
        if samples.len() != batch.n_graphs {
            return Err(SeIterError::DimensionMismatch(format!(
                "{} samples for a batch of {} graphs",
                samples.len(),
                batch.n_graphs
            )));
        }
        let rows = batch.rows();
        let mut row_of = vec![vec![0usize; batch.n_buses]; samples.len()];
        for (r, (s, i)) in batch.row_buses().into_iter().enumerate() {
            row_of[s][i] = r;
        }
        let (mut from, mut to, mut g, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut p = vec![0.0; rows];
        let mut q = vec![0.0; rows];
        for (s, sample) in samples.iter().enumerate() {
            if sample.ybus.n() != batch.n_buses || sample.inj.p.len() != batch.n_buses {
                return Err(SeIterError::DimensionMismatch(format!(
                    "sample {} does not match the batch bus count",
                    sample.index
                )));
            }
            for (i, j, gij, bij) in sample.ybus.entries() {
                from.push(row_of[s][i]);
                to.push(row_of[s][j]);
                g.push(gij);
                b.push(bij);
            }
            for i in 0..batch.n_buses {
                p[row_of[s][i]] = sample.inj.p[i];
                q[row_of[s][i]] = sample.inj.q[i];
            }
        }
        let mut vm_known = Vec::new();
        for sample in samples {
            vm_known.extend(batch.pv.iter().map(|&i| sample.setpoints.vm[i]));
        }
        vm_known.extend(samples.iter().map(|s| s.setpoints.vm[batch.slack]));
        let va_known = samples.iter().map(|s| s.setpoints.va[batch.slack]).collect();
        Ok(PhysicsBatch {
            rows,
            n_pq: samples.len() * batch.pq.len(),
            n_pv: samples.len() * batch.pv.len(),
            from,
            to,
            g: Tensor::column(g),
            b: Tensor::column(b),
            p: Tensor::column(p),
            q: Tensor::column(q),
            vm_known: Tensor::column(vm_known),
            va_known: Tensor::column(va_known),
        })
    }
}

/// Mean over PQ rows of `|dP| + |dQ|` plus mean over PV rows of `|dP|`, with
/// the mismatch evaluated at the predicted state.
pub fn loss_equ(pred: &StatePrediction, phys: &PhysicsBatch) -> Result<Tensor> {
    check_rows("vm_pq", &pred.vm_pq, phys.n_pq)?;
    check_rows("va_pq", &pred.va_pq, phys.n_pq)?;
    check_rows("va_pv", &pred.va_pv, phys.n_pv)?;
    let vm = Tensor::concat(&[pred.vm_pq.clone(), phys.vm_known.clone()], 0)?;
    let va = Tensor::concat(&[pred.va_pq.clone(), pred.va_pv.clone(), phys.va_known.clone()], 0)?;
    let theta = va.gather_rows(&phys.from)?.sub(&va.gather_rows(&phys.to)?)?;
    let (cos, sin) = (theta.cos(), theta.sin());
    let vv = vm.gather_rows(&phys.from)?.mul(&vm.gather_rows(&phys.to)?)?;
    let p_terms = vv.mul(&phys.g.mul(&cos)?.add(&phys.b.mul(&sin)?)?)?;
    let q_terms = vv.mul(&phys.g.mul(&sin)?.sub(&phys.b.mul(&cos)?)?)?;
    let dp = phys.p.sub(&p_terms.scatter_add_rows(&phys.from, phys.rows)?)?;
    let dq = phys.q.sub(&q_terms.scatter_add_rows(&phys.from, phys.rows)?)?;
    let mut loss = Tensor::scalar(0.0);
    if phys.n_pq > 0 {
        let pq = dp
            .slice(0, 0, phys.n_pq)?
            .abs()
            .sum_all()
            .add(&dq.slice(0, 0, phys.n_pq)?.abs().sum_all())?;
        loss = loss.add(&pq.scale(1.0 / phys.n_pq as f64))?;
    }
    if phys.n_pv > 0 {
        loss = loss.add(&dp.slice(0, phys.n_pq, phys.n_pv)?.abs().mean_all())?;
    }
    Ok(loss)
}

/// Largest `|dP|` over PQ and PV buses and `|dQ|` over PQ buses.
pub fn mismatch_norm(sample: &Prepared, state: &PowerFlowState) -> Result<f64> {
    let (dp, dq) = bus_mismatch(state, &sample.ybus, &sample.inj)?;
    let g = &sample.graph;
    Ok(g.pq
        .iter()
        .flat_map(|&i| [dp[i].abs(), dq[i].abs()])
        .chain(g.pv.iter().map(|&i| dp[i].abs()))
        .fold(0.0, f64::max))
}

/// One batch of samples with its graph and physics layout.
struct BatchData<'a> {
    samples: Vec<&'a Prepared>,
    batch: GraphBatch,
    phys: PhysicsBatch,
}

impl<'a> BatchData<'a> {
    fn new(samples: Vec<&'a Prepared>, scale: &InputScale) -> Result<Self> {
        let graphs: Vec<_> = samples.iter().map(|s| &s.graph).collect();
        let batch = GraphBatch::new(&graphs, scale)?;
        let phys = PhysicsBatch::new(&samples, &batch)?;
        Ok(BatchData { samples, batch, phys })
    }

    fn labels(&self) -> Result<StateColumns> {
        let labels = self
            .samples
            .iter()
            .map(|s| s.label.as_ref().ok_or(SeIterError::MissingLabel(s.index)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StateColumns::gather(&labels, &self.batch))
    }

    fn raw(&self, states: &[PowerFlowState], q_present: &[Vec<bool>]) -> Result<RawFeatures> {
        let mut mismatches = Vec::with_capacity(states.len());
        for (s, state) in self.samples.iter().zip(states) {
            mismatches.push(bus_mismatch(state, &s.ybus, &s.inj)?);
        }
        let views: Vec<SampleInputs<'_>> = self
            .samples
            .iter()
            .zip(states)
            .zip(&mismatches)
            .zip(q_present)
            .map(|(((s, state), (dp, dq)), qp)| SampleInputs {
                inj: &s.inj,
                setpoints: &s.setpoints,
                state,
                dp,
                dq,
                q_present: qp,
            })
            .collect();
        Ok(RawFeatures::build(&self.samples[0].graph, &views)?)
    }

    fn predict(
        &self,
        states: &[PowerFlowState],
        q_present: &[Vec<bool>],
        leaves: &Leaves,
        cfg: &FlowNetConfig,
    ) -> Result<(StateColumns, StatePrediction)> {
        let raw = self.raw(states, q_present)?;
        let pred = flownet::forward(&raw, &self.batch, leaves, cfg)?;
        let refs: Vec<&PowerFlowState> = states.iter().collect();
        let input = StateColumns::gather(&refs, &self.batch);
        let out = StatePrediction::from_increments(&input, &pred)?;
        Ok((input, out))
    }

    /// The batch states after one teacher step.
    fn advance(
        &self,
        states: &mut [PowerFlowState],
        q_present: &[Vec<bool>],
        teacher: &Leaves,
        cfg: &FlowNetConfig,
    ) -> Result<()> {
        let (_, pred) = self.predict(states, q_present, teacher, cfg)?;
        let next = StateColumns {
            vm_pq: pred.vm_pq.data().to_vec(),
            va_pq: pred.va_pq.data().to_vec(),
            va_pv: pred.va_pv.data().to_vec(),
        };
        next.scatter(states, &self.batch);
        Ok(())
    }
}

/// Result of iterative inference on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub state: PowerFlowState,
    /// State after each loop.
    pub loop_states: Vec<PowerFlowState>,
    /// Mismatch norm at the initialization and after each loop.
    pub trajectory: Vec<f64>,
}

/// Every bus reports its reactive injection.
pub fn all_present(samples: &[Prepared]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| vec![true; s.graph.n_buses]).collect()
}

/// Runs `loops` teacher steps on every sample from its initialization, in
/// batches of `batch_size`.
pub fn infer_batch(
    samples: &[Prepared],
    teacher: &ParamStore,
    cfg: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
    q_present: &[Vec<bool>],
) -> Result<Vec<Inference>> {
    if loops == 0 {
        return Err(SeIterError::InvalidConfig("loops must be at least 1".into()));
    }
    if batch_size == 0 {
        return Err(SeIterError::InvalidConfig("batch_size must be positive".into()));
    }
    if q_present.len() != samples.len() {
        return Err(SeIterError::DimensionMismatch(format!(
            "{} masks for {} samples",
            q_present.len(),
            samples.len()
        )));
    }
    cfg.validate()?;
    flownet::check_params(cfg, teacher)?;
    let leaves = teacher.constants();
    let mut out = Vec::with_capacity(samples.len());
    for (chunk, masks) in samples.chunks(batch_size).zip(q_present.chunks(batch_size)) {
        let data = BatchData::new(chunk.iter().collect(), &cfg.scale)?;
        let mut states: Vec<PowerFlowState> = chunk.iter().map(|s| s.init.clone()).collect();
        let mut results: Vec<Inference> = chunk
            .iter()
            .zip(&states)
            .map(|(s, st)| {
                Ok(Inference {
                    state: st.clone(),
                    loop_states: Vec::with_capacity(loops),
                    trajectory: vec![mismatch_norm(s, st)?],
                })
            })
            .collect::<Result<_>>()?;
        for _ in 0..loops {
            data.advance(&mut states, masks, &leaves, cfg)?;
            for ((r, s), st) in results.iter_mut().zip(chunk).zip(&states) {
                r.trajectory.push(mismatch_norm(s, st)?);
                r.loop_states.push(st.clone());
            }
        }
        for (r, st) in results.iter_mut().zip(states) {
            r.state = st;
        }
        out.extend(results);
    }
    Ok(out)
}

pub fn infer(sample: &Prepared, teacher: &ParamStore, cfg: &FlowNetConfig, loops: usize) -> Result<Inference> {
    let mut r = infer_batch(
        std::slice::from_ref(sample),
        teacher,
        cfg,
        loops,
        1,
        &[vec![true; sample.graph.n_buses]],
    )?;
    Ok(r.remove(0))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_loss_gt: f64,
    pub train_loss_equ: f64,
    /// Supervised loss of the last loop, averaged over batches.
    pub train_loss_gt_last_loop: f64,
    pub test_rmse: GroupRmse,
    /// Test RMSE of the teacher after each loop.
    pub test_rmse_per_loop: Vec<GroupRmse>,
}

pub fn metrics_jsonl(log: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in log {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: ParamStore,
    pub teacher: ParamStore,
    /// Model configuration including the input scale fitted to the base case.
    pub model: FlowNetConfig,
    pub log: Vec<EpochMetrics>,
}

fn checkpoint_meta(cfg: &SeIterConfig, model: &FlowNetConfig, epochs_done: usize, role: &str) -> serde_json::Value {
    serde_json::json!({
        "role": role,
        "model": model.to_json(),
        "seiter": cfg,
        "epochs_completed": epochs_done,
    })
}

fn save_pair(
    dir: &Path,
    prefix: &str,
    student: &ParamStore,
    teacher: &ParamStore,
    cfg: &SeIterConfig,
    model: &FlowNetConfig,
    epochs_done: usize,
) -> Result<()> {
    ckpt::save(
        &dir.join(format!("{prefix}{STUDENT_FILE}")),
        student,
        &checkpoint_meta(cfg, model, epochs_done, "student"),
    )?;
    ckpt::save(
        &dir.join(format!("{prefix}{TEACHER_FILE}")),
        teacher,
        &checkpoint_meta(cfg, model, epochs_done, "teacher"),
    )?;
    Ok(())
}

/// Parameters and model configuration of a saved checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, FlowNetConfig)> {
    let (store, meta) = ckpt::load(path)?;
    let model = FlowNetConfig::from_json(&meta["model"])?;
    flownet::check_params(&model, &store)?;
    Ok((store, model))
}

fn q_dropout_masks(samples: &[&Prepared], cfg: &SeIterConfig, rng: &mut impl Rng) -> Vec<Vec<bool>> {
    samples
        .iter()
        .map(|s| {
            let mut mask = vec![true; s.graph.n_buses];
            if cfg.q_dropout > 0.0 {
                for &i in cfg.mask_group.buses(&s.graph) {
                    mask[i] = !rng.gen_bool(cfg.q_dropout);
                }
            }
            mask
        })
        .collect()
}

/// Test RMSE of `params` after each of `loops` loops.
pub fn evaluate_per_loop(
    samples: &[Prepared],
    params: &ParamStore,
    model: &FlowNetConfig,
    loops: usize,
    batch_size: usize,
    q_present: &[Vec<bool>],
) -> Result<Vec<GroupRmse>> {
    let runs = infer_batch(samples, params, model, loops, batch_size, q_present)?;
    (0..loops)
        .map(|l| {
            let states: Vec<&PowerFlowState> = runs.iter().map(|r| &r.loop_states[l]).collect();
            evalbench::group_rmse(samples, &states).map_err(|e| SeIterError::DimensionMismatch(e.to_string()))
        })
        .collect()
}

/// Trains on `train`, evaluating the teacher on `test` after every epoch.
/// When `out_dir` is given the checkpoints, configuration and metrics log are
/// written there; `on_epoch` sees each metrics record as it is produced.
pub fn train_with(
    train: &[Prepared],
    test: &[Prepared],
    base: &GridCase,
    cfg: &SeIterConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SeIterError::DataExhausted("training split is empty".into()));
    }
    if test.is_empty() {
        return Err(SeIterError::DataExhausted("test split is empty".into()));
    }
    let mut model = cfg.model.clone();
    model.scale = InputScale::from_case(base)?;
    let mut student = flownet::init_params(&model, cfg.seed, true)?;
    let mut teacher = student.clone();
    let mut adam = AdamState::default();

    let mut metrics_out = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut text = serde_json::to_string_pretty(&serde_json::json!({ "seiter": cfg, "model": model.to_json() }))?;
            text.push('\n');
            fs::write(dir.join(CONFIG_FILE), text)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };

    let n_batches = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches * cfg.loops;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let test_masks = all_present(test);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr_max;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_gt, mut sum_equ, mut sum_last, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let data = BatchData::new(idx.iter().map(|&i| &train[i]).collect(), &model.scale)?;
            let labels = data.labels()?;
            let masks = q_dropout_masks(&data.samples, cfg, &mut rng);
            let mut states: Vec<PowerFlowState> = data.samples.iter().map(|s| s.init.clone()).collect();
            for eta in 1..=cfg.loops {
                let leaves = student.leaves();
                let (_, pred) = data.predict(&states, &masks, &leaves, &model)?;
                let gt = loss_gt(&pred, &labels)?;
                let loss = if cfg.lambda_equ > 0.0 {
                    let equ = loss_equ(&pred, &data.phys)?;
                    sum_equ += equ.item();
                    gt.add(&equ.scale(cfg.lambda_equ))?
                } else {
                    gt.clone()
                };
                let non_finite = |student: &ParamStore, teacher: &ParamStore| -> Result<SeIterError> {
                    let last_good = match out_dir {
                        Some(dir) => {
                            save_pair(dir, "last_good.", student, teacher, cfg, &model, epoch - 1)?;
                            Some(dir.to_path_buf())
                        }
                        None => None,
                    };
                    Ok(SeIterError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        eta,
                        last_good,
                    })
                };
                if !loss.item().is_finite() {
                    return Err(non_finite(&student, &teacher)?);
                }
                sum_gt += gt.item();
                if eta == cfg.loops {
                    sum_last += gt.item();
                }
                count += 1;
                loss.backward()?;
                lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
                match adam_step(&mut student, &leaves.grads(), &mut adam, lr, AdamConfig::default()) {
                    Ok(()) => {}
                    Err(OptimError::NonFiniteGradient(_)) => return Err(non_finite(&student, &teacher)?),
                    Err(e) => return Err(SeIterError::InvalidConfig(e.to_string())),
                }
                step += 1;
                ema_update(&mut teacher, &student, cfg.alpha_ema)?;
                if eta < cfg.loops {
                    data.advance(&mut states, &masks, &teacher.constants(), &model)?;
                }
            }
        }
        let per_loop = evaluate_per_loop(test, &teacher, &model, cfg.loops, cfg.batch_size, &test_masks)?;
        let batches = (count / cfg.loops).max(1) as f64;
        let record = EpochMetrics {
            epoch,
            steps: step,
            lr,
            train_loss: (sum_gt + cfg.lambda_equ * sum_equ) / count as f64,
            train_loss_gt: sum_gt / count as f64,
            train_loss_equ: sum_equ / count as f64,
            train_loss_gt_last_loop: sum_last / batches,
            test_rmse: per_loop[cfg.loops - 1].clone(),
            test_rmse_per_loop: per_loop,
        };
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        on_epoch(&record);
        log.push(record);
    }
    if let Some(dir) = out_dir {
        save_pair(dir, "", &student, &teacher, cfg, &model, cfg.epochs)?;
    }
    Ok(TrainOutcome {
        student,
        teacher,
        model,
        log,
    })
}

pub fn train(
    train: &[Prepared],
    test: &[Prepared],
    base: &GridCase,
    cfg: &SeIterConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(train, test, base, cfg, out_dir, |_| {})
}

/// Prepares both splits of `ds` and trains on them.
pub fn train_dataset(
    ds: &Dataset,
    cfg: &SeIterConfig,
    out_dir: Option<&Path>,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let train = Dataset::prepare(&ds.train, &ds.base)?;
    let test = Dataset::prepare(&ds.test, &ds.base)?;
    train_with(&train, &test, &ds.base, cfg, out_dir, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{solve_nr, NrOptions};
    use crate::case_io::{Branch, Bus, BusType, Generator};
    use crate::tensor::gradcheck::max_rel_error;
    use crate::tensor::ParamTensor;

    fn toy_case() -> GridCase {
        let bus = |id, bus_type, p_load: f64| Bus {
            id,
            bus_type,
            p_load,
            q_load: p_load / 3.0,
            gs: 0.0,
            bs: 0.01,
            vm_setpoint: 1.02,
            va_setpoint: 0.0,
            base_kv: 230.0,
        };
        let line = |from_bus, to_bus| Branch {
            from_bus,
            to_bus,
            r: 0.01,
            x: 0.08,
            b_charging: 0.02,
            tap: 1.0,
            shift: 0.0,
            status: true,
        };
        GridCase {
            name: "toy".into(),
            base_mva: 100.0,
            buses: vec![
                bus(0, BusType::Slack, 0.0),
                bus(1, BusType::PV, 0.1),
                bus(2, BusType::PQ, 0.4),
                bus(3, BusType::PQ, 0.3),
            ],
            branches: vec![line(0, 1), line(1, 2), line(2, 3), line(0, 3)],
            generators: vec![
                Generator {
                    bus: 0,
                    p_gen: 0.0,
                    q_gen: 0.0,
                    vm_set: 1.02,
                },
                Generator {
                    bus: 1,
                    p_gen: 0.3,
                    q_gen: 0.0,
                    vm_set: 1.01,
                },
            ],
            external_ids: vec![1, 2, 3, 4],
        }
    }

    fn labeled(case: &GridCase) -> Prepared {
        let mut p = Prepared::from_case(0, case).unwrap();
        let sol = solve_nr(case, &p.init, NrOptions::default()).unwrap();
        assert!(sol.converged);
        p.label = Some(sol.state);
        p
    }

    fn one_batch(p: &Prepared) -> (GraphBatch, PhysicsBatch) {
        let batch = GraphBatch::new(&[&p.graph], &InputScale::default()).unwrap();
        let phys = PhysicsBatch::new(&[p], &batch).unwrap();
        (batch, phys)
    }

    #[test]
    fn loss_gt_examples() {
        let labels = StateColumns {
            vm_pq: vec![1.0],
            va_pq: vec![0.0],
            va_pv: vec![],
        };
        let pred = StatePrediction {
            vm_pq: Tensor::column(vec![1.1]),
            va_pq: Tensor::column(vec![-0.2]),
            va_pv: Tensor::zeros(&[0, 1]),
        };
        assert!((loss_gt(&pred, &labels).unwrap().item() - 0.3).abs() < 1e-12);
        let exact = StatePrediction {
            vm_pq: Tensor::column(vec![1.0]),
            va_pq: Tensor::column(vec![0.0]),
            va_pv: Tensor::zeros(&[0, 1]),
        };
        assert_eq!(loss_gt(&exact, &labels).unwrap().item(), 0.0);
        let wrong = StateColumns {
            vm_pq: vec![1.0, 1.0],
            va_pq: vec![0.0, 0.0],
            va_pv: vec![],
        };
        assert!(matches!(loss_gt(&pred, &wrong), Err(SeIterError::DimensionMismatch(_))));
    }

    #[test]
    fn loss_gt_gradient_is_sign_over_group_size() {
        let labels = StateColumns {
            vm_pq: vec![1.0, 0.9, 1.05],
            va_pq: vec![0.1, -0.2, 0.0],
            va_pv: vec![0.3, -0.1],
        };
        let vm = Tensor::param(&[3, 1], vec![1.2, 0.8, 1.1]).unwrap();
        let va = Tensor::param(&[3, 1], vec![0.0, 0.1, -0.3]).unwrap();
        let vp = Tensor::param(&[2, 1], vec![0.5, -0.4]).unwrap();
        let pred = StatePrediction {
            vm_pq: vm.clone(),
            va_pq: va.clone(),
            va_pv: vp.clone(),
        };
        loss_gt(&pred, &labels).unwrap().backward().unwrap();
        assert_eq!(vm.grad().unwrap(), vec![1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(va.grad().unwrap(), vec![-1.0 / 3.0, 1.0 / 3.0, -1.0 / 3.0]);
        assert_eq!(vp.grad().unwrap(), vec![0.5, -0.5]);
    }

    #[test]
    fn loss_equ_vanishes_at_solution() {
        let case = toy_case();
        let p = labeled(&case);
        let (batch, phys) = one_batch(&p);
        let pred = StatePrediction::from_states(&[p.label.as_ref().unwrap()], &batch);
        assert!(loss_equ(&pred, &phys).unwrap().item() < 1e-9);
        let flat = StatePrediction::from_states(&[&p.init], &batch);
        assert!(loss_equ(&flat, &phys).unwrap().item() > 1e-3);
    }

    #[test]
    fn loss_equ_matches_numeric_mismatch() {
        let case = toy_case();
        let p = labeled(&case);
        let (batch, phys) = one_batch(&p);
        let mut state = p.init.clone();
        state.vm[2] = 0.97;
        state.va[3] = -0.05;
        state.va[1] = 0.02;
        let (dp, dq) = bus_mismatch(&state, &p.ybus, &p.inj).unwrap();
        let expect = (dp[2].abs() + dq[2].abs() + dp[3].abs() + dq[3].abs()) / 2.0 + dp[1].abs();
        let got = loss_equ(&StatePrediction::from_states(&[&state], &batch), &phys).unwrap().item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn isolated_bus_contributes_nothing() {
        let mut case = toy_case();
        case.buses.push(Bus {
            id: 4,
            bus_type: BusType::PQ,
            p_load: 0.0,
            q_load: 0.0,
            gs: 0.0,
            bs: 0.0,
            vm_setpoint: 1.0,
            va_setpoint: 0.0,
            base_kv: 230.0,
        });
        case.external_ids.push(5);
        let p = Prepared::from_case(0, &case).unwrap();
        let (batch, phys) = one_batch(&p);
        let mut a = p.init.clone();
        let mut b = p.init.clone();
        a.vm[4] = 0.7;
        b.vm[4] = 1.3;
        b.va[4] = 0.4;
        // The isolated bus adds zero to the PQ sum but still counts in the mean.
        let la = loss_equ(&StatePrediction::from_states(&[&a], &batch), &phys).unwrap().item();
        let lb = loss_equ(&StatePrediction::from_states(&[&b], &batch), &phys).unwrap().item();
        assert_eq!(la, lb);
    }

    #[test]
    fn loss_equ_gradient_matches_fd() {
        let case = toy_case();
        let p = labeled(&case);
        let (batch, phys) = one_batch(&p);
        let label = p.label.as_ref().unwrap();
        let cols = StateColumns::gather(&[label], &batch);
        let shift = |v: &[f64], d: f64| v.iter().enumerate().map(|(k, x)| x + d * (k as f64 + 1.0)).collect::<Vec<_>>();
        let inputs = vec![
            (vec![2, 1], shift(&cols.vm_pq, 0.03)),
            (vec![2, 1], shift(&cols.va_pq, 0.05)),
            (vec![1, 1], shift(&cols.va_pv, -0.04)),
        ];
        let err = max_rel_error(&inputs, |ts| {
            let pred = StatePrediction {
                vm_pq: ts[0].clone(),
                va_pq: ts[1].clone(),
                va_pv: ts[2].clone(),
            };
            Ok(loss_equ(&pred, &phys).map_err(|e| match e {
                SeIterError::Tensor(t) => t,
                other => panic!("{other}"),
            })?)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", ParamTensor::new(&[2], vec![v, v]).unwrap());
        s.insert("b", ParamTensor::new(&[1, 3], vec![v; 3]).unwrap());
        s
    }

    #[test]
    fn ema_examples() {
        let mut t = store(0.0);
        ema_update(&mut t, &store(1.0), 0.99).unwrap();
        for (_, p) in t.iter() {
            assert!(p.data.iter().all(|&x| x == 0.99 * 0.0 + (1.0 - 0.99) * 1.0));
            assert!(p.data.iter().all(|&x| (x - 0.01).abs() < 1e-15));
        }
        let mut t = store(0.3);
        ema_update(&mut t, &store(0.7), 0.0).unwrap();
        assert_eq!(t, store(0.7));
        let mut t = store(0.3);
        ema_update(&mut t, &store(0.7), 1.0).unwrap();
        assert_eq!(t, store(0.3));
        let mut other = ParamStore::new();
        other.insert("a", ParamTensor::new(&[2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            ema_update(&mut store(0.0), &other, 0.5),
            Err(SeIterError::ParamMismatch)
        ));
    }

    #[test]
    fn config_invariants() {
        let ok = SeIterConfig::default();
        ok.validate().unwrap();
        for bad in [
            SeIterConfig { loops: 0, ..ok.clone() },
            SeIterConfig { alpha_ema: 1.0, ..ok.clone() },
            SeIterConfig { alpha_ema: 0.0, ..ok.clone() },
            SeIterConfig { lambda_equ: -1.0, ..ok.clone() },
            SeIterConfig { q_dropout: 1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(SeIterError::InvalidConfig(_))));
        }
        let plain = ok.without_seiter();
        assert_eq!((plain.loops, plain.lambda_equ), (1, 0.0));
    }

    #[test]
    fn zero_output_inference_stays_at_initialization() {
        let case = toy_case();
        let p = labeled(&case);
        let mut model = FlowNetConfig::with_width(8);
        model.k_blocks = 2;
        model.scale = InputScale::from_case(&case).unwrap();
        let params = flownet::init_params(&model, 3, true).unwrap();
        let r = infer(&p, &params, &model, 5).unwrap();
        assert_eq!(r.state, p.init);
        assert_eq!(r.trajectory.len(), 6);
        assert!(r.trajectory.iter().all(|&m| m == r.trajectory[0]));
        assert!(matches!(infer(&p, &params, &model, 0), Err(SeIterError::InvalidConfig(_))));
    }

    #[test]
    fn short_training_is_deterministic_and_learns() {
        let case = toy_case();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Prepared> = (0..24)
            .map(|k| {
                let mut c = case.clone();
                for b in c.buses.iter_mut().skip(2) {
                    b.p_load *= rng.gen_range(0.5..1.5);
                    b.q_load *= rng.gen_range(0.5..1.5);
                }
                let mut p = labeled(&c);
                p.index = k;
                p
            })
            .collect();
        let (train_set, test_set) = samples.split_at(18);
        let mut model = FlowNetConfig::with_width(8);
        model.k_blocks = 1;
        let cfg = SeIterConfig {
            loops: 3,
            epochs: 4,
            batch_size: 6,
            lr_max: 1e-2,
            model,
            ..SeIterConfig::default()
        };
        let a = train(train_set, test_set, &case, &cfg, None).unwrap();
        let b = train(train_set, test_set, &case, &cfg, None).unwrap();
        assert_eq!(metrics_jsonl(&a.log).unwrap(), metrics_jsonl(&b.log).unwrap());
        assert_eq!(a.teacher, b.teacher);
        assert_ne!(a.teacher, a.student);
        assert!(a.log.last().unwrap().train_loss_gt < a.log[0].train_loss_gt);

        let dir = tempfile::tempdir().unwrap();
        let c = train(train_set, test_set, &case, &cfg, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text, metrics_jsonl(&c.log).unwrap());
        let (teacher, model) = load_checkpoint(&dir.path().join(TEACHER_FILE)).unwrap();
        assert_eq!(teacher, c.teacher);
        assert_eq!(model, c.model);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let case = toy_case();
        let p = labeled(&case);
        assert!(matches!(
            train(&[], std::slice::from_ref(&p), &case, &SeIterConfig::default(), None),
            Err(SeIterError::DataExhausted(_))
        ));
    }
}

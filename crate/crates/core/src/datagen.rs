//! Labeled samples from randomly perturbed variants of a base case.
//!
//! Each sample index owns its own ChaCha stream of the run seed, so a
//! dataset is a pure function of `(base case, n, seed)` regardless of how the
//! work is scheduled. Samples are stored as deltas against the base case plus
//! the converged voltage state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acpf::{self, AcpfError, Injections, NrOptions, PowerFlowState};
use crate::case_io::{self, BusType, CaseError, GridCase};
use crate::flownet::Setpoints;
use crate::network::{self, build_hetero_graph, build_ybus, AdmittanceMatrix, HeteroGraph, NetworkError};

pub const DATASET_SCHEMA: &str = "dataset/1";
pub const SPLIT_RULE: &str = "topology-disjoint: unique dropped-line sets shuffled, test filled to 20% of samples";
pub const DROP_RULE: &str = "drop count uniform over {1, 2}, lines uniform without replacement, resampled until connected";
pub const BASE_CASE_FILE: &str = "base_case.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAX_DIVERGED_FRACTION: f64 = 0.05;
pub const TEST_FRACTION: f64 = 0.2;
pub const SHARD_SIZE: usize = 2000;
/// Stream id reserved for the split shuffle; sample streams use their index.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("no connected topology after {0} attempts")]
    ExhaustedResampling(usize),
    #[error("{failed} of {attempted} power flow solves failed to converge")]
    ExcessiveDivergence { failed: usize, attempted: usize },
    #[error("at least 10 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("case has no in-service branch that can be dropped")]
    NothingToDrop,
    #[error("sample {index} does not fit the base case: {detail}")]
    SampleMismatch { index: usize, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: content hash mismatch")]
    HashMismatch { path: String },
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbConfig {
    pub load_range: (f64, f64),
    pub branch_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            load_range: (0.5, 1.5),
            branch_range: (0.9, 1.1),
            max_attempts: 100,
        }
    }
}

/// Per-bus loads, per-branch parameters and the dropped lines of one draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub branch_r: Vec<f64>,
    pub branch_x: Vec<f64>,
    pub branch_b: Vec<f64>,
    pub dropped_lines: Vec<usize>,
}

impl Perturbation {
    pub fn apply(&self, base: &GridCase) -> GridCase {
        let mut case = base.clone();
        for (i, bus) in case.buses.iter_mut().enumerate() {
            bus.p_load = self.p_load[i];
            bus.q_load = self.q_load[i];
        }
        for (k, br) in case.branches.iter_mut().enumerate() {
            br.r = self.branch_r[k];
            br.x = self.branch_x[k];
            br.b_charging = self.branch_b[k];
        }
        for &k in &self.dropped_lines {
            case.branches[k].status = false;
        }
        case
    }

    fn fits(&self, base: &GridCase) -> bool {
        let (n, m) = (base.n_buses(), base.branches.len());
        self.p_load.len() == n
            && self.q_load.len() == n
            && self.branch_r.len() == m
            && self.branch_x.len() == m
            && self.branch_b.len() == m
            && self.dropped_lines.iter().all(|&k| k < m)
    }
}

/// Scales PQ loads and branch parameters by independent uniform factors and
/// drops one or two in-service lines, redrawing the drop set until the
/// network stays connected.
pub fn draw_perturbation(base: &GridCase, rng: &mut impl Rng, cfg: &PerturbConfig) -> Result<Perturbation> {
    let (l0, l1) = cfg.load_range;
    let (b0, b1) = cfg.branch_range;
    let mut p_load = Vec::with_capacity(base.n_buses());
    let mut q_load = Vec::with_capacity(base.n_buses());
    for bus in &base.buses {
        if bus.bus_type == BusType::PQ {
            p_load.push(bus.p_load * rng.gen_range(l0..l1));
            q_load.push(bus.q_load * rng.gen_range(l0..l1));
        } else {
            p_load.push(bus.p_load);
            q_load.push(bus.q_load);
        }
    }
    let mut branch_r = Vec::with_capacity(base.branches.len());
    let mut branch_x = Vec::with_capacity(base.branches.len());
    let mut branch_b = Vec::with_capacity(base.branches.len());
    for br in &base.branches {
        branch_r.push(br.r * rng.gen_range(b0..b1));
        branch_x.push(br.x * rng.gen_range(b0..b1));
        branch_b.push(br.b_charging * rng.gen_range(b0..b1));
    }
    let candidates: Vec<usize> = base.in_service_branches().map(|(k, _)| k).collect();
    if candidates.is_empty() {
        return Err(DatagenError::NothingToDrop);
    }
    let mut dropped_lines = None;
    for _ in 0..cfg.max_attempts {
        let count = rng.gen_range(1..=2usize).min(candidates.len());
        let mut pick: Vec<usize> = candidates.choose_multiple(rng, count).copied().collect();
        pick.sort_unstable();
        if network::is_connected_without(base, &pick) {
            dropped_lines = Some(pick);
            break;
        }
    }
    let dropped_lines = dropped_lines.ok_or(DatagenError::ExhaustedResampling(cfg.max_attempts))?;
    Ok(Perturbation {
        p_load,
        q_load,
        branch_r,
        branch_x,
        branch_b,
        dropped_lines,
    })
}

pub fn perturb(base: &GridCase, rng: &mut impl Rng) -> Result<GridCase> {
    Ok(draw_perturbation(base, rng, &PerturbConfig::default())?.apply(base))
}

/// One labeled sample: the perturbation and the converged state of every bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    #[serde(flatten)]
    pub perturbation: Perturbation,
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub nr_iterations: usize,
}

impl Sample {
    pub fn case(&self, base: &GridCase) -> GridCase {
        self.perturbation.apply(base)
    }

    pub fn state(&self) -> PowerFlowState {
        PowerFlowState {
            vm: self.vm.clone(),
            va: self.va.clone(),
        }
    }

    pub fn dropped_lines(&self) -> &[usize] {
        &self.perturbation.dropped_lines
    }

    /// Everything training and evaluation need, derived once.
    pub fn prepare(&self, base: &GridCase) -> Result<Prepared> {
        if !self.perturbation.fits(base) || self.vm.len() != base.n_buses() || self.va.len() != base.n_buses() {
            return Err(DatagenError::SampleMismatch {
                index: self.index,
                detail: format!("{} buses, {} branches in base", base.n_buses(), base.branches.len()),
            });
        }
        let mut prepared = Prepared::from_case(self.index, &self.case(base))?;
        prepared.label = Some(self.state());
        prepared.dropped_lines = self.perturbation.dropped_lines.clone();
        Ok(prepared)
    }
}

/// A sample expanded into solver and model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub index: usize,
    pub graph: HeteroGraph,
    pub ybus: AdmittanceMatrix,
    pub inj: Injections,
    pub setpoints: Setpoints,
    pub init: PowerFlowState,
    /// Converged state; absent for cases that were never solved.
    pub label: Option<PowerFlowState>,
    pub dropped_lines: Vec<usize>,
}

impl Prepared {
    /// Unlabeled inputs for an arbitrary case.
    pub fn from_case(index: usize, case: &GridCase) -> Result<Self> {
        Ok(Prepared {
            index,
            graph: build_hetero_graph(case),
            ybus: build_ybus(case)?,
            inj: Injections::from_case(case),
            setpoints: Setpoints::from_case(case),
            init: PowerFlowState::flat_start(case),
            label: None,
            dropped_lines: case
                .branches
                .iter()
                .enumerate()
                .filter(|(_, b)| !b.status)
                .map(|(k, _)| k)
                .collect(),
        })
    }
}

/// Draws and solves sample `index`; `None` when the solve does not converge.
pub fn generate_one(base: &GridCase, seed: u64, index: usize) -> Result<Option<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let perturbation = draw_perturbation(base, &mut rng, &PerturbConfig::default())?;
    let case = perturbation.apply(base);
    let init = PowerFlowState::flat_start(&case);
    let sol = match acpf::solve_nr(&case, &init, NrOptions::default()) {
        Ok(sol) if sol.converged => sol,
        Ok(_) | Err(AcpfError::SingularJacobian { .. }) | Err(AcpfError::Diverged { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    Ok(Some(Sample {
        index,
        perturbation,
        vm: sol.state.vm,
        va: sol.state.va,
        nr_iterations: sol.iterations,
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub split: String,
    pub n_samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub base_case: String,
    pub base_case_file: String,
    pub base_case_sha256: String,
    pub seed: u64,
    pub n_requested: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_attempted: usize,
    pub discarded: Vec<usize>,
    pub split_rule: String,
    pub drop_rule: String,
    pub train_topologies: Vec<Vec<usize>>,
    pub test_topologies: Vec<Vec<usize>>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    /// True when no dropped-line set appears in both splits.
    pub fn topologies_disjoint(&self) -> bool {
        let train: BTreeSet<&Vec<usize>> = self.train_topologies.iter().collect();
        self.test_topologies.iter().all(|t| !train.contains(t))
    }
}

/// Generated samples and their split, before anything is written.
#[derive(Clone, Debug)]
pub struct Generated {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub n_attempted: usize,
    pub discarded: Vec<usize>,
}

/// Draws samples until `n` have converged, in index order.
pub fn generate_samples(base: &GridCase, n: usize, seed: u64) -> Result<Generated> {
    if n < 10 {
        return Err(DatagenError::TooFewSamples(n));
    }
    base.validate()?;
    let mut samples = Vec::with_capacity(n);
    let mut discarded = Vec::new();
    let mut next = 0usize;
    while samples.len() < n {
        let want = n - samples.len();
        // A little headroom so one extra round usually suffices.
        let chunk = want + want / 16 + 1;
        let results: Vec<Result<Option<Sample>>> = (next..next + chunk)
            .into_par_iter()
            .map(|i| generate_one(base, seed, i))
            .collect();
        for (offset, r) in results.into_iter().enumerate() {
            if samples.len() == n {
                break;
            }
            match r? {
                Some(s) => samples.push(s),
                None => discarded.push(next + offset),
            }
        }
        let attempted = samples.len() + discarded.len();
        if discarded.len() as f64 > MAX_DIVERGED_FRACTION * attempted as f64 {
            return Err(DatagenError::ExcessiveDivergence {
                failed: discarded.len(),
                attempted,
            });
        }
        next += chunk;
    }
    let n_attempted = samples.len() + discarded.len();
    let (train, test) = split_by_topology(samples, seed);
    Ok(Generated {
        train,
        test,
        n_attempted,
        discarded,
    })
}

/// Assigns whole dropped-line sets to the test split, in shuffled order,
/// until it holds at least `TEST_FRACTION` of the samples.
pub fn split_by_topology(samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.dropped_lines().to_vec()).or_default() += 1;
    }
    let mut topologies: Vec<Vec<usize>> = counts.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    topologies.shuffle(&mut rng);
    let target = (TEST_FRACTION * samples.len() as f64).round() as usize;
    let mut test_set = BTreeSet::new();
    let mut in_test = 0;
    for t in topologies {
        if in_test >= target {
            break;
        }
        in_test += counts[&t];
        test_set.insert(t);
    }
    samples
        .into_iter()
        .partition(|s| !test_set.contains(s.dropped_lines()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn jsonl(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn topology_list(samples: &[Sample]) -> Vec<Vec<usize>> {
    let set: BTreeSet<Vec<usize>> = samples.iter().map(|s| s.dropped_lines().to_vec()).collect();
    set.into_iter().collect()
}

/// Generates `n` samples and writes the base case, JSONL shards and the
/// manifest into `out_dir`.
pub fn generate(base: &GridCase, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let g = generate_samples(base, n, seed)?;
    write_dataset(base, n, seed, &g, out_dir)
}

pub fn write_dataset(base: &GridCase, n: usize, seed: u64, g: &Generated, out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir)?;
    let base_json = case_io::to_json(base);
    fs::write(out_dir.join(BASE_CASE_FILE), &base_json)?;
    let mut files = Vec::new();
    for (split, samples) in [("train", &g.train), ("test", &g.test)] {
        for (k, shard) in samples.chunks(SHARD_SIZE).enumerate() {
            let name = format!("{split}-{k:03}.jsonl");
            let bytes = jsonl(shard)?;
            fs::write(out_dir.join(&name), &bytes)?;
            files.push(FileEntry {
                path: name,
                split: split.into(),
                n_samples: shard.len(),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        base_case: base.name.clone(),
        base_case_file: BASE_CASE_FILE.into(),
        base_case_sha256: sha256_hex(base_json.as_bytes()),
        seed,
        n_requested: n,
        n_train: g.train.len(),
        n_test: g.test.len(),
        n_attempted: g.n_attempted,
        discarded: g.discarded.clone(),
        split_rule: SPLIT_RULE.into(),
        drop_rule: DROP_RULE.into(),
        train_topologies: topology_list(&g.train),
        test_topologies: topology_list(&g.test),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// A dataset read back from disk with every hash verified.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub base: GridCase,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.schema != DATASET_SCHEMA {
            return Err(DatagenError::Manifest(format!(
                "schema {:?}, expected {DATASET_SCHEMA:?}",
                manifest.schema
            )));
        }
        let base_text = fs::read_to_string(dir.join(&manifest.base_case_file))?;
        if sha256_hex(base_text.as_bytes()) != manifest.base_case_sha256 {
            return Err(DatagenError::HashMismatch {
                path: manifest.base_case_file.clone(),
            });
        }
        let base = case_io::from_json(&base_text)?;
        let mut train = Vec::with_capacity(manifest.n_train);
        let mut test = Vec::with_capacity(manifest.n_test);
        for f in &manifest.files {
            let bytes = fs::read(dir.join(&f.path))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(DatagenError::HashMismatch { path: f.path.clone() });
            }
            let target = match f.split.as_str() {
                "train" => &mut train,
                "test" => &mut test,
                other => return Err(DatagenError::Manifest(format!("unknown split {other:?}"))),
            };
            for line in BufReader::new(bytes.as_slice()).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    target.push(serde_json::from_str(&line)?);
                }
            }
        }
        if train.len() != manifest.n_train || test.len() != manifest.n_test {
            return Err(DatagenError::Manifest(format!(
                "manifest lists {}/{} samples, files hold {}/{}",
                manifest.n_train,
                manifest.n_test,
                train.len(),
                test.len()
            )));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            base,
            train,
            test,
        })
    }

    pub fn prepare(samples: &[Sample], base: &GridCase) -> Result<Vec<Prepared>> {
        samples.par_iter().map(|s| s.prepare(base)).collect()
    }
}

/// Largest per-bus power mismatch of a sample's labels under its own
/// admittance matrix, over the buses with a scheduled balance.
pub fn label_mismatch(sample: &Sample, base: &GridCase) -> Result<f64> {
    let case = sample.case(base);
    let y = build_ybus(&case)?;
    let m = acpf::mismatch(&sample.state(), &y, &Injections::from_case(&case), &case.partition())?;
    Ok(m.max_abs())
}

/// Writes a summary line per split to `w`; used by the CLI.
pub fn describe(manifest: &DatasetManifest, w: &mut impl Write) -> io::Result<()> {
    writeln!(
        w,
        "{}: {} train / {} test samples, {} discarded of {} attempted, {} train / {} test topologies",
        manifest.base_case,
        manifest.n_train,
        manifest.n_test,
        manifest.discarded.len(),
        manifest.n_attempted,
        manifest.train_topologies.len(),
        manifest.test_topologies.len()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{Branch, Bus, Generator};

    fn ring(n: usize) -> GridCase {
        let buses = (0..n)
            .map(|i| Bus {
                id: i,
                bus_type: match i {
                    0 => BusType::Slack,
                    1 => BusType::PV,
                    _ => BusType::PQ,
                },
                p_load: if i > 1 { 0.2 } else { 0.0 },
                q_load: if i > 1 { 0.05 } else { 0.0 },
                gs: 0.0,
                bs: 0.0,
                vm_setpoint: 1.0,
                va_setpoint: 0.0,
                base_kv: 100.0,
            })
            .collect();
        let branches = (0..n)
            .map(|i| Branch {
                from_bus: i,
                to_bus: (i + 1) % n,
                r: 0.01,
                x: 0.05,
                b_charging: 0.01,
                tap: 1.0,
                shift: 0.0,
                status: true,
            })
            .collect();
        GridCase {
            name: "ring".into(),
            base_mva: 100.0,
            buses,
            branches,
            generators: vec![
                Generator {
                    bus: 0,
                    p_gen: 0.0,
                    q_gen: 0.0,
                    vm_set: 1.0,
                },
                Generator {
                    bus: 1,
                    p_gen: 0.3,
                    q_gen: 0.0,
                    vm_set: 1.0,
                },
            ],
            external_ids: (1..=n as i64).collect(),
        }
    }

    #[test]
    fn degenerate_ranges_leave_case_unchanged() {
        let base = ring(6);
        let cfg = PerturbConfig {
            load_range: (1.0, 1.0 + f64::EPSILON),
            branch_range: (1.0, 1.0 + f64::EPSILON),
            max_attempts: 100,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = draw_perturbation(&base, &mut rng, &cfg).unwrap();
        p.dropped_lines.clear();
        let case = p.apply(&base);
        for (a, b) in case.buses.iter().zip(&base.buses) {
            assert!((a.p_load - b.p_load).abs() <= 1e-15 && (a.q_load - b.q_load).abs() <= 1e-15);
        }
        for (a, b) in case.branches.iter().zip(&base.branches) {
            assert!((a.r - b.r).abs() <= 1e-15 && (a.x - b.x).abs() <= 1e-15);
            assert!(a.status);
        }
    }

    #[test]
    fn drops_keep_ring_connected() {
        // On a ring any single drop keeps it connected; two drops split it.
        let base = ring(6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = draw_perturbation(&base, &mut rng, &PerturbConfig::default()).unwrap();
            assert_eq!(p.dropped_lines.len(), 1);
            assert!(network::is_connected(&p.apply(&base)));
        }
    }

    #[test]
    fn tree_exhausts_resampling() {
        let mut base = ring(4);
        base.branches.pop();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            draw_perturbation(&base, &mut rng, &PerturbConfig::default()),
            Err(DatagenError::ExhaustedResampling(100))
        ));
    }

    #[test]
    fn pv_and_slack_loads_are_not_scaled() {
        let mut base = ring(5);
        base.buses[1].p_load = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = draw_perturbation(&base, &mut rng, &PerturbConfig::default()).unwrap();
        assert_eq!(p.p_load[1], 0.4);
        assert_eq!(p.p_load[0], 0.0);
        assert_ne!(p.p_load[2], 0.2);
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            generate_samples(&ring(5), 9, 0),
            Err(DatagenError::TooFewSamples(9))
        ));
    }

    #[test]
    fn split_is_topology_disjoint() {
        let g = generate_samples(&ring(8), 40, 5).unwrap();
        assert_eq!(g.train.len() + g.test.len(), 40);
        assert!(!g.test.is_empty());
        let train: BTreeSet<Vec<usize>> = g.train.iter().map(|s| s.dropped_lines().to_vec()).collect();
        assert!(g.test.iter().all(|s| !train.contains(s.dropped_lines())));
    }
}

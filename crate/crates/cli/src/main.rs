use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridflow::acpf::{solve_nr, NrOptions, PowerFlowState};
use gridflow::case_io::{self, GridCase};
use gridflow::datagen::{self, Dataset, Prepared};
use gridflow::evalbench::{self, AblationSpec};
use gridflow::seiter::{self, MaskGroup, SeIterConfig};

#[derive(Parser)]
#[command(name = "gridflow", version, about = "AC power flow and graph-network power flow estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Pq,
    Pv,
}

impl From<Group> for MaskGroup {
    fn from(g: Group) -> Self {
        match g {
            Group::Pq => MaskGroup::Pq,
            Group::Pv => MaskGroup::Pv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a MATPOWER case and print or write its JSON form.
    Parse {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the AC power flow of a case from flat start.
    Solve {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labeled dataset of perturbed cases.
    Generate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student/teacher pair on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from the larger preset instead of the defaults.
        #[arg(long)]
        full_scale: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        loops: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Iterative inference on one case with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 8)]
        loops: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        loops: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Fractions of buses whose Q is withheld, e.g. `0,0.05,0.1,0.2`.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<f64>,
        #[arg(long, value_enum, default_value = "pq")]
        mask_group: Group,
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
        /// Loop counts to sweep, e.g. `1,2,4,8,12`.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve every connected N-2 outage with Newton-Raphson and the model.
    Contingency {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        loops: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every row of an ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// JSON list of `{name, fusion, vna, sgf, seiter}`; the standard
        /// ten-row grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_case(path: &Path) -> Result<GridCase> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let case = if path.extension().is_some_and(|e| e == "m") {
        case_io::parse_matpower(&text)?
    } else {
        case_io::from_json(&text)?
    };
    Ok(case)
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn state_json(case: &GridCase, state: &PowerFlowState) -> serde_json::Value {
    serde_json::json!({
        "bus_ids": case.external_ids,
        "vm": state.vm,
        "va_rad": state.va,
    })
}

fn train_config(path: Option<&Path>, full_scale: bool) -> Result<SeIterConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None if full_scale => SeIterConfig::full_scale(),
        None => SeIterConfig::default(),
    };
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Parse { case, out } => {
            let c = load_case(&case)?;
            eprintln!(
                "{}: {} buses, {} branches, {} generators",
                c.name,
                c.n_buses(),
                c.branches.len(),
                c.generators.len()
            );
            let text = case_io::to_json(&c);
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Solve {
            case,
            tol,
            max_iter,
            out,
        } => {
            let c = load_case(&case)?;
            let sol = solve_nr(&c, &PowerFlowState::flat_start(&c), NrOptions { tol, max_iter })?;
            eprintln!(
                "converged={} iterations={} max_mismatch={:.3e}",
                sol.converged, sol.iterations, sol.max_mismatch
            );
            let mut v = state_json(&c, &sol.state);
            v["converged"] = sol.converged.into();
            v["iterations"] = sol.iterations.into();
            emit(&v, out.as_deref())?;
        }
        Command::Generate { case, n, seed, out } => {
            let c = load_case(&case)?;
            let manifest = datagen::generate(&c, n, seed, &out)?;
            datagen::describe(&manifest, &mut std::io::stderr())?;
        }
        Command::Train {
            data,
            config,
            out,
            full_scale,
            epochs,
            loops,
            seed,
        } => {
            let mut cfg = train_config(config.as_deref(), full_scale)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = loops {
                cfg.loops = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::load(&data)?;
            seiter::train_dataset(&ds, &cfg, Some(&out), |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  test rmse pq_vm {:.6} pq_va {:.6} pv_va {:.6}",
                    m.epoch, m.train_loss, m.test_rmse.pq_vm, m.test_rmse.pq_va, m.test_rmse.pv_va
                );
            })?;
            eprintln!("wrote {}", out.display());
        }
        Command::Infer {
            ckpt,
            case,
            loops,
            out,
        } => {
            let (teacher, model) = seiter::load_checkpoint(&ckpt)?;
            let c = load_case(&case)?;
            let prepared = Prepared::from_case(0, &c)?;
            let r = seiter::infer(&prepared, &teacher, &model, loops)?;
            let mut v = state_json(&c, &r.state);
            v["mismatch_trajectory"] = serde_json::json!(r.trajectory);
            emit(&v, out.as_deref())?;
        }
        Command::Eval {
            ckpt,
            data,
            loops,
            batch_size,
            mask,
            mask_group,
            mask_seed,
            sweep,
            out,
        } => {
            let (teacher, model) = seiter::load_checkpoint(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let test = Dataset::prepare(&ds.test, &ds.base)?;
            let mut v = serde_json::json!({
                "report": evalbench::evaluate(&test, &teacher, &model, loops, batch_size)?,
            });
            if !mask.is_empty() {
                let reports = mask
                    .iter()
                    .map(|&rho| {
                        evalbench::missing_q_eval(&test, &teacher, &model, loops, batch_size, rho, mask_group.into(), mask_seed)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                v["missing_q"] = serde_json::to_value(reports)?;
            }
            if !sweep.is_empty() {
                let curve = evalbench::loop_sweep(&test, &teacher, &model, &sweep, batch_size)?;
                v["loop_sweep"] = serde_json::to_value(curve)?;
            }
            emit(&v, out.as_deref())?;
        }
        Command::Contingency {
            case,
            ckpt,
            loops,
            batch_size,
            out,
        } => {
            let c = load_case(&case)?;
            let (teacher, model) = seiter::load_checkpoint(&ckpt)?;
            let report = evalbench::contingency_n2(&c, &teacher, &model, loops, batch_size)?;
            let s = &report.summary;
            eprintln!(
                "{} topologies, {} converged; newton-raphson {:.3} s total, model {:.3} s total; max discrepancy {:.3e}",
                s.n_cases, s.n_converged, s.nr_total_seconds, s.model_total_seconds, s.max_discrepancy
            );
            emit(&serde_json::to_value(&report)?, out.as_deref())?;
        }
        Command::Ablate {
            data,
            grid,
            config,
            out,
        } => {
            let grid: Vec<AblationSpec> = match grid {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => evalbench::default_grid(),
            };
            if grid.is_empty() {
                bail!("empty ablation grid");
            }
            let cfg = train_config(config.as_deref(), false)?;
            let ds = Dataset::load(&data)?;
            let train = Dataset::prepare(&ds.train, &ds.base)?;
            let test = Dataset::prepare(&ds.test, &ds.base)?;
            fs::create_dir_all(&out)?;
            let rows = evalbench::ablate(&train, &test, &ds.base, &cfg, &grid, Some(&out), |r| {
                eprintln!(
                    "{:<28} pq_vm {:.6} pq_va {:.6} pv_va {:.6}",
                    r.spec.name, r.report.rmse_pq_vm, r.report.rmse_pq_va, r.report.rmse_pv_va
                );
            })?;
            evalbench::ablation_csv(&rows, fs::File::create(out.join("ablation.csv"))?)?;
            emit(&serde_json::to_value(&rows)?, Some(&out.join("ablation.json")))?;
        }
    }
    Ok(())
}

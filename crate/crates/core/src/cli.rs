//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on
//! numerical or I/O failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::bundle::{run_localization, QuadraticBundle};
use crate::config::{Method, RunConfig};
use crate::data::{export_csv, DomainDataset};
use crate::diffmodel::EncoderParams;
use crate::error::{Result, TtsoError};
use crate::evalbench::{
    evaluate_accuracy, run_fold, run_lodo, train_probe, train_representation, FoldSeeds, ProbeHead,
};
use crate::report::{labelled_traces, write_atomic, write_json, write_report};

#[derive(Debug, Parser)]
#[command(
    name = "ttso",
    version,
    about = "Tri-level robust representation learning for time series"
)]
struct Cli {
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured dataset as per-domain CSV files plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pre-train an encoder and fit a linear probe.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Domain id or index left out of training and scored afterwards.
        #[arg(long)]
        holdout: Option<String>,
    },
    /// Score a trained checkpoint on one domain.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding `encoder.f64`, `encoder.json` and `probe.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: String,
    },
    /// Leave-one-domain-out evaluation of every configured method.
    Lodo {
        #[arg(long)]
        config: PathBuf,
    },
    /// Localization epochs on a random convex quadratic instance.
    ToyQuadratic {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Gradient, convexity and plane property checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "erm" => Ok(Method::Erm),
        "group_dro" | "groupdro" => Ok(Method::GroupDro),
        "ttso" => Ok(Method::Ttso),
        _ => Err(format!("unknown method `{s}` (expected erm, group_dro or ttso)")),
    }
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: &Path, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(o) = out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TtsoError::io(dir, e))
}

fn domain_index(ds: &DomainDataset, key: &str) -> Result<usize> {
    if let Some(i) = ds.domains.iter().position(|d| d.id == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < ds.n_domains() => Ok(i),
        _ => Err(TtsoError::Input(format!(
            "unknown domain `{key}`; available: {}",
            ds.domains.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = load_config(&config, &cli.out)?;
            let ds = cfg.dataset()?;
            let dir = cfg.output_dir.join("data");
            create_dir(&dir)?;
            let manifest = export_csv(&ds, &dir)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train {
            config,
            method,
            holdout,
        } => {
            let cfg = load_config(&config, &cli.out)?;
            let ds = cfg.dataset()?;
            let replicate = cfg.eval.seeds[0];
            let dir = cfg.output_dir.join("train").join(method.name());
            create_dir(&dir)?;
            let (params, head, trace, summary) = match holdout {
                Some(key) => {
                    let j = domain_index(&ds, &key)?;
                    let fold = run_fold(&ds, method, &cfg, j, FoldSeeds::new(cfg.seed, replicate, j))?;
                    let summary = json!({
                        "method": method.name(),
                        "holdout": ds.domains[j].id,
                        "accuracy": fold.accuracy,
                        "q": fold.trained.q,
                        "config_hash": cfg.experiment_hash(),
                    });
                    (fold.trained.params, fold.head, fold.trained.trace, summary)
                }
                None => {
                    let seeds = FoldSeeds::new(cfg.seed, replicate, ds.n_domains());
                    let sources: Vec<&[Vec<f64>]> = ds.domains.iter().map(|d| d.windows.as_slice()).collect();
                    let trained = train_representation(method, &cfg, &sources, seeds)?;
                    let windows: Vec<Vec<f64>> = ds.domains.iter().flat_map(|d| d.windows.iter().cloned()).collect();
                    let labels: Vec<usize> = ds.domains.iter().flat_map(|d| d.labels.iter().copied()).collect();
                    let fit = train_probe(
                        &trained.params,
                        &windows,
                        &labels,
                        ds.n_classes,
                        cfg.eval.probe_epochs,
                        cfg.eval.probe_lr,
                        seeds.probe,
                    )?;
                    let summary = json!({
                        "method": method.name(),
                        "holdout": null,
                        "q": trained.q,
                        "config_hash": cfg.experiment_hash(),
                    });
                    (trained.params, fit.head, trained.trace, summary)
                }
            };
            params.save(&dir.join("encoder"))?;
            head.save(&dir.join("probe.json"))?;
            if let Some(tr) = &trace {
                write_atomic(&dir.join("trace.csv"), tr.to_csv().as_bytes())?;
            }
            write_json(&dir.join("train.json"), &summary)?;
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            target,
        } => {
            let cfg = load_config(&config, &cli.out)?;
            let ds = cfg.dataset()?;
            let j = domain_index(&ds, &target)?;
            let params = EncoderParams::load(&checkpoint.join("encoder"))?;
            let head = ProbeHead::load(&checkpoint.join("probe.json"))?;
            let d = &ds.domains[j];
            let acc = evaluate_accuracy(&params, &head, &d.windows, &d.labels)?;
            let summary = json!({ "target": d.id, "accuracy": acc, "n": d.labels.len() });
            create_dir(&cfg.output_dir)?;
            write_json(&cfg.output_dir.join(format!("eval_{}.json", d.id)), &summary)?;
            println!("{}", serde_json::to_string(&summary).unwrap_or_default());
            Ok(())
        }
        Command::Lodo { config } => {
            let cfg = load_config(&config, &cli.out)?;
            let ds = cfg.dataset()?;
            let ckpt = cfg.output_dir.join("checkpoints");
            create_dir(&ckpt)?;
            let mut reports = Vec::new();
            let mut traces = Vec::new();
            for &m in &cfg.eval.methods {
                let run = run_lodo(&ds, m, &cfg, &cfg.eval.seeds, Some(&ckpt))?;
                eprintln!(
                    "{}: mean accuracy {:.4} (std {:.4})",
                    m.name(),
                    run.report.mean,
                    run.report.std
                );
                reports.push(run.report);
                traces.extend(run.traces);
            }
            let parts: Vec<(String, &crate::sla::SolverTrace)> = traces.iter().map(|(l, t)| (l.clone(), t)).collect();
            let paths = write_report(&cfg.output_dir, &reports, &labelled_traces(&parts), &cfg)?;
            println!("{}", paths.report_csv.display());
            Ok(())
        }
        Command::ToyQuadratic {
            n,
            k,
            d,
            seed,
            epochs,
            eps,
            lambda,
        } => {
            if !(eps > 0.0 && lambda > 0.0) {
                return Err(TtsoError::Config("eps and lambda must be positive".into()));
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("out"));
            create_dir(&out)?;
            let b = QuadraticBundle::random(n, k, d, seed)?;
            let log = run_localization(&b, eps, lambda, epochs, 1e-10)?;
            let mut csv = String::from("epoch,n_planes,F_opt,f1_opt,h,grad_norm\n");
            for e in &log {
                csv.push_str(&format!(
                    "{},{},{:e},{:e},{:e},{:e}\n",
                    e.epoch, e.n_planes, e.f_opt, e.f1_opt, e.h, e.grad_norm
                ));
            }
            let monotone = log.windows(2).all(|w| w[1].f_opt >= w[0].f_opt - 1e-7);
            write_atomic(&out.join("trace.csv"), csv.as_bytes())?;
            write_json(
                &out.join("report.json"),
                &json!({
                    "n": n, "k": k, "d": d, "seed": seed,
                    "epochs": log.len(),
                    "monotone": monotone,
                    "final_h": log.last().map(|e| e.h),
                    "f_opt": log.iter().map(|e| e.f_opt).collect::<Vec<_>>(),
                }),
            )?;
            println!("{} epochs, monotone: {monotone}", log.len());
            if monotone {
                Ok(())
            } else {
                Err(TtsoError::Numerical {
                    iteration: log.len(),
                    what: "restricted optima decreased across plane epochs".into(),
                })
            }
        }
        Command::Selftest { seed } => {
            let results = crate::selftest::run(seed)?;
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed == 0 {
                Ok(())
            } else {
                Err(TtsoError::Numerical {
                    iteration: 0,
                    what: format!("{failed} selftest check(s) failed"),
                })
            }
        }
    }
}

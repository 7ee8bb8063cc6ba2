use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use strlora::config::{RunConfig, Variant};
use strlora::metrics::{homogeneity_report, read_accuracy_csv, MetricLedger};
use strlora::stream::{materialize, ChunkReader};
use strlora::trace::read_jsonl;
use strlora::trainer::{self, gradient_audit, run_on_chunks, Trainer};
use strlora::{rng, Error, Result};

#[derive(Parser)]
#[command(
    name = "strlora",
    version,
    about = "Routed LoRA experts on synthetic task streams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the stream and the model.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write every chunk, the test sets and manifest.json.
    ComposeStream(Common),
    /// Train over the stream, evaluating after every chunk.
    Train {
        #[command(flatten)]
        common: Common,
        /// `frozen`, `shared_lora`, `uniform_moe`, `full`, or components from `p,s,reg`.
        #[arg(long)]
        variant: Option<Variant>,
        /// Read chunks from a directory written by `compose-stream`.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with = "stream")]
        resume: Option<PathBuf>,
    },
    /// Run the six component combinations on one stream.
    Ablate(Common),
    /// Recompute forgetting metrics from a CSV with `t,m,a` columns.
    Metrics {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routing homogeneity report from a traces file.
    Diag {
        traces: PathBuf,
        /// Comma-separated task ids; defaults to every task in the file.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the full model's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn print_ledger(ledger: &MetricLedger) {
    for r in ledger.rows() {
        let acc: Vec<String> = r
            .tasks
            .iter()
            .map(|t| t.map_or("  -  ".to_string(), |t| format!("{:.3}", t.a)))
            .collect();
        println!(
            "t={:>2}  acc [{}]  MAP {:.4}  MAF {:.4}",
            r.t,
            acc.join(" "),
            r.map,
            r.maf
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::ComposeStream(c) => {
            let cfg = load_config(&c)?;
            let out = cfg
                .out
                .clone()
                .ok_or_else(|| Error::Invalid("--out is required".into()))?;
            let m = materialize(&trainer::stream_for(&cfg)?, &out)?;
            println!(
                "wrote {} chunks of {} samples over {} tasks to {}",
                m.n_chunks,
                m.n_t,
                m.n_tasks,
                out.display()
            );
        }
        Cmd::Train {
            common,
            variant,
            stream,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            cfg.validate()?;
            let out = match (stream, resume) {
                (Some(dir), _) => {
                    let reader = ChunkReader::open(&dir)?;
                    let manifest = reader.manifest().clone();
                    if manifest.config != cfg.stream {
                        return Err(Error::Invalid(format!(
                            "stream in {} was composed with a different stream config",
                            dir.display()
                        )));
                    }
                    let tests = reader.test_sets()?;
                    let out = run_on_chunks(
                        &cfg,
                        Trainer::new(&cfg)?,
                        MetricLedger::new(manifest.n_tasks),
                        reader,
                        &tests,
                    )?;
                    if let Some(o) = &cfg.out {
                        trainer::write_outputs(o, &out)?;
                    }
                    out
                }
                (None, Some(ckpt)) => trainer::resume_stream(&cfg, &ckpt)?,
                (None, None) => trainer::run_stream(&cfg)?,
            };
            println!("variant {}", cfg.variant);
            print_ledger(&out.ledger);
            if let Ok(Some(c)) = out.homogeneity().map(|r| r.mean_off_diagonal()) {
                println!("mean off-diagonal routing CKA {c:.4}");
            }
        }
        Cmd::Ablate(c) => {
            let cfg = load_config(&c)?;
            println!("{:<24} {:>8} {:>8} {:>8}", "variant", "MAP", "MAF", "CKA");
            for r in trainer::run_ablation_suite(&cfg)? {
                let cka = r.cka.map_or("-".to_string(), |c| format!("{c:.4}"));
                println!(
                    "{:<24} {:>8.4} {:>8.4} {:>8}",
                    r.variant.to_string(),
                    r.map,
                    r.maf,
                    cka
                );
            }
        }
        Cmd::Metrics { input, out } => {
            let acc = read_accuracy_csv(BufReader::new(File::open(&input)?))?;
            let ledger = MetricLedger::from_matrix(&acc)?;
            print_ledger(&ledger);
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                ledger.write_task_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
                ledger.write_summary_csv(BufWriter::new(File::create(
                    dir.join("metrics_summary.csv"),
                )?))?;
            }
        }
        Cmd::Diag { traces, tasks, out } => {
            let records = read_jsonl(&traces)?;
            let tasks = if tasks.is_empty() {
                let mut t: Vec<usize> = records.iter().map(|r| r.task_id).collect();
                t.sort_unstable();
                t.dedup();
                t
            } else {
                tasks
            };
            let report = homogeneity_report(&records, &tasks)?;
            report.write_cka_csv(std::io::stdout())?;
            match report.mean_off_diagonal() {
                Some(c) => println!("mean off-diagonal CKA {c:.4}"),
                None => println!("mean off-diagonal CKA undefined (constant routing)"),
            }
            if let Some(dir) = out {
                write_report(&dir, &report)?;
            }
        }
        Cmd::Gradcheck {
            common,
            variant,
            samples,
            eps,
            tol,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            let stream = trainer::stream_for(&cfg)?;
            let tr = Trainer::new(&cfg)?;
            let mut r = rng::rng_for(cfg.seed, "gradcheck");
            let batch = perturbed_batch(&stream, samples, &mut r)?;
            let diffs = gradient_audit(&tr, &batch, eps)?;
            let worst = diffs.iter().map(|d| d.max_rel_err).fold(0.0, f64::max);
            for d in &diffs {
                println!(
                    "{:<40} rel {:.3e} abs {:.3e} |g| {:.3e}",
                    d.path, d.max_rel_err, d.max_abs_err, d.analytic_norm
                );
            }
            println!("worst relative error {worst:.3e} (tolerance {tol:e})");
            if worst > tol {
                return Err(Error::Invalid("gradient audit failed".into()));
            }
        }
    }
    Ok(())
}

fn perturbed_batch(
    stream: &strlora::stream::Stream,
    n: usize,
    r: &mut impl rand::Rng,
) -> Result<Vec<strlora::backbone::Sample>> {
    let chunk = stream.chunk(1)?;
    let k = r.gen_range(0..chunk.samples.len().saturating_sub(n).max(1));
    Ok(chunk.samples.iter().skip(k).take(n).cloned().collect())
}

fn write_report(dir: &Path, report: &strlora::metrics::HomogeneityReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    report.write_cka_csv(BufWriter::new(File::create(dir.join("cka.csv"))?))?;
    report.write_activation_csv(BufWriter::new(File::create(dir.join("activation.csv"))?))?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

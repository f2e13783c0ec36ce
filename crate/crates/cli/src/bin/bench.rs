//! Experiment driver: runs configured experiments and worker sweeps, and
//! evaluates the cost model.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use prepserve::records::generate_synthetic;
use prepserve_cli::report::render_table;
use prepserve_cli::{
    cost, emit_report, run_experiment, sharing_cost_bounds, sweep, CostParams, ExperimentConfig,
    MetricsReport, ReportFormat,
};

#[derive(Parser)]
#[command(name = "bench", about = "Run input pipeline experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
    Svg,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Table => ReportFormat::Table,
            Format::Svg => ReportFormat::Svg,
        }
    }
}

#[derive(clap::Args)]
struct Output {
    /// Report formats to write.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv")]
    format: Vec<Format>,
    /// Directory for report files.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    config: Option<PathBuf>,
    /// Override a single setting, e.g. `--set workers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override {o:?} is not KEY=VALUE");
            };
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Run the same experiment across several worker counts.
    Sweep {
        /// Worker counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluate the deployment cost formula.
    Cost {
        /// Job duration in hours.
        #[arg(long)]
        hours: f64,
        #[arg(long, default_value_t = 0.0)]
        workers: f64,
        #[arg(long, default_value_t = 1.0)]
        clients: f64,
        #[arg(long, default_value_t = 1.0)]
        accelerators: f64,
        #[arg(long, default_value_t = 0.0)]
        cpu_price: f64,
        #[arg(long, default_value_t = 0.0)]
        mem_price: f64,
        #[arg(long, default_value_t = 0.0)]
        acc_price: f64,
        #[arg(long, default_value_t = 0.0)]
        worker_cpu: f64,
        #[arg(long, default_value_t = 0.0)]
        worker_mem: f64,
        #[arg(long, default_value_t = 0.0)]
        client_cpu: f64,
        #[arg(long, default_value_t = 0.0)]
        client_mem: f64,
    },
    /// Best and worst total production cost for k jobs sharing a cache.
    SharingBounds {
        k: u64,
        one_pass_cost: f64,
        cache_size: u64,
        dataset_size: u64,
    },
    /// Write a synthetic record dataset.
    Generate {
        /// Output directory.
        out: PathBuf,
        /// Dataset settings, e.g. `--set files=8 --set seq_len=bimodal:16:480:0.3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn write_reports(reports: &[MetricsReport], output: &Output, name: &str) -> Result<()> {
    print!("{}", render_table(reports));
    for f in &output.format {
        let path = emit_report(reports, (*f).into(), &output.out, name)?;
        log::info!("wrote {}", path.display());
    }
    for r in reports {
        for e in r.client_errors() {
            log::warn!("{}: {e}", r.experiment_id);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("info,prepserve=warn"),
    )
    .init();
    match Cli::parse().command {
        Command::Run { config, output } => {
            let c = config.load()?;
            let r = run_experiment(&c)?;
            write_reports(&[r], &output, &c.experiment_id)?;
        }
        Command::Sweep {
            workers,
            config,
            output,
        } => {
            let c = config.load()?;
            let reports = sweep(&c, &workers)?;
            write_reports(&reports, &output, &format!("{}-sweep", c.experiment_id))?;
        }
        Command::Cost {
            hours,
            workers,
            clients,
            accelerators,
            cpu_price,
            mem_price,
            acc_price,
            worker_cpu,
            worker_mem,
            client_cpu,
            client_mem,
        } => {
            let p = CostParams {
                t: hours,
                n_workers: workers,
                n_clients: clients,
                accelerators_per_client: accelerators,
                c_cpu: cpu_price,
                c_mem: mem_price,
                c_acc: acc_price,
                worker_cpu,
                worker_mem,
                client_cpu,
                client_mem,
            };
            println!("{}", cost(&p)?);
        }
        Command::SharingBounds {
            k,
            one_pass_cost,
            cache_size,
            dataset_size,
        } => {
            let b = sharing_cost_bounds(k, one_pass_cost, cache_size, dataset_size)?;
            println!("best {}\nworst {}", b.best, b.worst);
        }
        Command::Generate { out, overrides } => {
            let mut c = ExperimentConfig::default();
            for o in &overrides {
                let Some((k, v)) = o.split_once('=') else {
                    bail!("override {o:?} is not KEY=VALUE");
                };
                c.set(k.trim(), v.trim())?;
            }
            let m = generate_synthetic(&c.dataset, &out)?;
            println!(
                "{} files, {} records in {}",
                m.files.len(),
                m.total_records(),
                out.display()
            );
        }
    }
    Ok(())
}

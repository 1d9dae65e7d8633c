//! `pilotkit`: run workload files, KMeans and the I/O benchmark.
//!
//! Exit codes: 0 on success, 1 on usage and validation errors, 2 when a
//! run fails.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use pilotkit::apps::{
    bench_io, default_root, run_kmeans, run_workload, BenchIoConfig, BenchResult, EngineBackend, KMeansConfig,
    Session, WorkloadSpec,
};
use pilotkit::Error;

#[derive(Parser)]
#[command(name = "pilotkit", version, about = "Pilot-based workloads, KMeans and storage benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workload file.
    Run {
        spec: PathBuf,
        /// Write result rows here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster random points with map/reduce KMeans.
    Kmeans {
        #[arg(long)]
        points: usize,
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value = "memory")]
        backend: EngineBackend,
        #[arg(long, default_value_t = 1)]
        partitions: usize,
        #[arg(long, default_value_t = 1)]
        reducers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long = "max-iter", default_value_t = 10)]
        max_iter: u32,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        /// Cores of the local pilot [default: available parallelism].
        #[arg(long)]
        workers: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time put, get and parallel reads on the storage tiers.
    BenchIo {
        /// Blob sizes in MB.
        #[arg(long, value_delimiter = ',', default_value = "1,8,64")]
        sizes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "file,memory")]
        backends: Vec<EngineBackend>,
        /// Parallel readers [default: the pilot's cores].
        #[arg(long)]
        partitions: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a workload file without running it.
    Validate { spec: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let mut err = io::stderr();
            let _ = writeln!(err);
            let _ = Cli::command().write_help(&mut err);
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn workers(requested: Option<u32>) -> u32 {
    requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get() as u32))
}

/// A scratch directory under the sandbox root, removed when dropped.
fn scratch() -> Result<tempfile::TempDir, Error> {
    let root = default_root();
    std::fs::create_dir_all(&root)?;
    Ok(tempfile::Builder::new().prefix("run-").tempdir_in(root)?)
}

fn emit(results: &BenchResult, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => results.write_csv(File::create(path)?),
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            results.write_csv(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Validate { spec } => WorkloadSpec::from_file(&spec)?.validate(),
        Command::Run { spec, out } => {
            let spec = WorkloadSpec::from_file(&spec)?;
            spec.validate()?;
            let dir = scratch()?;
            let report = run_workload(dir.path(), &spec)?;
            for (name, id, state) in &report.units {
                eprintln!("unit {name} ({id}): {state}");
            }
            for k in &report.kmeans {
                eprintln!(
                    "kmeans {}: {} iterations, converged={}",
                    k.config.scenario(),
                    k.iterations.len(),
                    k.converged
                );
            }
            emit(&report.results, out.as_deref())?;
            if report.all_units_done() {
                Ok(())
            } else {
                Err(Error::TaskFailed {
                    unit_id: report
                        .units
                        .iter()
                        .find(|u| u.2 != pilotkit::pilot::UnitState::Done)
                        .map(|u| u.1.clone())
                        .unwrap_or_default(),
                    attempt: 1,
                    reason: "not every unit finished DONE".into(),
                })
            }
        }
        Command::Kmeans {
            points,
            clusters,
            backend,
            partitions,
            reducers,
            seed,
            epsilon,
            max_iter,
            dims,
            workers: w,
            out,
        } => {
            let mut config = KMeansConfig::new(points, clusters);
            config.backend = backend;
            config.partitions = partitions;
            config.reducers = reducers;
            config.seed = seed;
            config.epsilon = epsilon;
            config.max_iterations = max_iter;
            config.n_dims = dims;
            config.validate()?;
            let dir = scratch()?;
            let session = Session::local(dir.path(), workers(w))?;
            let report = run_kmeans(&session, &config);
            session.compute().shutdown();
            let report = report?;
            eprintln!(
                "{} iterations, converged={}, wcss={}",
                report.iterations.len(),
                report.converged,
                report.iterations.last().map_or(0.0, |i| i.wcss)
            );
            emit(&report.results, out.as_deref())
        }
        Command::BenchIo {
            sizes,
            backends,
            partitions,
            seed,
            workers: w,
            out,
        } => {
            let config = BenchIoConfig {
                sizes,
                backends,
                partitions,
                seed,
            };
            config.validate()?;
            let dir = scratch()?;
            let session = Session::local(dir.path(), workers(w))?;
            let report = bench_io(&session, &config);
            session.compute().shutdown();
            let report = report?;
            for m in &report.measurements {
                eprintln!(
                    "{} MB {}: put {:.1} MB/s, get {:.1} MB/s, parallel read {:.1} MB/s",
                    m.size_mb,
                    m.backend,
                    m.put_throughput(),
                    m.get_throughput(),
                    m.parallel_read_throughput()
                );
            }
            emit(&report.results, out.as_deref())
        }
    }
}

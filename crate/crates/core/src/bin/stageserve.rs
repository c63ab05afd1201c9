use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use stageserve::bench::{self, BenchFleet, Check};
use stageserve::bundle::{write_fleet, FleetSpec, Template};
use stageserve::frontend::{self, FrontendConfig};

#[derive(Parser)]
#[command(
    name = "stageserve",
    version,
    about = "Serve and benchmark stage-compiled ML pipelines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic fleet of pipeline bundles.
    GenerateFleet(GenArgs),
    /// Run a benchmark scenario against a generated fleet.
    Bench {
        #[command(subcommand)]
        scenario: Scenario,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Bundle directories to register at startup, added to the config's list.
        #[arg(long = "bundle")]
        bundles: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "sa")]
    template: Template,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    pool: usize,
    #[arg(long)]
    dict_size: Option<usize>,
    /// ~1M-entry dictionaries and large tree ensembles (several GB for 250 plans).
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    fleet: PathBuf,
    /// Directory for CSV output.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Scenario {
    Memory(Common),
    Latency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    Throughput {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        cores: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        batch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    HeavyLoad {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Offered load as multiples of measured capacity.
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,1.5,2,3")]
        loads: Vec<f64>,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        #[arg(long)]
        no_reserve: bool,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    bench::all_pass(checks)
}

fn csv<T: serde::Serialize>(dir: &Path, name: &str, rows: &[T]) -> stageserve::Result<()> {
    let path = dir.join(name);
    bench::write_csv(&path, rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_bench(s: Scenario) -> stageserve::Result<bool> {
    match s {
        Scenario::Memory(c) => {
            let fleet = BenchFleet::open(&c.fleet)?;
            let r = bench::scenario_memory(&fleet)?;
            csv(&c.out, "memory.csv", &r.rows)?;
            if let Some(last) = r.rows.last() {
                println!(
                    "{} plans: {} bytes with dedup, {} without ({:.1}x); {} stage instances for {} plan stages",
                    last.plans,
                    last.dedup_bytes,
                    last.no_dedup_bytes,
                    r.ratio(),
                    last.stage_instances,
                    last.plan_stages
                );
            }
            Ok(report(&r.checks))
        }
        Scenario::Latency { common: c, seed } => {
            let fleet = BenchFleet::open(&c.fleet)?;
            let cfg = bench::LatencyConfig {
                seed,
                ..Default::default()
            };
            let r = bench::scenario_latency(&fleet, &cfg)?;
            csv(&c.out, "latency.csv", &r.rows)?;
            csv(&c.out, "latency_summary.csv", &r.summaries)?;
            for s in &r.summaries {
                println!(
                    "{:<28} cold p99 {:>9.1}us  hot mean {:>7.1}us  hot p99 {:>7.1}us  ratio {:>6.2}",
                    s.variant.to_string(),
                    s.cold_p99_us,
                    s.hot_mean_us,
                    s.hot_p99_us,
                    s.cold_hot_p99_ratio
                );
            }
            let m = bench::scenario_materialization(&fleet, &cfg)?;
            csv(&c.out, "materialization.csv", &m.rows)?;
            println!(
                "materialization: median hot {:.1}us off, {:.1}us on ({:.2}x), cache hit rate {:.2}",
                m.off_median_us, m.on_median_us, m.improvement, m.cache_hit_rate
            );
            let a = report(&r.checks);
            Ok(report(&m.checks) && a)
        }
        Scenario::Throughput {
            common: c,
            cores,
            batch,
            seed,
        } => {
            let fleet = BenchFleet::open(&c.fleet)?;
            let cfg = bench::ThroughputConfig {
                cores,
                batch,
                seed,
                ..Default::default()
            };
            let r = bench::scenario_throughput(&fleet, &cfg)?;
            csv(&c.out, "throughput.csv", &r.rows)?;
            println!("available parallelism: {}", r.available_parallelism);
            for row in &r.rows {
                println!(
                    "{:>3} workers: {:>10.0} rec/s (ideal {:>10.0}, {:.0}%)",
                    row.cores,
                    row.throughput,
                    row.ideal,
                    row.efficiency * 100.0
                );
            }
            Ok(report(&r.checks))
        }
        Scenario::HeavyLoad {
            common: c,
            workers,
            loads,
            seconds,
            no_reserve,
            seed,
        } => {
            let fleet = BenchFleet::open(&c.fleet)?;
            let mut cfg = bench::HeavyConfig {
                workers,
                loads,
                reserve: !no_reserve,
                seed,
                ..Default::default()
            };
            cfg.profile.duration = Duration::from_secs_f64(seconds);
            let r = bench::scenario_heavy_load(&fleet, &cfg)?;
            let mut rows = r.rows.clone();
            rows.extend(r.isolated.clone());
            csv(&c.out, "heavy_load.csv", &rows)?;
            println!("capacity {:.0} rec/s", r.capacity_records_per_s);
            for row in &r.rows {
                println!(
                    "load {:>4.2}: offered {:>8.0} rec/s, achieved {:>8.0}, latency-sensitive p99 {:>9.0}us, reserved p99 {}",
                    row.load,
                    row.offered_records_per_s,
                    row.throughput,
                    row.latency_sensitive_p99_us,
                    row.reserved_p99_us.map_or("-".into(), |v| format!("{v:.0}us"))
                );
            }
            Ok(report(&r.checks))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenerateFleet(a) => {
            let mut spec = if a.full_scale {
                FleetSpec::full_scale(a.template, a.count, a.seed)
            } else {
                FleetSpec::desk(a.template, a.count, a.seed)
            };
            spec.pool = a.pool;
            if let Some(d) = a.dict_size {
                spec.dict_size = d;
            }
            write_fleet(&spec, &a.out).map(|dirs| {
                println!("wrote {} bundles to {}", dirs.len(), a.out.display());
                true
            })
        }
        Cmd::Bench { scenario } => run_bench(scenario),
        Cmd::Serve {
            config,
            listen,
            bundles,
        } => {
            let mut cfg = match config {
                Some(p) => match FrontendConfig::load(&p) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::FAILURE;
                    }
                },
                None => FrontendConfig::default(),
            };
            if let Some(l) = listen {
                cfg.listen = l;
            }
            cfg.bundles.extend(bundles);
            frontend::serve(cfg).map(|_| true).map_err(Into::into)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

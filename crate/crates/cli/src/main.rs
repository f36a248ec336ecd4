//! `rapid`: run membership scenarios and the analysis experiments.
//!
//! Exit codes: 0 when every embedded check passes, 1 when a check or a run
//! invariant fails, 2 on a usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rapid_core::model::ProtocolParams;
use rapid_sim::bound::{conflict_bound, monte_carlo};
use rapid_sim::check::{all_pass, checks, Check};
use rapid_sim::spectral::{spectral_csv, spectral_samples, SPECTRAL_TOL};
use rapid_sim::sweep::{sensitivity_sweep, sweep_csv};
use rapid_sim::{run, ModeSpec, RunReport, Scenario, SimError};

/// Overrides `--seed` when set.
const SEED_ENV: &str = "RAPID_SEED";

/// λ/d below which a topology counts as a good expander.
const SPECTRAL_RATIO_LIMIT: f64 = 0.45;

#[derive(Parser)]
#[command(name = "rapid", version, about = "Membership protocol simulator and experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// One seed, every other node joins through it.
    Bootstrap {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// `--fail` members crash together.
    Crash {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        fail: usize,
        #[command(flatten)]
        common: Common,
    },
    /// A minority is cut off, then the partition heals.
    Partition {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        minority: usize,
        /// Tick at which the partition heals.
        #[arg(long, default_value_t = 150)]
        heal: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Asymmetric loss on a fraction of the members.
    Loss {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = LossKind::FlipFlop)]
        kind: LossKind,
        /// Fraction of members affected (rounded up, at least one).
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        /// Egress drop probability.
        #[arg(long, default_value_t = 0.8)]
        drop: f64,
        /// Flip-flop half period in ticks.
        #[arg(long, default_value_t = 20)]
        period: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Conflict rate of the aggregation rule over an (H, L, F) grid.
    Sensitivity {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long = "hs", value_delimiter = ',', default_value = "6,7,8,9")]
        h_set: Vec<usize>,
        #[arg(long = "ls", value_delimiter = ',', default_value = "1,2,3,4")]
        l_set: Vec<usize>,
        #[arg(long = "fs", value_delimiter = ',', default_value = "2,4,8,16")]
        f_set: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out/sensitivity")]
        out: PathBuf,
    },
    /// Second adjacency eigenvalue of seeded monitoring topologies.
    Spectral {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Number of topologies; seeds run from `--seed` upwards.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = SPECTRAL_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out/spectral")]
        out: PathBuf,
    },
    /// Asymptotic conflict-probability bound, optionally against Monte Carlo.
    Bound {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        t: usize,
        /// Monte Carlo trials; 0 skips the simulation.
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Re-run a saved scenario and compare with the artifacts next to it.
    Replay {
        scenario: PathBuf,
        #[arg(long, default_value = "out/replay")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 9)]
    h: usize,
    #[arg(long, default_value_t = 3)]
    l: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Ticks to simulate; each scenario has its own default.
    #[arg(long)]
    duration: Option<u64>,
    #[arg(long, value_enum, default_value_t = Mode::Decentralized)]
    mode: Mode,
    /// Auxiliary ensemble size in centralized mode.
    #[arg(long, default_value_t = 3)]
    aux: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Decentralized,
    Centralized,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    FlipFlop,
    Egress,
}

/// Errors that are the caller's fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn seed(flag: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned 64-bit integer, got {v:?}"))),
        Err(_) => Ok(flag),
    }
}

impl Common {
    fn params(&self) -> Result<ProtocolParams> {
        let p = ProtocolParams::with_watermarks(self.k, self.h, self.l);
        p.validate().map_err(|e| usage(e.to_string()))?;
        Ok(p)
    }

    fn finish(&self, mut sc: Scenario, default_out: &str) -> Result<(Scenario, PathBuf)> {
        if let Some(d) = self.duration {
            sc.duration = d;
        }
        if let Mode::Centralized = self.mode {
            sc.mode = ModeSpec::Centralized { aux: self.aux };
        }
        sc.validate().map_err(|e| usage(e.to_string()))?;
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
        Ok((sc, out))
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_checks(cs: &[Check]) {
    for c in cs {
        println!(
            "check {:<20} {}  {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
}

/// Runs a scenario, writes its artifacts and prints the checks.
fn run_scenario(sc: &Scenario, out: &Path) -> Result<(RunReport, bool)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "scenario.json", sc.to_json())?;
    let started = Instant::now();
    let report = match run(sc) {
        Ok(r) => r,
        Err(SimError::Invariant(msg)) => {
            println!("agreement=VIOLATED: {msg}");
            return Err(anyhow::anyhow!("run aborted: {msg}"));
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    write(out, "summary.json", report.summary_json())?;
    write(out, "timeseries.csv", report.timeseries_csv())?;
    let cs = checks(sc, &report);
    write(out, "checks.json", serde_json::to_string_pretty(&cs)?)?;
    println!("{}", report.headline());
    println!("unique_sizes={}, agreement=OK", report.unique_sizes.len());
    print_checks(&cs);
    println!("wrote {} in {:.2?}", out.display(), started.elapsed());
    Ok((report, all_pass(&cs)))
}

fn scenario_cmd(cmd: Cmd) -> Result<bool> {
    let (sc, out) = match cmd {
        Cmd::Bootstrap { n, common } => {
            let sc = Scenario::bootstrap(n, common.params()?, seed(common.seed)?);
            common.finish(sc, "out/bootstrap")?
        }
        Cmd::Crash { n, fail, common } => {
            if fail >= n {
                return Err(usage(format!("--fail must be below --n (fail={fail}, n={n})")));
            }
            let sc = Scenario::crash(n, fail, common.params()?, seed(common.seed)?);
            common.finish(sc, "out/crash")?
        }
        Cmd::Partition {
            n,
            minority,
            heal,
            common,
        } => {
            if 2 * minority >= n {
                return Err(usage(format!(
                    "--minority must be under half of --n (minority={minority}, n={n})"
                )));
            }
            if heal <= 50 {
                return Err(usage(format!(
                    "--heal must come after the partition starts at tick 50 (heal={heal})"
                )));
            }
            let sc = Scenario::partition(n, minority, heal, common.params()?, seed(common.seed)?);
            common.finish(sc, "out/partition")?
        }
        Cmd::Loss {
            n,
            kind,
            fraction,
            drop,
            period,
            common,
        } => {
            if !(0.0..=1.0).contains(&fraction) || !(0.0..=1.0).contains(&drop) {
                return Err(usage("--fraction and --drop must lie in [0, 1]"));
            }
            let (params, s) = (common.params()?, seed(common.seed)?);
            let sc = match kind {
                LossKind::FlipFlop => {
                    let mut sc = Scenario::flip_flop(n, fraction, params, s);
                    for e in &mut sc.events {
                        if let rapid_sim::Event::FlipFlop { period: p, .. } = e {
                            *p = period;
                        }
                    }
                    sc
                }
                LossKind::Egress => Scenario::egress_loss(n, fraction, drop, params, s),
            };
            common.finish(sc, "out/loss")?
        }
        _ => unreachable!("not a scenario command"),
    };
    let (_, pass) = run_scenario(&sc, &out)?;
    Ok(pass)
}

fn sensitivity(n: usize, k: usize, reps: usize, sets: [&[usize]; 3], flag_seed: u64, out: &Path) -> Result<bool> {
    if reps == 0 {
        return Err(usage("--reps must be positive"));
    }
    let started = Instant::now();
    let rows =
        sensitivity_sweep(n, k, sets[0], sets[1], sets[2], reps, seed(flag_seed)?).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    let csv = sweep_csv(&rows);
    write(out, "sensitivity.csv", &csv)?;
    print!("{csv}");
    println!("wrote {} in {:.2?}", out.display(), started.elapsed());
    Ok(true)
}

fn spectral(n: usize, k: usize, count: u64, tol: f64, flag_seed: u64, out: &Path) -> Result<bool> {
    if k == 0 || count == 0 {
        return Err(usage("--k and --seeds must be positive"));
    }
    let first = seed(flag_seed)?;
    let seeds: Vec<u64> = (first..first + count).collect();
    let rows = spectral_samples(n, k, &seeds, tol).map_err(|e| usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    let csv = spectral_csv(&rows);
    write(out, "spectral.csv", &csv)?;
    print!("{csv}");
    let below = rows.iter().filter(|r| r.report.ratio < SPECTRAL_RATIO_LIMIT).count();
    let converged = rows.iter().all(|r| r.report.converged);
    println!(
        "ratio<{SPECTRAL_RATIO_LIMIT} in {below}/{} samples; all converged: {converged}",
        rows.len()
    );
    Ok(converged)
}

fn bound(k: usize, delta: f64, t: usize, trials: usize, flag_seed: u64) -> Result<bool> {
    let b = conflict_bound(k, delta, t).map_err(|e| usage(e.to_string()))?;
    println!("{b:.3}");
    println!("conflict_bound K={k} delta={delta} t={t} = {b:.6e} (asymptotic upper bound, not exact)");
    if trials == 0 {
        return Ok(true);
    }
    let row = monte_carlo(k, delta, t, trials, seed(flag_seed)?).map_err(|e| usage(e.to_string()))?;
    println!(
        "monte_carlo H={} L={} trials={} rate={:.6} sigma={:.6} consistent={}",
        row.h,
        row.l,
        row.trials,
        row.rate,
        row.sigma,
        row.consistent()
    );
    Ok(row.consistent())
}

fn replay(path: &Path, out: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let sc = Scenario::from_json(&text).map_err(|e| usage(e.to_string()))?;
    let (report, pass) = run_scenario(&sc, out)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let summary = fs::read(dir.join("summary.json")).ok();
    let series = fs::read(dir.join("timeseries.csv")).ok();
    match (summary, series) {
        (Some(s), Some(t)) => {
            let same = s == report.summary_json().as_bytes() && t == report.timeseries_csv().as_bytes();
            println!("replay={}", if same { "IDENTICAL" } else { "DIFFERENT" });
            Ok(pass && same)
        }
        _ => {
            println!("replay=NO_REFERENCE (no summary.json and timeseries.csv next to the scenario)");
            Ok(pass)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Sensitivity {
            n,
            k,
            reps,
            h_set,
            l_set,
            f_set,
            seed,
            out,
        } => sensitivity(n, k, reps, [&h_set, &l_set, &f_set], seed, &out),
        Cmd::Spectral {
            n,
            k,
            seeds,
            tol,
            seed,
            out,
        } => spectral(n, k, seeds, tol, seed, &out),
        Cmd::Bound {
            k,
            delta,
            t,
            trials,
            seed,
        } => bound(k, delta, t, trials, seed),
        Cmd::Replay { scenario, out } => replay(&scenario, &out),
        cmd => scenario_cmd(cmd),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlmimo::channel::generate_scene;
use xlmimo::optimizer::{optimize_pattern, PatternProblem};
use xlmimo::pilots::{group_users, PilotAllocation};
use xlmimo_bench::output::{write_aggregate, write_cdf, write_results, write_trace};
use xlmimo_bench::{
    aggregate, empirical_cdf, run_experiment, Algorithm, BenchError, ExperimentSpec, SchemeKind, Statistic, Sweep,
};

#[derive(Parser)]
#[command(name = "xlmimo-bench", about = "Channel-estimation sweeps for sub-array XL-MIMO pilots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// NMSE against SNR.
    SweepSnr(Common),
    /// NMSE against the number of users.
    SweepUsers {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        users: Option<Vec<usize>>,
    },
    /// NMSE against the share of subcarriers open to pilots.
    SweepPilotRatio {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ratio: Option<Vec<f64>>,
    },
    /// Empirical NMSE distribution at one SNR.
    Cdf(Common),
    /// Optimize the group pattern and write it as an allocation file.
    OptimizePilots(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    scheme: Option<Vec<SchemeKind>>,
    #[arg(long, value_delimiter = ',')]
    algo: Option<Vec<Algorithm>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec, BenchError> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_json(&std::fs::read_to_string(p)?)?,
            None => ExperimentSpec::default(),
        };
        if let Some(s) = self.seeds {
            spec.seeds = s;
        }
        if let Some(s) = self.master_seed {
            spec.master_seed = s;
        }
        if let Some(s) = &self.scheme {
            spec.schemes = s.clone();
        }
        if let Some(a) = &self.algo {
            spec.algorithms = a.clone();
        }
        if let Some(o) = &self.out {
            spec.out = Some(o.clone());
        }
        Ok(spec)
    }

    /// Single SNR for commands that do not sweep it.
    fn fixed_snr(&self, spec: &mut ExperimentSpec) -> Result<f64, BenchError> {
        let snr = match (&self.snr_db, &spec.sweep) {
            (Some(v), _) if v.len() == 1 => v[0],
            (Some(_), _) => return Err(BenchError::Spec("expected a single --snr-db value".into())),
            (None, Sweep::SnrDb(v)) if v.len() == 1 => v[0],
            _ => 20.0,
        };
        spec.system = spec.system.clone().with_snr_db(snr);
        Ok(snr)
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn create(path: &Path) -> Result<BufWriter<File>, BenchError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run_and_write(spec: &ExperimentSpec, with_cdf: bool) -> Result<(), BenchError> {
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("results.csv"));
    let records = run_experiment(spec)?;
    write_results(&records, create(&out)?)?;
    let agg = aggregate(&records, Statistic::Median);
    write_aggregate(&agg, create(&sibling(&out, "agg.csv"))?)?;
    if with_cdf {
        write_cdf(&empirical_cdf(&records), create(&sibling(&out, "cdf.csv"))?)?;
    }
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    for row in &agg {
        println!(
            "{:>10} {:<28} n={:<3} median {:8.2} dB",
            row.sweep_value, row.label, row.count, row.nmse_db
        );
    }
    if failed > 0 {
        eprintln!("{failed} record(s) failed; see the error column of {}", out.display());
    }
    Ok(())
}

fn optimize(common: &Common) -> Result<(), BenchError> {
    let mut spec = common.spec()?;
    common.fixed_snr(&mut spec)?;
    spec.system.validate()?;
    let sys = &spec.system;
    let mut scene_cfg = spec.scene.clone();
    scene_cfg.seed = spec.master_seed;
    let scene = generate_scene(sys, &scene_cfg)?;
    let groups = group_users(&scene.users, sys.n_groups)?;
    let problem = PatternProblem {
        n_subcarriers: sys.n_subcarriers,
        n_taps: sys.n_taps,
        power: sys.pilot_power,
        noise_var: sys.noise_var,
        prior_var: 1.0 / sys.n_taps as f64,
        group_sizes: groups.iter().map(Vec::len).collect(),
    };
    let result = optimize_pattern(&problem, &spec.optimizer)?;
    if result.not_converged {
        eprintln!("warning: the optimizer's last iterate was not its best; returning the best one");
    }
    let alloc = PilotAllocation::nfdcdm(&result.pattern, &groups, sys.pilot_power)?;
    let out = spec.out.clone().unwrap_or_else(|| PathBuf::from("pattern.json"));
    std::fs::write(&out, alloc.to_json()?)?;
    write_trace(&result.trace, create(&sibling(&out, "trace.csv"))?)?;
    let counts: Vec<usize> = (0..result.pattern.n_groups()).map(|g| result.pattern.count(g)).collect();
    println!("subcarriers per group {counts:?}, objective {:.6e}", result.objective);
    Ok(())
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::SweepSnr(c) => {
            let mut spec = c.spec()?;
            if let Some(v) = &c.snr_db {
                spec.sweep = Sweep::SnrDb(v.clone());
            } else if !matches!(spec.sweep, Sweep::SnrDb(_)) {
                spec.sweep = ExperimentSpec::default().sweep;
            }
            run_and_write(&spec, false)
        }
        Command::SweepUsers { common, users } => {
            let mut spec = common.spec()?;
            common.fixed_snr(&mut spec)?;
            spec.sweep = match (users, &spec.sweep) {
                (Some(u), _) => Sweep::Users(u),
                (None, Sweep::Users(u)) => Sweep::Users(u.clone()),
                _ => Sweep::Users(vec![4, 8, 12, 16]),
            };
            run_and_write(&spec, false)
        }
        Command::SweepPilotRatio { common, ratio } => {
            let mut spec = common.spec()?;
            common.fixed_snr(&mut spec)?;
            spec.sweep = match (ratio, &spec.sweep) {
                (Some(r), _) => Sweep::PilotRatio(r),
                (None, Sweep::PilotRatio(r)) => Sweep::PilotRatio(r.clone()),
                _ => Sweep::PilotRatio(vec![0.5, 0.625, 0.75, 0.875, 1.0]),
            };
            run_and_write(&spec, false)
        }
        Command::Cdf(c) => {
            let mut spec = c.spec()?;
            let snr = c.fixed_snr(&mut spec)?;
            spec.sweep = Sweep::SnrDb(vec![snr]);
            run_and_write(&spec, true)
        }
        Command::OptimizePilots(c) => optimize(&c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

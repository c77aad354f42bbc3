use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fedaml_core::federated::Mode;
use fedaml_core::pipeline::{self, Artifacts, RunConfig};
use fedaml_core::ppr::PprMode;
use fedaml_core::synth::{PatternKind, SbmSpec};
use fedaml_core::Error;

#[derive(Debug, Parser)]
#[command(name = "fedaml", version, about = "Federated graph pipeline for cross-border money-laundering detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; defaults apply to omitted sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every module seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset, a single pattern, or an SBM sample.
    Generate {
        /// fan-out, loop, gather-scatter or hybrid.
        #[arg(long, conflicts_with = "sbm")]
        pattern: Option<PatternKind>,
        /// Accounts in the pattern.
        #[arg(long, default_value_t = 3, requires = "pattern")]
        size: usize,
        /// Markets the pattern's accounts cycle through.
        #[arg(long, value_delimiter = ',', default_value = "US")]
        countries: Vec<String>,
        /// SBM parameters as `n=.. s=.. pin=.. pout=..`.
        #[arg(long, num_args = 1..)]
        sbm: Option<Vec<String>>,
    },
    /// Federated training; writes per-market checkpoints and round metrics.
    Train {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        isolated: bool,
    },
    /// Score every edge with the trained checkpoints.
    Detect,
    /// Cluster suspicious accounts with (cross-bank) personalized PageRank.
    Ppr {
        /// Plain PPR without prediction weighting or foreign signals.
        #[arg(long)]
        plain: bool,
    },
    /// Refine scores by label propagation over the cluster structure.
    Propagate,
    /// Learn intervention thresholds and evaluate the economics.
    Decide {
        /// Apply one threshold to every market instead of learning them.
        #[arg(long)]
        fixed_threshold: Option<f64>,
    },
    /// Merge detection and economic results into report tables.
    Report,
}

fn parse_sbm(parts: &[String], seed: u64) -> Result<SbmSpec, Error> {
    let mut spec = SbmSpec {
        n: 0,
        s: 0,
        p_in: f64::NAN,
        p_out: f64::NAN,
        seed,
    };
    for p in parts.iter().flat_map(|p| p.split_whitespace()) {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{p}`")))?;
        let bad = || Error::InvalidConfig(format!("bad value for {k}: `{v}`"));
        match k {
            "n" => spec.n = v.parse().map_err(|_| bad())?,
            "s" => spec.s = v.parse().map_err(|_| bad())?,
            "pin" => spec.p_in = v.parse().map_err(|_| bad())?,
            "pout" => spec.p_out = v.parse().map_err(|_| bad())?,
            _ => return Err(Error::InvalidConfig(format!("unknown SBM key `{k}`"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config = config.with_seed(seed);
    }
    let art = Artifacts::new(&cli.global.out);
    std::fs::create_dir_all(&art.dir)?;

    match cli.command {
        Command::Generate {
            pattern,
            size,
            countries,
            sbm,
        } => {
            let seed = cli.global.seed.unwrap_or(config.dataset.seed);
            if let Some(parts) = sbm {
                let sample = pipeline::sbm_stage(&art, &parse_sbm(&parts, seed)?)?;
                info!("SBM sample with {} planted nodes", sample.planted.len());
            } else if let Some(p) = pattern {
                let records = pipeline::pattern_stage(&art, p, size, countries, seed)?;
                info!("{} pattern records", records.len());
            } else {
                let ds = pipeline::generate_stage(&art, &config)?;
                info!("{} records, {} laundering groups", ds.records.len(), ds.groups.len());
            }
        }
        Command::Train { rounds, isolated } => {
            if let Some(r) = rounds {
                config.federation.rounds = r;
            }
            if isolated {
                config.federation.mode = Mode::Isolated;
            }
            config.validate()?;
            let outcome = pipeline::train_stage(&art, &config)?;
            print!("{}", outcome.summary());
        }
        Command::Detect => {
            let rows = pipeline::detect_stage(&art, &config)?;
            info!("scored {} edges", rows.len());
        }
        Command::Ppr { plain } => {
            if plain {
                config.ppr_mode = PprMode::Plain;
            }
            let set = pipeline::ppr_stage(&art, &config)?;
            let st = set.stats();
            println!(
                "clusters={} accounts={} malicious={} proportion={:.4} zero_hit={}",
                st.clusters, st.accounts, st.malicious_accounts, st.proportion, st.zero_hit_clusters
            );
        }
        Command::Propagate => {
            let rows = pipeline::propagate_stage(&art, &config)?;
            info!("refined {} edge scores", rows.len());
        }
        Command::Decide { fixed_threshold } => {
            let out = pipeline::decide_stage(&art, &config, fixed_threshold)?;
            for r in &out.economic {
                println!(
                    "{:<8} threshold={} ratio={:.4} type1={:.4} type2={:.4}",
                    r.market,
                    r.threshold.map_or("learned".into(), |t| format!("{t:.4}")),
                    r.ratio,
                    r.type1,
                    r.type2
                );
            }
        }
        Command::Report => print!("{}", pipeline::report_stage(&art, &config)?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDAML_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedaml: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

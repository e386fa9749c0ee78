//! Command-line driver: run / pair / sweep / bounds / check.
//!
//! Exit codes: 0 on success, 1 on engine or analysis errors, 2 on usage
//! errors (unknown flags, missing config files).

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use brdsgd::aggregation::AggregationRule;
use brdsgd::analysis::{
    bound_convex, bound_nonconvex, bound_nonconvex_improved, bound_strongly_convex,
    consensus_bound, BoundInputs,
};
use brdsgd::attacks::AttackSpec;
use brdsgd::engine::{run, run_pair, sweep, PerturbSpec, RunConfig, SweepAxis};
use brdsgd::learner::synth_replacement;
use brdsgd::topology::{
    build_metropolis_weights, estimate_contraction, spectral_summary, Graph, MixingMatrix,
    RoleAssignment,
};
use brdsgd::{engine, Real};

use config::FileConfig;
use output::{config_hash, output_root, trace_summary, RunDir};

#[derive(Parser)]
#[command(name = "brdsgd", version, about = "Byzantine-resilient decentralized SGD simulator")]
struct Cli {
    /// Output root directory (default: $BRDSGD_OUT, then ./runs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run and write its trace CSV
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired stability runs on datasets differing in one sample
    Pair {
        #[arg(long)]
        config: PathBuf,
        /// Honest agent whose shard is perturbed
        #[arg(long)]
        agent: usize,
        /// Sample index within that shard
        #[arg(long)]
        index: usize,
        /// Seed for drawing the replacement sample
        #[arg(long, default_value_t = 1)]
        perturb_seed: u64,
    },
    /// Independent runs along one config axis
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: rule, attack, honest_count, z, seed
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Evaluate a closed-form generalization bound over a k range
    Bounds(BoundsArgs),
    /// Estimate the contraction constant of a rule on a complete graph and
    /// compare it against rho* = beta / (8 sqrt(R))
    Check {
        /// One of: mean, trimmed_mean, ios, scc
        #[arg(long)]
        rule: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        honest: usize,
        #[arg(long, default_value_t = 2)]
        byz: usize,
        /// Rule parameter: trim count b, removal count q, or radius tau
        /// (default: the Byzantine count, or tau = 1)
        #[arg(long)]
        param: Option<Real>,
    },
}

#[derive(Args)]
struct BoundsArgs {
    /// 1 = strongly convex, 2 = convex, 3 = non-convex, 4 = improved
    /// non-convex, consensus = the H^k decay bound
    #[arg(long)]
    theorem: String,
    /// TOML file with the bound inputs (flags below override nothing when
    /// this is given)
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    rho: Real,
    #[arg(long, default_value_t = 0.0)]
    chi: Real,
    #[arg(long, default_value_t = 1.0)]
    beta: Real,
    #[arg(long = "R", default_value_t = 10)]
    honest: usize,
    #[arg(long = "B", default_value_t = 0)]
    byz: usize,
    #[arg(long = "M", default_value_t = 1.0)]
    m: Real,
    #[arg(long = "L", default_value_t = 1.0)]
    l: Real,
    #[arg(long, default_value_t = 1.0)]
    mu: Real,
    #[arg(long = "Z", default_value_t = 10)]
    z: usize,
    #[arg(long, default_value_t = 10.0)]
    k0: Real,
    #[arg(long, default_value_t = 1.0)]
    a: Real,
    #[arg(long, default_value_t = 1.0)]
    c1: Real,
    #[arg(long, default_value_t = 1.0)]
    c2: Real,
    /// Consensus constant c (theorem = consensus)
    #[arg(long, default_value_t = 1.0)]
    c: Real,
    /// Single evaluation point
    #[arg(long)]
    k: Option<Real>,
    #[arg(long, default_value_t = 1.0)]
    k_min: Real,
    #[arg(long)]
    k_max: Option<Real>,
    #[arg(long, default_value_t = 1.0)]
    k_step: Real,
    /// Write the k,bound CSV here instead of stdout
    #[arg(long = "csv")]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // missing config paths are usage errors (exit 2), like clap's own
    if let Some(path) = cli.command.config_path() {
        if !path.exists() {
            eprintln!("error: config file {} does not exist", path.display());
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

impl Command {
    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Run { config }
            | Command::Pair { config, .. }
            | Command::Sweep { config, .. } => Some(config),
            Command::Bounds(args) => args.inputs.as_deref(),
            Command::Check { .. } => None,
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let root = output_root(cli.out.clone());
    match cli.command {
        Command::Run { config } => cmd_run(&root, &config),
        Command::Pair {
            config,
            agent,
            index,
            perturb_seed,
        } => cmd_pair(&root, &config, agent, index, perturb_seed),
        Command::Sweep {
            config,
            axis,
            values,
        } => cmd_sweep(&root, &config, &axis, &values),
        Command::Bounds(args) => cmd_bounds(&args),
        Command::Check {
            rule,
            trials,
            seed,
            honest,
            byz,
            param,
        } => cmd_check(&rule, trials, seed, honest, byz, param),
    }
}

fn load_config(path: &Path) -> Result<(RunConfig<Real>, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let hash = config_hash(&bytes);
    let file = FileConfig::load(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    Ok((file.to_run_config(dir)?, hash))
}

/// Spectral summary of the virtual (honest-subgraph Metropolis) mixing
/// matrix, recorded in the manifest for bound evaluations.
fn spectral_manifest(cfg: &RunConfig<Real>) -> Result<Vec<(&'static str, String)>> {
    let (graph, roles) = engine::resolve_topology(cfg)?;
    let w: MixingMatrix<Real> = build_metropolis_weights(&graph, &roles)?;
    let summary = spectral_summary(&w)?;
    Ok(vec![
        ("beta", summary.beta.to_string()),
        ("chi", summary.chi.to_string()),
        ("rho_star", summary.rho_star.to_string()),
    ])
}

fn write_topology_artifacts(dir: &RunDir, cfg: &RunConfig<Real>) -> Result<()> {
    let (graph, roles) = engine::resolve_topology(cfg)?;
    dir.write_text("graph.txt", &graph.to_text())?;
    let w: MixingMatrix<Real> = build_metropolis_weights(&graph, &roles)?;
    dir.write_text("w_honest.csv", &w.to_csv())?;
    Ok(())
}

fn cmd_run(root: &Path, config: &Path) -> Result<()> {
    let (cfg, hash) = load_config(config)?;
    let dir = RunDir::create(root, "run", &hash, cfg.seed)?;
    let trace = run(&cfg)?;
    dir.write_trace("trace.csv", &trace, None)?;
    write_topology_artifacts(&dir, &cfg)?;
    let mut manifest = vec![
        ("command", "run".to_string()),
        ("config", config.display().to_string()),
        ("config_hash", hash),
        ("seed", cfg.seed.to_string()),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
    ];
    for (k, v) in spectral_manifest(&cfg)? {
        manifest.push((k, v));
    }
    dir.write_manifest(&manifest)?;
    println!("run {} -> {}", trace_summary(&trace), dir.path.display());
    Ok(())
}

fn cmd_pair(
    root: &Path,
    config: &Path,
    agent: usize,
    index: usize,
    perturb_seed: u64,
) -> Result<()> {
    let (cfg, hash) = load_config(config)?;
    let replacement = match &cfg.data {
        engine::DataSpec::Synth(spec) => synth_replacement(spec, perturb_seed),
        engine::DataSpec::Explicit { .. } => {
            bail!("pair requires synthetic data to draw a replacement sample")
        }
    };
    let perturb = PerturbSpec {
        agent,
        index,
        replacement,
    };
    let out = run_pair(&cfg, &perturb)?;
    let dir = RunDir::create(root, "pair", &hash, cfg.seed)?;
    dir.write_trace("trace.csv", &out.base, Some(&out.stability))?;
    dir.write_trace("trace_prime.csv", &out.perturbed, None)?;
    write_topology_artifacts(&dir, &cfg)?;
    let mut manifest = vec![
        ("command", "pair".to_string()),
        ("config", config.display().to_string()),
        ("config_hash", hash),
        ("seed", cfg.seed.to_string()),
        ("perturb_agent", agent.to_string()),
        ("perturb_index", index.to_string()),
        ("perturb_seed", perturb_seed.to_string()),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
    ];
    for (k, v) in spectral_manifest(&cfg)? {
        manifest.push((k, v));
    }
    dir.write_manifest(&manifest)?;
    let last = out.stability.rows.last().context("empty stability trace")?;
    println!(
        "pair delta(k={})={} eta={} -> {}",
        last.k,
        last.delta,
        last.eta,
        dir.path.display()
    );
    Ok(())
}

fn parse_axis(axis: &str, values: &[String], cfg: &RunConfig<Real>) -> Result<SweepAxis<Real>> {
    let parse_usize = |v: &String| -> Result<usize> {
        v.parse::<usize>()
            .with_context(|| format!("bad integer axis value {v:?}"))
    };
    // robust-rule parameters sized to the configured Byzantine count
    let byz = match &cfg.topology.roles {
        engine::RoleSpec::Count(count) => *count,
        engine::RoleSpec::Ids(ids) => ids.len(),
    };
    let tau = match cfg.aggregation {
        AggregationRule::Scc { tau } => tau,
        _ => 1.0,
    };
    Ok(match axis {
        "rule" => SweepAxis::Rule(
            values
                .iter()
                .map(|v| -> Result<AggregationRule<Real>> {
                    Ok(match v.as_str() {
                        "mean" => AggregationRule::WeightedMean,
                        "trimmed_mean" => AggregationRule::TrimmedMean { b: byz },
                        "ios" => AggregationRule::Ios { q: byz },
                        "scc" => AggregationRule::Scc { tau },
                        other => bail!("unknown rule {other:?}"),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        "attack" => SweepAxis::Attack(
            values
                .iter()
                .map(|v| -> Result<AttackSpec<Real>> {
                    Ok(match v.as_str() {
                        "gaussian" => AttackSpec::Gaussian,
                        "duplicate" => AttackSpec::Duplicate { victim: None },
                        "alie" => AttackSpec::Alie { r: 1.0 },
                        "signflip" => AttackSpec::SignFlip,
                        other => bail!("unknown attack {other:?}"),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        "honest_count" => {
            SweepAxis::HonestCount(values.iter().map(parse_usize).collect::<Result<_>>()?)
        }
        "z" => SweepAxis::SamplesPerAgent(values.iter().map(parse_usize).collect::<Result<_>>()?),
        "seed" => SweepAxis::Seed(
            values
                .iter()
                .map(|v| {
                    v.parse::<u64>()
                        .with_context(|| format!("bad seed value {v:?}"))
                })
                .collect::<Result<_>>()?,
        ),
        other => bail!("unknown sweep axis {other:?} (rule, attack, honest_count, z, seed)"),
    })
}

fn cmd_sweep(root: &Path, config: &Path, axis: &str, values: &[String]) -> Result<()> {
    let (cfg, hash) = load_config(config)?;
    let parsed = parse_axis(axis, values, &cfg)?;
    let items = sweep(&cfg, &parsed);
    let dir = RunDir::create(root, "sweep", &hash, cfg.seed)?;
    let mut summary = String::from("value,seed,status,final_k,train_loss,test_loss,acc_test,gap\n");
    let mut failures = 0usize;
    for item in &items {
        match &item.result {
            Ok(trace) => {
                let name = format!("trace-{axis}-{}.csv", item.label);
                dir.write_trace(&name, trace, None)?;
                let row = trace.rows.last().context("empty trace")?;
                summary.push_str(&format!(
                    "{},{},ok,{},{},{},{},{}\n",
                    item.label,
                    item.seed,
                    row.k,
                    row.train_loss,
                    row.test_loss,
                    row.test_accuracy,
                    row.test_loss - row.train_loss
                ));
            }
            Err(e) => {
                failures += 1;
                summary.push_str(&format!("{},{},failed: {e},,,,,\n", item.label, item.seed));
            }
        }
    }
    dir.write_text("summary.csv", &summary)?;
    dir.write_manifest(&[
        ("command", "sweep".to_string()),
        ("config", config.display().to_string()),
        ("config_hash", hash),
        ("seed", cfg.seed.to_string()),
        ("axis", axis.to_string()),
        ("values", values.join(",")),
        ("version", env!("CARGO_PKG_VERSION").to_string()),
    ])?;
    println!(
        "sweep {} values, {} failed -> {}",
        items.len(),
        failures,
        dir.path.display()
    );
    print!("{summary}");
    Ok(())
}

fn bound_inputs(args: &BoundsArgs) -> Result<BoundInputs<Real>> {
    if let Some(path) = &args.inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let inputs: BoundInputs<Real> =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(inputs);
    }
    Ok(BoundInputs {
        rho: args.rho,
        chi: args.chi,
        beta: args.beta,
        honest: args.honest,
        byz: args.byz,
        m: args.m,
        l: args.l,
        mu: args.mu,
        z: args.z,
        k0: args.k0,
        a: args.a,
        c1: args.c1,
        c2: args.c2,
    })
}

fn cmd_bounds(args: &BoundsArgs) -> Result<()> {
    let inputs = bound_inputs(args)?;
    let evaluate = |k: Real| -> Result<Real> {
        Ok(match args.theorem.as_str() {
            "1" => bound_strongly_convex(&inputs, k)?,
            "2" => bound_convex(&inputs, k)?,
            "3" => bound_nonconvex(&inputs, k)?,
            "4" => bound_nonconvex_improved(&inputs, k)?,
            "consensus" => consensus_bound(args.c, inputs.m, k, inputs.k0),
            other => bail!("unknown theorem {other:?} (1, 2, 3, 4, consensus)"),
        })
    };
    let ks: Vec<Real> = match (args.k, args.k_max) {
        (Some(k), _) => vec![k],
        (None, Some(k_max)) => {
            let mut ks = Vec::new();
            let mut k = args.k_min;
            while k <= k_max {
                ks.push(k);
                k += args.k_step;
            }
            ks
        }
        (None, None) => bail!("provide --k or --k-max"),
    };
    let mut csv = String::from("k,bound\n");
    for &k in &ks {
        csv.push_str(&format!("{},{}\n", k, evaluate(k)?));
    }
    match &args.csv {
        Some(path) => {
            std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} rows to {}", ks.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_check(
    rule_name: &str,
    trials: usize,
    seed: u64,
    honest: usize,
    byz: usize,
    param: Option<Real>,
) -> Result<()> {
    let rule: AggregationRule<Real> = match rule_name {
        "mean" => AggregationRule::WeightedMean,
        "trimmed_mean" => AggregationRule::TrimmedMean {
            b: param.map(|p| p as usize).unwrap_or(byz),
        },
        "ios" => AggregationRule::Ios {
            q: param.map(|p| p as usize).unwrap_or(byz),
        },
        "scc" => AggregationRule::Scc {
            tau: param.unwrap_or(1.0),
        },
        other => bail!("unknown rule {other:?}"),
    };
    let graph = Graph::complete(honest + byz);
    let byz_ids: Vec<usize> = (honest..honest + byz).collect();
    let roles = RoleAssignment::from_byzantine_ids(honest + byz, &byz_ids)?;
    // the fully-connected analytic pair: uniform virtual mixing matrix
    let w: MixingMatrix<Real> = MixingMatrix::uniform(honest);
    let summary = spectral_summary(&w)?;
    let rho_hat = estimate_contraction(&rule, &graph, &roles, &w, trials, seed)?;
    let verdict = if rho_hat < summary.rho_star {
        "PASS"
    } else {
        "FAIL"
    };
    println!(
        "rule={rule_name} honest={honest} byz={byz} trials={trials} seed={seed}\n\
         rho_hat = {rho_hat}\nrho_star = {}\n{verdict}: rho_hat {} rho_star",
        summary.rho_star,
        if rho_hat < summary.rho_star { "<" } else { ">=" },
    );
    Ok(())
}

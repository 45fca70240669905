use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pilot_core::aggregation::euclidean_distance;
use pilot_core::checkpoint::Checkpoint;
use pilot_core::config::{load_config, preset, presets, FederationConfig};
use pilot_core::experiment::{compare, Variant};
use pilot_core::protocol::run_federation;
use pilot_core::{Error, ParamSet};

/// Output root override; beats the config file, loses to `--out`.
const OUT_ENV: &str = "PILOT_OUT";

#[derive(Parser)]
#[command(name = "pilot", version, about = "Federated multimodal instruction-tuning simulator")]
struct Cli {
    /// Print the named toggle presets and exit.
    #[arg(long)]
    list_presets: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federation and write history and checkpoints.
    Run(RunArgs),
    /// Run several strategies or presets on the same shards and seeds.
    Compare(CompareArgs),
    /// List the tensors of one or more checkpoints.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply a toggle preset on top of the config.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated strategies or preset names.
    #[arg(long, default_value = "pilot,fedavg,local_only")]
    strategies: String,
    /// `a..b` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Variant the relative scores are measured against.
    #[arg(long, default_value = "local_only")]
    baseline: String,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.list_presets {
        list_presets();
        Ok(())
    } else {
        match cli.command {
            Some(Command::Run(a)) => cmd_run(a),
            Some(Command::Compare(a)) => cmd_compare(a),
            Some(Command::Inspect { files }) => cmd_inspect(&files),
            None => Err(Failure::Config("no command given; try --help".into())),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn list_presets() {
    for p in presets() {
        println!("{:<20} {}", p.name, p.description);
    }
}

fn load(common: &Common) -> Result<(FederationConfig, PathBuf), Failure> {
    let cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => FederationConfig::default(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let (mut cfg, out) = load(&a.common)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(name) = &a.preset {
        (preset(name)?.apply)(&mut cfg);
    }
    cfg.validate()?;
    let run = run_federation(&cfg)?;
    let dir = out.join(&run.history.run_id);
    run.write(&dir)?;
    println!("run {} ({} rounds, stages {:?})", run.history.run_id, run.history.rounds.len(), run.history.stage_tags());
    println!("{:<8} {:>9}", "task", "accuracy");
    for (t, acc) in run.history.final_task_means() {
        println!("{:<8} {:>9.4}", t, acc);
    }
    println!("{:<8} {:>9.4}", "mean", run.history.final_mean_accuracy());
    println!("bytes up {}", run.history.total_bytes_up());
    println!("wrote {}", dir.display());
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Config(format!("cannot read seeds `{s}`; use 1..5 or 1,2,3"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let (cfg, out) = load(&a.common)?;
    let names: Vec<&str> = a.strategies.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.len() < 2 {
        return Err(Failure::Config("compare needs at least two strategies".into()));
    }
    let seeds = parse_seeds(&a.seeds)?;
    let mut variants = names.iter().map(|n| Variant::parse(&cfg, n)).collect::<Result<Vec<_>, _>>()?;
    if !names.contains(&a.baseline.as_str()) {
        variants.push(Variant::parse(&cfg, &a.baseline)?);
    }
    for v in &variants {
        v.config.validate()?;
    }
    let table = compare(&variants, &seeds, &a.baseline)?;
    print!("{}", table.render());
    println!();
    print!("{}", table.render_clients());
    std::fs::create_dir_all(&out)?;
    let path = out.join("comparison.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table).map_err(Error::from)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Parameter groups: everything up to the last `.` of each tensor name.
fn groups(p: &ParamSet) -> BTreeMap<String, ParamSet> {
    let mut out: BTreeMap<String, ParamSet> = BTreeMap::new();
    for (name, t) in p.iter() {
        let (g, leaf) = name.rsplit_once('.').unwrap_or(("", name));
        out.entry(g.to_string()).or_default().insert(leaf, t.clone());
    }
    out
}

fn cmd_inspect(files: &[PathBuf]) -> Result<(), Failure> {
    let mut loaded = Vec::with_capacity(files.len());
    for f in files {
        let ck = Checkpoint::load(f).map_err(|e| Failure::Runtime(format!("{}: {e}", f.display())))?;
        println!("== {}", f.display());
        for (k, v) in &ck.meta {
            println!("  {k} = {v}");
        }
        for (name, t) in ck.params.iter() {
            println!("  {:<32} {:<12} norm {:.12e}", name, format!("{:?}", t.shape()), t.norm_sq().sqrt());
        }
        loaded.push((f.as_path(), groups(&ck.params)));
    }
    if loaded.len() > 1 {
        println!("== pairwise distances");
        for i in 0..loaded.len() {
            for j in i + 1..loaded.len() {
                print_distances(loaded[i].0, &loaded[i].1, loaded[j].0, &loaded[j].1);
            }
        }
    }
    Ok(())
}

fn print_distances(pa: &Path, a: &BTreeMap<String, ParamSet>, pb: &Path, b: &BTreeMap<String, ParamSet>) {
    for (g, x) in a {
        if let Some(y) = b.get(g) {
            if let Ok(d) = euclidean_distance(x, y) {
                println!("  {:<24} {} <-> {}  {:.12e}", if g.is_empty() { "(root)" } else { g }, pa.display(), pb.display(), d);
            }
        }
    }
}

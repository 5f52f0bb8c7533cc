//! Subcommand implementations. Every command resolves its configuration from
//! (flags > config-file section > defaults), writes the resolved config and a
//! manifest next to its primary output, then runs the library call.

use crate::{GlobalArgs, PARAMS_ENV};
use clap::Args;
use deephedge::benchmarks::BenchmarkKind;
use deephedge::hedging::{self, BenchmarkStrategy, HedgeConfig, Penalty, StateSpace, Strategy};
use deephedge::jivr::{self, JivrParams, PathSet, StatePool};
use deephedge::manifest::{sha256_hex, Manifest};
use deephedge::neural::Checkpoint;
use deephedge::training::{self, FeatureSpec, PolicyStrategy, SageMode, TrainConfig};
use deephedge::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Config-file plumbing
// ---------------------------------------------------------------------------

/// Fills unset (None) fields of a flag struct from its config-file section.
trait Merge {
    fn merge(self, fallback: Self) -> Self;
}

fn load_section<T: DeserializeOwned>(global: &GlobalArgs, section: &str) -> Result<Option<T>> {
    let Some(path) = &global.config else { return Ok(None) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config file {}: {e}", path.display())))?;
    let root: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))?;
    match root.get(section) {
        None => Ok(None),
        Some(v) => Ok(Some(serde_json::from_value(v.clone()).map_err(|e| {
            Error::config(format!("config section '{section}' in {}: {e}", path.display()))
        })?)),
    }
}

fn merged<T: Merge + DeserializeOwned>(global: &GlobalArgs, section: &str, args: T) -> Result<T> {
    match load_section::<T>(global, section)? {
        Some(fallback) => Ok(args.merge(fallback)),
        None => Ok(args),
    }
}

macro_rules! merge_fields {
    ($a:ident, $b:ident; opts: [$($o:ident),*]; bools: [$($f:ident),*]) => {{
        Self {
            $($o: $a.$o.or($b.$o),)*
            $($f: $a.$f || $b.$f,)*
        }
    }};
}

/// Parameter file resolution: flag > config > DEEPHEDGE_PARAMS env var.
fn resolve_params_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(p) = std::env::var(PARAMS_ENV) {
        return Ok(PathBuf::from(p));
    }
    Err(Error::config(format!(
        "no parameter file: pass --params, set it in the config file, or export {PARAMS_ENV}"
    )))
}

/// Serializes the resolved config and the run manifest next to `out`.
fn write_run_artifacts<C: Serialize>(
    global: &GlobalArgs,
    command: &str,
    out: &Path,
    resolved: &C,
    param_hash: &str,
    seed: u64,
) -> Result<()> {
    let config_json = serde_json::to_string_pretty(resolved)?;
    std::fs::write(sibling(out, "config.json"), &config_json)?;
    let mut manifest =
        Manifest::new(command, sha256_hex(config_json.as_bytes()), param_hash.to_string(), seed);
    if global.reference {
        // reference mode pins the volatile metadata so reruns are
        // byte-identical
        manifest.created = "1970-01-01T00:00:00Z".to_string();
        manifest.code_version = None;
    }
    manifest.save(&sibling(out, "manifest.json"))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", out.display()))
}

// ---------------------------------------------------------------------------
// Shared argument parsing
// ---------------------------------------------------------------------------

fn parse_penalty(s: &str) -> Result<(Penalty, f64)> {
    match s {
        "mse" => Ok((Penalty::Mse, 0.95)),
        "smse" => Ok((Penalty::Smse, 0.95)),
        "cvar95" => Ok((Penalty::Cvar, 0.95)),
        "cvar99" => Ok((Penalty::Cvar, 0.99)),
        other => Err(Error::config(format!(
            "unknown penalty '{other}' (expected mse, smse, cvar95 or cvar99)"
        ))),
    }
}

fn parse_state_space(s: &str) -> Result<StateSpace> {
    match s {
        "full" => Ok(StateSpace::Full),
        "reduced-tc" => Ok(StateSpace::ReducedTc),
        "reduced-no-tc" => Ok(StateSpace::ReducedNoTc),
        other => Err(Error::config(format!(
            "unknown state space '{other}' (expected full, reduced-tc or reduced-no-tc)"
        ))),
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|e| Error::config(format!("bad layer width '{w}': {e}")))
        })
        .collect()
}

enum StrategySpec {
    Bs,
    Leland,
    Si,
    Checkpoint(PathBuf),
}

impl StrategySpec {
    fn parse(s: &str) -> Result<StrategySpec> {
        match s {
            "bs" => Ok(StrategySpec::Bs),
            "leland" => Ok(StrategySpec::Leland),
            "si" => Ok(StrategySpec::Si),
            other => match other.strip_prefix("checkpoint:") {
                Some(path) if !path.is_empty() => Ok(StrategySpec::Checkpoint(path.into())),
                _ => Err(Error::config(format!(
                    "unknown strategy '{other}' (expected bs, leland, si or checkpoint:<file>)"
                ))),
            },
        }
    }

    fn label(&self) -> String {
        match self {
            StrategySpec::Bs => "bs".into(),
            StrategySpec::Leland => "leland".into(),
            StrategySpec::Si => "si".into(),
            StrategySpec::Checkpoint(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into()),
        }
    }

    /// Builds the runnable strategy. `rebalances_per_year` feeds the Leland
    /// volatility adjustment; `kappa` is the cost rate of the run. The
    /// strike reaches benchmark strategies through each step's observation.
    fn build(
        &self,
        kappa: f64,
        rebalances_per_year: f64,
    ) -> Result<(Box<dyn Strategy>, StateSpace)> {
        let kind = match self {
            StrategySpec::Bs => BenchmarkKind::Bs,
            StrategySpec::Leland => BenchmarkKind::Leland { rebalance_freq: rebalances_per_year },
            StrategySpec::Si => BenchmarkKind::SmileImplied,
            StrategySpec::Checkpoint(path) => {
                let ckpt = Checkpoint::load(path)?;
                let space = ckpt.state_space;
                let spec = FeatureSpec::from_state_space(space);
                if kappa > 0.0 && space == StateSpace::ReducedNoTc {
                    return Err(Error::config(format!(
                        "checkpoint {} was trained on the no-cost reduced state space \
                         (no portfolio-value or position features); it cannot hedge \
                         under transaction costs kappa = {kappa}",
                        path.display()
                    )));
                }
                let strat = PolicyStrategy::new(ckpt.weights, spec, ckpt.normalizer)?;
                return Ok((Box::new(strat), space));
            }
        };
        Ok((Box::new(BenchmarkStrategy { kind, kappa }), StateSpace::Full))
    }
}

// ---------------------------------------------------------------------------
// params-init
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ParamsInitArgs {
    /// Output parameter JSON file
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for ParamsInitArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b; opts: [out]; bools: [])
    }
}

pub fn params_init(global: &GlobalArgs, args: ParamsInitArgs) -> Result<()> {
    let args = merged(global, "params-init", args)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("params.json"));
    let params = JivrParams::published();
    params.to_json_file(&out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        out: &'a Path,
    }
    write_run_artifacts(global, "params-init", &out, &Resolved { out: &out }, &params.hash(), 0)?;
    println!("wrote parameter set {} ({})", out.display(), params.hash());
    Ok(())
}

// ---------------------------------------------------------------------------
// pool-make
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PoolMakeArgs {
    /// Market parameter JSON file
    #[arg(long)]
    params: Option<PathBuf>,
    /// Number of pool rows to keep
    #[arg(long)]
    rows: Option<usize>,
    /// Burn-in length in trading days (>= 252)
    #[arg(long)]
    burn_in: Option<usize>,
    /// Simulation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output pool CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for PoolMakeArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b; opts: [params, rows, burn_in, seed, out]; bools: [])
    }
}

pub fn pool_make(global: &GlobalArgs, args: PoolMakeArgs) -> Result<()> {
    let args = merged(global, "pool-make", args)?;
    let params_path = resolve_params_path(args.params)?;
    let params = JivrParams::from_json_file(&params_path)?;
    let rows = args.rows.unwrap_or(500);
    let burn_in = args.burn_in.unwrap_or(504);
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("pool.csv"));
    let pool = jivr::make_synthetic_pool(&params, burn_in, rows, seed)?;
    pool.save_csv(&out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        params: &'a Path,
        rows: usize,
        burn_in: usize,
        seed: u64,
        out: &'a Path,
    }
    let resolved = Resolved { params: &params_path, rows, burn_in, seed, out: &out };
    write_run_artifacts(global, "pool-make", &out, &resolved, &params.hash(), seed)?;
    println!("wrote {} pool rows to {}", pool.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateArgs {
    /// Market parameter JSON file
    #[arg(long)]
    params: Option<PathBuf>,
    /// Initial-state pool CSV
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Number of paths
    #[arg(long)]
    paths: Option<usize>,
    /// Path length in trading days
    #[arg(long)]
    horizon: Option<usize>,
    /// Simulation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path-set file (binary + .meta.json sidecar)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the path set as CSV
    #[arg(long)]
    export_csv: Option<PathBuf>,
}

impl Merge for SimulateArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b; opts: [params, pool, paths, horizon, seed, out, export_csv]; bools: [])
    }
}

pub fn simulate(global: &GlobalArgs, args: SimulateArgs) -> Result<()> {
    let args = merged(global, "simulate", args)?;
    let params_path = resolve_params_path(args.params)?;
    let params = JivrParams::from_json_file(&params_path)?;
    let pool_path =
        args.pool.ok_or_else(|| Error::config("simulate needs --pool <state pool CSV>"))?;
    let pool = StatePool::load_csv(&pool_path)?;
    let n_paths = args.paths.unwrap_or(1000);
    let horizon = args.horizon.unwrap_or(63);
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("paths.bin"));
    let set = jivr::simulate(&params, &pool, horizon, n_paths, seed)?;
    set.save(&out)?;
    if let Some(csv) = &args.export_csv {
        set.export_csv(csv)?;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        params: &'a Path,
        pool: &'a Path,
        paths: usize,
        horizon: usize,
        seed: u64,
        out: &'a Path,
        export_csv: Option<&'a Path>,
    }
    let resolved = Resolved {
        params: &params_path,
        pool: &pool_path,
        paths: n_paths,
        horizon,
        seed,
        out: &out,
        export_csv: args.export_csv.as_deref(),
    };
    write_run_artifacts(global, "simulate", &out, &resolved, &params.hash(), seed)?;
    println!("simulated {n_paths} paths x {horizon} steps -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate-bs
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateBsArgs {
    /// Initial index level
    #[arg(long)]
    s0: Option<f64>,
    /// Annualized drift
    #[arg(long)]
    mu: Option<f64>,
    /// Annualized volatility (also the flat surface level)
    #[arg(long)]
    sigma: Option<f64>,
    /// Risk-free rate
    #[arg(long)]
    r: Option<f64>,
    /// Dividend yield
    #[arg(long)]
    q: Option<f64>,
    /// Horizon in trading days
    #[arg(long)]
    maturity_days: Option<usize>,
    /// Number of rebalancing steps over the horizon
    #[arg(long)]
    steps: Option<usize>,
    /// Number of paths
    #[arg(long)]
    paths: Option<usize>,
    /// Simulation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output path-set file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the path set as CSV
    #[arg(long)]
    export_csv: Option<PathBuf>,
}

impl Merge for SimulateBsArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b;
            opts: [s0, mu, sigma, r, q, maturity_days, steps, paths, seed, out, export_csv];
            bools: [])
    }
}

pub fn simulate_bs(global: &GlobalArgs, args: SimulateBsArgs) -> Result<()> {
    let args = merged(global, "simulate-bs", args)?;
    let s0 = args.s0.unwrap_or(100.0);
    let mu = args.mu.unwrap_or(0.0892);
    let sigma = args.sigma.unwrap_or(0.1952);
    let r = args.r.unwrap_or(0.0);
    let q = args.q.unwrap_or(0.0);
    let maturity_days = args.maturity_days.unwrap_or(63);
    let steps = args.steps.unwrap_or(16);
    if steps == 0 {
        return Err(Error::config("simulate-bs needs --steps >= 1"));
    }
    let n_paths = args.paths.unwrap_or(1000);
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("paths-bs.bin"));
    let dt = maturity_days as f64 / 252.0 / steps as f64;
    let set = jivr::simulate_lognormal(s0, mu, sigma, r, q, dt, steps, n_paths, seed)?;
    set.save(&out)?;
    if let Some(csv) = &args.export_csv {
        set.export_csv(csv)?;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        s0: f64,
        mu: f64,
        sigma: f64,
        r: f64,
        q: f64,
        maturity_days: usize,
        steps: usize,
        paths: usize,
        seed: u64,
        out: &'a Path,
        export_csv: Option<&'a Path>,
    }
    let resolved = Resolved {
        s0,
        mu,
        sigma,
        r,
        q,
        maturity_days,
        steps,
        paths: n_paths,
        seed,
        out: &out,
        export_csv: args.export_csv.as_deref(),
    };
    write_run_artifacts(global, "simulate-bs", &out, &resolved, "lognormal", seed)?;
    println!("simulated {n_paths} lognormal paths x {steps} steps -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// history-make
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HistoryMakeArgs {
    /// Market parameter JSON file
    #[arg(long)]
    params: Option<PathBuf>,
    /// Initial-state pool CSV
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Series length in business days
    #[arg(long)]
    days: Option<usize>,
    /// First business date of the series (YYYY-MM-DD)
    #[arg(long)]
    start_date: Option<String>,
    /// Simulation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output history CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for HistoryMakeArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b; opts: [params, pool, days, start_date, seed, out]; bools: [])
    }
}

/// Simulates one long path and labels it with consecutive business dates: a
/// synthetic stand-in for the proprietary historical series.
pub fn history_make(global: &GlobalArgs, args: HistoryMakeArgs) -> Result<()> {
    let args = merged(global, "history-make", args)?;
    let params_path = resolve_params_path(args.params)?;
    let params = JivrParams::from_json_file(&params_path)?;
    let pool_path =
        args.pool.ok_or_else(|| Error::config("history-make needs --pool <state pool CSV>"))?;
    let pool = StatePool::load_csv(&pool_path)?;
    let days = args.days.unwrap_or(756);
    if days < 2 {
        return Err(Error::config("history-make needs --days >= 2"));
    }
    let start_date = args.start_date.unwrap_or_else(|| "2015-01-05".into());
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("history.csv"));
    let set = jivr::simulate(&params, &pool, days - 1, 1, seed)?;
    let history = training::synthetic_history(&set, 0, &start_date)?;
    history.save_csv(&out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        params: &'a Path,
        pool: &'a Path,
        days: usize,
        start_date: &'a str,
        seed: u64,
        out: &'a Path,
    }
    let resolved = Resolved {
        params: &params_path,
        pool: &pool_path,
        days,
        start_date: &start_date,
        seed,
        out: &out,
    };
    write_run_artifacts(global, "history-make", &out, &resolved, &params.hash(), seed)?;
    println!(
        "wrote {} dated rows ({} .. {}) -> {}",
        history.len(),
        history.dates.first().map(String::as_str).unwrap_or(""),
        history.dates.last().map(String::as_str).unwrap_or(""),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainArgs {
    /// Training path-set file
    #[arg(long)]
    paths: Option<PathBuf>,
    /// Output checkpoint file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Penalty: mse, smse, cvar95 or cvar99
    #[arg(long)]
    penalty: Option<String>,
    /// Proportional transaction cost rate kappa
    #[arg(long)]
    tc: Option<f64>,
    /// State space: full, reduced-tc or reduced-no-tc
    #[arg(long)]
    state_space: Option<String>,
    /// Option strike
    #[arg(long)]
    strike: Option<f64>,
    /// Cash borrowing limit B of the leverage constraint
    #[arg(long)]
    b: Option<f64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size
    #[arg(long)]
    batch: Option<usize>,
    /// ADAM learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Master seed (initialization, shuffling, dropout)
    #[arg(long)]
    seed: Option<u64>,
    /// Dropout rate on feedforward hidden layers (omit to disable)
    #[arg(long)]
    dropout: Option<f64>,
    /// LSTM layer widths, comma separated
    #[arg(long)]
    lstm: Option<String>,
    /// Feedforward layer widths, comma separated
    #[arg(long)]
    ffnn: Option<String>,
    /// Feed each LSTM cell its previous output as extra input
    #[arg(long)]
    recurrent: bool,
    /// Fraction of paths held out for the validation curve
    #[arg(long)]
    val_fraction: Option<f64>,
}

impl Merge for TrainArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b;
            opts: [paths, out, penalty, tc, state_space, strike, b, epochs, batch, lr, seed,
                   dropout, lstm, ffnn, val_fraction];
            bools: [recurrent])
    }
}

/// Resolved training configuration (serialized next to the checkpoint).
#[derive(Serialize)]
struct TrainResolved<'a> {
    paths: &'a Path,
    out: &'a Path,
    penalty: &'a str,
    tc: f64,
    state_space: &'a str,
    strike: f64,
    b: f64,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    dropout: Option<f64>,
    lstm: &'a [usize],
    ffnn: &'a [usize],
    recurrent: bool,
    val_fraction: f64,
}

pub fn train(global: &GlobalArgs, args: TrainArgs) -> Result<()> {
    let args = merged(global, "train", args)?;
    let paths_file =
        args.paths.ok_or_else(|| Error::config("train needs --paths <path-set file>"))?;
    let set = PathSet::load(&paths_file)?;
    let out = args.out.unwrap_or_else(|| PathBuf::from("policy.ckpt"));
    let penalty_name = args.penalty.unwrap_or_else(|| "mse".into());
    let (penalty, alpha) = parse_penalty(&penalty_name)?;
    let tc = args.tc.unwrap_or(0.0);
    let space_name = args.state_space.unwrap_or_else(|| "full".into());
    let space = parse_state_space(&space_name)?;
    let hedge = HedgeConfig {
        strike: args.strike.unwrap_or(100.0),
        kappa: tc,
        b: args.b.unwrap_or(100.0),
        penalty,
        alpha,
        state_space: space,
        v0_override: None,
    };
    let lstm = parse_widths(&args.lstm.unwrap_or_else(|| "56,56".into()))?;
    let ffnn = parse_widths(&args.ffnn.unwrap_or_else(|| "56,56".into()))?;
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(50),
        batch_size: args.batch.unwrap_or(1000),
        learning_rate: args.lr.unwrap_or(0.0005),
        seed: args.seed.unwrap_or(0),
        dropout: args.dropout,
        lstm_widths: lstm.clone(),
        ffnn_widths: ffnn.clone(),
        recurrent: args.recurrent,
        validation_fraction: args.val_fraction.unwrap_or(0.0),
    };
    let spec = FeatureSpec::from_state_space(space);
    let result = training::train(&cfg, &hedge, &spec, &set)?;
    let ckpt = Checkpoint {
        weights: result.weights,
        state_space: space,
        seed: cfg.seed,
        normalizer: result.normalizer,
        opt: None,
    };
    ckpt.save(&out)?;
    let mut loss = std::io::BufWriter::new(std::fs::File::create(sibling(&out, "loss.csv"))?);
    writeln!(loss, "epoch,train,val")?;
    for (i, t) in result.train_curve.iter().enumerate() {
        let val = result
            .val_curve
            .get(i)
            .map(|v| format!("{v:.10}"))
            .unwrap_or_default();
        writeln!(loss, "{},{t:.10},{val}", i + 1)?;
    }
    drop(loss);
    let resolved = TrainResolved {
        paths: &paths_file,
        out: &out,
        penalty: &penalty_name,
        tc,
        state_space: &space_name,
        strike: hedge.strike,
        b: hedge.b,
        epochs: cfg.epochs,
        batch: cfg.batch_size,
        lr: cfg.learning_rate,
        seed: cfg.seed,
        dropout: cfg.dropout,
        lstm: &lstm,
        ffnn: &ffnn,
        recurrent: cfg.recurrent,
        val_fraction: cfg.validation_fraction,
    };
    write_run_artifacts(global, "train", &out, &resolved, &set.param_hash, cfg.seed)?;
    println!(
        "trained {} epochs on {} paths; final penalty {:.6} -> {}",
        cfg.epochs,
        set.n_paths,
        result.train_curve.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateArgs {
    /// Path-set file to hedge over
    #[arg(long)]
    paths: Option<PathBuf>,
    /// Strategy to run: bs, leland, si or checkpoint:<file> (repeatable)
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    /// Proportional transaction cost rate kappa
    #[arg(long)]
    tc: Option<f64>,
    /// Option strike
    #[arg(long)]
    strike: Option<f64>,
    /// Cash borrowing limit B
    #[arg(long)]
    b: Option<f64>,
    /// CVaR level for the deviation metric
    #[arg(long)]
    alpha: Option<f64>,
    /// Output metrics CSV (one row per strategy)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prefix for per-path result CSVs, one file per strategy
    #[arg(long)]
    results_csv: Option<PathBuf>,
}

impl Merge for EvaluateArgs {
    fn merge(self, b: Self) -> Self {
        Self {
            strategies: if self.strategies.is_empty() { b.strategies } else { self.strategies },
            paths: self.paths.or(b.paths),
            tc: self.tc.or(b.tc),
            strike: self.strike.or(b.strike),
            b: self.b.or(b.b),
            alpha: self.alpha.or(b.alpha),
            out: self.out.or(b.out),
            results_csv: self.results_csv.or(b.results_csv),
        }
    }
}

pub fn evaluate(global: &GlobalArgs, args: EvaluateArgs) -> Result<()> {
    let args = merged(global, "evaluate", args)?;
    let paths_file =
        args.paths.ok_or_else(|| Error::config("evaluate needs --paths <path-set file>"))?;
    let set = PathSet::load(&paths_file)?;
    let strategy_names = if args.strategies.is_empty() {
        vec!["bs".to_string()]
    } else {
        args.strategies.clone()
    };
    let tc = args.tc.unwrap_or(0.0);
    let strike = args.strike.unwrap_or(100.0);
    let b = args.b.unwrap_or(100.0);
    let alpha = args.alpha.unwrap_or(0.95);
    let out = args.out.unwrap_or_else(|| PathBuf::from("metrics.csv"));
    let rebalances_per_year = 1.0 / set.dt;
    let mut rows = Vec::new();
    for name in &strategy_names {
        let spec = StrategySpec::parse(name)?;
        let (mut strategy, space) = spec.build(tc, rebalances_per_year)?;
        let hedge = HedgeConfig {
            strike,
            kappa: tc,
            b,
            penalty: Penalty::Mse,
            alpha,
            state_space: space,
            v0_override: None,
        };
        let (report, results) = training::evaluate(&set, strategy.as_mut(), &hedge)?;
        if let Some(prefix) = &args.results_csv {
            let file = PathBuf::from(format!("{}-{}.csv", prefix.display(), spec.label()));
            hedging::export_results_csv(&results, &file)?;
        }
        rows.push((spec.label(), report));
    }
    training::export_metrics_csv(&rows, &out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        paths: &'a Path,
        strategies: &'a [String],
        tc: f64,
        strike: f64,
        b: f64,
        alpha: f64,
        out: &'a Path,
        results_csv: Option<&'a Path>,
    }
    let resolved = Resolved {
        paths: &paths_file,
        strategies: &strategy_names,
        tc,
        strike,
        b,
        alpha,
        out: &out,
        results_csv: args.results_csv.as_deref(),
    };
    write_run_artifacts(global, "evaluate", &out, &resolved, &set.param_hash, set.seed)?;
    for (name, m) in &rows {
        println!(
            "{name}: mse={:.4} smse={:.4} cvar95={:.4} cost={:.4}",
            m.mse, m.smse, m.cvar_95, m.cost_mean
        );
    }
    println!("metrics -> {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestArgs {
    /// Historical state series CSV (dated rows)
    #[arg(long)]
    history: Option<PathBuf>,
    /// Strategy to run: bs, leland, si or checkpoint:<file> (repeatable)
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    /// Proportional transaction cost rate kappa
    #[arg(long)]
    tc: Option<f64>,
    /// Cash borrowing limit B
    #[arg(long)]
    b: Option<f64>,
    /// Risk-free rate over the backtest window
    #[arg(long)]
    r: Option<f64>,
    /// Dividend yield over the backtest window
    #[arg(long)]
    q: Option<f64>,
    /// Output cumulative-P&L CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Merge for BacktestArgs {
    fn merge(self, b: Self) -> Self {
        Self {
            strategies: if self.strategies.is_empty() { b.strategies } else { self.strategies },
            history: self.history.or(b.history),
            tc: self.tc.or(b.tc),
            b: self.b.or(b.b),
            r: self.r.or(b.r),
            q: self.q.or(b.q),
            out: self.out.or(b.out),
        }
    }
}

pub fn backtest(global: &GlobalArgs, args: BacktestArgs) -> Result<()> {
    let args = merged(global, "backtest", args)?;
    let history_file =
        args.history.ok_or_else(|| Error::config("backtest needs --history <series CSV>"))?;
    let tc = args.tc.unwrap_or(0.0);
    let b = args.b.unwrap_or(100.0);
    let r = args.r.unwrap_or(0.0266);
    let q = args.q.unwrap_or(0.0177);
    let out = args.out.unwrap_or_else(|| PathBuf::from("backtest.csv"));
    let history = training::HistoricalSeries::load_csv(&history_file, r, q)?;
    let strategy_names = if args.strategies.is_empty() {
        vec!["bs".to_string()]
    } else {
        args.strategies.clone()
    };
    let rebalances_per_year = 252.0;
    let mut built: Vec<(String, Box<dyn Strategy>)> = Vec::new();
    for name in &strategy_names {
        let spec = StrategySpec::parse(name)?;
        let (strategy, _space) = spec.build(tc, rebalances_per_year)?;
        built.push((spec.label(), strategy));
    }
    let template = HedgeConfig {
        strike: 100.0,
        kappa: tc,
        b,
        penalty: Penalty::Mse,
        alpha: 0.95,
        state_space: StateSpace::Full,
        v0_override: None,
    };
    let mut refs: Vec<(String, &mut dyn Strategy)> =
        built.iter_mut().map(|(n, s)| (n.clone(), s.as_mut() as &mut dyn Strategy)).collect();
    let report = training::backtest(&history, &mut refs, &template)?;
    report.save_csv(&out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        history: &'a Path,
        strategies: &'a [String],
        tc: f64,
        b: f64,
        r: f64,
        q: f64,
        out: &'a Path,
    }
    let resolved = Resolved {
        history: &history_file,
        strategies: &strategy_names,
        tc,
        b,
        r,
        q,
        out: &out,
    };
    write_run_artifacts(global, "backtest", &out, &resolved, "historical", 0)?;
    println!("backtested {} option episodes -> {}", report.dates.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sage
// ---------------------------------------------------------------------------

#[derive(Args, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SageArgs {
    /// Training path-set file (one policy per feature subset)
    #[arg(long)]
    train_paths: Option<PathBuf>,
    /// Held-out path-set file for the risk evaluations
    #[arg(long)]
    test_paths: Option<PathBuf>,
    /// Traversal mode: exact or sampled:<permutations>
    #[arg(long)]
    mode: Option<String>,
    /// Tiny preset: small network and short training per subset
    #[arg(long)]
    tiny: bool,
    /// Penalty: mse, smse, cvar95 or cvar99
    #[arg(long)]
    penalty: Option<String>,
    /// Proportional transaction cost rate kappa
    #[arg(long)]
    tc: Option<f64>,
    /// Option strike
    #[arg(long)]
    strike: Option<f64>,
    /// Cash borrowing limit B
    #[arg(long)]
    b: Option<f64>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs per subset
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size per subset
    #[arg(long)]
    batch: Option<usize>,
    /// Output report JSON
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export per-feature contributions as CSV
    #[arg(long)]
    export_csv: Option<PathBuf>,
}

impl Merge for SageArgs {
    fn merge(self, b: Self) -> Self {
        merge_fields!(self, b;
            opts: [train_paths, test_paths, mode, penalty, tc, strike, b, seed, epochs, batch,
                   out, export_csv];
            bools: [tiny])
    }
}

fn parse_sage_mode(s: &str) -> Result<SageMode> {
    match s {
        "exact" => Ok(SageMode::Exact),
        other => match other.strip_prefix("sampled:") {
            Some(n) => {
                let permutations = n.parse::<usize>().map_err(|e| {
                    Error::config(format!("bad permutation count in '{other}': {e}"))
                })?;
                Ok(SageMode::Sampled { permutations })
            }
            None => Err(Error::config(format!(
                "unknown sage mode '{other}' (expected exact or sampled:<n>)"
            ))),
        },
    }
}

pub fn sage(global: &GlobalArgs, args: SageArgs) -> Result<()> {
    let args = merged(global, "sage", args)?;
    let train_file =
        args.train_paths.ok_or_else(|| Error::config("sage needs --train-paths <file>"))?;
    let test_file =
        args.test_paths.ok_or_else(|| Error::config("sage needs --test-paths <file>"))?;
    let train_set = PathSet::load(&train_file)?;
    let test_set = PathSet::load(&test_file)?;
    let mode_name = args.mode.unwrap_or_else(|| "exact".into());
    let mode = parse_sage_mode(&mode_name)?;
    let penalty_name = args.penalty.unwrap_or_else(|| "mse".into());
    let (penalty, alpha) = parse_penalty(&penalty_name)?;
    let seed = args.seed.unwrap_or(0);
    let out = args.out.unwrap_or_else(|| PathBuf::from("sage.json"));
    let hedge = HedgeConfig {
        strike: args.strike.unwrap_or(100.0),
        kappa: args.tc.unwrap_or(0.0),
        b: args.b.unwrap_or(100.0),
        penalty,
        alpha,
        state_space: StateSpace::Full,
        v0_override: None,
    };
    let (default_epochs, widths) = if args.tiny { (2, vec![8]) } else { (20, vec![56, 56]) };
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(default_epochs),
        batch_size: args.batch.unwrap_or_else(|| train_set.n_paths.min(250)),
        learning_rate: 0.0005,
        seed,
        dropout: None,
        lstm_widths: widths.clone(),
        ffnn_widths: widths,
        recurrent: false,
        validation_fraction: 0.0,
    };
    let report = training::sage(mode, &cfg, &hedge, &train_set, &test_set)?;
    report.save_json(&out)?;
    if let Some(csv) = &args.export_csv {
        report.save_csv(csv)?;
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        train_paths: &'a Path,
        test_paths: &'a Path,
        mode: &'a str,
        tiny: bool,
        penalty: &'a str,
        tc: f64,
        strike: f64,
        b: f64,
        seed: u64,
        epochs: usize,
        batch: usize,
        out: &'a Path,
        export_csv: Option<&'a Path>,
    }
    let resolved = Resolved {
        train_paths: &train_file,
        test_paths: &test_file,
        mode: &mode_name,
        tiny: args.tiny,
        penalty: &penalty_name,
        tc: hedge.kappa,
        strike: hedge.strike,
        b: hedge.b,
        seed,
        epochs: cfg.epochs,
        batch: cfg.batch_size,
        out: &out,
        export_csv: args.export_csv.as_deref(),
    };
    write_run_artifacts(global, "sage", &out, &resolved, &train_set.param_hash, seed)?;
    for (name, c) in report.feature_names.iter().zip(report.contributions.iter()) {
        println!("{name}: {c:.6}");
    }
    println!("total risk reduction {:.6} -> {}", report.total_reduction, out.display());
    Ok(())
}

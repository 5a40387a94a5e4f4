use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use lice::data::{Dataset, DatasetSchema, MadWeights, Value};
use lice::engine::{BenchmarkOptions, Explainer, Variant, VariantConfig};
use lice::mio::SolveStatus;
use lice::nn::Mlp;
use lice::spn::{Domain, Spn};
use lice::spn_learn::{learn_with_class, LearnConfig};
use lice::synth::{synth_credit, SynthConfig};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

mod io;

use io::write_atomic;

const EXIT_INPUT: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NO_INCUMBENT: u8 = 4;

#[derive(Parser)]
#[command(name = "lice", version, about = "Counterfactual explanations with likelihood constraints")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Artifacts {
    #[arg(long)]
    schema: PathBuf,
    /// Training CSV; used for MAD weights, thresholds and factual rows.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    nn: PathBuf,
    #[arg(long)]
    spn: PathBuf,
}

#[derive(clap::Args)]
struct SolveArgs {
    /// Maximum number of counterfactuals per factual.
    #[arg(long, default_value_t = 10)]
    pool: usize,
    /// Seconds per solver call.
    #[arg(long, default_value_t = 120.0)]
    time_limit: f64,
    #[arg(long, default_value_t = 1e-4)]
    tau: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long)]
    target_class: Option<usize>,
    /// Maximum number of changed features.
    #[arg(long)]
    sparsity: Option<usize>,
    /// Keep pool entries within (1 + rho) of the closest one.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolveArgs {
    fn config(&self, variant: Variant) -> VariantConfig {
        VariantConfig {
            pool_size: self.pool,
            time_limit: self.time_limit,
            tau: self.tau,
            epsilon: self.epsilon,
            seed: self.seed,
            target_class: self.target_class,
            sparsity_cap: self.sparsity,
            relative_distance: self.rho,
            ..VariantConfig::new(variant)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic credit schema, data and labelling network.
    Synth {
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Learn a sum-product network over the features and the class.
    LearnSpn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rows below which a slice is factorized: a number or `auto` (rows / 20).
        #[arg(long, default_value = "auto")]
        min_slice: String,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Explain one row of the data.
    Explain {
        #[command(flatten)]
        artifacts: Artifacts,
        /// Zero-based data row to explain.
        #[arg(long)]
        factual_row: usize,
        /// mio, lice-opt, lice-med, lice-q or lice-sample.
        #[arg(long, default_value = "lice-opt")]
        variant: String,
        /// Weight of the likelihood term for lice-opt.
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        solve: SolveArgs,
        /// Record wall time in the output (makes it run-dependent).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Marginal log-likelihood of two continuous features on an r x r grid.
    MarginalGrid {
        #[arg(long)]
        spn: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Two feature names, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        features: Vec<String>,
        #[arg(long, default_value_t = 50)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explain the first n rows with several variants and write a summary report.
    Benchmark {
        #[command(flatten)]
        artifacts: Artifacts,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "mio,lice-opt,lice-med,lice-q,lice-sample")]
        variants: Vec<String>,
        #[command(flatten)]
        solve: SolveArgs,
        /// Worker threads; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Include median solve times (makes the report run-dependent).
        #[arg(long)]
        timing: bool,
        /// Output prefix; writes PREFIX.csv and PREFIX.json.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print a summary of a schema, network or density file.
    Inspect {
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        nn: Option<PathBuf>,
        #[arg(long)]
        spn: Option<PathBuf>,
    },
}

/// Errors that are not the caller's fault.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::FAILURE
            } else {
                ExitCode::from(EXIT_INPUT)
            }
        }
    }
}

fn internal(e: lice::Error) -> anyhow::Error {
    match e {
        lice::Error::Solver(_) | lice::Error::Model(_) | lice::Error::Formulation(_) | lice::Error::Io(_) => {
            Internal(e.to_string()).into()
        }
        other => other.into(),
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Synth {
            rows,
            hidden,
            seed,
            out_dir,
        } => synth(rows, hidden, seed, &out_dir),
        Command::LearnSpn {
            data,
            schema,
            out,
            min_slice,
            bins,
            threshold,
            seed,
        } => learn_spn(&data, &schema, &out, &min_slice, bins, threshold, seed),
        Command::Explain {
            artifacts,
            factual_row,
            variant,
            alpha,
            solve,
            timing,
            out,
        } => explain(&artifacts, factual_row, &variant, alpha, &solve, timing, &out),
        Command::MarginalGrid {
            spn,
            schema,
            features,
            resolution,
            out,
        } => marginal_grid(&spn, &schema, &features, resolution, &out),
        Command::Benchmark {
            artifacts,
            n,
            variants,
            solve,
            jobs,
            timing,
            report,
        } => benchmark(&artifacts, n, &variants, &solve, jobs, timing, &report),
        Command::Inspect { schema, nn, spn } => inspect(schema.as_deref(), nn.as_deref(), spn.as_deref()),
    }
}

fn synth(rows: usize, hidden: usize, seed: u64, out_dir: &Path) -> Result<ExitCode> {
    let s = synth_credit(&SynthConfig { rows, hidden, seed })?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_atomic(&out_dir.join("schema.json"), s.schema.to_json()?.as_bytes())?;
    write_atomic(&out_dir.join("nn.json"), s.mlp.to_json()?.as_bytes())?;
    let mut csv = Vec::new();
    s.data.write_csv(&mut csv, &s.schema)?;
    write_atomic(&out_dir.join("data.csv"), &csv)?;
    out!("wrote {rows} rows to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn load_schema(path: &Path) -> Result<DatasetSchema> {
    DatasetSchema::from_json_file(path).with_context(|| format!("reading schema {}", path.display()))
}

fn load_rows(path: &Path, schema: &DatasetSchema) -> Result<(Vec<Vec<Value>>, Vec<usize>)> {
    let data = Dataset::read_csv(path, schema).with_context(|| format!("reading data {}", path.display()))?;
    let rows = data.normalize(schema, false)?;
    Ok((rows, data.labels))
}

fn learn_spn(
    data: &Path,
    schema: &Path,
    out: &Path,
    min_slice: &str,
    bins: usize,
    threshold: f64,
    seed: u64,
) -> Result<ExitCode> {
    let schema = load_schema(schema)?;
    let (rows, labels) = load_rows(data, &schema)?;
    if rows.is_empty() {
        bail!(lice::Error::EmptyDataset);
    }
    let min_slice = match min_slice {
        "auto" => LearnConfig::auto_min_slice(rows.len()),
        n => n
            .parse()
            .map_err(|_| anyhow!("--min-slice must be a positive integer or `auto`, got `{n}`"))?,
    };
    let cfg = LearnConfig {
        min_instances_slice: min_slice,
        independence_threshold: threshold,
        histogram_bins: bins,
        rng_seed: seed,
        ..Default::default()
    };
    let spn = learn_with_class(&schema, &rows, &labels, &cfg)?;
    let violations = spn.validate();
    out!("min-slice: {min_slice}");
    out!(
        "nodes: {} ({} sum), features: {}",
        spn.nodes().len(),
        spn.sum_nodes().count(),
        spn.num_features()
    );
    if !violations.is_empty() {
        for v in &violations {
            out!("violation: {v}");
        }
        return Err(Internal(format!("learned network has {} violations", violations.len())).into());
    }
    out!("validation: ok");
    write_atomic(out, spn.to_json()?.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    schema: DatasetSchema,
    mlp: Mlp,
    spn: Spn,
    rows: Vec<Vec<Value>>,
    labels: Vec<usize>,
    weights: MadWeights,
}

fn load_artifacts(a: &Artifacts) -> Result<Loaded> {
    let schema = load_schema(&a.schema)?;
    let mlp = Mlp::load(&a.nn).with_context(|| format!("reading network {}", a.nn.display()))?;
    mlp.check_fingerprint(&schema.fingerprint())?;
    let spn = Spn::load(&a.spn).with_context(|| format!("reading density network {}", a.spn.display()))?;
    let p = schema.len();
    if spn.num_features() != p && spn.num_features() != p + 1 {
        bail!(
            "density network has {} features, schema has {p} (plus an optional class)",
            spn.num_features()
        );
    }
    let (rows, labels) = load_rows(&a.data, &schema)?;
    if rows.is_empty() {
        bail!(lice::Error::EmptyDataset);
    }
    let weights = MadWeights::fit(&schema, &rows)?;
    Ok(Loaded {
        schema,
        mlp,
        spn,
        rows,
        labels,
        weights,
    })
}

fn parse_variant(name: &str, alpha: Option<f64>) -> Result<Variant> {
    let v: Variant = name.parse()?;
    Ok(match (v, alpha) {
        (Variant::LiceOptimize { .. }, Some(alpha)) => Variant::LiceOptimize { alpha },
        (_, Some(_)) => bail!("--alpha only applies to lice-opt"),
        (v, None) => v,
    })
}

fn explain(
    a: &Artifacts,
    factual_row: usize,
    variant: &str,
    alpha: Option<f64>,
    solve: &SolveArgs,
    timing: bool,
    out: &Path,
) -> Result<ExitCode> {
    let variant = parse_variant(variant, alpha)?;
    let l = load_artifacts(a)?;
    let factual = l
        .rows
        .get(factual_row)
        .ok_or_else(|| anyhow!("factual row {factual_row} out of range (data has {} rows)", l.rows.len()))?;
    let ex = Explainer::new(&l.schema, &l.mlp, &l.spn, &l.weights)?.with_training(&l.rows, &l.labels)?;
    let e = ex.explain(factual, &solve.config(variant)).map_err(internal)?;
    let mut doc = serde_json::to_value(&e)?;
    let obj = doc.as_object_mut().expect("explanation is an object");
    obj.insert("format_version".into(), 1.into());
    if timing {
        obj.insert("wall_time_s".into(), e.wall_time_s.into());
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(out, text.as_bytes())?;
    match (e.status, e.selected()) {
        (_, Some(s)) => {
            out!(
                "{}: {} entries, selected #{} (distance {:.6}, nll {:.6})",
                e.status,
                e.pool.len(),
                e.selected.unwrap(),
                s.metrics.distance_mad,
                s.metrics.nll_exact
            );
            Ok(ExitCode::SUCCESS)
        }
        (SolveStatus::Infeasible, None) => {
            eprintln!("no actionable counterfactual exists");
            Ok(ExitCode::from(EXIT_INFEASIBLE))
        }
        (SolveStatus::NoIncumbentTimeout, None) => {
            eprintln!("time limit reached without a counterfactual");
            Ok(ExitCode::from(EXIT_NO_INCUMBENT))
        }
        (status, None) => Err(Internal(format!("solver finished with status {status} and no valid entry")).into()),
    }
}

fn marginal_grid(spn: &Path, schema: &Path, features: &[String], resolution: usize, out: &Path) -> Result<ExitCode> {
    let schema = load_schema(schema)?;
    let spn = Spn::load(spn).with_context(|| format!("reading density network {}", spn.display()))?;
    if features.len() != 2 {
        bail!("--features needs exactly two names, got {}", features.len());
    }
    if resolution == 0 {
        bail!("--resolution must be at least 1");
    }
    let mut idx = [0usize; 2];
    for (slot, name) in idx.iter_mut().zip(features) {
        let j = schema
            .feature_index(name)
            .ok_or_else(|| anyhow!("unknown feature `{name}`"))?;
        if spn.domain(j) != Some(Domain::Real) {
            bail!("feature `{name}` is not continuous in the density network");
        }
        *slot = j;
    }
    if idx[0] == idx[1] {
        bail!("--features must name two different features");
    }
    let r = resolution as f64;
    let mut text = String::new();
    for i in 0..resolution {
        let cells: Vec<String> = (0..resolution)
            .map(|k| {
                let mut point = vec![None; spn.num_features()];
                point[idx[0]] = Some(Value::Real((i as f64 + 0.5) / r));
                point[idx[1]] = Some(Value::Real((k as f64 + 0.5) / r));
                spn.marginal_log_likelihood(&point).map(|v| v.to_string())
            })
            .collect::<lice::Result<_>>()?;
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn benchmark(
    a: &Artifacts,
    n: usize,
    variants: &[String],
    solve: &SolveArgs,
    jobs: usize,
    timing: bool,
    report: &Path,
) -> Result<ExitCode> {
    let configs = variants
        .iter()
        .map(|v| parse_variant(v.trim(), None).map(|v| solve.config(v)))
        .collect::<Result<Vec<_>>>()?;
    let l = load_artifacts(a)?;
    if n > l.rows.len() {
        log::warn!("only {} rows available, explaining all of them", l.rows.len());
    }
    let factuals = &l.rows[..n.min(l.rows.len())];
    let ex = Explainer::new(&l.schema, &l.mlp, &l.spn, &l.weights)?.with_training(&l.rows, &l.labels)?;
    let opts = BenchmarkOptions {
        jobs: jobs.max(1),
        record_time: timing,
    };
    let rep = ex.run_benchmark(factuals, &configs, &opts);
    let with_ext = |ext: &str| {
        let mut p = report.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    write_atomic(&with_ext(".csv"), rep.to_csv()?.as_bytes())?;
    write_atomic(&with_ext(".json"), rep.to_json()?.as_bytes())?;
    for row in &rep.rows {
        out!(
            "{}: valid {:.3}, actionable {:.3}",
            row.variant, row.valid_rate, row.actionable_rate
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn inspect(schema: Option<&Path>, nn: Option<&Path>, spn: Option<&Path>) -> Result<ExitCode> {
    if schema.is_none() && nn.is_none() && spn.is_none() {
        bail!("nothing to inspect; pass --schema, --nn or --spn");
    }
    let schema = schema.map(load_schema).transpose()?;
    if let Some(s) = &schema {
        out!("schema: {} features, {} classes, fingerprint {}", s.len(), s.num_classes(), s.fingerprint());
        for f in s.features() {
            let tag = if f.mutable { "" } else { " (immutable)" };
            out!("  {}: {:?}{tag}", f.name, f.kind);
        }
        for r in s.causal_rules() {
            out!(
                "  rule: {} {:?} => {} {:?}",
                r.cause_feature, r.cause_direction, r.effect_feature, r.effect_direction
            );
        }
    }
    if let Some(path) = nn {
        let m = Mlp::load(path)?;
        let dims: Vec<String> = std::iter::once(m.input_dim())
            .chain(m.layers().iter().map(|l| l.out_dim()))
            .map(|d| d.to_string())
            .collect();
        out!("network: layers {}, {} classes", dims.join("-"), m.num_classes());
        if let Some(s) = &schema {
            match m.check_fingerprint(&s.fingerprint()) {
                Ok(()) => out!("  fingerprint matches the schema"),
                Err(e) => out!("  {e}"),
            }
        }
    }
    if let Some(path) = spn {
        let s = Spn::load(path)?;
        out!(
            "density network: {} nodes ({} sum), {} features, max-approximation gap bound {:.4}",
            s.nodes().len(),
            s.sum_nodes().count(),
            s.num_features(),
            s.max_approx_gap_bound()
        );
    }
    Ok(ExitCode::SUCCESS)
}

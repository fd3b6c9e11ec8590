use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cusp_induce::distortion::bv_selftest;
use cusp_induce::map::{FamilyConfig, MapConfig, MapSpec, DEFAULT_RATIO_BOUND};
use cusp_induce::orbit::{compute_all_orbits, star_sum, SumVerdict};
use cusp_induce::pipeline::{
    parse_grid, run_pipeline, scan, scan_csv, Artifacts, PipelineConfig, PipelineReport, ScanParams, Stage,
};

#[derive(Parser)]
#[command(name = "cusp-induce", version, about = "Induced-map analysis of interval maps with critical points and singularities")]
struct Cli {
    /// Map config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in family instead of a config file.
    #[arg(long, global = true)]
    family: Option<String>,
    /// Family parameter, `name=value`; repeatable.
    #[arg(long = "param", global = true)]
    params: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the map and check the order relations near critical points.
    Validate {
        #[arg(long, default_value_t = 128)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_RATIO_BOUND)]
        bound: f64,
    },
    /// Critical orbits with distances and derivative products.
    Orbit(StageArgs),
    /// Summability along critical orbits.
    StarCheck(StageArgs),
    /// Choose delta and q0.
    Hyperbolicity(StageArgs),
    /// Build the inducing partition.
    Induce(StageArgs),
    /// Variation and inducing-time sums over the partition.
    Summability(StageArgs),
    /// Invariant density via the induced map, with Birkhoff histograms.
    Density(StageArgs),
    /// Every stage in order.
    Pipeline(StageArgs),
    /// Cheap stages over a parameter grid of a built-in family.
    Scan {
        /// `name=lo:hi:step` or `name=v1,v2,...`; repeatable.
        #[arg(long = "grid")]
        grid: Vec<String>,
        #[arg(long, default_value_t = cusp_induce::pipeline::DEFAULT_ORBIT_N)]
        nmax: usize,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Built-in checks of the variation toolkit and a reference map.
    Selftest,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Orbit length.
    #[arg(long)]
    orbit_n: Option<usize>,
    /// Summability threshold for the last-decade increment.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Comma-separated delta candidates, tried in order.
    #[arg(long, value_delimiter = ',')]
    delta_candidates: Option<Vec<f64>>,
    #[arg(long)]
    margin: Option<f64>,
    /// Random sample points for the expansion fit.
    #[arg(long)]
    samples: Option<usize>,
    /// Longest orbit segment for the expansion fit.
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long)]
    p_max: Option<usize>,
    /// Fixed delta; needs `--q0` and skips the selection.
    #[arg(long, requires = "q0")]
    delta: Option<f64>,
    #[arg(long, requires = "delta")]
    q0: Option<usize>,
    /// Smallest branch length before a piece counts as unresolved.
    #[arg(long)]
    resolution: Option<f64>,
    /// Allowed unresolved measure, fraction of the domain.
    #[arg(long)]
    budget: Option<f64>,
    /// Density cells.
    #[arg(short, long)]
    m: Option<usize>,
    #[arg(long)]
    birkhoff_steps: Option<usize>,
    #[arg(long)]
    birkhoff_seeds: Option<usize>,
    #[arg(long)]
    birkhoff_m: Option<usize>,
    #[arg(long)]
    residual_tol: Option<f64>,
    #[arg(long)]
    consistency_tol: Option<f64>,
    /// Pipeline config file (JSON); flags override it.
    #[arg(long)]
    run_config: Option<PathBuf>,
}

/// Input or usage problem: exit 2.
struct InputError(Value);

fn input_error(msg: impl std::fmt::Display) -> InputError {
    InputError(json!({ "error": msg.to_string() }))
}

fn load_map(cli: &Cli) -> Result<MapSpec, InputError> {
    let cfg = match (&cli.config, &cli.family) {
        (Some(_), Some(_)) => return Err(input_error("give either --config or --family, not both")),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
            MapConfig::from_json_str(&text).map_err(input_error)?
        }
        (None, Some(name)) => {
            let mut params = BTreeMap::new();
            for p in &cli.params {
                let (k, v) = p.split_once('=').ok_or_else(|| input_error(format!("expected name=value, got `{p}`")))?;
                let v: f64 = v.trim().parse().map_err(|e| input_error(format!("bad value in `{p}`: {e}")))?;
                params.insert(k.trim().to_string(), v);
            }
            MapConfig::Family(FamilyConfig {
                family: name.clone(),
                params,
                delta: None,
                name: None,
            })
        }
        (None, None) => return Err(input_error("a map is required: --config FILE or --family NAME")),
    };
    MapSpec::build(&cfg).map_err(input_error)
}

fn pipeline_config(a: &StageArgs, seed: u64) -> Result<PipelineConfig, InputError> {
    let mut c = match &a.run_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| input_error(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    }
    .with_seed(seed);
    macro_rules! set {
        ($flag:expr, $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                c.$($field)+ = v;
            }
        };
    }
    set!(a.orbit_n, orbit_n);
    set!(a.epsilon, star_epsilon);
    set!(a.delta_candidates, candidates);
    set!(a.margin, margin);
    set!(a.samples, sampling.random);
    set!(a.nmax, sampling.n_max);
    set!(a.p_max, p_max);
    set!(a.resolution, partition.resolution);
    set!(a.budget, partition.budget);
    set!(a.budget, summability.budget);
    set!(a.budget, density.budget);
    set!(a.m, density.m);
    set!(a.birkhoff_steps, birkhoff.steps);
    set!(a.birkhoff_seeds, birkhoff.seeds);
    set!(a.birkhoff_m, birkhoff.m);
    set!(a.residual_tol, residual_tol);
    set!(a.consistency_tol, consistency_tol);
    if let (Some(d), Some(q)) = (a.delta, a.q0) {
        c.fixed = Some((d, q));
    }
    if c.candidates.is_empty() {
        return Err(input_error("--delta-candidates is empty"));
    }
    Ok(c)
}

fn emit(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn report_code(r: &PipelineReport) -> ExitCode {
    ExitCode::from(r.exit_code() as u8)
}

fn run_stage(cli: &Cli, a: &StageArgs, last: Stage) -> Result<ExitCode, InputError> {
    let map = load_map(cli)?;
    let cfg = pipeline_config(a, cli.seed)?;
    let mut art = Artifacts::new(cli.out.as_deref()).map_err(input_error)?;
    let r = run_pipeline(&map, &cfg, last, &mut art).map_err(input_error)?;
    match cli.format {
        Format::Json => emit(&serde_json::to_value(&r).expect("report serializes")),
        Format::Csv => {
            println!("stage,pass,error");
            for s in &r.stages {
                println!("{},{},", s.stage, s.pass);
            }
            if let Some(st) = &r.aborted_at {
                println!("{st},false,{}", r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"));
            }
        }
    }
    Ok(report_code(&r))
}

fn run(cli: &Cli) -> Result<ExitCode, InputError> {
    match &cli.cmd {
        Cmd::Validate { grid, bound } => {
            let map = load_map(cli)?;
            let r = map.verify_nondegeneracy(*grid, *bound).map_err(input_error)?;
            let v = serde_json::to_value(&r).expect("report serializes");
            if let Some(dir) = &cli.out {
                let mut art = Artifacts::new(Some(dir)).map_err(input_error)?;
                art.put_json("nondegeneracy.json", &v).map_err(input_error)?;
            }
            emit(&v);
            Ok(ExitCode::from(if r.pass { 0 } else { 1 }))
        }
        Cmd::Orbit(a) => {
            if cli.format == Format::Csv {
                // Plain per-point tables on stdout.
                let map = load_map(cli)?;
                let cfg = pipeline_config(a, cli.seed)?;
                let orbits = compute_all_orbits(&map, cfg.orbit_n).map_err(input_error)?;
                for rec in &orbits {
                    println!("# {}", rec.label());
                    print!("{}", rec.to_csv());
                }
                return Ok(ExitCode::SUCCESS);
            }
            run_stage(cli, a, Stage::Orbit)
        }
        Cmd::StarCheck(a) => run_stage(cli, a, Stage::StarCheck),
        Cmd::Hyperbolicity(a) => run_stage(cli, a, Stage::Hyperbolicity),
        Cmd::Induce(a) => run_stage(cli, a, Stage::Induce),
        Cmd::Summability(a) => run_stage(cli, a, Stage::Summability),
        Cmd::Density(a) | Cmd::Pipeline(a) => run_stage(cli, a, Stage::Density),
        Cmd::Scan { grid, nmax, epsilon } => {
            let family = cli.family.as_deref().ok_or_else(|| input_error("scan needs --family"))?;
            if cli.config.is_some() {
                return Err(input_error("scan takes --family, not --config"));
            }
            let tuples = parse_grid(grid).map_err(input_error)?;
            let mut sp = ScanParams { n: *nmax, ..Default::default() };
            sp.sampling.seed = cli.seed;
            if let Some(e) = epsilon {
                sp.epsilon = *e;
            }
            let rows = scan(family, &tuples, &sp);
            let csv = scan_csv(&rows);
            let v = serde_json::to_value(&rows).expect("rows serialize");
            if let Some(dir) = &cli.out {
                let mut art = Artifacts::new(Some(dir)).map_err(input_error)?;
                art.put("scan.csv", &csv).map_err(input_error)?;
                art.put_json("scan.json", &v).map_err(input_error)?;
            }
            match cli.format {
                Format::Csv => print!("{csv}"),
                Format::Json => emit(&v),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Selftest => {
            let bv = bv_selftest();
            let cheb = MapSpec::build(&MapConfig::family("chebyshev", &[])).map_err(input_error)?;
            let orbits = compute_all_orbits(&cheb, 40).map_err(input_error)?;
            let star_ok = orbits.iter().all(|r| {
                let s = star_sum(r, 1e-6);
                s.verdict != SumVerdict::Fail && s.partial_sums.last().is_none_or(|&p| p == 0.0)
            });
            let pass = bv.pass && star_ok;
            emit(&json!({ "bv": bv, "chebyshev_star_zero": star_ok, "pass": pass }));
            Ok(ExitCode::from(if pass { 0 } else { 1 }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CUSP_INDUCE_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            emit(&json!({ "error": "--jobs must be at least 1" }));
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().expect("thread pool starts once");
    }
    match run(&cli) {
        Ok(code) => code,
        Err(InputError(v)) => {
            emit(&v);
            ExitCode::from(2)
        }
    }
}

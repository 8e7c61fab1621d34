use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use rvit::costmodel::{compare, flops, CostRow, COST_CSV_HEADER};
use rvit::harness::{
    evaluate, linear_probe, prepare_data, summarize, sweep, train, write_rows_csv, write_summary_csv,
    ExperimentConfig, ProbeConfig, SweepGrid, SweepOptions,
};
use rvit::masking::{
    calibrate_threshold, ms1_uniform, ms2_diversity, ms3_plan, similarity_matrix, write_calibration_csv,
    RetentionPlan, SampleSeed, Strategy,
};
use rvit::model::{load_checkpoint, save_checkpoint, ModelConfig};
use rvit::patching::partition;
use rvit::synthdata::{generate_dataset, read_dataset, write_dataset, SceneSpec};
use rvit::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "rvit", version, about = "Patch-retention vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Print the retention plan of one sample.
    Mask(Mask),
    /// Tabulate mean MS3 retention against the similarity threshold.
    Calibrate(Calibrate),
    /// Train a network and write its checkpoint.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(Eval),
    /// Fit a linear head on a frozen checkpoint.
    Probe(Probe),
    /// Run a grid of experiments into a CSV.
    Sweep(Sweep),
    /// Analytic FLOPs and memory for a model at a retention ratio.
    Cost(Cost),
}

#[derive(Debug, Args)]
struct GenData {
    /// Scene spec JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square image extent.
    #[arg(long)]
    image: Option<usize>,
    /// Number of samples.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// First sample index.
    #[arg(long, default_value_t = 0)]
    offset: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Mask {
    #[arg(long, default_value = "ms1")]
    strategy: Strategy,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Sample key (MS1 without a dataset).
    #[arg(long)]
    key: Option<String>,
    /// Patch count (MS1 without a dataset).
    #[arg(long)]
    n: Option<usize>,
    /// Grid shape `HxW` for visualisation without a dataset.
    #[arg(long)]
    grid: Option<String>,
    /// Dataset directory holding the sample.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Write the retention mask as a PGM image.
    #[arg(long)]
    viz: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Calibrate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Comma-separated thresholds.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,0.95,0.99")]
    taus: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flags that override an experiment config file.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = read_json(&self.config)?;
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        if let Some(r) = self.ratio {
            cfg.train_ratio = r;
        }
        if self.tau.is_some() {
            cfg.tau = self.tau;
        }
        if let Some(p) = self.patch {
            cfg.model.patch = p;
        }
        if let Some(l) = self.lambda {
            cfg.data.scene.lambda = l;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    overrides: Overrides,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ms1")]
    strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Probe {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset the probe is fitted on.
    #[arg(long)]
    data: PathBuf,
    /// Dataset the probe is scored on.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Sweep {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall-clock seconds per cell (makes the CSV non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct Cost {
    /// Named model; only `vitb16` is built in.
    #[arg(long, default_value = "vitb16")]
    model: String,
    /// Model config JSON instead of a named model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square image extent.
    #[arg(long, default_value_t = 224)]
    image: usize,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    ratio: f64,
    /// JSON, or CSV when the path ends in `.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn emit_json(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Writes the effective configuration next to a CSV output.
fn echo_config(csv: &Path, config: &impl Serialize) -> Result<()> {
    let mut name = csv.as_os_str().to_owned();
    name.push(".config.json");
    fs::write(PathBuf::from(name), serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("grid {s:?} is not HxW")))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad grid {s:?}")));
    Ok((parse(h)?, parse(w)?))
}

/// Binary PGM with every grid cell drawn as a `scale × scale` block.
fn write_pgm(path: &Path, mask: &[u8], grid: (usize, usize)) -> Result<()> {
    const SCALE: usize = 8;
    let (gh, gw) = grid;
    let mut bytes = format!("P5\n{} {}\n255\n", gw * SCALE, gh * SCALE).into_bytes();
    for y in 0..gh * SCALE {
        for x in 0..gw * SCALE {
            bytes.push(if mask[(y / SCALE) * gw + x / SCALE] == 1 { 255 } else { 0 });
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn gen_data(a: &GenData) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => SceneSpec {
            height: 64,
            width: 64,
            channels: 3,
            lambda: 16.0,
            classes: 4,
            thresholds: vec![-1.0, 0.0, 1.0],
            label_block: 1,
            presence_fractions: vec![],
            seed: 0,
        },
    };
    if let Some(l) = a.lambda {
        spec.lambda = l;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(i) = a.image {
        spec.height = i;
        spec.width = i;
    }
    spec.validate()?;
    log::info!("scene {}", serde_json::to_string(&spec)?);
    let samples = generate_dataset(&spec, a.offset, a.n)?;
    write_dataset(&samples, &a.out)?;
    fs::write(a.out.join("scene.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    println!("wrote {} samples of {}x{}x{} to {}", a.n, spec.height, spec.width, spec.channels, a.out.display());
    Ok(())
}

fn mask(a: &Mask) -> Result<()> {
    let ratio_needed = || a.ratio.ok_or_else(|| Error::Config(format!("{} needs --ratio", a.strategy)));
    let (plan, grid): (RetentionPlan, (usize, usize)) = match &a.data {
        Some(dir) => {
            let samples = read_dataset(dir)?;
            let sample = samples.get(a.index).ok_or(Error::IndexOutOfRange {
                index: a.index,
                extent: samples.len(),
            })?;
            let g = partition(sample, a.patch)?;
            let plan = match a.strategy {
                Strategy::Ms1 => ms1_uniform(&SampleSeed::from_key(sample.key.clone()), ratio_needed()?, g.len())?,
                Strategy::Ms2 => ms2_diversity(&similarity_matrix(&g), ratio_needed()?)?,
                Strategy::Ms3 => ms3_plan(
                    &similarity_matrix(&g),
                    a.tau.ok_or_else(|| Error::Config("ms3 needs --tau".into()))?,
                )?,
            };
            (plan, (g.grid_h, g.grid_w))
        }
        None => {
            if a.strategy != Strategy::Ms1 {
                return Err(Error::Config(format!("{} needs --data to compute similarities", a.strategy)));
            }
            let key = a.key.clone().ok_or_else(|| Error::Config("--key or --data is required".into()))?;
            let grid = a.grid.as_deref().map(parse_grid).transpose()?;
            let n = match (a.n, grid) {
                (Some(n), _) => n,
                (None, Some((h, w))) => h * w,
                (None, None) => return Err(Error::Config("--n or --grid is required".into())),
            };
            let grid = grid.unwrap_or((1, n));
            if grid.0 * grid.1 != n {
                return Err(Error::Config(format!("grid {}x{} does not hold {n} patches", grid.0, grid.1)));
            }
            (ms1_uniform(&SampleSeed::from_key(key), ratio_needed()?, n)?, grid)
        }
    };
    if let Some(path) = &a.viz {
        write_pgm(path, &plan.mask(), grid)?;
        eprintln!("mask image written to {}", path.display());
    }
    match &a.out {
        Some(p) => fs::write(p, plan.to_json() + "\n")?,
        None => println!("{}", plan.to_json()),
    }
    Ok(())
}

fn calibrate(a: &Calibrate) -> Result<()> {
    let taus = a
        .taus
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad tau {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let samples = read_dataset(&a.data)?;
    let sims = samples
        .iter()
        .map(|s| Ok(similarity_matrix(&partition(s, a.patch)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = calibrate_threshold(&sims, &taus)?;
    match &a.out {
        Some(p) => {
            write_calibration_csv(fs::File::create(p)?, &rows)?;
            echo_config(p, &json!({"data": a.data, "patch": a.patch, "taus": taus}))?;
        }
        None => write_calibration_csv(std::io::stdout().lock(), &rows)?,
    }
    for r in &rows {
        eprintln!("tau {:>5}: mean retention {:.4}", r.tau, r.mean_retention);
    }
    Ok(())
}

fn train_cmd(a: &Train) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    log::info!("config {}", serde_json::to_string(&cfg)?);
    let data = prepare_data(&cfg.data)?;
    let outcome = train(&cfg, &data)?;
    save_checkpoint(&a.out, &outcome.network)?;
    let mut results = a.out.as_os_str().to_owned();
    results.push(".results.json");
    fs::write(
        PathBuf::from(&results),
        serde_json::to_string_pretty(&json!({"config": cfg, "losses": outcome.losses, "rows": outcome.rows}))? + "\n",
    )?;
    for r in &outcome.rows {
        println!(
            "train r={} eval r={}: {} = {:.4}",
            r.train_ratio,
            r.eval_ratio,
            r.metric_name,
            r.metric_value.unwrap_or(f64::NAN)
        );
    }
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &Eval) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let samples = read_dataset(&a.data)?;
    let result = evaluate(&net, &samples, a.strategy, a.ratio, a.tau)?;
    eprintln!("{} = {:.4} over {} samples", result.metric_name, result.value, result.samples);
    emit_json(
        a.out.as_deref(),
        &json!({
            "config": {"checkpoint": a.checkpoint, "data": a.data, "strategy": a.strategy, "ratio": a.ratio, "tau": a.tau},
            "result": result,
        }),
    )
}

fn probe_cmd(a: &Probe) -> Result<()> {
    let net = load_checkpoint(&a.checkpoint)?;
    let train = read_dataset(&a.data)?;
    let eval = read_dataset(&a.eval_data)?;
    let cfg = ProbeConfig {
        lr: a.lr,
        steps: a.steps,
        batch_size: a.batch,
        seed: a.seed,
    };
    let (_, result) = linear_probe(&net, &train, &eval, &cfg)?;
    eprintln!("probe {} = {:.4}", result.metric_name, result.value);
    emit_json(
        a.out.as_deref(),
        &json!({"config": {"checkpoint": a.checkpoint, "data": a.data, "eval_data": a.eval_data, "probe": cfg}, "result": result}),
    )
}

fn sweep_cmd(a: &Sweep) -> Result<()> {
    let grid: SweepGrid = read_json(&a.grid)?;
    let opts = SweepOptions {
        jobs: a.jobs,
        timing: a.timing,
    };
    let rows = sweep(&grid, &opts)?;
    write_rows_csv(fs::File::create(&a.out)?, &rows)?;
    echo_config(&a.out, &grid)?;
    let summary = summarize(&rows);
    let mut summary_path = a.out.as_os_str().to_owned();
    summary_path.push(".summary.csv");
    write_summary_csv(fs::File::create(PathBuf::from(summary_path))?, &summary)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("failed: seed {} eval r={}: {}", r.seed, r.eval_ratio, r.error.as_deref().unwrap_or(""));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in &summary {
        writeln!(
            out,
            "{} {} train r={} eval r={}: {} {:.4} ± {:.4} (n={})",
            s.row.task.as_str(),
            s.row.strategy,
            s.row.train_ratio,
            s.row.eval_ratio,
            s.row.metric_name,
            s.mean,
            s.std,
            s.n_seeds
        )?;
    }
    writeln!(out, "{} rows ({failed} failed) written to {}", rows.len(), a.out.display())?;
    Ok(())
}

fn cost_cmd(a: &Cost) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None if a.model.eq_ignore_ascii_case("vitb16") => ModelConfig::vit_base16(),
        None => return Err(Error::Config(format!("unknown model {:?}", a.model))),
    };
    if let Some(p) = a.patch {
        cfg.patch = p;
    }
    let extents = (a.image, a.image);
    let cmp = compare(&cfg, extents, a.ratio)?;
    let summary = format!(
        "r={}: {:.3} GFLOPs vs {:.3} full ({:.2}x), peak memory {:.1} MB vs {:.1} MB ({:.2}x)",
        a.ratio,
        cmp.masked.gflops,
        cmp.full.gflops,
        cmp.flops_ratio,
        cmp.masked.peak_mem_mb,
        cmp.full.peak_mem_mb,
        cmp.memory_ratio
    );
    // Without --out the JSON report owns standard output.
    if a.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    let name = a.config.as_ref().map_or(a.model.clone(), |p| p.display().to_string());
    match &a.out {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => {
            let rows: Vec<CostRow> = [1.0, a.ratio]
                .iter()
                .map(|&r| flops(&cfg, extents, r).map(|c| c.row(&name)))
                .collect::<Result<_>>()?;
            let mut f = fs::File::create(p)?;
            writeln!(f, "{COST_CSV_HEADER}")?;
            for r in rows {
                writeln!(f, "{}", r.to_csv())?;
            }
            echo_config(p, &json!({"model": cfg, "image": a.image, "ratio": a.ratio}))?;
        }
        out => emit_json(
            out.as_deref(),
            &json!({
                "config": {"model": cfg, "image": a.image, "ratio": a.ratio},
                "ratio": cmp.flops_ratio,
                "memory_ratio": cmp.memory_ratio,
                "full": cmp.full,
                "masked": cmp.masked,
            }),
        )?,
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Mask(a) => mask(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Cost(a) => cost_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RVIT_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

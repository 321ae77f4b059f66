//! `qvpr`: build, quantize, search, encode, evaluate and plan compact
//! place-recognition models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qvpr_core::backbone::{build_backbone, ArchConfig, Family};
use qvpr_core::format::{load_model, save_model};
use qvpr_core::fuse::{fuse_conv_bn, is_fused};
use qvpr_core::graph::ModelGraph;
use qvpr_core::perf::{
    bench_latency, check_memory, fit_k1_k2, plan_dim, read_bench_csv, write_bench_csv, BenchRow,
    LatencyModel, MemoryBudget, SUPPORTED_DIMS,
};
use qvpr_core::pooling::PoolingKind;
use qvpr_core::quant::{calibrate_activations, quantize_model, CalibrationMethod};
use qvpr_core::retrieval::{
    encode_db, generate_synthetic, load_dataset, load_ground_truth, recall_at_k, save_dataset,
    DescriptorDB, SyntheticConfig, INDEX_FILE,
};
use qvpr_core::search::{run_search, SearchConfig};
use qvpr_core::{qtns, Error, PrecisionConfig, Tensor};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "qvpr", version, about = "Quantized compact place-recognition toolkit")]
struct Cli {
    /// Worker threads (falls back to QVPR_THREADS, then all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a seeded backbone and write it as a VPRQ model
    Build(BuildArgs),
    /// Report per-tensor activation scales gathered on calibration inputs
    Calibrate(CalibrateArgs),
    /// Quantize a model under a per-layer precision list
    Quantize(QuantizeArgs),
    /// Fold batch normalization into the preceding convolutions
    Fuse(FuseArgs),
    /// Genetic search for a mixed-precision configuration
    Search(SearchArgs),
    /// Generate a synthetic place-recognition dataset directory
    GenData(GenDataArgs),
    /// Encode one side of a dataset into a descriptor database
    Encode(EncodeArgs),
    /// Compute recall@k for query and reference databases
    Eval(EvalArgs),
    /// Measure encode and retrieval latency
    Bench(BenchArgs),
    /// Recommend a descriptor dimension for a latency target
    Plan(PlanArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Architecture file ([model] and [block N] sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone family when no config file is given
    #[arg(long, default_value = "mini-mobilenet")]
    family: String,
    #[arg(long)]
    width: Option<f32>,
    #[arg(long)]
    depth: Option<usize>,
    /// Input shape as C,H,W
    #[arg(long)]
    input: Option<String>,
    /// Descriptor dimension (0 keeps the pooled width)
    #[arg(long)]
    dim: Option<usize>,
    /// spoc, mac, gem or netvlad
    #[arg(long)]
    pooling: Option<String>,
    /// Weight initialization seed
    #[arg(long)]
    seed: u64,
    /// Fold batch normalization before writing
    #[arg(long)]
    fuse: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Method {
    Maxabs,
    Kl,
}

impl From<Method> for CalibrationMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Maxabs => CalibrationMethod::MaxAbs,
            Method::Kl => CalibrationMethod::Kl,
        }
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// QTNS file, directory of QTNS files, or dataset directory
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, value_enum, default_value = "maxabs")]
    method: Method,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated bit-widths, one per quantizable layer (a single value applies to all)
    #[arg(long, conflicts_with = "precision_file")]
    precisions: Option<String>,
    /// File holding the precision list (e.g. written by `search`)
    #[arg(long = "precision-file")]
    precision_file: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "maxabs")]
    method: Method,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Average bit-width budget B
    #[arg(long)]
    budget: f64,
    /// Population size N
    #[arg(long, default_value_t = 16)]
    pop: usize,
    /// Offspring insertion limit G
    #[arg(long, default_value_t = 300)]
    gens: usize,
    /// Mutation probability p_m
    #[arg(long, default_value_t = 0.2)]
    mutation: f64,
    /// Tournament size C
    #[arg(long, default_value_t = 4)]
    tournament: usize,
    /// Calibration inputs used by the fitness, L
    #[arg(long, default_value_t = 8)]
    fitness_samples: usize,
    #[arg(long)]
    seed: u64,
    /// Write the best precision list here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-step best fitness as CSV
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    places: usize,
    #[arg(long, default_value_t = 4)]
    queries_per_place: usize,
    /// Sample shape as C,H,W
    #[arg(long, default_value = "3,32,32")]
    shape: String,
    /// Gaussian noise std (appearance change)
    #[arg(long, default_value_t = 0.3)]
    noise: f32,
    /// Maximum brightness offset (illumination change)
    #[arg(long, default_value_t = 0.2)]
    brightness: f32,
    /// Maximum shift in pixels (viewpoint change)
    #[arg(long, default_value_t = 2)]
    translation: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Side {
    References,
    Queries,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    side: Side,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    refs: PathBuf,
    /// `query_row,place_id` lines; defaults to the ids stored in the query database
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Comma-separated cut-offs
    #[arg(long, default_value = "1")]
    k: String,
    #[arg(long = "dataset-name", default_value = "synthetic")]
    dataset_name: String,
    #[arg(long = "model-name", default_value = "model")]
    model_name: String,
    #[arg(long, default_value = "fp32")]
    precision: String,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Database sizes, comma-separated
    #[arg(long = "n", default_value = "1000")]
    n_list: String,
    /// Descriptor dimensions, comma-separated
    #[arg(long = "d", default_value = "512,1024,2048,4096")]
    d_list: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Label for the precision column
    #[arg(long, default_value = "fp32")]
    precision: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Benchmark CSV to fit k1 and k2 from
    #[arg(long = "latency-csv", conflicts_with_all = ["k1", "k2"])]
    latency_csv: Option<PathBuf>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,
    /// Encode latency in seconds (overrides the CSV mean)
    #[arg(long = "tau-e")]
    tau_e: Option<f64>,
    /// Latency target in seconds
    #[arg(long)]
    target: f64,
    /// Database size
    #[arg(long)]
    n: usize,
    /// Candidate dimensions, comma-separated
    #[arg(long)]
    dims: Option<String>,
    /// Memory available for the database, in bytes
    #[arg(long)]
    memory: Option<u64>,
}

/// Failure categories mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| usage(format!("--{flag}: {t:?} is not a valid value")))
        })
        .collect()
}

fn parse_shape(flag: &str, s: &str) -> Result<[usize; 3], Failure> {
    let v: Vec<usize> = parse_list(flag, s)?;
    v.try_into()
        .map_err(|_| usage(format!("--{flag} expects C,H,W")))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Stacks calibration inputs: one QTNS file (`[L,C,H,W]` or `[C,H,W]`), a
/// dataset directory (its references), or a directory of QTNS files.
fn load_calib(path: &Path, shape: [usize; 3]) -> Result<Tensor, Failure> {
    if path.is_dir() && path.join(INDEX_FILE).exists() {
        return Ok(load_dataset(path)?.references);
    }
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "qtns"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let per: usize = shape.iter().product();
    let mut data = Vec::new();
    for f in &files {
        for t in qtns::decode_all(
            &fs::read(f).map_err(|e| Failure::Data(format!("cannot read {}: {e}", f.display())))?,
        )? {
            let t = t.cast_f32()?;
            let s = t.shape();
            let ok = (s.len() == 3 && s == shape) || (s.len() == 4 && s[1..] == shape);
            if !ok {
                return Err(Failure::Data(format!(
                    "{}: sample shape {s:?} does not match model input {shape:?}",
                    f.display()
                )));
            }
            data.extend_from_slice(t.as_f32()?);
        }
    }
    if data.is_empty() {
        return Err(Failure::Data(format!("no calibration samples found in {}", path.display())));
    }
    let n = data.len() / per;
    Ok(Tensor::from_f32(&[n, shape[0], shape[1], shape[2]], data)?)
}

fn fused(model: ModelGraph) -> Result<ModelGraph, Failure> {
    if is_fused(&model) {
        Ok(model)
    } else {
        Ok(fuse_conv_bn(&model)?)
    }
}

fn cmd_build(a: BuildArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Data(format!("cannot read {}: {e}", p.display())))?;
            ArchConfig::parse(&text)?
        }
        None => ArchConfig::new(a.family.parse::<Family>().map_err(|e| usage(e.to_string()))?),
    };
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(d) = a.depth {
        cfg.depth = d;
    }
    if let Some(s) = &a.input {
        cfg.input_shape = parse_shape("input", s)?;
    }
    if let Some(d) = a.dim {
        cfg.descriptor_dim = d;
    }
    if let Some(p) = &a.pooling {
        cfg.pooling = PoolingKind::parse(p).ok_or_else(|| usage(format!("--pooling: unknown head {p:?}")))?;
    }
    cfg.seed = a.seed;
    let mut model = build_backbone(&cfg)?;
    if a.fuse {
        model = fuse_conv_bn(&model)?;
    }
    save_model(&model, &a.out)?;
    println!(
        "arch={} params={} quantizable_layers={} descriptor_dim={}",
        model.arch,
        model.param_count(),
        model.quantizable_layers().len(),
        model.descriptor_dim()?
    );
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let f = fuse_conv_bn(&model)?;
    save_model(&f, &a.out)?;
    println!("layers {} -> {}", model.layers.len(), f.layers.len());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> CmdResult {
    let model = fused(load_model(&a.model)?)?;
    let calib = load_calib(&a.calib, model.input_shape)?;
    let scales = calibrate_activations(&model, &calib, a.method.into())?;
    let mut out = String::from("layer,kind,act_scale\n");
    for (&i, s) in model.quantizable_layers().iter().zip(&scales.layers) {
        out += &format!("{i},{},{s}\n", model.layers[i].kind_name());
    }
    if let Some(p) = model.pooling_index() {
        out += &format!("{p},pool,{}\n", scales.pooling);
    }
    emit(a.out.as_deref(), &out)
}

fn read_precisions(a: &QuantizeArgs, layers: usize) -> Result<PrecisionConfig, Failure> {
    let text = match (&a.precisions, &a.precision_file) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => fs::read_to_string(p)
            .map_err(|e| Failure::Data(format!("cannot read {}: {e}", p.display())))?
            .lines()
            .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .unwrap_or("")
            .to_string(),
        (None, None) => return Err(usage("one of --precisions or --precision-file is required")),
    };
    let cfg: PrecisionConfig = text.parse().map_err(|e: Error| usage(e.to_string()))?;
    Ok(if cfg.len() == 1 && layers > 1 {
        PrecisionConfig::uniform(cfg.0[0], layers)
    } else {
        cfg
    })
}

fn cmd_quantize(a: QuantizeArgs) -> CmdResult {
    let model = fused(load_model(&a.model)?)?;
    let cfg = read_precisions(&a, model.quantizable_layers().len())?;
    let calib = match &a.calib {
        Some(p) => Some(load_calib(p, model.input_shape)?),
        None => None,
    };
    let qm = quantize_model(&model, &cfg, calib.as_ref(), a.method.into())?;
    save_model(&qm.graph, &a.out)?;
    println!("precision={} mean_bits={}", cfg, cfg.mean_bits());
    Ok(())
}

fn cmd_search(a: SearchArgs) -> CmdResult {
    let model = fused(load_model(&a.model)?)?;
    let calib = load_calib(&a.calib, model.input_shape)?;
    let cfg = SearchConfig {
        population: a.pop,
        mutation_rate: a.mutation,
        tournament: a.tournament,
        budget: a.budget,
        generations: a.gens,
        seed: a.seed,
        fitness_samples: a.fitness_samples,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let r = run_search(&model, &calib, &cfg)?;
    if let Some(p) = &a.trace {
        let mut t = String::from("step,best_fitness\n");
        for (i, f) in r.trace.iter().enumerate() {
            t += &format!("{i},{f}\n");
        }
        write_text(p, &t)?;
    }
    if let Some(p) = &a.out {
        write_text(p, &format!("{}\n", r.best))?;
    }
    println!("best={}", r.best);
    println!("mean_bits={}", r.best.mean_bits());
    println!("fitness={}", r.best_fitness);
    println!("insertions={}", r.insertions);
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SyntheticConfig {
        places: a.places,
        queries_per_place: a.queries_per_place,
        input_shape: parse_shape("shape", &a.shape)?,
        noise: a.noise,
        brightness: a.brightness,
        translation: a.translation,
        seed: a.seed,
    };
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "references={} queries={}",
        ds.reference_places.len(),
        ds.query_places.len()
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.dataset)?;
    let (images, ids) = match a.side {
        Side::References => (&ds.references, ds.reference_places.clone()),
        Side::Queries => (&ds.queries, ds.query_places.clone()),
    };
    let db = encode_db(&model, images, ids)?;
    db.save(&a.out)?;
    println!("rows={} dim={}", db.len(), db.dim());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ks: Vec<usize> = parse_list("k", &a.k)?;
    let mut queries = DescriptorDB::load(&a.queries)?;
    let refs = DescriptorDB::load(&a.refs)?;
    if let Some(gt) = &a.gt {
        queries = queries.with_ids(load_ground_truth(gt)?)?;
    }
    let mut out = String::from("dataset,model,precision,k,recall\n");
    for k in ks {
        let r = recall_at_k(&queries, &refs, k)?;
        out += &format!("{},{},{},{k},{r}\n", a.dataset_name, a.model_name, a.precision);
    }
    emit(a.out.as_deref(), &out)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let ns: Vec<usize> = parse_list("n", &a.n_list)?;
    let ds: Vec<usize> = parse_list("d", &a.d_list)?;
    let rows: Vec<BenchRow> = bench_latency(&model, &ns, &ds, a.reps, a.seed)?
        .into_iter()
        .map(|sample| BenchRow {
            sample,
            precision: a.precision.clone(),
            repetitions: a.reps,
        })
        .collect();
    emit(a.out.as_deref(), &write_bench_csv(&rows))
}

fn cmd_plan(a: PlanArgs) -> CmdResult {
    let mut model = match (&a.latency_csv, a.k1, a.k2) {
        (Some(p), _, _) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Data(format!("cannot read {}: {e}", p.display())))?;
            let rows = read_bench_csv(&text)?;
            fit_k1_k2(&rows.into_iter().map(|r| r.sample).collect::<Vec<_>>())?
        }
        (None, Some(k1), Some(k2)) => LatencyModel {
            k1,
            k2,
            tau_e: 0.0,
            n_range: (a.n, a.n),
            d_range: (0, 0),
        },
        _ => return Err(usage("give --latency-csv or both --k1 and --k2")),
    };
    if model.k1 < 0.0 || model.k2 < 0.0 {
        return Err(usage("k1 and k2 must be non-negative"));
    }
    if let Some(t) = a.tau_e {
        model.tau_e = t;
    }
    let dims: Vec<usize> = match &a.dims {
        Some(s) => parse_list("dims", s)?,
        None => SUPPORTED_DIMS.to_vec(),
    };
    let plan = plan_dim(a.target, a.n, &model, &dims)?;
    println!("k1={}\nk2={}\ntau_e={}", model.k1, model.k2, model.tau_e);
    println!("{plan}");
    if let (Some(m), Some(d)) = (a.memory, plan.dim()) {
        let c = check_memory(MemoryBudget {
            memory_bytes: m,
            n: a.n as u64,
            d: d as u64,
        });
        println!("memory_required={}\nmemory_ok={}", c.required_bytes, c.pass);
    }
    Ok(())
}

fn init_threads(flag: Option<usize>) -> CmdResult {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("QVPR_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| usage(format!("QVPR_THREADS={v:?} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("thread count must be positive"));
        }
        // Ignore the error if a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Build(a) => cmd_build(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Search(a) => cmd_search(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Plan(a) => cmd_plan(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use transnext::backbone::erf::{erf_saliency, grid_to_pgm, grid_to_text, model_erf, ErfOptions, ErfToy, DEFAULT_STEP, TOY_CHANNELS};
use transnext::backbone::{count_flops, AnyTensor, Archive, MacConvention, Mode, Model, ModelConfig};
use transnext::kernel::{bench, BenchCase, BenchShape, BENCH_CSV_HEADER, DEFAULT_TILE};
use transnext::oracle::{rand_tensor, rng};
use transnext::{selftest, Error};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser)]
#[command(name = "transnext", version, about = "TransNeXt inference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count and FLOPs per stage.
    Info(InfoArgs),
    /// Classify an image stored in a tensor archive.
    Forward(ForwardArgs),
    /// Time the fused and naive window kernels.
    Bench(BenchArgs),
    /// Effective receptive field by finite differences.
    Erf(ErfArgs),
    /// Run the built-in oracle suites.
    Selftest,
}

#[derive(Args)]
struct InfoArgs {
    /// Stock variant (micro, tiny, small, base) or config file.
    #[arg(long, default_value = "micro")]
    config: String,
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long, default_value = "normal")]
    mode: Mode,
}

#[derive(Args)]
struct ForwardArgs {
    #[arg(long, default_value = "micro")]
    config: String,
    /// Weight archive; seeded initialization when absent.
    #[arg(long, conflicts_with = "seed")]
    weights: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Archive holding a tensor `image` of extents [3, H, W].
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "normal")]
    mode: Mode,
    /// Archive to write a tensor `logits` into.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Fused,
    Naive,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "both")]
    case: CaseArg,
    #[arg(long, default_value_t = 56)]
    h: usize,
    #[arg(long, default_value_t = 56)]
    w: usize,
    #[arg(long, default_value_t = 72)]
    c: usize,
    #[arg(long, default_value_t = 3)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyArg {
    Identity,
    Aggregated,
}

#[derive(Args)]
struct ErfArgs {
    /// Single-mixer toy; otherwise a full model given by --config.
    #[arg(long, value_enum, conflicts_with_all = ["config", "weights", "stage"])]
    toy: Option<ToyArg>,
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// 1-based stage whose center unit is probed.
    #[arg(long, default_value_t = 1)]
    stage: usize,
    /// Input side length.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value = "normal")]
    mode: Mode,
    /// Lift the 64×64 input guard.
    #[arg(long)]
    allow_large: bool,
    /// Output prefix; writes PREFIX.txt and PREFIX.pgm.
    #[arg(long)]
    output: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape(_) | Error::Config(_) | Error::Domain(_) => EXIT_USAGE,
            Error::Archive(_) | Error::ArchiveTensor { .. } | Error::Io(_) => EXIT_IO,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn echo_config(label: &str, cfg: &ModelConfig) {
    println!("# config: {label}");
    for line in cfg.to_config_string().lines() {
        println!("#   {line}");
    }
}

fn giga(v: u64) -> f64 {
    v as f64 / 1e9
}

fn cmd_info(a: InfoArgs) -> CmdResult {
    let cfg = ModelConfig::resolve(&a.config)?;
    let report = count_flops(&cfg, a.resolution, a.resolution, a.mode)?;
    println!("# transnext info");
    echo_config(&a.config, &cfg);
    println!("# resolution: {0}x{0}, mode: {1}", a.resolution, a.mode);
    println!(
        "# params: {:.3}M, FLOPs: {:.3}G (mac1), {:.3}G (mac2)",
        report.total_params() as f64 / 1e6,
        giga(report.total_flops(MacConvention::Mac1)),
        giga(report.total_flops(MacConvention::Mac2))
    );
    println!("scope,module,params,macs,flops_mac1,flops_mac2");
    let scope = |s: usize| if s == 0 { "head".to_string() } else { format!("stage{s}") };
    for m in &report.modules {
        println!(
            "{},{},{},{},{},{}",
            scope(m.stage),
            m.module,
            m.params,
            m.macs,
            m.flops(MacConvention::Mac1),
            m.flops(MacConvention::Mac2)
        );
    }
    let mac1 = report.per_stage(MacConvention::Mac1);
    let mac2 = report.per_stage(MacConvention::Mac2);
    for ((s, params, f1), (_, _, f2)) in mac1.into_iter().zip(mac2) {
        println!("{},all,{params},{f1},{f1},{f2}", scope(s));
    }
    println!(
        "model,all,{},{},{},{}",
        report.total_params(),
        report.total_macs(),
        report.total_flops(MacConvention::Mac1),
        report.total_flops(MacConvention::Mac2)
    );
    Ok(())
}

fn load_model(config: &ModelConfig, weights: Option<&PathBuf>, seed: u64) -> Result<Model<f32>, Error> {
    match weights {
        Some(p) => Model::load(config, p),
        None => Model::new_seeded(config, seed),
    }
}

fn cmd_forward(a: ForwardArgs) -> CmdResult {
    let cfg = ModelConfig::resolve(&a.config)?;
    let seed = a.seed.unwrap_or(0);
    println!("# transnext forward");
    echo_config(&a.config, &cfg);
    match &a.weights {
        Some(p) => println!("# weights: {}", p.display()),
        None => println!("# weights: seeded, seed: {seed}"),
    }
    let model = load_model(&cfg, a.weights.as_ref(), seed)?;
    let input = Archive::read(&a.input)?;
    let image = input
        .get("image")
        .ok_or_else(|| Error::ArchiveTensor { name: "image".into(), reason: "missing from input archive".into() })?
        .to_typed::<f32>();
    println!("# input: {} {:?}, mode: {}", a.input.display(), image.dims(), a.mode);
    let logits = model.forward(&image, a.mode)?;
    let mut out = Archive::new();
    out.insert("logits", AnyTensor::F32(logits.clone()));
    out.write(&a.output)?;
    println!("# output: {}", a.output.display());
    println!("rank,class,logit");
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&i, &j| logits.data()[j].total_cmp(&logits.data()[i]).then(i.cmp(&j)));
    for (r, &i) in order.iter().take(5).enumerate() {
        println!("{},{i},{}", r + 1, logits.data()[i]);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let shape = BenchShape { h: a.h, w: a.w, c: a.c, heads: a.heads, k: a.k };
    let cases: &[BenchCase] = match a.case {
        CaseArg::Fused => &[BenchCase::Fused],
        CaseArg::Naive => &[BenchCase::Naive],
        CaseArg::Both => &[BenchCase::Fused, BenchCase::Naive],
    };
    println!("# transnext bench");
    println!("# tile: {0}x{0}, dtype: f32, seed: 0, median of {1} timed iterations", a.tile, a.iters);
    println!("{BENCH_CSV_HEADER}");
    for &case in cases {
        let r = bench(case, shape, a.iters, a.tile)?;
        println!("{}", shape.csv_row(case, a.iters, &r));
    }
    Ok(())
}

fn cmd_erf(a: ErfArgs) -> CmdResult {
    let opts = ErfOptions { step: a.step, allow_large: a.allow_large };
    println!("# transnext erf");
    let grid = match (a.toy, &a.config) {
        (Some(toy), _) => {
            let img = rand_tensor(&mut rng(a.seed), &[TOY_CHANNELS, a.size, a.size]);
            let toy = match toy {
                ToyArg::Identity => ErfToy::Identity,
                ToyArg::Aggregated => ErfToy::aggregated(a.size, a.size, a.seed)?,
            };
            println!("# toy: {}", if matches!(toy, ErfToy::Identity) { "identity" } else { "aggregated" });
            erf_saliency(|x| toy.forward(x), &img, opts)?
        }
        (None, Some(spec)) => {
            let cfg = ModelConfig::resolve(spec)?;
            if a.stage == 0 || a.stage > cfg.stages.len() {
                return Err(Error::Config(format!("stage must be in 1..={}", cfg.stages.len())).into());
            }
            let model = load_model(&cfg, a.weights.as_ref(), a.seed)?.cast::<f64>();
            echo_config(spec, &cfg);
            println!("# stage: {}, mode: {}", a.stage, a.mode);
            let img = rand_tensor(&mut rng(a.seed), &[cfg.in_channels, a.size, a.size]);
            model_erf(&model, &img, a.stage - 1, a.mode, opts)?
        }
        (None, None) => return Err(Error::Config("erf needs --toy or --config".into()).into()),
    };
    let txt = a.output.with_extension("txt");
    let pgm = a.output.with_extension("pgm");
    std::fs::write(&txt, grid_to_text(&grid))?;
    std::fs::write(&pgm, grid_to_pgm(&grid))?;
    println!("# size: {0}x{0}, seed: {1}, step: {2:e}", a.size, a.seed, a.step);
    println!("file,rows,cols");
    println!("{},{},{}", txt.display(), a.size, a.size);
    println!("{},{},{}", pgm.display(), a.size, a.size);
    Ok(())
}

fn cmd_selftest() -> CmdResult {
    println!("# transnext selftest");
    println!("suite,status,invariant");
    match selftest::run(|s, outcome| {
        println!("{},{},{}", s.name, if outcome.is_ok() { "pass" } else { "FAIL" }, s.invariant);
    }) {
        Ok(n) => {
            println!("# {n} suites passed");
            Ok(())
        }
        Err(f) => Err(Failure {
            code: EXIT_SELFTEST,
            message: format!("self-test `{}` failed: {} ({})", f.suite.name, f.suite.invariant, f.message),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Info(a) => cmd_info(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Erf(a) => cmd_erf(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

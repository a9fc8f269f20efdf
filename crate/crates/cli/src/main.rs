mod bench;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use neuroscrub::equiv::{compare, sample_inputs, EquivalenceReport, Tolerance};
use neuroscrub::model::{gen_toy_model, read_model, write_model, Arch, Model};
use neuroscrub::scheme::{
    ber, embed, extract, keygen, EmbedBudget, Scheme, SignatureBits, WatermarkKey, DEFAULT_SIGNATURE,
};
use neuroscrub::transform::{attack, invert_plan, AttackConfig, ScaleMode, TransformPlan};

use bench::BenchConfig;

#[derive(Parser)]
#[command(name = "neuroscrub", version, about = "Function-preserving neuron transforms against white-box watermarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy model.
    GenModel {
        #[arg(long)]
        arch: Arch,
        /// Comma-separated layer widths (defaults to the arch's own).
        #[arg(long, value_delimiter = ',')]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a watermark key for a model.
    Keygen {
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = DEFAULT_SIGNATURE)]
        signature: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a key's signature into a model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = EmbedBudget::default().max_steps)]
        max_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read the signature back out of a model.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
    },
    /// Apply random invariant transforms and record the plan.
    Attack {
        #[arg(long)]
        model: PathBuf,
        /// Any of ls, ns, sf (comma-separated), or `unified`.
        #[arg(long, default_value = "unified")]
        transforms: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Scales::Pow2)]
        scales: Scales,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Undo a recorded plan.
    Invert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two models on seeded inputs. Fails if the tolerance is not met.
    Equiv {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 128)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative tolerance; bitwise comparison when absent.
        #[arg(long)]
        tol_rel: Option<f64>,
    },
    /// Run the scheme x transform BER matrix.
    Bench {
        /// TOML or JSON file with BenchConfig fields; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed count.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Md)]
        format: Format,
        /// Write the rendered report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Md,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scales {
    Pow2,
    Continuous,
}

#[derive(Debug)]
pub enum CliError {
    Core(neuroscrub::Error),
    Io { path: PathBuf, source: std::io::Error },
    Config(String),
    NotEquivalent(Box<EquivalenceReport>),
}

impl From<neuroscrub::Error> for CliError {
    fn from(e: neuroscrub::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Core(e) => json!({ "error": e.kind(), "message": e.to_string() }),
            CliError::Io { path, source } => json!({
                "error": "io",
                "path": path.display().to_string(),
                "message": source.to_string(),
            }),
            CliError::Config(msg) => json!({ "error": "config", "message": msg }),
            CliError::NotEquivalent(r) => json!({
                "error": "not_equivalent",
                "message": format!("max rel deviation {:e} outside tolerance", r.max_rel_dev),
                "report": r,
            }),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn load_model(path: &Path) -> CliResult<Model> {
    Ok(read_model(&read(path)?)?)
}

fn load_key(path: &Path) -> CliResult<WatermarkKey> {
    let text = String::from_utf8(read(path)?).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(WatermarkKey::from_json(&text)?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenModel { arch, widths, seed, out } => {
            let widths = (!widths.is_empty()).then_some(widths.as_slice());
            let m = gen_toy_model(arch, widths, seed)?;
            write(&out, write_model(&m)?)?;
            print_json(&json!({ "arch": arch.name(), "blocks": m.num_blocks(), "out": out }));
        }
        Command::Keygen {
            scheme,
            model,
            signature,
            seed,
            out,
        } => {
            let m = load_model(&model)?;
            let key = keygen(scheme, &m, &SignatureBits::from_text(&signature), seed)?;
            write(&out, key.to_json()?)?;
            print_json(&json!({ "scheme": scheme.name(), "bits": key.signature.len(), "out": out }));
        }
        Command::Embed {
            model,
            key,
            max_steps,
            out,
        } => {
            let key = load_key(&key)?;
            let wm = embed(&load_model(&model)?, &key, EmbedBudget { max_steps })?;
            let b = ber(&extract(&wm, &key)?, &key.signature)?;
            write(&out, write_model(&wm)?)?;
            print_json(&json!({ "ber": b, "out": out }));
        }
        Command::Extract { model, key, format } => {
            let key = load_key(&key)?;
            let bits = extract(&load_model(&model)?, &key)?;
            let b = ber(&bits, &key.signature)?;
            let text = bits.to_text_lossy();
            match format {
                Format::Json => print_json(&json!({ "bits": bits.to_string(), "ber": b, "decoded": text })),
                Format::Csv => println!("bits,ber,decoded\n{bits},{b},\"{}\"", text.replace('"', "\"\"")),
                Format::Md => {
                    println!("bits: {bits}");
                    println!("ber: {b:.4}");
                    println!("decoded: {text}");
                }
            }
        }
        Command::Attack {
            model,
            transforms,
            alpha,
            seed,
            scales,
            out,
            plan,
        } => {
            let cfg = AttackConfig {
                seed,
                alpha,
                transforms: transforms.parse()?,
                scale_mode: match scales {
                    Scales::Pow2 => ScaleMode::PowerOfTwo,
                    Scales::Continuous => ScaleMode::Continuous,
                },
            };
            let (a, p) = attack(&load_model(&model)?, &cfg)?;
            write(&out, write_model(&a)?)?;
            if let Some(path) = &plan {
                write(path, p.to_json()?)?;
            }
            print_json(&json!({ "units": p.units.len(), "out": out, "plan": plan }));
        }
        Command::Invert { model, plan, out } => {
            let text = String::from_utf8(read(&plan)?).map_err(|e| CliError::Config(e.to_string()))?;
            let m = invert_plan(&load_model(&model)?, &TransformPlan::from_json(&text)?)?;
            write(&out, write_model(&m)?)?;
            print_json(&json!({ "out": out }));
        }
        Command::Equiv {
            a,
            b,
            inputs,
            seed,
            tol_rel,
        } => {
            let (ma, mb) = (load_model(&a)?, load_model(&b)?);
            let xs = sample_inputs(seed, inputs, &ma.input_shape);
            let tol = tol_rel.map_or(Tolerance::Bitwise, Tolerance::rel);
            let report = compare(&ma, &mb, &xs, tol)?;
            if !report.passed {
                return Err(CliError::NotEquivalent(Box::new(report)));
            }
            print_json(&serde_json::to_value(&report).map_err(neuroscrub::Error::from)?);
        }
        Command::Bench {
            config,
            seeds,
            format,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => BenchConfig::load(path, &read(path)?)?,
                None => BenchConfig::default(),
            };
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            let report = bench::run(&cfg)?;
            let text = report.render(format)?;
            match out {
                Some(path) => write(&path, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("NEUROSCRUB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NEUROSCRUB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}

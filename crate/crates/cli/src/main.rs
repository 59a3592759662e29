use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repblocks::analyzer::{analyze_model, compare_structures, HardwareProfile};
use repblocks::arch::{
    build_model, forward_model, fuse_model, GraphMode, ModelSpec, NetworkGraph, Structure, TAP_NAMES,
};
use repblocks::init::{derive_seed, Init};
use repblocks::io::{collect_weights, export_weights, file_precision, import_weights};
use repblocks::tensor::{Dims, Element, Precision, Tensor4};
use repblocks::Error;

#[derive(Parser)]
#[command(name = "repblocks", version, about = "Build, fuse, verify and analyze re-parameterizable detector backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from a spec, print a summary and optionally export its weights.
    Build {
        #[command(flatten)]
        spec: SpecArg,
        /// Seed for random weights; without it weights are zero.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
        /// Write training-form weights here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Fuse a training-form weight file into inference form.
    Fuse {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare training-form and fused outputs on a seeded random input.
    Verify {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value = "1x3x64x64")]
        input: Dims,
        /// Training-form weights to verify instead of seeded random ones.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Parameter, FLOP and roofline report.
    Analyze {
        #[command(flatten)]
        spec: SpecArg,
        /// Analyze this weight file (its own form and precision).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        hw: HardwareArgs,
        #[arg(long, default_value = "1x3x640x640")]
        input: Dims,
        /// Analyze the fused form when building from the spec.
        #[arg(long)]
        fused: bool,
        #[arg(long)]
        precision: Option<Precision>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write the JSON report to this path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write seeded random weights for a spec.
    Export {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "f32")]
        precision: Precision,
        #[arg(long)]
        out: PathBuf,
        /// Export the fused form instead of the training form.
        #[arg(long)]
        fused: bool,
    },
    /// Load a weight file against a spec and print a summary.
    Import {
        #[command(flatten)]
        spec: SpecArg,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Compare pure rep-style and BepC3 stage bodies of one variant after fusion.
    Ablate {
        #[command(flatten)]
        spec: SpecArg,
        #[command(flatten)]
        hw: HardwareArgs,
        #[arg(long, default_value = "1x3x640x640")]
        input: Dims,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Args)]
struct SpecArg {
    /// Model spec JSON. A missing file named like `yolov6m-v2.json` resolves
    /// to that built-in table row.
    #[arg(long = "spec")]
    path: PathBuf,
}

#[derive(Args)]
struct HardwareArgs {
    /// Peak compute in FLOP/s.
    #[arg(long)]
    peak: f64,
    /// Memory bandwidth in bytes/s.
    #[arg(long)]
    bw: f64,
    #[arg(long, default_value = "custom")]
    hw_name: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(s) => f.write_str(s),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_spec(arg: &SpecArg) -> CliResult<ModelSpec> {
    let path = &arg.path;
    if !path.exists() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(s) = ModelSpec::all_named().into_iter().find(|s| s.name() == stem) {
            return Ok(s);
        }
    }
    Ok(ModelSpec::from_path(path)?)
}

impl HardwareArgs {
    fn profile(&self) -> CliResult<HardwareProfile> {
        Ok(HardwareProfile::new(self.hw_name.clone(), self.peak, self.bw)?)
    }
}

/// Precision of `weights`, checked against an explicit request.
fn weights_precision(weights: &Path, requested: Option<Precision>) -> CliResult<Precision> {
    let p = file_precision(weights)?;
    match requested {
        Some(r) if r != p => Err(CliError::Usage(format!(
            "{} holds {p:?} weights but --precision {r:?} was given",
            weights.display()
        ))),
        _ => Ok(p),
    }
}

macro_rules! dispatch {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn summary<T: Element>(g: &NetworkGraph<T>) -> String {
    let mut s = String::new();
    if let Some(spec) = &g.spec {
        s += &format!(
            "model {}: depth x{} width x{}, structure {}",
            spec.name(),
            spec.depth_multiplier,
            spec.width_multiplier,
            spec.structure
        );
        if let Some(r) = spec.partial_ratio {
            s += &format!(" (partial ratio {r})");
        }
        s.push('\n');
    }
    let rep: usize = g.blocks().map(|(_, _, b)| b.rep_conv_count()).sum();
    s += &format!(
        "form {:?}, precision {:?}: {} nodes, {} rep convs, {} parameters\n",
        g.mode,
        T::PRECISION,
        g.nodes.len(),
        rep,
        g.param_count()
    );
    for (name, &t) in TAP_NAMES.iter().zip(&g.taps) {
        let n = &g.nodes[t];
        s += &format!("tap {name}: {} ({} channels, stride {})\n", n.name, n.out_ch, n.stride);
    }
    s
}

fn build<T: Element>(spec: &ModelSpec, seed: Option<u64>, export: Option<&Path>) -> CliResult<()> {
    let init = seed.map_or(Init::Zeros, Init::Random);
    let g = build_model::<T>(spec, init)?;
    print!("{}", summary(&g));
    if let Some(path) = export {
        let f = export_weights(&g, path)?;
        println!("wrote {} tensors to {}", f.tensors.len(), path.display());
    }
    Ok(())
}

fn fuse<T: Element>(spec: &ModelSpec, weights: &Path, out: &Path) -> CliResult<()> {
    let g = import_weights::<T>(weights, spec)?;
    if g.mode == GraphMode::Fused {
        return Err(Error::AlreadyFused.into());
    }
    let f = fuse_model(&g)?;
    let file = export_weights(&f, out)?;
    println!(
        "fused {}: {} -> {} parameters, {} tensors written to {}",
        spec.name(),
        g.param_count(),
        f.param_count(),
        file.tensors.len(),
        out.display()
    );
    Ok(())
}

/// Returns the largest deviation over the three taps.
fn verify<T: Element>(
    spec: &ModelSpec,
    seed: u64,
    input: Dims,
    weights: Option<&Path>,
) -> CliResult<f64> {
    let g = match weights {
        Some(w) => import_weights::<T>(w, spec)?,
        None => build_model::<T>(spec, Init::Random(seed))?,
    };
    if g.mode == GraphMode::Fused {
        return Err(CliError::Usage("verify needs training-form weights".into()));
    }
    if input.c != spec.input_channels {
        return Err(CliError::Usage(format!(
            "input has {} channels, model expects {}",
            input.c, spec.input_channels
        )));
    }
    let f = fuse_model(&g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let x = Tensor4::<T>::random(input, &mut rng);
    let (a3, a4, a5) = forward_model(&g, &x)?;
    let (b3, b4, b5) = forward_model(&f, &x)?;
    println!("verify {} ({:?}) seed {seed} input {input}", spec.name(), T::PRECISION);
    let mut worst = 0.0f64;
    for (name, a, b) in [("P3", &a3, &b3), ("P4", &a4, &b4), ("P5", &a5, &b5)] {
        let d = a.max_abs_diff(b)?;
        println!(
            "  {name} {}: max |train - fused| = {d:.3e} (max |train| = {:.3e})",
            a.dims(),
            a.max_abs()
        );
        worst = worst.max(d);
    }
    Ok(worst)
}

fn analyze<T: Element>(
    spec: &ModelSpec,
    weights: Option<&Path>,
    fused: bool,
    input: Dims,
    hw: &HardwareProfile,
    format: Format,
    json: Option<&Path>,
) -> CliResult<()> {
    let g = match weights {
        Some(w) => import_weights::<T>(w, spec)?,
        None => {
            let g = build_model::<T>(spec, Init::Zeros)?;
            if fused {
                fuse_model(&g)?
            } else {
                g
            }
        }
    };
    let report = analyze_model(&g, input, hw)?;
    if let Some(path) = json {
        repblocks::io::write_atomic(path, report.to_json().as_bytes())?;
    }
    match format {
        Format::Table => print!("{report}"),
        Format::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn export<T: Element>(spec: &ModelSpec, seed: u64, fused: bool, out: &Path) -> CliResult<()> {
    let mut g = build_model::<T>(spec, Init::Random(seed))?;
    if fused {
        g = fuse_model(&g)?;
    }
    let f = export_weights(&g, out)?;
    println!(
        "exported {} ({:?}, {:?}): {} tensors, {} parameters to {}",
        spec.name(),
        g.mode,
        T::PRECISION,
        f.tensors.len(),
        g.param_count(),
        out.display()
    );
    Ok(())
}

fn import<T: Element>(spec: &ModelSpec, weights: &Path) -> CliResult<()> {
    let g = import_weights::<T>(weights, spec)?;
    g.validate()?;
    print!("{}", summary(&g));
    println!("loaded {} tensors from {}", collect_weights(&g).tensors.len(), weights.display());
    Ok(())
}

fn ablate(spec: &ModelSpec, input: Dims, hw: &HardwareProfile, format: Format) -> CliResult<()> {
    let pure = spec.with_structure(Structure::PureRep)?;
    let bep = spec.with_structure(Structure::BepC3)?;
    let gp = build_model::<f32>(&pure, Init::Zeros)?;
    let gb = build_model::<f32>(&bep, Init::Zeros)?;
    let label = |s: &ModelSpec| match s.partial_ratio {
        Some(r) => format!("{} bepc3 e={r}", s.name()),
        None => format!("{} pure_rep", s.name()),
    };
    let (lp, lb) = (label(&pure), label(&bep));
    let report = compare_structures(&[(lp.as_str(), &gp), (lb.as_str(), &gb)], input, hw)?;
    match format {
        Format::Table => print!("{report}"),
        Format::Json => println!("{}", report.to_json()),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Build { spec, seed, precision, export } => {
            let spec = load_spec(&spec)?;
            dispatch!(precision, build(&spec, seed, export.as_deref()))?;
        }
        Command::Fuse { spec, weights, out } => {
            let spec = load_spec(&spec)?;
            let p = weights_precision(&weights, None)?;
            dispatch!(p, fuse(&spec, &weights, &out))?;
        }
        Command::Verify { spec, seed, precision, tol, input, weights } => {
            let spec = load_spec(&spec)?;
            let p = match &weights {
                Some(w) => weights_precision(w, Some(precision))?,
                None => precision,
            };
            let worst = dispatch!(p, verify(&spec, seed, input, weights.as_deref()))?;
            let ok = worst <= tol;
            println!(
                "max deviation {worst:.3e} {} tolerance {tol:.3e}: {}",
                if ok { "<=" } else { ">" },
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Analyze { spec, weights, hw, input, fused, precision, format, json } => {
            let spec = load_spec(&spec)?;
            let hw = hw.profile()?;
            if weights.is_some() && fused {
                return Err(CliError::Usage("--fused applies only when analyzing a spec without --weights".into()));
            }
            let p = match &weights {
                Some(w) => weights_precision(w, precision)?,
                None => precision.unwrap_or(Precision::F32),
            };
            dispatch!(p, analyze(&spec, weights.as_deref(), fused, input, &hw, format, json.as_deref()))?;
        }
        Command::Export { spec, seed, precision, out, fused } => {
            let spec = load_spec(&spec)?;
            dispatch!(precision, export(&spec, seed, fused, &out))?;
        }
        Command::Import { spec, weights } => {
            let spec = load_spec(&spec)?;
            let p = weights_precision(&weights, None)?;
            dispatch!(p, import(&spec, &weights))?;
        }
        Command::Ablate { spec, hw, input, format } => {
            let spec = load_spec(&spec)?;
            ablate(&spec, input, &hw.profile()?, format)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

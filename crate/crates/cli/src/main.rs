use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use freqdeno::harness::gradcheck::{self, ProbeSize, DEFAULT_STEP, MODULE_TOLERANCE, PRIMITIVE_TOLERANCE};
use freqdeno::harness::sweep::{self, summary_table, Axis, SweepSettings};
use freqdeno::harness::{generate, train, ExperimentRecord, Task, ToyNet, TrainConfig};
use freqdeno::imageio::{self, export_gray, load_params, load_tensor, read_shape, save_params, save_tensor};
use freqdeno::spectral::{central_shift, dft2_forward, to_polar};
use freqdeno::tape::{fault, OpKind};
use freqdeno::{DenoConfig, DenoModule, Error, SqrtScaling, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

mod selftest;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

/// Stride used by the training commands unless `--stride` is given; keeps
/// the toy network under 10⁴ parameters.
const TOY_STRIDE: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "freqdeno", version, about = "Frequency-domain feature denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the module on a C×H×W tensor file.
    Denoise(DenoiseArgs),
    /// Finite-difference check of every primitive and module configuration.
    Gradcheck(GradcheckArgs),
    /// Train the toy network on synthetic speckle scenes.
    Experiment(ExperimentArgs),
    /// Ablation sweep along one axis (or all four).
    Sweep(SweepArgs),
    /// Fast invariant suite, including golden-file conformance.
    Selftest(SelftestArgs),
    /// Write the amplitude and phase gates as gray images and tensor files.
    ExportMaps(ExportArgs),
    /// Compare two tensor files elementwise.
    Diff(DiffArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Partition stride s (tiles are s×s).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, overrides_with = "no_refine_amp")]
    refine_amp: bool,
    #[arg(long)]
    no_refine_amp: bool,
    #[arg(long, overrides_with = "no_refine_phase")]
    refine_phase: bool,
    #[arg(long)]
    no_refine_phase: bool,
    /// Defaults to on when both branches are refined.
    #[arg(long, overrides_with = "no_token_exchange")]
    token_exchange: bool,
    #[arg(long)]
    no_token_exchange: bool,
    #[arg(long, overrides_with = "no_phase_decouple")]
    phase_decouple: bool,
    #[arg(long)]
    no_phase_decouple: bool,
    /// Defaults to on when the phase is decoupled.
    #[arg(long, overrides_with = "no_phase_align")]
    phase_align: bool,
    #[arg(long)]
    no_phase_align: bool,
    #[arg(long, value_enum, default_value_t = Scaling::Group)]
    sqrt_scaling: Scaling,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Scaling {
    Group,
    Token,
}

fn flag(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (_, true) => Some(false),
        (true, _) => Some(true),
        _ => None,
    }
}

impl ConfigArgs {
    fn resolve(&self, default_stride: usize) -> Result<DenoConfig, Error> {
        let amp = flag(self.refine_amp, self.no_refine_amp).unwrap_or(true);
        let phase = flag(self.refine_phase, self.no_refine_phase).unwrap_or(true);
        let decouple = flag(self.phase_decouple, self.no_phase_decouple).unwrap_or(true);
        let cfg = DenoConfig {
            stride: self.stride.unwrap_or(default_stride),
            refine_amplitude: amp,
            refine_phase: phase,
            token_exchange: flag(self.token_exchange, self.no_token_exchange).unwrap_or(amp && phase),
            phase_decouple: decouple,
            phase_align: flag(self.phase_align, self.no_phase_align).unwrap_or(decouple),
            sqrt_scaling: match self.sqrt_scaling {
                Scaling::Group => SqrtScaling::GroupCount,
                Scaling::Token => SqrtScaling::TokenCount,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    /// Input tensor file (C×H×W).
    #[arg(long)]
    input: PathBuf,
    /// Output directory; receives denoised.fdt and manifest.txt.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of parameter files to use instead of a seeded initialization.
    #[arg(long)]
    load_params: Option<PathBuf>,
    /// Write the parameters used to this directory.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Also write the report and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: perturb the adjoint of one primitive.
    #[arg(long, hide = true)]
    corrupt_adjoint: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Seed for scene generation. Trial k uses seed + k for initialization and the split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = freqdeno::harness::train::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = freqdeno::harness::train::DEFAULT_BATCH)]
    batch_size: usize,
    #[arg(long)]
    scenes: Option<usize>,
    /// Scene side length.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Speckle looks L.
    #[arg(long, default_value_t = 4.0)]
    looks: f64,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, value_enum, default_value_t = TaskArg::Denoise)]
    task: TaskArg,
    /// Record wall-clock runtime in reports (makes them non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum TaskArg {
    Denoise,
    Detect,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Detect => Task::Detect,
        }
    }
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory; receives experiment.txt and manifest.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_parser = ["stride", "refine", "exchange", "phase", "all"])]
    axis: String,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory; one subdirectory per axis.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Directory holding the golden fixtures.
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data"))]
    golden_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    load_params: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
    /// Largest allowed elementwise absolute difference.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

/// A failed command: exit code plus message.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Shape(_) | Error::Generation(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Format { .. } | Error::Corrupt { .. } | Error::Truncated { .. } => EXIT_IO,
            Error::Contract(_) | Error::Divergence { .. } => EXIT_VERIFY,
        };
        Failure(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure(EXIT_IO, format!("I/O error on {}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

/// Ordered `key = value` lines describing a run.
struct Manifest(Vec<(String, String)>);

impl Manifest {
    fn new(command: &str) -> Self {
        Manifest(vec![
            ("command".into(), command.into()),
            ("version".into(), freqdeno::VERSION.into()),
        ])
    }

    fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    fn config(&mut self, cfg: &DenoConfig) -> &mut Self {
        self.set("stride", cfg.stride)
            .set("refine_amplitude", cfg.refine_amplitude)
            .set("refine_phase", cfg.refine_phase)
            .set("token_exchange", cfg.token_exchange)
            .set("phase_decouple", cfg.phase_decouple)
            .set("phase_align", cfg.phase_align)
            .set("sqrt_scaling", cfg.sqrt_scaling.name())
            .set("config_id", cfg.id())
    }

    fn write(&self, dir: &Path) -> CmdResult {
        let mut s = String::new();
        for (k, v) in &self.0 {
            writeln!(s, "{k} = {v}").unwrap();
        }
        write_text(&dir.join("manifest.txt"), &s)
    }
}

/// Refuses to write `target` when it is the same file as `input`.
fn guard_input(input: &Path, target: &Path) -> CmdResult {
    if let (Ok(a), Ok(b)) = (input.canonicalize(), target.canonicalize()) {
        if a == b {
            return Err(Failure(
                EXIT_CONFIG,
                format!("refusing to overwrite input {}", input.display()),
            ));
        }
    }
    Ok(())
}

/// Loads a C×H×W input after checking its header against the partition.
fn load_input(path: &Path, cfg: &DenoConfig) -> Result<Tensor, Failure> {
    let shape = read_shape(path)?;
    let [_, h, w] = shape[..] else {
        return Err(Failure(
            EXIT_CONFIG,
            format!("{} has shape {shape:?}, expected C×H×W", path.display()),
        ));
    };
    cfg.partition(h, w)?;
    Ok(load_tensor(path)?)
}

fn build_module(cfg: DenoConfig, seed: u64, params: Option<&Path>) -> Result<DenoModule, Failure> {
    Ok(match params {
        Some(dir) => DenoModule::new(cfg, load_params(&cfg, dir)?)?,
        None => DenoModule::seeded(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?,
    })
}

fn cmd_denoise(a: &DenoiseArgs) -> CmdResult {
    let cfg = a.config.resolve(freqdeno::denodet::DEFAULT_STRIDE)?;
    let x = load_input(&a.input, &cfg)?;
    let module = build_module(cfg, a.seed, a.load_params.as_deref())?;
    let out = module.forward(&x)?;

    create_dir(&a.out)?;
    let target = a.out.join("denoised.fdt");
    guard_input(&a.input, &target)?;
    save_tensor(&out.output, &target)?;
    if let Some(dir) = &a.save_params {
        save_params(module.params(), dir)?;
    }
    println!("max imaginary residue: {:.3e}", out.imag_residue);
    println!("wrote {}", target.display());
    let mut m = Manifest::new("denoise");
    m.config(&cfg)
        .set("seed", a.seed)
        .set("input", a.input.display())
        .set("shape", format!("{:?}", x.shape()))
        .set(
            "params",
            a.load_params.as_ref().map_or("seeded".to_string(), |p| p.display().to_string()),
        )
        .set("output", "denoised.fdt");
    m.write(&a.out)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if let Some(name) = &a.corrupt_adjoint {
        let kind = OpKind::from_name(name)
            .ok_or_else(|| Failure(EXIT_CONFIG, format!("unknown op {name:?}")))?;
        eprintln!("test hook: corrupting the {kind} adjoint");
        fault::corrupt_adjoint(Some(kind));
    }
    let sizes = [
        ProbeSize::ACCEPTANCE,
        ProbeSize {
            channels: 1,
            height: 8,
            width: 16,
        },
    ];
    let mut reports = gradcheck::primitive_gradchecks(DEFAULT_STEP, PRIMITIVE_TOLERANCE)?;
    reports.extend(gradcheck::module_matrix(&sizes, DEFAULT_STEP, MODULE_TOLERANCE)?);
    fault::corrupt_adjoint(None);

    let mut text = String::new();
    for r in &reports {
        writeln!(text, "{r}").unwrap();
    }
    let worst = reports
        .iter()
        .max_by(|x, y| (x.max_rel_error / x.tolerance).total_cmp(&(y.max_rel_error / y.tolerance)))
        .expect("at least one check");
    writeln!(text, "worst: {worst}").unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    if failed.is_empty() {
        writeln!(text, "all {} checks passed", reports.len()).unwrap();
    } else {
        writeln!(text, "{} of {} checks failed:", failed.len(), reports.len()).unwrap();
        for r in &failed {
            writeln!(text, "  {}", r.label).unwrap();
        }
    }
    print!("{text}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("gradcheck.txt"), &text)?;
        let mut m = Manifest::new("gradcheck");
        m.set("step", DEFAULT_STEP)
            .set("module_tolerance", MODULE_TOLERANCE)
            .set("primitive_tolerance", PRIMITIVE_TOLERANCE)
            .set("corrupt_adjoint", a.corrupt_adjoint.as_deref().unwrap_or("none"));
        m.write(dir)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure(EXIT_VERIFY, format!("gradcheck failed: {}", failed[0].label)))
    }
}

fn train_manifest(m: &mut Manifest, t: &TrainArgs, trials: usize, epochs: usize, scenes: usize) {
    m.set("data_seed", t.seed)
        .set("trials", trials)
        .set("epochs", epochs)
        .set("lr", format!("{:?}", t.lr))
        .set("batch_size", t.batch_size)
        .set("scenes", scenes)
        .set("size", t.size)
        .set("looks", format!("{:?}", t.looks))
        .set("channels", t.channels)
        .set("task", Task::from(t.task).name())
        .set("timing", t.timing);
}

fn cmd_experiment(a: &ExperimentArgs) -> CmdResult {
    let cfg = a.config.resolve(TOY_STRIDE)?;
    let t = &a.train;
    let (trials, epochs, count) = (t.trials.unwrap_or(3), t.epochs.unwrap_or(50), t.scenes.unwrap_or(64));
    cfg.partition(t.size, t.size)?;
    let scenes = generate(t.seed, count, t.size, t.size, t.looks)?;
    let outcomes = (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let seed = t.seed + k;
            let net = ToyNet::new(t.channels, cfg, t.task.into(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let tc = TrainConfig {
                epochs,
                lr: t.lr,
                batch_size: t.batch_size,
                seed,
                timing: t.timing,
            };
            train(net, &scenes, &tc)
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let mut record = ExperimentRecord {
        initial_metrics: outcomes.iter().map(|o| o.initial_metric).collect(),
        reports: outcomes.into_iter().map(|o| o.report).collect(),
        margin: None,
    };
    if Task::from(t.task) == Task::Denoise && epochs > 0 {
        // 90% of the weakest trial's improvement, floored to four decimals
        record.margin = Some((record.min_improvement() * 0.9 * 1e4).floor() / 1e4);
    }
    for (init, r) in record.initial_metrics.iter().zip(&record.reports) {
        let monotone = r.epoch_losses.windows(2).all(|w| w[1] < w[0]);
        println!(
            "seed {}: held-out {:.6e} -> {:.6e}, epoch loss monotone: {monotone}",
            r.seed, init, r.final_metric
        );
    }
    if let Some(m) = record.margin {
        println!("margin: {m}");
    }
    create_dir(&a.out)?;
    write_text(&a.out.join("experiment.txt"), &record.to_text())?;
    let mut m = Manifest::new("experiment");
    m.config(&cfg);
    train_manifest(&mut m, t, trials, epochs, count);
    m.write(&a.out)
}

fn cmd_sweep(a: &SweepArgs) -> CmdResult {
    let base = a.config.resolve(TOY_STRIDE)?;
    let t = &a.train;
    let defaults = SweepSettings::default();
    let trials = t.trials.unwrap_or(defaults.seeds.len());
    let settings = SweepSettings {
        data_seed: t.seed,
        scenes: t.scenes.unwrap_or(defaults.scenes),
        size: t.size,
        looks: t.looks,
        channels: t.channels,
        task: t.task.into(),
        seeds: (0..trials as u64).map(|k| t.seed + k).collect(),
        train: TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.train.epochs),
            lr: t.lr,
            batch_size: t.batch_size,
            seed: 0,
            timing: t.timing,
        },
    };
    let axes: Vec<Axis> = match Axis::from_name(&a.axis) {
        Some(axis) => vec![axis],
        None => Axis::ALL.to_vec(),
    };
    create_dir(&a.out)?;
    for axis in axes {
        let results = sweep::ablation_sweep(axis, &base, &settings)?;
        let dir = a.out.join(axis.name());
        create_dir(&dir)?;
        for (k, r) in results.iter().enumerate() {
            let name = format!("row-{}-{}.txt", k + 1, r.row.label.replace([' ', '+'], "_"));
            write_text(&dir.join(name), &freqdeno::harness::report::write_reports(&r.reports))?;
        }
        let table = summary_table(axis, &results, settings.task);
        print!("{table}");
        write_text(&dir.join("summary.txt"), &table)?;
        if results.iter().any(|r| r.reports.iter().any(|t| !t.final_metric.is_finite())) {
            return Err(Failure(EXIT_VERIFY, format!("non-finite metric on axis {}", axis.name())));
        }
    }
    let mut m = Manifest::new("sweep");
    m.set("axis", &a.axis)
        .set("base_stride", base.stride)
        .set("sqrt_scaling", base.sqrt_scaling.name());
    train_manifest(&mut m, t, trials, settings.train.epochs, settings.scenes);
    m.write(&a.out)
}

fn cmd_selftest(a: &SelftestArgs) -> CmdResult {
    let start = std::time::Instant::now();
    selftest::run(&a.golden_dir).map_err(|e| Failure(EXIT_VERIFY, format!("selftest failed: {e}")))?;
    println!("selftest passed in {:.2?}", start.elapsed());
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> CmdResult {
    let cfg = a.config.resolve(freqdeno::denodet::DEFAULT_STRIDE)?;
    let x = load_input(&a.input, &cfg)?;
    let module = build_module(cfg, a.seed, a.load_params.as_deref())?;
    let (amp_gate, phase_gate) = module.export_modulation(&x)?;
    let polar = to_polar(&dft2_forward(&x)?)?;
    let amp = central_shift(&polar.amplitude)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut log_amp = vec![0.0; h * w];
    for k in 0..c {
        for (o, v) in log_amp.iter_mut().zip(&amp.data()[k * h * w..(k + 1) * h * w]) {
            *o += v.ln_1p() / c as f64;
        }
    }
    let log_amp = Tensor::new(vec![h, w], log_amp)?;

    create_dir(&a.out)?;
    let mut written = Vec::new();
    for (name, t) in [
        ("amplitude_gate", &amp_gate),
        ("phase_gate", &phase_gate),
        ("log_amplitude", &log_amp),
    ] {
        let pgm = a.out.join(format!("{name}.pgm"));
        let fdt = a.out.join(format!("{name}.fdt"));
        guard_input(&a.input, &fdt)?;
        export_gray(t, &pgm)?;
        save_tensor(t, &fdt)?;
        written.push(name);
    }
    println!("wrote {} to {}", written.join(", "), a.out.display());
    let mut m = Manifest::new("export-maps");
    m.config(&cfg)
        .set("seed", a.seed)
        .set("input", a.input.display())
        .set("layout", "centrally shifted")
        .set("sidecar", imageio::sidecar_path(Path::new("<map>.pgm")).display());
    m.write(&a.out)
}

fn cmd_diff(a: &DiffArgs) -> CmdResult {
    let x = load_tensor(&a.a)?;
    let y = load_tensor(&a.b)?;
    if x.shape() != y.shape() {
        return Err(Failure(
            EXIT_VERIFY,
            format!("shapes differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let d = x.max_abs_diff(&y);
    println!("max abs difference: {d:e}");
    if d <= a.tol {
        Ok(())
    } else {
        Err(Failure(EXIT_VERIFY, format!("difference {d:e} exceeds tolerance {:e}", a.tol)))
    }
}

fn init_threads() -> CmdResult {
    let Ok(v) = std::env::var("FREQDENO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure(EXIT_CONFIG, format!("FREQDENO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure(EXIT_CONFIG, format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Denoise(a) => cmd_denoise(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::ExportMaps(a) => cmd_export(a),
        Command::Diff(a) => cmd_diff(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

//! Command-line entry points. `run` parses arguments, executes one
//! subcommand and returns the process exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{build_dataset, load_dataset, read_manifest, DatasetConfig, PhantomEntry};
use crate::baseline::OptimizerSchedule;
use crate::env::{trajectory_csv, Dimensionality, MdpConfig};
use crate::error::{Result, VregError};
use crate::eval::{
    benchmark, cases_csv, summarize, summary_csv, summary_svg, AgentMethod, BenchmarkConfig,
    GroundTruthMethod, HierarchicalMethod, IdentityMethod, MutualInformationMethod,
    OracleAgentMethod, RegistrationMethod, TestCase,
};
use crate::geometry::{transform_from_params, ParamVector, RigidTransform, TransformJson};
use crate::hierarchy::{hierarchical_register, HierarchyConfig, StepRecord};
use crate::nn::{ArchSpec, Network};
use crate::policy::{
    greedy_register, loss_csv, train_drl, train_dsl, DrlConfig, DrlEnv, DrlPair, GreedyOptions,
    OraclePolicy, QFunction, ShuffledEpochs, TopKRandomization, TrainConfig,
};
use crate::study::{curves_csv, curves_svg, run_compare, verdict, CompareConfig};
use crate::volume::read_volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &VregError) -> i32 {
    match err {
        VregError::Config(_)
        | VregError::UnknownSpec(_)
        | VregError::DimMismatch(_)
        | VregError::ShapeMismatch(_) => EXIT_CONFIG,
        VregError::Io { .. } | VregError::Format { .. } => EXIT_IO,
        VregError::GimbalLock
        | VregError::Degenerate { .. }
        | VregError::OutOfBounds
        | VregError::DepthExceeded { .. }
        | VregError::NonFiniteLoss { .. }
        | VregError::EmptySelection
        | VregError::EmptyOverlap => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vreg", version, about = "Agent-based rigid image registration")]
pub struct Cli {
    /// Worker cap. Execution is single-threaded, so any value ≥ 1 is accepted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a training dataset from phantom specs.
    GenData(IoArgs),
    /// Train an action-value network.
    Train(TrainArgs),
    /// Register a floating volume to a reference volume.
    Register(RegisterArgs),
    /// Benchmark registration methods on a test manifest.
    Evaluate(IoArgs),
    /// Success-versus-training-steps study on the toy task.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    Dsl,
    Drl,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub io: IoArgs,
    #[arg(long, value_enum, default_value = "dsl")]
    pub mode: TrainMode,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub floating: PathBuf,
    /// Parameter file(s), or `oracle`. Hierarchical mode takes coarse then fine.
    #[arg(long, required = true)]
    pub params: Vec<String>,
    /// Optional JSON hierarchy configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub hierarchical: bool,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    /// Step budget of single-stage registration.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub randomize_top3: bool,
    /// Start pose as six comma-separated parameters.
    #[arg(long, allow_hyphen_values = true)]
    pub init: Option<String>,
    /// Ground truth as six comma-separated parameters, for the oracle and reports.
    #[arg(long, allow_hyphen_values = true)]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Study configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("VREG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(VregError::Config("--threads must be at least 1".into()));
        }
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&a.config, &a.out, cli.seed),
        Command::Train(a) => cmd_train(&a.io.config, &a.io.out, a.mode, cli.seed),
        Command::Register(a) => cmd_register(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(&a.config, &a.out, cli.seed),
        Command::Compare(a) => cmd_compare(a.config.as_deref(), &a.out, cli.seed),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| VregError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| VregError::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| VregError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| VregError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

/// Relative paths in a config resolve against the config's directory.
fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn cmd_gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: DatasetConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = build_dataset(&cfg, out)?;
    println!(
        "wrote {} samples to {}",
        manifest.samples.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchChoice {
    Desk,
    DeskNoBatchNorm,
    Full,
    Custom(ArchSpec),
}

impl ArchChoice {
    fn build(&self, dims: [usize; 3], arity: usize) -> ArchSpec {
        match self {
            ArchChoice::Desk => ArchSpec::desk(dims, arity, true),
            ArchChoice::DeskNoBatchNorm => ArchSpec::desk(dims, arity, false),
            ArchChoice::Full => ArchSpec::full(dims, arity),
            ArchChoice::Custom(spec) => spec.clone(),
        }
    }
}

fn default_arch() -> ArchChoice {
    ArchChoice::Desk
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Dataset manifest path.
    pub dataset: PathBuf,
    #[serde(default = "default_arch")]
    pub arch: ArchChoice,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub drl: DrlConfig,
}

pub const PARAMS_FILE: &str = "params.vpol";
pub const LOSS_FILE: &str = "loss.csv";

pub fn cmd_train(config: &Path, out: &Path, mode: TrainMode, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainRunConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let manifest_path = resolve(config, &cfg.dataset);
    let (net, curve) = match mode {
        TrainMode::Dsl => {
            let (manifest, samples) = load_dataset(&manifest_path)?;
            let first = samples
                .first()
                .ok_or_else(|| VregError::Config("dataset has no samples".into()))?;
            let arch = cfg.arch.build(
                first.observation.dims(),
                manifest.config.dimensionality.arity(),
            );
            let stream = ShuffledEpochs::new(&samples, cfg.train.seed);
            let trainer = train_dsl(arch, stream, &cfg.train)?;
            (trainer.net, trainer.curve)
        }
        TrainMode::Drl => {
            let manifest = read_manifest(&manifest_path)?;
            let dc = &manifest.config;
            if dc.dimensionality != Dimensionality::Two {
                return Err(VregError::Config(
                    "--mode drl needs a two-dimensional dataset".into(),
                ));
            }
            let pairs = dc
                .phantoms
                .iter()
                .map(|p| {
                    let pair = p.build()?.downsampled(dc.downsample);
                    Ok(DrlPair {
                        reference: pair.reference,
                        floating: pair.floating,
                        ground_truth: pair.ground_truth,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dims = pairs
                .first()
                .ok_or_else(|| VregError::Config("no phantoms listed".into()))?
                .reference
                .dims();
            let env = DrlEnv {
                pairs,
                start_range: dc.ranges.coarse.0,
                dim: dc.dimensionality,
                mdp: dc.mdp.clone(),
            };
            let arch = cfg.arch.build(dims, dc.dimensionality.arity());
            let trainer = train_drl(arch, &env, &cfg.train, &cfg.drl)?;
            (trainer.net, trainer.curve)
        }
    };
    create_dir(out)?;
    net.save(&out.join(PARAMS_FILE))?;
    write_file(&out.join(LOSS_FILE), loss_csv(&curve))?;
    println!(
        "trained {} steps, parameters in {}",
        cfg.train.total_steps,
        out.join(PARAMS_FILE).display()
    );
    Ok(())
}

fn parse_params(s: &str, flag: &str) -> Result<RigidTransform> {
    let vals = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| VregError::Config(format!("--{flag}: {e}")))?;
    let arr: [f64; 6] = vals
        .try_into()
        .map_err(|_| VregError::Config(format!("--{flag} needs six comma-separated values")))?;
    if arr.iter().any(|x| !x.is_finite()) {
        return Err(VregError::Config(format!("--{flag} values must be finite")));
    }
    Ok(transform_from_params(&ParamVector(arr)))
}

enum Policy {
    Oracle(OraclePolicy),
    Net(Box<Network>),
}

impl Policy {
    fn load(spec: &str, gt: RigidTransform, dim: Dimensionality, mdp: &MdpConfig) -> Result<Self> {
        if spec == "oracle" {
            Ok(Policy::Oracle(OraclePolicy::new(gt, dim, mdp.clone())))
        } else {
            Ok(Policy::Net(Box::new(Network::load(Path::new(spec))?)))
        }
    }

    fn as_q(&self) -> &dyn QFunction {
        match self {
            Policy::Oracle(o) => o,
            Policy::Net(n) => n.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleStageReport {
    pub steps: usize,
    pub final_params: [f64; 6],
    pub trajectory: Vec<StepRecord>,
}

pub fn cmd_register(a: &RegisterArgs, seed: Option<u64>) -> Result<()> {
    if a.steps == 0 {
        return Err(VregError::Config("--steps must be at least 1".into()));
    }
    let mut cfg: HierarchyConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => HierarchyConfig::default(),
    };
    if let Some(n) = a.n1 {
        cfg.n1 = n;
    }
    if let Some(n) = a.n2 {
        cfg.n2 = n;
    }
    if a.randomize_top3 {
        cfg.randomize = Some(TopKRandomization::top3(seed.unwrap_or(0)));
    }
    let t0 = a
        .init
        .as_deref()
        .map(|s| parse_params(s, "init"))
        .transpose()?
        .unwrap_or_else(RigidTransform::identity);
    let gt = a
        .ground_truth
        .as_deref()
        .map(|s| parse_params(s, "ground-truth"))
        .transpose()?;
    let reference = read_volume(&a.reference)?;
    let floating = read_volume(&a.floating)?;
    if reference.grid().is_2d() {
        cfg.dim = Dimensionality::Two;
    }
    let oracle_gt = gt.unwrap_or_else(RigidTransform::identity);
    let (t, report) = if a.hierarchical {
        let (coarse, fine) = match a.params.as_slice() {
            [one] if one == "oracle" => (one, one),
            [c, f] => (c, f),
            _ => {
                return Err(VregError::Config(
                    "--hierarchical needs coarse and fine --params, or a single `oracle`".into(),
                ))
            }
        };
        let coarse = Policy::load(coarse, oracle_gt, cfg.dim, &cfg.mdp)?;
        let fine = Policy::load(fine, oracle_gt, cfg.dim, &cfg.mdp)?;
        let (t, rep) = hierarchical_register(
            &reference,
            &floating,
            &t0,
            coarse.as_q(),
            fine.as_q(),
            &cfg,
            gt.as_ref(),
        )?;
        (t, to_json(&rep))
    } else {
        let [p] = a.params.as_slice() else {
            return Err(VregError::Config(
                "single-stage registration takes one --params".into(),
            ));
        };
        let policy = Policy::load(p, oracle_gt, cfg.dim, &cfg.mdp)?;
        let opts = GreedyOptions {
            steps: a.steps,
            dim: cfg.dim,
            mdp: cfg.mdp.clone(),
            randomize: cfg.randomize.clone(),
            ground_truth: gt,
        };
        let (t, traj) = greedy_register(&reference, &floating, &t0, policy.as_q(), &opts)?;
        if let Some(out) = &a.out {
            create_dir(out)?;
            write_file(&out.join("trajectory.csv"), trajectory_csv(&traj))?;
        }
        let rep = SingleStageReport {
            steps: traj.len(),
            final_params: t.params()?.0,
            trajectory: traj.iter().map(StepRecord::from).collect(),
        };
        (t, to_json(&rep))
    };
    let tj = to_json(&TransformJson::from_transform(&t, true)?);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("transform.json"), &tj)?;
        write_file(&out.join("report.json"), &report)?;
    }
    print!("{tj}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCaseEntry {
    pub name: String,
    pub phantom: PhantomEntry,
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestManifest {
    pub cases: Vec<TestCaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Returns the ground truth.
    Oracle,
    Identity,
    Agent {
        params: PathBuf,
        steps: usize,
        #[serde(default)]
        name: Option<String>,
    },
    OracleAgent {
        steps: usize,
    },
    Hierarchical {
        /// Coarse and fine parameter files; omit for per-case oracles.
        #[serde(default)]
        params: Option<[PathBuf; 2]>,
        #[serde(default)]
        config: HierarchyConfig,
    },
    MutualInformation {
        #[serde(default)]
        schedule: OptimizerSchedule,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRunConfig {
    pub test_manifest: PathBuf,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub mdp: MdpConfig,
}

fn build_method(
    spec: &MethodSpec,
    config: &Path,
    cfg: &EvaluateRunConfig,
) -> Result<Box<dyn RegistrationMethod>> {
    let dim = cfg.benchmark.dim;
    let positive = |steps: usize| {
        if steps == 0 {
            Err(VregError::Config(
                "method step budget must be at least 1".into(),
            ))
        } else {
            Ok(steps)
        }
    };
    Ok(match spec {
        MethodSpec::Oracle => Box::new(GroundTruthMethod),
        MethodSpec::Identity => Box::new(IdentityMethod),
        MethodSpec::Agent {
            params,
            steps,
            name,
        } => {
            let mut options = GreedyOptions::new(positive(*steps)?, dim);
            options.mdp = cfg.mdp.clone();
            Box::new(AgentMethod {
                name: name.clone().unwrap_or_else(|| "agent".into()),
                policy: Network::load(&resolve(config, params))?,
                options,
            })
        }
        MethodSpec::OracleAgent { steps } => Box::new(OracleAgentMethod {
            steps: positive(*steps)?,
            dim,
            mdp: cfg.mdp.clone(),
        }),
        MethodSpec::Hierarchical { params, config: hc } => {
            let networks = match params {
                Some([c, f]) => Some((
                    Network::load(&resolve(config, c))?,
                    Network::load(&resolve(config, f))?,
                )),
                None => None,
            };
            Box::new(HierarchicalMethod {
                networks,
                config: hc.clone(),
            })
        }
        MethodSpec::MutualInformation { schedule } => Box::new(MutualInformationMethod {
            schedule: schedule.clone(),
        }),
    })
}

pub fn cmd_evaluate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: EvaluateRunConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.benchmark.seed = s;
    }
    cfg.benchmark.range.validate()?;
    let manifest: TestManifest = read_config(&resolve(config, &cfg.test_manifest))?;
    if manifest.cases.is_empty() {
        return Err(VregError::Config("test manifest lists no cases".into()));
    }
    if cfg.methods.is_empty() {
        return Err(VregError::Config("no methods configured".into()));
    }
    let methods = cfg
        .methods
        .iter()
        .map(|m| build_method(m, config, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let cases = manifest
        .cases
        .iter()
        .map(|c| {
            if c.downsample == 0 {
                return Err(VregError::Config(format!(
                    "case {}: downsample must be at least 1",
                    c.name
                )));
            }
            Ok(TestCase {
                name: c.name.clone(),
                pair: c.phantom.build()?.downsampled(c.downsample),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn RegistrationMethod> = methods.iter().map(|m| m.as_ref()).collect();
    let rows = benchmark(&refs, &cases, &cfg.benchmark)?;
    let summary = summarize(&rows);
    create_dir(out)?;
    write_file(&out.join("cases.csv"), cases_csv(&rows))?;
    write_file(&out.join("summary.csv"), summary_csv(&summary))?;
    write_file(&out.join("summary.svg"), summary_svg(&summary))?;
    print!("{}", summary_csv(&summary));
    Ok(())
}

pub fn cmd_compare(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: CompareConfig = match config {
        Some(p) => read_config(p)?,
        None => CompareConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let points = run_compare(&cfg)?;
    let v = verdict(&points, cfg.target_success);
    create_dir(out)?;
    write_file(&out.join("curves.csv"), curves_csv(&points))?;
    write_file(&out.join("curves.svg"), curves_svg(&points))?;
    write_file(&out.join("verdict.json"), to_json(&v))?;
    print!("{}", to_json(&v));
    Ok(())
}

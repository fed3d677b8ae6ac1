use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivafuse::features::FeatureTensor;
use ivafuse::iva::{self, IvaConfig};
use ivafuse::nn::{checkpoint, gradcheck, Batch, Network, NetworkSpec, Variant};
use ivafuse::trainer::{self, FeatureMode, FeatureStore, Manifest, RunConfig, Split};
use ivafuse::{formats, synth, Error};

/// Speaker identification from IVA-fused LPC and MFCC features.
#[derive(Debug, Parser)]
#[command(name = "ivafuse", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract features and run per-sentence IVA into a cache directory.
    Extract(ExtractArgs),
    /// Run IVA on a single feature tensor file.
    Iva(IvaArgs),
    /// Train a network on a prepared cache.
    Train(TrainArgs),
    /// Report test-split accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Generate synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Compare analytic derivatives with finite differences.
    Gradcheck(GradcheckArgs),
    /// Seeded IVA separation benchmark on synthetic mixtures.
    IsiBench(IsiBenchArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` file overriding the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fit one demixing tensor on all training sentences.
    #[arg(long)]
    shared_demixing: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct IvaArgs {
    /// IVFT feature tensor.
    #[arg(long)]
    input: PathBuf,
    /// Output IVFW demixing tensor.
    #[arg(long)]
    out: PathBuf,
    /// Also write the separated components as IVFT.
    #[arg(long)]
    ifc: Option<PathBuf>,
    /// Write the accepted cost trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Directory for metrics.csv and best.ivfn.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    feature_mode: Option<FeatureMode>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    n3: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Inputs the checkpoint was trained on.
    #[arg(long, default_value = "y-pair")]
    feature_mode: FeatureMode,
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// WAV sentences of synthetic speakers plus manifest.csv.
    Speakers {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        speakers: usize,
        #[arg(long, default_value_t = 25)]
        sentences: usize,
        /// Sentences per speaker assigned to the test split.
        #[arg(long, default_value_t = 5)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dependent-SCV mixture: x.bin, s.bin (IVFT) and a.bin (IVFW).
    Mixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Target {
    Iva,
    Nn,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    target: Target,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct IsiBenchArgs {
    #[arg(long, default_value_t = 100)]
    trials: u64,
    /// Per-trial CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn resolve(args: &ConfigArgs) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(usage)?;
    }
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn announce(cfg: &RunConfig) {
    eprint!("# resolved config\n{}", cfg.render());
}

fn extract(a: ExtractArgs) -> CliResult {
    let mut cfg = resolve(&a.cfg)?;
    cfg.shared_demixing |= a.shared_demixing;
    cfg.frame.validate().and(cfg.iva.validate()).and(cfg.feature_dim().map(|_| ())).map_err(usage)?;
    announce(&cfg);
    let manifest = Manifest::load(&a.manifest)?;
    let store = trainer::prepare_dataset(&manifest, &cfg, &a.out)?;
    println!("cached {} sentences of {} speakers in {}", store.entries.len(), store.classes.len(), a.out.display());
    Ok(())
}

fn run_iva(a: IvaArgs) -> CliResult {
    let cfg = resolve(&a.cfg)?;
    cfg.iva.validate().map_err(usage)?;
    announce(&cfg);
    let x = FeatureTensor::from_matrices(formats::read_tensor(&a.input)?)?;
    let sep = iva::separate(&x, &IvaConfig { seed: cfg.seed, ..cfg.iva })?;
    formats::write_demixing(&a.out, &sep.demixing.matrices)?;
    if let Some(path) = &a.ifc {
        formats::write_tensor(path, &sep.ifc.slabs)?;
    }
    if let Some(path) = &a.trace {
        fs::write(path, sep.outcome.trace_csv()).map_err(Error::from)?;
    }
    println!(
        "iterations={} stop={:?} cost={:.9}",
        sep.outcome.iterations,
        sep.outcome.stop,
        sep.outcome.final_cost()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(v) = a.variant {
        cfg.network.variant = v;
        if a.feature_mode.is_none() && v == Variant::Ncnn && cfg.feature_mode == FeatureMode::YPair {
            cfg.feature_mode = FeatureMode::YTensor;
        }
    }
    if let Some(m) = a.feature_mode {
        cfg.feature_mode = m;
    }
    let net = &mut cfg.network;
    for (slot, v) in [(&mut net.n1, a.n1), (&mut net.n2, a.n2), (&mut net.n3, a.n3)] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.validate_training().map_err(usage)?;
    announce(&cfg);
    let store = FeatureStore::open(&a.cache)?;
    let outcome = trainer::train(&store, &cfg, Some(&a.out))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    println!(
        "best_epoch={} train_acc={:.2} eval_acc={}",
        outcome.best_epoch,
        last.train_acc,
        last.eval_acc.map_or("n/a".into(), |v| format!("{v:.2}"))
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let (net, state) = checkpoint::load(&a.checkpoint)?;
    a.feature_mode.check_variant(net.spec.variant).map_err(usage)?;
    let store = FeatureStore::open(&a.cache)?;
    if store.classes.len() != net.spec.n_classes {
        return Err(Failure::Runtime(Error::ShapeMismatch(format!(
            "checkpoint has {} classes, cache has {} speakers",
            net.spec.n_classes,
            store.classes.len()
        ))));
    }
    let (inputs, labels) = store.samples(Split::Test, a.feature_mode);
    if inputs.is_empty() {
        return Err(Failure::Runtime(Error::Manifest("cache has no test sentences".into())));
    }
    let acc = trainer::evaluate_acc(&net, &state, &inputs, &labels)?;
    println!("acc={acc:.2} n={}", labels.len());
    Ok(())
}

fn synth_cmd(c: SynthCommand) -> CliResult {
    match c {
        SynthCommand::Speakers { out, speakers, sentences, test, seed } => {
            let entries = synth::gen_synth_speakers(&out, speakers, sentences, test, seed).map_err(usage)?;
            println!("wrote {} sentences and manifest.csv to {}", entries.len(), out.display());
        }
        SynthCommand::Mixture { out, n, k, t, seed } => {
            let mix = synth::gen_scv_mixture(n, k, t, seed)?;
            fs::create_dir_all(&out).map_err(Error::from)?;
            formats::write_tensor(&out.join("x.bin"), &mix.observed.matrices().cloned().collect::<Vec<_>>())?;
            formats::write_tensor(&out.join("s.bin"), &mix.sources)?;
            formats::write_demixing(&out.join("a.bin"), &mix.mixing)?;
            println!("wrote x.bin, s.bin, a.bin to {}", out.display());
        }
    }
    Ok(())
}

/// Network of the derivative check: two 8 x 6 inputs, 4 channels, 2 classes.
fn tiny_pcnn() -> NetworkSpec {
    NetworkSpec {
        variant: Variant::PcnnI,
        n_features: 8,
        frames: 6,
        datasets: 2,
        n1: 2,
        n2: 2,
        n3: 2,
        c1: 4,
        c2: 4,
        c3: 4,
        dilation: 2,
        f1: 8,
        f2: 8,
        n_classes: 2,
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()));
    }
    match a.target {
        Target::Iva => {
            let (mut grad, mut hess) = (0.0f64, 0.0f64);
            for i in 0..a.instances as u64 {
                let seed = a.seed + i;
                let n = 2 + (seed % 4) as usize;
                let k = 1 + (seed % 3) as usize;
                let c = iva::derivative_check(n, k, 200, seed)?;
                grad = grad.max(c.grad_rel_err);
                hess = hess.max(c.hess_rel_err);
            }
            println!("gradient_max_rel_err={grad:.3e} hessian_max_rel_err={hess:.3e}");
            if grad >= 1e-5 || hess >= 1e-4 {
                return Err(Failure::Runtime(Error::InvalidConfig("derivative check above tolerance".into())));
            }
        }
        Target::Nn => {
            let spec = tiny_pcnn();
            let net = Network::new(spec.clone())?;
            let mut worst = (0.0f64, String::new());
            for i in 0..a.instances as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(a.seed + i);
                let inputs = (0..3)
                    .map(|_| {
                        (0..spec.datasets)
                            .map(|_| DMatrix::from_fn(spec.n_features, spec.frames, |_, _| rng.random_range(-1.0..1.0)))
                            .collect()
                    })
                    .collect();
                let batch = Batch { inputs, labels: vec![0, 1, 0] };
                let r = gradcheck(&net, &net.init_state(a.seed + i), &batch, 1e-5, 1e-6)?;
                if r.max_rel_err >= worst.0 {
                    worst = (r.max_rel_err, r.worst_param);
                }
            }
            println!("max_rel_err={:.3e} worst_param={}", worst.0, worst.1);
            if worst.0 >= 1e-3 {
                return Err(Failure::Runtime(Error::InvalidConfig("network gradient check above tolerance".into())));
            }
        }
    }
    Ok(())
}

fn isi_bench(a: IsiBenchArgs) -> CliResult {
    let cfg = resolve(&a.cfg)?;
    cfg.iva.validate().map_err(usage)?;
    announce(&cfg);
    let trials = (0..a.trials)
        .map(|i| synth::isi_trial(cfg.seed + i, &cfg.iva))
        .collect::<ivafuse::Result<Vec<_>>>()?;
    let csv = synth::isi_trials_csv(&trials);
    match &a.out {
        Some(path) => fs::write(path, &csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    let ok = trials.iter().filter(|t| t.joint_isi < 0.05).count();
    let mut secs: Vec<f64> = trials.iter().map(|t| t.seconds).collect();
    secs.sort_by(f64::total_cmp);
    let median = secs.get(secs.len() / 2).copied().unwrap_or(0.0);
    eprintln!("{ok}/{} trials with joint ISI < 0.05; median {median:.3} s", trials.len());
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Extract(a) => extract(a),
        Command::Iva(a) => run_iva(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(c) => synth_cmd(c),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::IsiBench(a) => isi_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = trainer::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

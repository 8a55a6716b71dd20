use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use multicos::ablate::{all_rows, fusion_rows, knowledge_rows, run_rows, structure_rows, submodule_rows, Group};
use multicos::checkpoint::Checkpoint;
use multicos::config::{AuxSource, Mode, RunConfig};
use multicos::eval::{predict, predict_batch, score, EvalOptions};
use multicos::metrics::format_table;
use multicos::ssm::Discretization;
use multicos::synth::{read_image, write_image, Dataset, DatasetSpec};
use multicos::train::TrainState;
use multicos::verify::{corrupted_fixture, registry, run_registry};
use multicos::{Error, Tensor};

#[derive(Parser)]
#[command(name = "multicos", version, about = "Multimodal camouflaged object segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk.
    GenData(GenArgs),
    /// Train a model and write a checkpoint plus a JSON loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate every ablation row.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable block.
    Gradcheck(GradcheckArgs),
    /// Predict a mask for one image.
    Infer(InferArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Toy,
    Compact,
    Paper,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Module {
    Lsfm,
    Ffm,
    Ssfm,
    Ssm,
    Cssm,
    Gate,
}

/// Configuration sources; flags override the JSON file, which overrides the
/// profile.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<CliMode>,
    #[arg(long, value_enum)]
    aux_source: Option<CliAux>,
    #[arg(long, value_enum)]
    discretization: Option<CliDisc>,
    /// Switch a fusion module off; repeatable.
    #[arg(long, value_enum)]
    disable: Vec<Module>,
    /// Enable the cross-modal knowledge learner.
    #[arg(long)]
    ckler: bool,
    /// Inject the knowledge vector into level-4 fusion (implies --ckler).
    #[arg(long)]
    injection: bool,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Dual,
    RgbOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliAux {
    Real,
    Pseudo,
    Zero,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliDisc {
    Taylor,
    Zoh,
}

impl ConfigArgs {
    fn resolve(&self) -> multicos::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => match self.profile.unwrap_or(Profile::Toy) {
                Profile::Toy => RunConfig::toy(),
                Profile::Compact => RunConfig::compact(),
                Profile::Paper => RunConfig::paper(),
            },
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.size {
            c.model.image_size = v;
        }
        if let Some(v) = self.steps {
            c.train.steps = v;
            c.train.epochs = None;
        }
        if self.epochs.is_some() {
            c.train.epochs = self.epochs;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.train.lr = v;
            c.train.lr_final = c.train.lr_final.min(v);
        }
        if let Some(m) = self.mode {
            c.model.mode = match m {
                CliMode::Dual => Mode::Dual,
                CliMode::RgbOnly => Mode::RgbOnly,
            };
        }
        if let Some(a) = self.aux_source {
            c.train.aux_source = match a {
                CliAux::Real => AuxSource::Real,
                CliAux::Pseudo => AuxSource::Pseudo,
                CliAux::Zero => AuxSource::Zero,
            };
        }
        if let Some(d) = self.discretization {
            c.model.discretization = match d {
                CliDisc::Taylor => Discretization::Taylor,
                CliDisc::Zoh => Discretization::Zoh,
            };
        }
        for m in &self.disable {
            let flag = match m {
                Module::Lsfm => &mut c.model.enable_lsfm,
                Module::Ffm => &mut c.model.enable_ffm,
                Module::Ssfm => &mut c.model.enable_ssfm,
                Module::Ssm => &mut c.model.enable_ssm,
                Module::Cssm => &mut c.model.enable_cssm,
                Module::Gate => &mut c.model.enable_gate,
            };
            *flag = false;
        }
        if self.ckler || self.injection {
            c.model.enable_ckler = true;
        }
        if self.injection {
            c.model.enable_injection = true;
        }
        if let Some(k) = self.kappa {
            c.data.kappa = k;
        }
        if let Some(s) = self.snr {
            c.data.snr = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Total segmentation scenes; a quarter are held out for testing unless
    /// --test is given.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    translation: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "model.bsfk")]
    out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with `.log.json`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    GroundTruth,
    Half,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Top-left crop fraction applied to the auxiliary image.
    #[arg(long, default_value_t = 1.0)]
    crop: f64,
    /// Withhold the auxiliary image; the knowledge learner synthesizes it.
    #[arg(long)]
    withhold_aux: bool,
    #[arg(long, value_enum)]
    aux_source: Option<CliAux>,
    /// Score a fixed predictor instead of a checkpoint.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliGroup {
    Structure,
    SubModules,
    Fusion,
    Knowledge,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Restrict to some groups; repeatable.
    #[arg(long, value_enum)]
    group: Vec<CliGroup>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Add a block with a deliberately wrong gradient.
    #[arg(long)]
    include_fixture: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    aux: Option<PathBuf>,
    #[arg(long, default_value = "mask.pgm")]
    out: PathBuf,
}

enum Failure {
    Lib(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::MalformedHeader(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

fn gen_data(a: &GenArgs) -> CmdResult {
    let c = a.cfg.resolve()?;
    let (train, test) = match (a.n, a.test) {
        (Some(n), Some(t)) => (n.saturating_sub(t), t.min(n)),
        (Some(n), None) => (n - n / 4, n / 4),
        (None, Some(t)) => (c.data.train_samples, t),
        (None, None) => (c.data.train_samples, c.data.test_samples),
    };
    let spec = DatasetSpec {
        seed: c.seed,
        size: c.model.image_size,
        train,
        test,
        translation: a.translation.unwrap_or(c.data.translation_samples),
        kappa: c.data.kappa,
        snr: c.data.snr,
        translation_kappa: c.data.translation_kappa,
    };
    let data = Dataset::generate(&spec)?;
    data.write(&a.out)?;
    println!(
        "wrote {} segmentation scenes ({} train, {} test) and {} translation pairs to {}",
        train + test,
        train,
        test,
        spec.translation,
        a.out.display()
    );
    Ok(())
}

fn load_data(root: &Path, size: usize) -> multicos::Result<Dataset> {
    let data = Dataset::load(root)?;
    if data.manifest.size != size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            data.manifest.size, size
        )));
    }
    Ok(data)
}

fn train_cmd(a: &TrainArgs) -> CmdResult {
    let mut state = match &a.resume {
        Some(p) => TrainState::resume(&Checkpoint::load(p)?)?,
        None => TrainState::new(&a.cfg.resolve()?)?,
    };
    let data = load_data(&a.data, state.config.model.image_size)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.json"));
    let mut log: Vec<multicos::train::LogEntry> = match (&a.resume, fs::read_to_string(&log_path)) {
        (Some(_), Ok(text)) => serde_json::from_str(&text).map_err(Error::from)?,
        _ => Vec::new(),
    };
    log.retain(|e| e.step < state.step);
    let total = state.total_steps(&data);
    let stop = a.max_steps.map_or(total, |m| (state.step + m).min(total));
    let every = state.config.train.log_every.max(1);
    while state.step < stop {
        let e = state.step(&data)?;
        if e.step % every == 0 || e.step + 1 == total {
            println!(
                "step {:>5} lr {:.2e} L_S {:.5} L_L {} L_t {:.5}",
                e.step,
                e.lr,
                e.l_s,
                e.l_l.map_or("-".into(), |v| format!("{v:.5}")),
                e.l_t
            );
        }
        log.push(e);
    }
    state.checkpoint().save(&a.out)?;
    fs::write(&log_path, serde_json::to_string_pretty(&log).map_err(Error::from)? + "\n")?;
    println!("saved {} at step {}", a.out.display(), state.step);
    Ok(())
}

fn aux_source(a: Option<CliAux>, default: AuxSource) -> AuxSource {
    match a {
        Some(CliAux::Real) => AuxSource::Real,
        Some(CliAux::Pseudo) => AuxSource::Pseudo,
        Some(CliAux::Zero) => AuxSource::Zero,
        None => default,
    }
}

fn eval_cmd(a: &EvalArgs) -> CmdResult {
    let report = match (a.baseline, &a.checkpoint) {
        (Some(b), _) => {
            let data = Dataset::load(&a.data)?;
            let preds: Vec<Tensor> = data
                .test
                .iter()
                .map(|s| match b {
                    Baseline::GroundTruth => s.mask.clone(),
                    Baseline::Half => Tensor::full(s.mask.shape(), 0.5),
                })
                .collect();
            score("test", &preds, &data.test)?
        }
        (None, Some(p)) => {
            let ckpt = Checkpoint::load(p)?;
            let model = ckpt.model()?;
            let data = load_data(&a.data, model.config.image_size)?;
            let opts = EvalOptions {
                source: aux_source(a.aux_source, ckpt.config.train.aux_source),
                withhold_aux: a.withhold_aux,
                crop: a.crop,
            };
            if !(opts.crop > 0.0 && opts.crop <= 1.0) {
                return Err(Error::Config("--crop must lie in (0, 1]".into()).into());
            }
            let preds = predict(&model, &data.test, &opts)?;
            score("test", &preds, &data.test)?
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --baseline".into()).into()),
    };
    print!("{}", format_table(std::slice::from_ref(&report)));
    if let Some(p) = &a.json {
        fs::write(p, report.to_json() + "\n")?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> CmdResult {
    let base = a.cfg.resolve()?;
    let data = load_data(&a.data, base.model.image_size)?;
    let rows = if a.group.is_empty() {
        all_rows(&base)
    } else {
        a.group
            .iter()
            .flat_map(|g| match g {
                CliGroup::Structure => structure_rows(&base),
                CliGroup::SubModules => submodule_rows(&base),
                CliGroup::Fusion => fusion_rows(&base),
                CliGroup::Knowledge => knowledge_rows(&base),
            })
            .collect()
    };
    let results = run_rows(&rows, &data, |r| {
        println!("{:<12?} {:<16} M {:.4} S {:.4}", r.group, r.name, r.report.m, r.report.s);
    })?;
    let mut reports = Vec::new();
    for r in &results {
        let mut rep = r.report.clone();
        let group = match r.group {
            Group::Structure => "structure",
            Group::SubModules => "sub_modules",
            Group::Fusion => "fusion",
            Group::Knowledge => "knowledge",
        };
        rep.dataset = format!("{group}/{}", r.name);
        reports.push(rep);
    }
    print!("{}", format_table(&reports));
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&results).map_err(Error::from)? + "\n")?;
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> CmdResult {
    let mut blocks = registry();
    if a.include_fixture {
        blocks.push(corrupted_fixture());
    }
    let outcomes = run_registry(&blocks, |o| {
        println!(
            "{} {:<20} tol {:.0e} checked {:>4} max_rel_err {:.3e}{}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.tol,
            o.checked,
            o.max_rel_err,
            o.error.as_deref().map_or(String::new(), |e| format!(" error: {e}"))
        );
    });
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} blocks passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn with_batch_dim(t: Tensor) -> multicos::Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

fn infer_cmd(a: &InferArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let rgb = with_batch_dim(read_image(&a.rgb)?)?;
    let aux = a.aux.as_ref().map(|p| read_image(p).and_then(with_batch_dim)).transpose()?;
    let (_, _, h, w) = rgb.dims4()?;
    let s = model.config.image_size;
    let resize = |t: &Tensor| multicos::autodiff::resize_tensor(t, s, s, multicos::autodiff::InterpMode::Bilinear);
    let (rgb_in, aux_in) = (resize(&rgb)?, aux.as_ref().map(resize).transpose()?);
    let probs = predict_batch(&model, &rgb_in, aux_in.as_ref(), ckpt.config.train.aux_source)?;
    let full = multicos::autodiff::resize_tensor(&probs, h, w, multicos::autodiff::InterpMode::Bilinear)?;
    write_image(&a.out, &full.map(|v| v.clamp(0.0, 1.0)).reshape(&[1, h, w])?)?;
    println!("wrote {}x{} mask to {}", w, h, a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Infer(a) => infer_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

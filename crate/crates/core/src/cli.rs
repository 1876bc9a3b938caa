//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration problem (including a
//! checkpoint built for another architecture), 3 runtime failure (numeric
//! abort, corrupt checkpoint, unreadable data, failed gradient check).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::checkpoint::load_checkpoint;
use crate::data::{self, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, GradCheckOptions};
use crate::layers::{LayerDescriptor, Mode};
use crate::metrics::{evaluate, predicted_label, write_listing};
use crate::models::{ArchId, Model, IMAGE_SIZE};
use crate::optim::{one_hot, AdamConfig};
use crate::report;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::train::{self, Augment, TrainConfig, TrainingSchedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "xcnn",
    version,
    about = "Train and evaluate small CNNs for COVID vs Normal chest X-rays"
)]
pub struct Cli {
    /// Worker threads (default: all available cores)
    #[arg(long, global = true, env = "XCNN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a COVID/ + Normal/ image folder into train/test/val and write the manifest
    Split(SplitArgs),
    /// Train a network on a manifest
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest
    Evaluate(EvaluateArgs),
    /// Classify one image
    Predict(PredictArgs),
    /// Compare backpropagated gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Redraw the learning curves from a history CSV
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Data root containing COVID/ and Normal/
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest CSV to write
    #[arg(long)]
    pub manifest: PathBuf,
    /// Do not add augmented minority-class training rows
    #[arg(long)]
    pub no_balance: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture: cnn1, cnn3 or cnn4
    #[arg(long)]
    pub arch: Option<ArchId>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Balanced, augmented second phase: on or off [default: on]
    #[arg(long)]
    pub augment: Option<Augment>,
    /// Seed for initialization, shuffling and dropout [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, history, curves and config echo
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Phase 1 epochs (original data) [default: 10]
    #[arg(long)]
    pub epochs1: Option<usize>,
    /// Phase 2 epochs [default: 50]
    #[arg(long)]
    pub epochs2: Option<usize>,
    /// Mini-batch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam beta1 [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8]
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    /// Keep a checkpoint for every epoch, not only last/best/final
    #[arg(long)]
    pub keep_epoch_checkpoints: bool,
    /// key=value file with any of the options above; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split to score: train, test or val
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Require the checkpoint to hold this architecture
    #[arg(long)]
    pub arch: Option<ArchId>,
    /// Directory for the prediction listing
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint file; without it a freshly initialized --arch network is used
    #[arg(long, required_unless_present = "arch")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub arch: Option<ArchId>,
    /// Initialization seed when no checkpoint is given
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckMode {
    /// Infer for networks with batch norm, train otherwise
    Auto,
    Train,
    Infer,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub arch: ArchId,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = CheckMode::Auto)]
    pub mode: CheckMode,
    #[arg(long, default_value_t = 1e-5)]
    pub perturbation: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub history: PathBuf,
    /// SVG file to write
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_)
        | Error::Parameter(_)
        | Error::Compatibility { .. }
        | Error::Version { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Report(a) => cmd_report(a),
    })
}

fn cmd_split(a: SplitArgs) -> Result<i32> {
    let files = data::scan_dataset(&a.data)?;
    let mut manifest = data::split_dataset(&files, a.seed)?;
    if !a.no_balance {
        manifest = data::balance_by_augmentation(
            &manifest,
            &mut rng::stream(a.seed, Purpose::Augment, &[]),
        );
    }
    manifest.write(&a.manifest)?;
    println!("split      COVID  Normal  total");
    for s in [Split::Train, Split::Test, Split::Val] {
        let orig: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.split == s && r.origin == data::Origin::Original)
            .collect();
        let covid = orig
            .iter()
            .filter(|r| r.label == data::Label::Covid)
            .count();
        println!(
            "{:<9} {:>6} {:>7} {:>6}",
            s.as_str(),
            covid,
            orig.len() - covid,
            orig.len()
        );
    }
    let aug = manifest.records.len() - files.len();
    if aug > 0 {
        println!("augmented training rows: {aug}");
    }
    Ok(EXIT_OK)
}

/// Effective training settings after merging flags, config file and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: ArchId,
    pub manifest: PathBuf,
    pub augment: Augment,
    pub out_dir: PathBuf,
    pub schedule: TrainingSchedule,
    pub keep_epoch_checkpoints: bool,
}

impl RunConfig {
    /// The `key=value` text echoed to `config.txt`; also accepted by `--config`.
    pub fn to_text(&self) -> String {
        let s = &self.schedule;
        format!(
            "arch={}\nmanifest={}\naugment={}\nseed={}\nepochs1={}\nepochs2={}\nbatch_size={}\nlr={}\nbeta1={}\nbeta2={}\nadam_epsilon={:e}\nout={}\n",
            self.arch,
            self.manifest.display(),
            self.augment,
            s.seed,
            s.phase1_epochs,
            s.phase2_epochs,
            s.batch_size,
            s.adam.lr,
            s.adam.beta1,
            s.adam.beta2,
            s.adam.epsilon,
            self.out_dir.display()
        )
    }
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!("{}:{}: expected key=value", path.display(), i + 1))
        })?;
        map.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(map)
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &BTreeMap<String, String>,
    key: &str,
    default: Option<T>,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = file.get(key) {
        return raw
            .parse()
            .map_err(|_| Error::Usage(format!("config value `{key}={raw}` is not valid")));
    }
    default.ok_or_else(|| {
        Error::Usage(format!(
            "missing required option --{}",
            key.replace('_', "-")
        ))
    })
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let file = match &a.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let known = [
        "arch",
        "manifest",
        "augment",
        "seed",
        "epochs1",
        "epochs2",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "adam_epsilon",
        "out",
    ];
    if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Usage(format!("unknown config key `{k}`")));
    }
    let d = TrainingSchedule::default();
    let ad = AdamConfig::default();
    let arch = match (&a.arch, file.get("arch")) {
        (Some(id), _) => *id,
        (None, Some(raw)) => raw
            .parse()
            .map_err(|e: Error| Error::Usage(e.to_string()))?,
        (None, None) => return Err(Error::Usage("missing required option --arch".into())),
    };
    let augment = match (a.augment, file.get("augment")) {
        (Some(m), _) => m,
        (None, Some(raw)) => raw.parse()?,
        (None, None) => Augment::On,
    };
    let schedule = TrainingSchedule {
        phase1_epochs: pick(a.epochs1, &file, "epochs1", Some(d.phase1_epochs))?,
        phase2_epochs: pick(a.epochs2, &file, "epochs2", Some(d.phase2_epochs))?,
        batch_size: pick(a.batch_size, &file, "batch_size", Some(d.batch_size))?,
        seed: pick(a.seed, &file, "seed", Some(d.seed))?,
        adam: AdamConfig {
            lr: pick(a.lr, &file, "lr", Some(ad.lr))?,
            beta1: pick(a.beta1, &file, "beta1", Some(ad.beta1))?,
            beta2: pick(a.beta2, &file, "beta2", Some(ad.beta2))?,
            epsilon: pick(a.adam_epsilon, &file, "adam_epsilon", Some(ad.epsilon))?,
        },
    };
    schedule
        .validate()
        .map_err(|e| Error::Usage(e.to_string()))?;
    Ok(RunConfig {
        arch,
        manifest: pick(a.manifest.clone(), &file, "manifest", None)?,
        augment,
        out_dir: pick(a.out.clone(), &file, "out", None)?,
        schedule,
        keep_epoch_checkpoints: a.keep_epoch_checkpoints,
    })
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let rc = resolve_train_config(&a)?;
    let manifest = DatasetManifest::read(&rc.manifest)?;
    fs::create_dir_all(&rc.out_dir).map_err(|e| Error::io(&rc.out_dir, e))?;
    let cfg_path = rc.out_dir.join("config.txt");
    fs::write(&cfg_path, rc.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let total = rc.schedule.total_epochs();
    let cfg = TrainConfig {
        schedule: rc.schedule,
        augment: rc.augment,
        out_dir: Some(rc.out_dir.clone()),
        keep_epoch_checkpoints: rc.keep_epoch_checkpoints,
    };
    let model = Model::build(rc.arch, rc.schedule.seed)?;
    println!(
        "{} with {} trainable parameters",
        rc.arch,
        model.param_count()
    );
    let (_, history) = train::train_model(model, &manifest, &cfg, |r| {
        println!(
            "epoch {:>3}/{total} phase {} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
            r.epoch, r.phase, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
        true
    })?;
    println!(
        "wrote {} epochs to {}",
        history.records.len(),
        rc.out_dir.join(train::HISTORY_FILE).display()
    );
    Ok(EXIT_OK)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32> {
    let model = load_checkpoint(&a.model, a.arch)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let (metrics, preds) = evaluate(&model, &manifest, a.split)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let listing = a.out.join(format!("predictions_{}.csv", a.split));
    write_listing(&preds, &metrics, &listing)?;
    println!("{} on {} split (COVID positive)", model.id(), a.split);
    println!("{metrics}");
    println!("listing    {}", listing.display());
    Ok(EXIT_OK)
}

fn cmd_predict(a: PredictArgs) -> Result<i32> {
    let model = match (&a.model, a.arch) {
        (Some(p), want) => load_checkpoint(p, want)?,
        (None, Some(id)) => Model::build(id, a.seed)?,
        (None, None) => return Err(Error::Usage("give --model or --arch".into())),
    };
    let img = data::load_sample(&a.image)?;
    let probs = model.infer(&img.reshape(&[1, IMAGE_SIZE, IMAGE_SIZE, 1])?)?;
    let p = probs.data();
    println!(
        "{} p_covid={:.6} p_normal={:.6}",
        predicted_label(p),
        p[data::Label::Covid.index()],
        p[data::Label::Normal.index()]
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let model = Model::build(a.arch, a.seed)?;
    let has_bn = model
        .layers
        .iter()
        .any(|l| matches!(l.desc, LayerDescriptor::BatchNorm { .. }));
    let mode = match a.mode {
        CheckMode::Train => Mode::Train,
        CheckMode::Infer => Mode::Infer,
        CheckMode::Auto if has_bn => Mode::Infer,
        CheckMode::Auto => Mode::Train,
    };
    let mut r = rng::stream(a.seed, Purpose::Probe, &[]);
    let x = Tensor::from_vec(
        &[1, IMAGE_SIZE, IMAGE_SIZE, 1],
        (0..IMAGE_SIZE * IMAGE_SIZE)
            .map(|_| r.random::<f64>())
            .collect(),
    )?;
    let y = one_hot(&[r.random_range(0..2)], 2)?;
    let opts = GradCheckOptions {
        perturbation: a.perturbation,
        tolerance: a.tolerance,
        mode,
        seed: a.seed,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let report = gradient_check(&model, &x, &y, &opts)?;
    print!("{report}");
    println!(
        "{} {:?} mode: max_rel_err {:.3e}, {} refined probes, {:.1}s: {}",
        a.arch,
        mode,
        report.max_rel_err(),
        report.refined_probes,
        start.elapsed().as_secs_f64(),
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed() {
        EXIT_OK
    } else {
        EXIT_RUNTIME
    })
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let history = report::read_history_csv(&a.history)?;
    report::render_curves_svg(&history, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_schedule_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in [
            "[default: 10]",
            "[default: 50]",
            "[default: 256]",
            "[default: 0.001]",
            "[default: on]",
        ] {
            assert!(help.contains(needle), "missing {needle} in\n{help}");
        }
        let top = Cli::command().render_long_help().to_string();
        assert!(top.contains("--threads") && top.contains("XCNN_THREADS"));
    }

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["xcnn", "train"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn config_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(
            &cfg,
            "arch=cnn1\nmanifest=m.csv\nout=o\nepochs1=3\nlr=0.01\n",
        )
        .unwrap();
        let c = cfg.to_str().unwrap();
        let rc = resolve_train_config(&train_args(&["--config", c, "--epochs1", "4"])).unwrap();
        assert_eq!(rc.arch, ArchId::Cnn1);
        assert_eq!(rc.schedule.phase1_epochs, 4);
        assert_eq!(rc.schedule.phase2_epochs, 50);
        assert_eq!(rc.schedule.adam.lr, 0.01);
        assert_eq!(rc.augment, Augment::On);

        // the echo parses back to the same settings
        let echo = dir.path().join("echo.txt");
        fs::write(&echo, rc.to_text()).unwrap();
        let again =
            resolve_train_config(&train_args(&["--config", echo.to_str().unwrap()])).unwrap();
        assert_eq!(again, rc);

        let err =
            resolve_train_config(&train_args(&["--manifest", "m", "--out", "o"])).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
        fs::write(&cfg, "arch=cnn1\nbogus=1\n").unwrap();
        assert!(resolve_train_config(&train_args(&["--config", c])).is_err());
    }

    #[test]
    fn unknown_arch_is_usage_error() {
        assert_eq!(run(["xcnn", "gradcheck", "--arch", "cnn2"]), EXIT_USAGE);
    }
}

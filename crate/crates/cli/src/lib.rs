//! Command-line driver: dataset generation, training, evaluation, mask
//! export and gradient checks, all reproducible from their flags.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use arnn::datagen::{self, DatasetSpec, GlyphSet, Split, Task, Variant};
use arnn::model::{
    self, AttentionKind, AttributeNet, LayerCheck, ModelConfig, TrainConfig, GRADCHECK_TOLERANCE,
};
use arnn::tensor::{read_checkpoint, write_checkpoint, ParamStore, DEFAULT_EPSILON};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{parse_config, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Library(arnn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Library(
                arnn::Error::Io(_) | arnn::Error::Format(_) | arnn::Error::Contract(_) | arnn::Error::Shape(_),
            ) => 2,
            CliError::Library(_) => 1,
        }
    }
}

impl From<arnn::Error> for CliError {
    fn from(e: arnn::Error) -> Self {
        CliError::Library(e)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "arnn", version, about = "Structured spatial attention experiments")]
pub struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// File of `key=value` lines using the long flag names. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a colored-digit dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(Train),
    /// Evaluate a checkpoint on one split.
    Eval(Eval),
    /// Write per-layer attention masks for some samples.
    ExportMasks(ExportMasks),
    /// Finite-difference gradient check of one attention layer.
    Gradcheck(Gradcheck),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::ExportMasks(_) => "export-masks",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Output directory [default: data]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ref, dist or bg [default: ref]
    #[arg(long)]
    pub variant: Option<String>,
    /// color-of-digit or digit-of-color [default: color-of-digit]
    #[arg(long)]
    pub task: Option<String>,
    /// Image side in pixels [default: 100]
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub digits_min: Option<usize>,
    #[arg(long)]
    pub digits_max: Option<usize>,
    #[arg(long)]
    pub scale_min: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// IDX image file to take digit glyphs from instead of the built-in font.
    #[arg(long, requires = "glyph_labels")]
    pub glyph_images: Option<PathBuf>,
    #[arg(long, requires = "glyph_images")]
    pub glyph_labels: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct Train {
    /// Dataset directory [default: data]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write [default: model.ckpt]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss log [default: <checkpoint>.log.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// arnn, arnn-sample, arnn-ind, arnn-ind-sample, brnn:γ, ctx, noctx, san or none [default: arnn]
    #[arg(long)]
    pub attention: Option<AttentionKind>,
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub san_embed: Option<usize>,
    /// Parameter initialization seed [default: 0]
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shuffling and sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val or test [default: test]
    #[arg(long)]
    pub split: Option<String>,
    /// key=value report [default: <checkpoint>.eval.txt]
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportMasks {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// First sample to export [default: 0]
    #[arg(long)]
    pub index: Option<usize>,
    /// Number of consecutive samples [default: 1]
    #[arg(long)]
    pub count: Option<usize>,
    /// Output directory [default: masks]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Gradcheck {
    #[arg(long)]
    pub attention: Option<AttentionKind>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub query_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Also check a two-stack 12×12 network end to end.
    #[arg(long)]
    pub model: bool,
}

/// Written next to every checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub attention: String,
    pub image_size: usize,
    pub in_channels: usize,
    pub query_dim: usize,
    pub classes: usize,
    pub stacks: usize,
    pub channels: usize,
    pub delta: usize,
    pub hidden: usize,
    pub san_embed: usize,
    pub init_seed: u64,
    pub train: BTreeMap<String, String>,
    pub run: BTreeMap<String, String>,
}

impl ModelCard {
    fn new(c: &ModelConfig, t: &TrainConfig, run: BTreeMap<String, String>) -> Self {
        let train = t
            .describe()
            .split(' ')
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            attention: c.attention.to_string(),
            image_size: c.image_size,
            in_channels: c.in_channels,
            query_dim: c.query_dim,
            classes: c.classes,
            stacks: c.stacks,
            channels: c.channels,
            delta: c.delta,
            hidden: c.hidden,
            san_embed: c.san_embed,
            init_seed: c.seed,
            train,
            run,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let attention = self
            .attention
            .parse()
            .map_err(|e| CliError::Usage(format!("model card names attention {:?}: {e}", self.attention)))?;
        Ok(ModelConfig {
            attention,
            image_size: self.image_size,
            in_channels: self.in_channels,
            query_dim: self.query_dim,
            classes: self.classes,
            stacks: self.stacks,
            channels: self.channels,
            delta: self.delta,
            hidden: self.hidden,
            san_embed: self.san_embed,
            seed: self.init_seed,
        })
    }

    /// Training settings as recorded at train time.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let get = |k: &str| self.train.get(k);
        TrainConfig {
            lr: get("lr").and_then(|v| v.parse().ok()).unwrap_or(d.lr),
            beta1: get("beta1").and_then(|v| v.parse().ok()).unwrap_or(d.beta1),
            beta2: get("beta2").and_then(|v| v.parse().ok()).unwrap_or(d.beta2),
            eps: get("eps").and_then(|v| v.parse().ok()).unwrap_or(d.eps),
            batch: get("batch").and_then(|v| v.parse().ok()).unwrap_or(d.batch),
            epochs: get("epochs").and_then(|v| v.parse().ok()).unwrap_or(d.epochs),
            seed: get("train_seed").and_then(|v| v.parse().ok()).unwrap_or(d.seed),
        }
    }
}

pub fn card_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".json")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => {
            let path = cli.workdir.join(path);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            parse_config(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => BTreeMap::new(),
    };
    let mut settings = Settings::new(file);
    let ctx = Ctx { workdir: cli.workdir, command: cli.command.name() };
    match cli.command {
        Command::GenData(a) => gen_data(&ctx, a, &mut settings, out),
        Command::Train(a) => train(&ctx, a, &mut settings, out),
        Command::Eval(a) => eval(&ctx, a, &mut settings, out),
        Command::ExportMasks(a) => export_masks(&ctx, a, &mut settings, out),
        Command::Gradcheck(a) => gradcheck(a, &mut settings, out),
    }
}

struct Ctx {
    workdir: PathBuf,
    command: &'static str,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn run_record(&self, settings: &Settings) -> BTreeMap<String, String> {
        let mut run = settings.used().clone();
        run.insert("command".into(), self.command.into());
        run
    }
}

fn write_out(out: &mut dyn Write, text: std::fmt::Arguments) -> Result<(), CliError> {
    out.write_fmt(text).map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn gen_data(ctx: &Ctx, a: GenData, s: &mut Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let d = DatasetSpec::default();
    let dir_arg = s.get("out", a.out.map(|p| p.display().to_string()), "data".into())?;
    let variant_name = s.get("variant", a.variant, "ref".into())?;
    let variant =
        Variant::parse(&variant_name).ok_or_else(|| CliError::Usage(format!("unknown variant {variant_name:?}")))?;
    let task_name = s.get("task", a.task, Task::ColorOfDigit.name().into())?;
    let task = Task::parse(&task_name).ok_or_else(|| CliError::Usage(format!("unknown task {task_name:?}")))?;
    let spec = DatasetSpec {
        variant,
        task,
        image_size: s.get("size", a.size, d.image_size)?,
        train: s.get("train", a.train, d.train)?,
        val: s.get("val", a.val, d.val)?,
        test: s.get("test", a.test, d.test)?,
        digits_min: s.get("digits-min", a.digits_min, d.digits_min)?,
        digits_max: s.get("digits-max", a.digits_max, d.digits_max)?,
        scale_min: s.get("scale-min", a.scale_min, d.scale_min)?,
        scale_max: s.get("scale-max", a.scale_max, d.scale_max)?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    let images = s.opt("glyph-images", a.glyph_images.map(|p| p.display().to_string()))?;
    let labels = s.opt("glyph-labels", a.glyph_labels.map(|p| p.display().to_string()))?;
    let force = s.switch("force", a.force)?;
    let glyphs = match (images, labels) {
        (Some(i), Some(l)) => {
            let (ip, lp) = (ctx.path(Path::new(&i)), ctx.path(Path::new(&l)));
            let ib = fs::read(&ip).map_err(|e| io_err(&ip, e))?;
            let lb = fs::read(&lp).map_err(|e| io_err(&lp, e))?;
            GlyphSet::from_idx(&ib, &lb)?
        }
        (None, None) => GlyphSet::builtin(),
        _ => return Err(CliError::Usage("glyph-images and glyph-labels go together".into())),
    };
    let dir = ctx.path(Path::new(&dir_arg));
    if dir.is_file() {
        return Err(io_err(&dir, "exists and is not a directory"));
    }
    if dir.is_dir() {
        let non_empty = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
            }
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
    }
    let data = datagen::generate(&spec, &glyphs)?;
    datagen::write_dataset(&dir, &data, ctx.run_record(s))?;
    write_out(
        out,
        format_args!(
            "wrote {} train / {} val / {} test samples ({} {}, {}²) to {}\n",
            spec.train,
            spec.val,
            spec.test,
            spec.variant.name(),
            spec.task.name(),
            spec.image_size,
            dir.display()
        ),
    )
}

fn load_data(ctx: &Ctx, s: &mut Settings, flag: Option<PathBuf>) -> Result<datagen::Dataset, CliError> {
    let dir = ctx.path(Path::new(&s.get("data", flag.map(|p| p.display().to_string()), "data".into())?));
    if !dir.join(datagen::MANIFEST_FILE).is_file() {
        return Err(io_err(&dir, format!("no {} here; run gen-data first", datagen::MANIFEST_FILE)));
    }
    Ok(datagen::read_dataset(&dir)?)
}

fn train(ctx: &Ctx, a: Train, s: &mut Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(ctx, s, a.data)?;
    let ckpt = ctx.path(Path::new(&s.get("checkpoint", a.checkpoint.map(|p| p.display().to_string()), "model.ckpt".into())?));
    let log_path = match s.opt("log", a.log.map(|p| p.display().to_string()))? {
        Some(p) => ctx.path(Path::new(&p)),
        None => sibling(&ckpt, ".log.csv"),
    };
    let task = data.spec.task;
    let base = ModelConfig::new(AttentionKind::Arnn, data.spec.image_size, task.query_dim(), task.classes());
    let config = ModelConfig {
        attention: s.get("attention", a.attention, base.attention)?,
        stacks: s.get("stacks", a.stacks, base.stacks)?,
        channels: s.get("channels", a.channels, base.channels)?,
        delta: s.get("delta", a.delta, base.delta)?,
        hidden: s.get("hidden", a.hidden, base.hidden)?,
        san_embed: s.get("san-embed", a.san_embed, base.san_embed)?,
        seed: s.get("init-seed", a.init_seed, base.seed)?,
        ..base
    };
    let d = TrainConfig::default();
    let tc = TrainConfig {
        lr: s.get("lr", a.lr, d.lr)?,
        beta1: s.get("beta1", a.beta1, d.beta1)?,
        beta2: s.get("beta2", a.beta2, d.beta2)?,
        eps: s.get("eps", a.eps, d.eps)?,
        batch: s.get("batch", a.batch, d.batch)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    let mut store = ParamStore::new();
    let net = AttributeNet::new(&mut store, config.clone())?;
    let file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let history = model::train(&net, &mut store, &data, &tc, &mut log)?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    write_checkpoint(&store, &ckpt).map_err(|e| match e {
        arnn::Error::Io(e) => io_err(&ckpt, e),
        e => e.into(),
    })?;
    let card = ModelCard::new(&config, &tc, ctx.run_record(s));
    let card_file = card_path(&ckpt);
    fs::write(&card_file, serde_json::to_string_pretty(&card).expect("card serializes") + "\n")
        .map_err(|e| io_err(&card_file, e))?;
    if let Some(last) = history.entries.iter().rev().find(|e| e.split == "val") {
        write_out(out, format_args!("epoch {} val loss {:.4} accuracy {:.4}\n", last.epoch, last.loss, last.accuracy))?;
    }
    write_out(out, format_args!("checkpoint {}\nlog {}\n", ckpt.display(), log_path.display()))
}

/// Rebuilds a trained network from a checkpoint and its model card.
pub fn load_model(ckpt: &Path) -> Result<(AttributeNet, ParamStore, ModelCard), CliError> {
    let card_file = card_path(ckpt);
    let text = fs::read_to_string(&card_file).map_err(|e| io_err(&card_file, e))?;
    let card: ModelCard =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", card_file.display())))?;
    let mut store = ParamStore::new();
    let net = AttributeNet::new(&mut store, card.model_config()?)?;
    read_checkpoint(&mut store, ckpt).map_err(|e| match e {
        arnn::Error::Io(e) => io_err(ckpt, e),
        e => e.into(),
    })?;
    Ok((net, store, card))
}

fn load_for_split(
    ctx: &Ctx,
    s: &mut Settings,
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: Option<String>,
) -> Result<(datagen::Dataset, Split, PathBuf, AttributeNet, ParamStore, ModelCard), CliError> {
    let data = load_data(ctx, s, data)?;
    let ckpt = ctx.path(Path::new(&s.get("checkpoint", checkpoint.map(|p| p.display().to_string()), "model.ckpt".into())?));
    let split_name = s.get("split", split, "test".into())?;
    let split = Split::parse(&split_name).ok_or_else(|| CliError::Usage(format!("unknown split {split_name:?}")))?;
    let (net, store, card) = load_model(&ckpt)?;
    let c = &net.config;
    let task = data.spec.task;
    if c.image_size != data.spec.image_size || c.query_dim != task.query_dim() || c.classes != task.classes() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}² images, query length {}, {} classes; dataset has {}², {}, {}",
            c.image_size,
            c.query_dim,
            c.classes,
            data.spec.image_size,
            task.query_dim(),
            task.classes()
        )));
    }
    Ok((data, split, ckpt, net, store, card))
}

fn eval(ctx: &Ctx, a: Eval, s: &mut Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let (data, split, ckpt, net, store, card) = load_for_split(ctx, s, a.data, a.checkpoint, a.split)?;
    let report_path = match s.opt("report", a.report.map(|p| p.display().to_string()))? {
        Some(p) => ctx.path(Path::new(&p)),
        None => sibling(&ckpt, ".eval.txt"),
    };
    let report = model::evaluate(&net, &store, data.split(split), &card.train_config())?;
    let mut kv = report.to_key_values();
    for (k, v) in ctx.run_record(s) {
        kv += &format!("run.{k}={v}\n");
    }
    fs::write(&report_path, kv).map_err(|e| io_err(&report_path, e))?;
    write_out(out, format_args!("{report}\nreport {}\n", report_path.display()))
}

fn export_masks(ctx: &Ctx, a: ExportMasks, s: &mut Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let (data, split, _, net, store, _) = load_for_split(ctx, s, a.data, a.checkpoint, a.split)?;
    let first = s.get("index", a.index, 0)?;
    let count = s.get("count", a.count, 1)?;
    let dir = ctx.path(Path::new(&s.get("out", a.out.map(|p| p.display().to_string()), "masks".into())?));
    let samples = data.split(split);
    if first + count > samples.len() {
        return Err(CliError::Usage(format!(
            "samples {first}..{} requested but the {} split has {}",
            first + count,
            split.name(),
            samples.len()
        )));
    }
    for sample in &samples[first..first + count] {
        let stem = format!("{}_{:05}", split.name(), sample.index);
        let files = model::export_attended_maps(&net, &store, sample, &stem, &dir)?;
        write_out(out, format_args!("{stem}: {} files\n", files.len()))?;
    }
    let run = ctx.run_record(s).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>();
    let run_file = dir.join("run.txt");
    fs::write(&run_file, run).map_err(|e| io_err(&run_file, e))?;
    write_out(out, format_args!("masks in {}\n", dir.display()))
}

fn gradcheck(a: Gradcheck, s: &mut Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let d = LayerCheck::new(AttentionKind::Arnn);
    let check = LayerCheck {
        attention: s.get("attention", a.attention, d.attention)?,
        m: s.get("m", a.m, d.m)?,
        n: s.get("n", a.n, d.n)?,
        channels: s.get("channels", a.channels, d.channels)?,
        hidden: s.get("hidden", a.hidden, d.hidden)?,
        delta: s.get("delta", a.delta, d.delta)?,
        query_dim: s.get("query-dim", a.query_dim, d.query_dim)?,
        seed: s.get("seed", a.seed, d.seed)?,
        epsilon: s.get("epsilon", a.epsilon, DEFAULT_EPSILON)?,
    };
    let whole = s.switch("model", a.model)?;
    let layer = check.run()?;
    write_out(
        out,
        format_args!(
            "{} layer {}×{}×{}: max relative error {:.3e} over {} coordinates\n",
            check.attention, check.channels, check.m, check.n, layer.max_relative_error, layer.coordinates
        ),
    )?;
    let mut worst = layer.max_relative_error;
    if whole {
        let r = model::model_gradcheck(check.attention, check.seed)?;
        write_out(
            out,
            format_args!(
                "{} network 12×12: max relative error {:.3e} over {} coordinates\n",
                check.attention, r.max_relative_error, r.coordinates
            ),
        )?;
        worst = worst.max(r.max_relative_error);
    }
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(CliError::Verification(format!(
            "max relative error {worst:.3e} is not below {GRADCHECK_TOLERANCE:e}"
        )));
    }
    write_out(out, format_args!("ok\n"))
}

/// Parses arguments, runs, and prints errors; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

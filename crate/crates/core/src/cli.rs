//! The `lrlf` command line.
//!
//! Every subcommand writes only inside its run directory (`--run-dir`,
//! default `.`) or to explicitly named output paths, and each run leaves an
//! `effective_config.toml` there. Failures print one line,
//! `error[<category>]: <message>`, and exit with status 1; usage errors exit
//! with status 2.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{load_manifest, CleanRules, CorpusManifest, Direction, DomainTag, LangCode};
use crate::decode::{translate_file, DecodeConfig, EnsembleSource, EnsembleSpec, Translator};
use crate::eval::{emit_table, text_bleu};
use crate::model::ModelCheckpoint;
use crate::noising::{make_denoising_example, pack_instances, NoiseConfig};
use crate::pipeline::{
    run_recipe, train_manifest_vocab, CptCase, FtMode, InitFrom, PipelineRecipe, PresetRef, RecipeFile, RunRecord,
    RunSettings, StageData, StageSpec, TrainOverrides, PRESET_NAMES, RUN_RECORD_FILE,
};
use crate::subword::{zwj_repair_bytes, Vocab, VocabConfig};
use crate::synthetic::{ToyConfig, ToyWorld, WordOrder};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "lrlf", version, about = "Low-resource NMT recipes at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalConfig {
    /// Seed for every random stream; overrides config files.
    #[arg(long, global = true, env = "LRLF_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that receives outputs and the effective config.
    #[arg(long, global = true, default_value = ".")]
    pub run_dir: PathBuf,
    #[arg(long, global = true, default_value = "warn")]
    #[serde(skip)]
    pub log_level: log::LevelFilter,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest (optionally generating a toy corpus first).
    Prepare(PrepareArgs),
    /// Learn a subword vocabulary from a manifest's training text.
    TrainVocab(TrainVocabArgs),
    /// Run one continual pre-training stage.
    Cpt(CptArgs),
    /// Run one fine-tuning stage.
    Finetune(FinetuneArgs),
    /// Expand or execute multistage recipes.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Translate a file with one or more checkpoints.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Render a comparison table from run records.
    Report(ReportArgs),
    /// Apply the Sinhala zero-width-joiner repair to stdin.
    RepairZwj,
    /// Show the denoising pairs built from a monolingual file.
    MakeDenoise(MakeDenoiseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyTask {
    Copy,
    Reverse,
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    /// Manifest to validate; defaults to the generated toy manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generate a toy corpus under `<run-dir>/data`.
    #[arg(long, value_enum)]
    pub toy: Option<ToyTask>,
    /// Add a third toy language `aux`.
    #[arg(long)]
    pub aux: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainVocabArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Regular expression; matching lines are dropped.
    #[arg(long = "clean")]
    pub clean: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct StageCommon {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run settings file (the `[settings]` table of a recipe file).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Multiplies warmup, update budget and save interval.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Desk learning rate, regularization and batch size.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub save_interval: Option<u64>,
}

impl StageCommon {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            max_updates: self.max_updates,
            warmup_steps: self.warmup_steps,
            max_lr: self.max_lr,
            batch_tokens: self.batch_tokens,
            save_interval: self.save_interval,
            ..Default::default()
        }
    }

    fn train(&self, base: crate::model::TrainConfig) -> crate::model::TrainConfig {
        let t = if self.desk {
            base.desk(self.scale)
        } else {
            base.scaled(self.scale)
        };
        self.overrides().apply(&t)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CptArgs {
    #[command(flatten)]
    pub common: StageCommon,
    /// A(i), A(ii), B, C1, C2-phase1 or C2-phase2.
    #[arg(long)]
    pub case: String,
    /// Comma-separated languages.
    #[arg(long, value_delimiter = ',', required = true)]
    pub langs: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: StageCommon,
    #[arg(long, default_value = "bilingual")]
    pub mode: String,
    /// Direction to train (bilingual) and report, e.g. `si-en`.
    #[arg(long)]
    pub target: String,
    /// Pivot for multilingual modes.
    #[arg(long)]
    pub pivot: Option<String>,
    /// Languages for multilingual modes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub langs: Vec<String>,
    /// in, out or mixed.
    #[arg(long, default_value = "in")]
    pub domain: String,
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    /// Run a recipe: a preset name or a recipe file.
    Run(PipelineRunArgs),
    /// Print a recipe's stage list.
    Show(PipelineShowArgs),
    /// List preset names.
    List,
}

#[derive(Debug, Args, Serialize)]
pub struct PresetArgs {
    /// Preset name or path to a recipe file.
    pub recipe: String,
    /// Target direction for presets, e.g. `si-en`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub third: Option<String>,
    #[arg(long)]
    pub pivot: Option<String>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub save_interval: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineShowArgs {
    #[command(flatten)]
    pub preset: PresetArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineRunArgs {
    #[command(flatten)]
    pub preset: PresetArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory for the recipe; defaults to `--run-dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base checkpoint for stages that start from the base.
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TranslateArgs {
    /// Checkpoint(s), comma-separated or repeated; several are ensembled.
    #[arg(long = "model", visible_alias = "checkpoint", value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Vocabulary file; defaults to the one stored in the first checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Input file, one sentence per line.
    #[arg(long = "src", visible_alias = "input")]
    pub input: PathBuf,
    /// Output file, one translation per input line.
    #[arg(long = "out", visible_alias = "output")]
    pub output: PathBuf,
    /// Source language code.
    #[arg(long)]
    pub src_lang: String,
    /// Target language code.
    #[arg(long)]
    pub tgt_lang: String,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.0)]
    pub length_penalty: f64,
    /// Average log-probabilities instead of probabilities.
    #[arg(long)]
    pub log_space: bool,
    /// Members are independently trained models rather than checkpoints of one run.
    #[arg(long)]
    pub multi_model: bool,
    /// Apply the ZWJ repair to the output.
    #[arg(long)]
    pub repair_zwj: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Lowercase both sides first.
    #[arg(long)]
    pub lc: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Run records (files or run directories).
    pub records: Vec<PathBuf>,
    /// Also load every run record in this directory and its subdirectories
    /// one level down.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Baseline: a record file, a run directory, or the recipe name of one
    /// of the loaded records.
    #[arg(long)]
    pub baseline: String,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeDenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Write the pairs here instead of stdout: one line per instance with
    /// encoder input, decoder input and labels as tab-separated id lists.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_instance_tokens: Option<usize>,
    /// Keep sentence order.
    #[arg(long)]
    pub no_permute: bool,
}

/// A failure with a stable machine-readable category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    fn new(category: &'static str, message: impl ToString) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let one_line = self.message.replace('\n', " ");
        write!(f, "error[{}]: {one_line}", self.category)
    }
}

macro_rules! category {
    ($($t:ty => $c:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($c, e)
            }
        })*
    };
}

category! {
    crate::corpus::ManifestError => "manifest",
    crate::corpus::CorpusError => "corpus",
    crate::subword::SubwordError => "vocab",
    crate::model::ModelError => "model",
    crate::model::CheckpointError => "checkpoint",
    crate::decode::DecodeError => "decode",
    crate::eval::EvalError => "eval",
    std::io::Error => "io",
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        use crate::pipeline::PipelineError as P;
        let category = match &e {
            P::InvalidRecipe(_) | P::UnknownPreset(_) | P::Record { .. } => "config",
            P::Manifest(_) => "manifest",
            P::MissingData(_) | P::Corpus(_) => "corpus",
            P::Io { .. } => "io",
            _ => "pipeline",
        };
        CliError::new(category, e)
    }
}

fn config_err(m: impl ToString) -> CliError {
    CliError::new("config", m)
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn lang(s: &str) -> Result<LangCode, CliError> {
    LangCode::new(s).map_err(config_err)
}

fn direction(s: &str) -> Result<Direction, CliError> {
    Direction::parse(s).map_err(config_err)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

/// Entry point used by the binary.
pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(config_err("--threads must be at least 1"));
        }
        // A pool set up earlier in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Prepare(a) => prepare(g, a),
        Command::TrainVocab(a) => train_vocab_cmd(g, a),
        Command::Cpt(a) => cpt(g, a),
        Command::Finetune(a) => finetune(g, a),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline_run(g, a),
        Command::Pipeline(PipelineCommand::Show(a)) => {
            let file = recipe_file(g, &a.preset)?;
            print!("{}", file.resolve()?.describe());
            Ok(())
        }
        Command::Pipeline(PipelineCommand::List) => {
            for n in PRESET_NAMES {
                println!("{n}");
            }
            Ok(())
        }
        Command::Translate(a) => translate(g, a),
        Command::Score(a) => score(a),
        Command::Report(a) => report(a),
        Command::RepairZwj => {
            let mut input = Vec::new();
            std::io::stdin().read_to_end(&mut input)?;
            match std::io::stdout().lock().write_all(&zwj_repair_bytes(&input)) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
        Command::MakeDenoise(a) => make_denoise(g, a),
    }
}

/// Writes the run's effective configuration into the run directory.
fn freeze<T: Serialize>(dir: &Path, global: &GlobalConfig, command: &str, args: &T) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Frozen<'a, T> {
        command: &'a str,
        global: &'a GlobalConfig,
        args: &'a T,
    }
    let text = toml::to_string(&Frozen { command, global, args }).map_err(config_err)?;
    write_config(dir, &text)
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn domain_name(d: DomainTag) -> &'static str {
    match d {
        DomainTag::InDomain => "in",
        DomainTag::OutDomain => "out",
        DomainTag::Mixed => "mixed",
    }
}

fn write_config(dir: &Path, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let path = dir.join(EFFECTIVE_CONFIG);
    fs::write(&path, text).map_err(io_at(&path))
}

fn prepare(g: &GlobalConfig, a: &PrepareArgs) -> Result<(), CliError> {
    let manifest_path = match (&a.manifest, a.toy) {
        (Some(m), None) => m.clone(),
        (None, Some(task)) => {
            let order = match task {
                ToyTask::Copy => WordOrder::Source,
                ToyTask::Reverse => WordOrder::Reversed,
            };
            let mut cfg = ToyConfig::pair(order);
            if a.aux {
                cfg = cfg.with_aux();
            }
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            ToyWorld::new(cfg).write(&g.run_dir.join("data"))?
        }
        _ => return Err(config_err("give exactly one of --manifest or --toy")),
    };
    freeze(&g.run_dir, g, "prepare", a)?;
    let m = load_manifest(&manifest_path)?;
    println!("manifest {}", manifest_path.display());
    for e in &m.mono {
        println!(
            "mono {} {} {} lines",
            e.lang,
            domain_name(e.domain),
            e.lines.unwrap_or(0)
        );
    }
    for e in &m.parallel {
        println!(
            "parallel {} {} {} {} pairs",
            e.direction(),
            domain_name(e.domain),
            format!("{:?}", e.split).to_lowercase(),
            e.pairs.unwrap_or(0)
        );
    }
    Ok(())
}

fn train_vocab_cmd(g: &GlobalConfig, a: &TrainVocabArgs) -> Result<(), CliError> {
    freeze(&g.run_dir, g, "train-vocab", a)?;
    let m = load_manifest(&a.manifest)?;
    let cfg = VocabConfig {
        target_size: a.size,
        ..Default::default()
    };
    let v = train_manifest_vocab(&m, &cfg, &CleanRules::from_patterns(&a.clean)?)?;
    let path = g.run_dir.join("vocab.txt");
    v.save(&path)?;
    println!("{} tokens -> {}", v.len(), path.display());
    Ok(())
}

fn settings_for(g: &GlobalConfig, config: Option<&Path>) -> Result<RunSettings, CliError> {
    let mut s = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_at(p))?;
            toml::from_str::<RunSettings>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => RunSettings::default(),
    };
    if let Some(seed) = g.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn load_base(path: Option<&PathBuf>) -> Result<Option<ModelCheckpoint>, CliError> {
    path.map(|p| ModelCheckpoint::load(p)).transpose().map_err(Into::into)
}

/// Runs a single-stage recipe built by a stage subcommand.
fn single_stage(
    g: &GlobalConfig,
    c: &StageCommon,
    target: Direction,
    stage: StageSpec,
    name: &str,
) -> Result<(), CliError> {
    let recipe = PipelineRecipe {
        name: name.to_string(),
        target,
        baseline: None,
        stages: vec![stage],
    };
    let file = RecipeFile {
        manifest: Some(absolute(&c.manifest)),
        preset: None,
        recipe: Some(recipe),
        settings: settings_for(g, c.config.as_deref())?,
    };
    execute(&file, c.init.as_ref(), &g.run_dir)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn cpt(g: &GlobalConfig, a: &CptArgs) -> Result<(), CliError> {
    let case: CptCase = serde_json::from_value(serde_json::Value::String(a.case.clone()))
        .map_err(|_| config_err(format!("unknown CPT case {:?}", a.case)))?;
    let languages = a.langs.iter().map(|l| lang(l)).collect::<Result<Vec<_>, _>>()?;
    if languages.len() < 2 {
        return Err(config_err("--langs needs at least two languages"));
    }
    let target = Direction::new(languages[0].clone(), languages[1].clone());
    let stage = StageSpec {
        name: "cpt".into(),
        data: StageData::Cpt { case, languages },
        init: InitFrom::Base,
        train: a.common.train(crate::model::TrainConfig::bilingual()),
    };
    single_stage(g, &a.common, target, stage, "cpt")
}

fn finetune(g: &GlobalConfig, a: &FinetuneArgs) -> Result<(), CliError> {
    let mode: FtMode = serde_json::from_value(serde_json::Value::String(a.mode.to_lowercase()))
        .map_err(|_| config_err(format!("unknown mode {:?}", a.mode)))?;
    let domain: DomainTag = match a.domain.as_str() {
        "in" => DomainTag::InDomain,
        "out" => DomainTag::OutDomain,
        "mixed" => DomainTag::Mixed,
        d => return Err(config_err(format!("unknown domain {d:?}"))),
    };
    let target = direction(&a.target)?;
    let (directions, pivot, base) = if mode.is_multilingual() {
        let pivot = lang(
            a.pivot
                .as_deref()
                .ok_or_else(|| config_err(format!("--pivot is required for {mode}")))?,
        )?;
        let langs = a.langs.iter().map(|l| lang(l)).collect::<Result<Vec<_>, _>>()?;
        let dirs = crate::pipeline::expand_mft_directions(mode, &pivot, &langs)?;
        (dirs, Some(pivot), crate::model::TrainConfig::multilingual())
    } else {
        (vec![target.clone()], None, crate::model::TrainConfig::bilingual())
    };
    let stage = StageSpec {
        name: "ft".into(),
        data: StageData::Ft {
            mode,
            directions,
            pivot,
            domain,
        },
        init: InitFrom::Base,
        train: a.common.train(base),
    };
    single_stage(g, &a.common, target, stage, &format!("{mode}-ft"))
}

fn recipe_file(g: &GlobalConfig, a: &PresetArgs) -> Result<RecipeFile, CliError> {
    let overrides = TrainOverrides {
        max_updates: a.max_updates,
        warmup_steps: a.warmup_steps,
        max_lr: a.max_lr,
        batch_tokens: a.batch_tokens,
        save_interval: a.save_interval,
        ..Default::default()
    };
    let mut file = if Path::new(&a.recipe).is_file() {
        RecipeFile::load(Path::new(&a.recipe))?
    } else {
        let target = a
            .target
            .as_deref()
            .ok_or_else(|| config_err(format!("preset {} needs --target", a.recipe)))?;
        RecipeFile {
            preset: Some(PresetRef::new(&a.recipe, direction(target)?)),
            ..Default::default()
        }
    };
    if let Some(p) = &mut file.preset {
        if let Some(t) = &a.target {
            p.target = direction(t)?;
        }
        if let Some(x) = &a.third {
            p.third = Some(lang(x)?);
        }
        if let Some(x) = &a.pivot {
            p.pivot = Some(lang(x)?);
        }
        if let Some(s) = a.scale {
            p.scale = s;
        }
        p.desk |= a.desk;
        p.train = merge(&p.train, &overrides);
    } else if let Some(r) = &mut file.recipe {
        for s in &mut r.stages {
            s.train = overrides.apply(&s.train);
        }
    }
    if let Some(seed) = g.seed {
        file.settings.seed = seed;
    }
    Ok(file)
}

fn merge(base: &TrainOverrides, top: &TrainOverrides) -> TrainOverrides {
    TrainOverrides {
        max_updates: top.max_updates.or(base.max_updates),
        warmup_steps: top.warmup_steps.or(base.warmup_steps),
        max_lr: top.max_lr.or(base.max_lr),
        dropout: top.dropout.or(base.dropout),
        label_smoothing: top.label_smoothing.or(base.label_smoothing),
        batch_tokens: top.batch_tokens.or(base.batch_tokens),
        save_interval: top.save_interval.or(base.save_interval),
        keep_last: top.keep_last.or(base.keep_last),
        clip_norm: top.clip_norm.or(base.clip_norm),
    }
}

fn pipeline_run(g: &GlobalConfig, a: &PipelineRunArgs) -> Result<(), CliError> {
    let mut file = recipe_file(g, &a.preset)?;
    if let Some(m) = &a.manifest {
        file.manifest = Some(absolute(m));
    }
    let out = a.out.clone().unwrap_or_else(|| g.run_dir.clone());
    execute(&file, a.base.as_ref(), &out)
}

/// Freezes `file` into `out` and runs it.
fn execute(file: &RecipeFile, base: Option<&PathBuf>, out: &Path) -> Result<(), CliError> {
    let frozen = file.frozen()?;
    let manifest_path = frozen
        .manifest
        .clone()
        .ok_or_else(|| config_err("no manifest given (--manifest or `manifest` in the recipe file)"))?;
    write_config(out, &frozen.to_toml())?;
    let manifest: CorpusManifest = load_manifest(&manifest_path)?;
    let base = load_base(base)?;
    let recipe = frozen.resolve()?;
    let record = run_recipe(&recipe, &manifest, base.as_ref(), &frozen.settings, out)?;
    print!("{}", recipe.describe());
    for (d, s) in &record.scores {
        println!("{d}: valid BLEU {:.2}, test BLEU {:.2}", s.valid_bleu, s.test_bleu);
    }
    println!("record {}", out.join(RUN_RECORD_FILE).display());
    Ok(())
}

fn translate(g: &GlobalConfig, a: &TranslateArgs) -> Result<(), CliError> {
    freeze(&g.run_dir, g, "translate", a)?;
    let ckpts = a
        .models
        .iter()
        .map(|p| ModelCheckpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => Vocab::from_text(
            ckpts[0]
                .meta
                .vocab
                .as_deref()
                .ok_or_else(|| config_err("checkpoint carries no vocabulary; pass --vocab"))?,
        )?,
    };
    let source = if a.multi_model {
        EnsembleSource::MultiModel
    } else {
        EnsembleSource::SingleRunCheckpoints
    };
    let spec = EnsembleSpec::from_checkpoints(&ckpts, source)?;
    let cfg = DecodeConfig {
        beam_size: a.beam,
        max_output_len: a.max_len,
        length_penalty: a.length_penalty,
        log_space: a.log_space,
    };
    cfg.validate()?;
    let (src, tgt) = (lang(&a.src_lang)?, lang(&a.tgt_lang)?);
    let tr = Translator {
        spec: &spec,
        cfg: &cfg,
        vocab: &vocab,
        src_lang: &src,
        tgt_lang: &tgt,
        repair_zwj: a.repair_zwj,
    };
    let summary = translate_file(&tr, &a.input, &a.output)?;
    for (line, e) in &summary.errors {
        log::warn!("line {line}: {e}");
    }
    eprintln!("translated {} lines, {} errors", summary.lines, summary.errors.len());
    Ok(())
}

fn read_text_lines(p: &Path) -> Result<Vec<String>, CliError> {
    Ok(crate::corpus::read_lines(p)?)
}

fn score(a: &ScoreArgs) -> Result<(), CliError> {
    let hyps = read_text_lines(&a.hyp)?;
    let refs = read_text_lines(&a.reference)?;
    println!("{}", text_bleu(&hyps, &refs, a.lc)?);
    Ok(())
}

fn load_record(p: &Path) -> Result<RunRecord, CliError> {
    let path = if p.is_dir() {
        p.join(RUN_RECORD_FILE)
    } else {
        p.to_path_buf()
    };
    Ok(RunRecord::load(&path)?)
}

fn records_under(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    if dir.join(RUN_RECORD_FILE).is_file() {
        out.push(dir.join(RUN_RECORD_FILE));
    }
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let path = entry.map_err(io_at(dir))?.path();
        if path.join(RUN_RECORD_FILE).is_file() {
            subdirs.push(path.join(RUN_RECORD_FILE));
        }
    }
    subdirs.sort();
    out.extend(subdirs);
    Ok(out)
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut paths = a.records.clone();
    if let Some(dir) = &a.runs {
        paths.extend(records_under(dir)?);
    }
    let mut records = paths.iter().map(|p| load_record(p)).collect::<Result<Vec<_>, _>>()?;
    let baseline = if Path::new(&a.baseline).exists() {
        load_record(Path::new(&a.baseline))?
    } else {
        let i = records
            .iter()
            .position(|r| r.recipe == a.baseline)
            .ok_or_else(|| config_err(format!("no loaded run record has recipe {:?}", a.baseline)))?;
        records.remove(i)
    };
    if records.is_empty() {
        return Err(config_err("no run records to compare; pass record paths or --runs"));
    }
    let (table, text) = emit_table(&records, &baseline)?;
    emit(&text)?;
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(io_at(out))?;
    }
    if let Some(out) = &a.json {
        let json = serde_json::to_string_pretty(&table).map_err(|e| CliError::new("io", e))?;
        fs::write(out, json + "\n").map_err(io_at(out))?;
    }
    Ok(())
}

fn make_denoise(g: &GlobalConfig, a: &MakeDenoiseArgs) -> Result<(), CliError> {
    let vocab = Vocab::load(&a.vocab)?;
    let lang = lang(&a.lang)?;
    let mut cfg = NoiseConfig::default();
    if let Some(x) = a.mask_ratio {
        cfg.mask_ratio = x;
    }
    if let Some(x) = a.lambda {
        cfg.poisson_lambda = x;
    }
    if let Some(x) = a.max_instance_tokens {
        cfg.max_instance_tokens = x;
    }
    cfg.permute_sentences = !a.no_permute;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_err)?;
    let lines = read_text_lines(&a.input)?;
    let lens = lines
        .iter()
        .map(|l| vocab.encode(l).map(|t| t.len()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::new();
    for (i, r) in pack_instances(&lens, cfg.max_instance_tokens).into_iter().enumerate() {
        let mut rng = crate::noising::instance_rng(cfg.seed, i as u64);
        let ex = make_denoising_example(&lines[r.clone()], &lang, &vocab, &cfg, &mut rng)?;
        let ids = |s: &[u32]| s.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            ids(&ex.encoder_input),
            ids(&ex.decoder_input),
            ids(&ex.labels)
        ));
    }
    match &a.dump {
        Some(p) => {
            freeze(&g.run_dir, g, "make-denoise", a)?;
            fs::write(p, out).map_err(io_at(p))?;
        }
        None => emit(&out)?,
    }
    Ok(())
}

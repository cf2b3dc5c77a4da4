//! The `ptma` command line: synth, split, train, eval, infer, gradcheck,
//! dump-latents.
//!
//! Flags can also come from a flat `key=value` config file (`--config`);
//! explicit command-line flags win over the file, the file wins over
//! built-in defaults. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numeric failure (divergence or a failed gradient check).
//!
//! Every data-producing command writes a `manifest_<cmd>.json` next to its
//! outputs recording the resolved settings, seed and input digests; two
//! runs with identical manifests (and `--threads 1`) reproduce their
//! outputs byte for byte.

use crate::dataio::{
    load_catalog, make_protocol_split, read_feature_file, save_catalog, synth_generate,
    DatasetCatalog, FeatureSequence, Protocol, Split, SplitEntry, SynthSpec,
};
use crate::error::{PtmaError, Result};
use crate::evalproto::{dump_latents, run_protocol, write_frames_csv, Metric};
use crate::model::{Mode, ModelConfig};
use crate::numerics::tensor::slice_rows;
use crate::objectives::LossWeights;
use crate::stream::{stream_init, stream_step};
use crate::trainer::{
    config_bytes, load_checkpoint, save_checkpoint, train_run, window_grad_check, TrainConfig,
    TrainItem,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub fn dispatch(args: Vec<String>) -> i32 {
    let argv = std::iter::once("ptma".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ptma",
    version,
    about = "Cross-view online action detection: probabilistic temporal masked attention"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view benchmark catalog.
    Synth(SynthArgs),
    /// Build a cs/cv/csv/m-cv/m-csv protocol split from a catalog.
    Split(SplitArgs),
    /// Train a model on a split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split partition.
    Eval(EvalArgs),
    /// Stream one feature file frame by frame and emit per-frame scores.
    Infer(InferArgs),
    /// Check window-loss gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write per-frame latent means as feature files (D = latent dim).
    DumpLatents(DumpLatentsArgs),
}

// ---------------------------------------------------------------------------
// Config-file merging
// ---------------------------------------------------------------------------

/// Flat `key=value` settings file; `#` starts a comment.
struct ConfigFile(BTreeMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&PathBuf>) -> Result<ConfigFile> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| PtmaError::io(path.display().to_string(), e))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    PtmaError::Usage(format!(
                        "{}:{}: expected key=value, got '{line}'",
                        path.display(),
                        ln + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(ConfigFile(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                PtmaError::Usage(format!("config key '{key}': cannot parse '{raw}'"))
            }),
        }
    }
}

/// Command line beats config file beats default.
fn resolve<T: FromStr + Clone>(
    cli: &Option<T>,
    file: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = cli {
        return Ok(v.clone());
    }
    Ok(file.get::<T>(key)?.unwrap_or(default))
}

fn resolve_opt<T: FromStr + Clone>(
    cli: &Option<T>,
    file: &ConfigFile,
    key: &str,
) -> Result<Option<T>> {
    if cli.is_some() {
        return Ok(cli.clone());
    }
    file.get::<T>(key)
}

fn resolve_flag(cli: bool, file: &ConfigFile, key: &str) -> Result<bool> {
    Ok(cli || file.get::<bool>(key)?.unwrap_or(false))
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    build: String,
    seed: u64,
    settings: BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

fn sha256_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|e| PtmaError::io(path.display().to_string(), e))?;
    Ok(sha256_bytes(&bytes))
}

struct ManifestBuilder {
    command: &'static str,
    seed: u64,
    settings: BTreeMap<String, String>,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    fn new(command: &'static str, seed: u64) -> Self {
        ManifestBuilder {
            command,
            seed,
            settings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.settings.insert(key.to_string(), value.to_string());
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(self, dir: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            build: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            settings: self.settings,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = dir.join(format!("manifest_{}.json", manifest.command));
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| PtmaError::data(format!("manifest encode: {e}")))?;
        std::fs::write(&path, json).map_err(|e| PtmaError::io(path.display().to_string(), e))?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PtmaError::io(dir.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Shared split/catalog loading
// ---------------------------------------------------------------------------

#[derive(Serialize, serde::Deserialize)]
struct SplitFile {
    /// Path of the catalog manifest, as given to `split` (relative paths
    /// resolve against the split file's directory).
    manifest: String,
    #[serde(flatten)]
    split: Split,
}

fn load_split(path: &Path) -> Result<(SplitFile, DatasetCatalog)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PtmaError::io(path.display().to_string(), e))?;
    let file: SplitFile = serde_json::from_str(&text)
        .map_err(|e| PtmaError::data(format!("{}: {e}", path.display())))?;
    let manifest_path = {
        let p = PathBuf::from(&file.manifest);
        if p.is_absolute() {
            p
        } else {
            path.parent().unwrap_or(Path::new(".")).join(p)
        }
    };
    let catalog = load_catalog(&manifest_path)?;
    Ok((file, catalog))
}

fn resolve_entries<'c>(
    catalog: &'c DatasetCatalog,
    entries: &[SplitEntry],
) -> Result<Vec<&'c FeatureSequence>> {
    entries
        .iter()
        .map(|e| {
            catalog.find(&e.video_id, e.view_id).ok_or_else(|| {
                PtmaError::data(format!(
                    "split references ({}, view {}) missing from the catalog",
                    e.video_id, e.view_id
                ))
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    videos_per_subject: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Shared source-latent dimension of the generator.
    #[arg(long)]
    source_latent: Option<usize>,
    #[arg(long)]
    seg_min: Option<usize>,
    #[arg(long)]
    seg_max: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    mean_scale: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_ref())?;
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_subjects: resolve(&a.subjects, &file, "subjects", d.n_subjects)?,
        n_views: resolve(&a.views, &file, "views", d.n_views)?,
        n_actions: resolve(&a.actions, &file, "actions", d.n_actions)?,
        videos_per_subject: resolve(
            &a.videos_per_subject,
            &file,
            "videos-per-subject",
            d.videos_per_subject,
        )?,
        feature_dim: resolve(&a.feature_dim, &file, "feature-dim", d.feature_dim)?,
        latent_dim: resolve(&a.source_latent, &file, "source-latent", d.latent_dim)?,
        frames: resolve(&a.frames, &file, "frames", d.frames)?,
        seg_min: resolve(&a.seg_min, &file, "seg-min", d.seg_min)?,
        seg_max: resolve(&a.seg_max, &file, "seg-max", d.seg_max)?,
        noise: resolve(&a.noise, &file, "noise", d.noise)?,
        mean_scale: resolve(&a.mean_scale, &file, "mean-scale", d.mean_scale)?,
        jitter: resolve(&a.jitter, &file, "jitter", d.jitter)?,
        seed: resolve(&a.seed, &file, "seed", 0)?,
    };
    let catalog = synth_generate(&spec)?;
    ensure_dir(&a.out_dir)?;
    let manifest_path = save_catalog(&catalog, &a.out_dir)?;

    let mut mb = ManifestBuilder::new("synth", spec.seed);
    for (k, v) in serde_json::to_value(&spec)
        .expect("spec serializes")
        .as_object()
        .expect("spec is an object")
    {
        mb.set(k, v);
    }
    mb.output(&manifest_path);
    mb.write(&a.out_dir)?;
    println!(
        "synthesized {} sequences ({} subjects x {} videos x {} views), {} classes, D={}, K={}",
        catalog.sequences.len(),
        spec.n_subjects,
        spec.videos_per_subject,
        spec.n_views,
        spec.n_actions,
        spec.feature_dim,
        spec.frames
    );
    println!("catalog: {}", manifest_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SplitArgs {
    /// Catalog manifest produced by `synth` (or hand-written).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    train_view: Option<u32>,
    /// Reconstruction-target view (m-cv / m-csv).
    #[arg(long)]
    recon_view: Option<u32>,
    /// Test view(s), comma separated; defaults per protocol.
    #[arg(long, value_delimiter = ',')]
    test_view: Vec<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_ref())?;
    let protocol = Protocol::parse(&resolve(&a.protocol, &file, "protocol", "cv".to_string())?)?;
    let train_view = resolve(&a.train_view, &file, "train-view", 1)?;
    let recon_view = resolve_opt(&a.recon_view, &file, "recon-view")?;
    let seed = resolve(&a.seed, &file, "seed", 0)?;
    let test_views: Vec<u32> = if a.test_view.is_empty() {
        match file.get::<String>("test-view")? {
            Some(s) => s
                .split(',')
                .map(|v| {
                    v.trim().parse::<u32>().map_err(|_| {
                        PtmaError::Usage(format!("config test-view: bad view '{v}'"))
                    })
                })
                .collect::<Result<_>>()?,
            None => vec![],
        }
    } else {
        a.test_view.clone()
    };

    let catalog = load_catalog(&a.data)?;
    let split = make_protocol_split(&catalog, protocol, train_view, recon_view, &test_views, seed)?;

    let out_dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ensure_dir(&out_dir)?;
    let split_file = SplitFile {
        manifest: a.data.display().to_string(),
        split,
    };
    let json = serde_json::to_string_pretty(&split_file)
        .map_err(|e| PtmaError::data(format!("split encode: {e}")))?;
    std::fs::write(&a.out, json).map_err(|e| PtmaError::io(a.out.display().to_string(), e))?;

    let mut mb = ManifestBuilder::new("split", seed);
    mb.set("protocol", protocol.name());
    mb.set("train-view", train_view);
    if let Some(rv) = recon_view {
        mb.set("recon-view", rv);
    }
    mb.set(
        "test-views",
        split_file
            .split
            .test_views
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    mb.input(&a.data)?;
    mb.output(&a.out);
    mb.write(&out_dir)?;

    println!(
        "{}: {} train / {} val / {} test sequences -> {}",
        protocol.name(),
        split_file.split.train.len(),
        split_file.split.val.len(),
        split_file.split.test.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    enc_hidden: Option<usize>,
    #[arg(long)]
    dec_hidden: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    normalize_cls: bool,
    #[arg(long)]
    fixed_stride: bool,
    #[arg(long)]
    truncate_pairs: bool,
}

fn model_config_for(
    catalog: &DatasetCatalog,
    mode: Mode,
    a: &TrainArgs,
    file: &ConfigFile,
) -> Result<ModelConfig> {
    let base = ModelConfig::new(catalog.feature_dim, catalog.class_count);
    Ok(ModelConfig {
        input_dim: catalog.feature_dim,
        embed_dim: resolve(&a.embed_dim, file, "embed-dim", base.embed_dim)?,
        latent_dim: resolve(&a.latent_dim, file, "latent-dim", base.latent_dim)?,
        num_actions: catalog.class_count,
        window: resolve(&a.window, file, "window", base.window)?,
        alpha: resolve_opt(&a.alpha, file, "alpha")?,
        enc_hidden: resolve(&a.enc_hidden, file, "enc-hidden", base.enc_hidden)?,
        dec_hidden: resolve(&a.dec_hidden, file, "dec-hidden", base.dec_hidden)?,
        mode,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_ref())?;
    let mode = Mode::parse(&resolve(&a.mode, &file, "mode", "full".to_string())?)?;
    let (split_file, catalog) = load_split(&a.split)?;
    let split = &split_file.split;
    let mcfg = model_config_for(&catalog, mode, &a, &file)?;

    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        epochs: resolve(&a.epochs, &file, "epochs", defaults.epochs)?,
        batch_size: resolve(&a.batch_size, &file, "batch-size", defaults.batch_size)?,
        lr0: resolve(&a.lr, &file, "lr", defaults.lr0)?,
        weights: LossWeights {
            lambda_cls: resolve(&a.lambda1, &file, "lambda1", 1.0)?,
            lambda_rec: resolve(&a.lambda2, &file, "lambda2", 1.0)?,
            lambda_kld: resolve(&a.lambda3, &file, "lambda3", 0.1)?,
        },
        seed: resolve(&a.seed, &file, "seed", 0)?,
        patience: resolve(&a.patience, &file, "patience", defaults.patience)?,
        normalize_cls: resolve_flag(a.normalize_cls, &file, "normalize-cls")?,
        fixed_stride: resolve_flag(a.fixed_stride, &file, "fixed-stride")?,
        truncate_pairs: resolve_flag(a.truncate_pairs, &file, "truncate-pairs")?,
        threads: resolve(&a.threads, &file, "threads", 1)?,
    };

    let items: Vec<TrainItem> = split
        .train
        .iter()
        .map(|e| {
            let seq = catalog.find(&e.video_id, e.view_id).ok_or_else(|| {
                PtmaError::data(format!(
                    "split references ({}, view {}) missing from the catalog",
                    e.video_id, e.view_id
                ))
            })?;
            let recon = match e.recon_view {
                Some(rv) => Some(
                    catalog
                        .find(&e.video_id, rv)
                        .ok_or_else(|| {
                            PtmaError::data(format!(
                                "video {} has no partner at view {rv}",
                                e.video_id
                            ))
                        })?
                        .clone(),
                ),
                None => None,
            };
            Ok(TrainItem {
                seq: seq.clone(),
                recon,
            })
        })
        .collect::<Result<_>>()?;
    let val: Vec<FeatureSequence> = resolve_entries(&catalog, &split.val)?
        .into_iter()
        .cloned()
        .collect();

    println!(
        "training {} ({} videos, {} val) for {} epochs, T={} E={} Dz={} lr0={}",
        mode.name(),
        items.len(),
        val.len(),
        tcfg.epochs,
        mcfg.window,
        mcfg.embed_dim,
        mcfg.latent_dim,
        tcfg.lr0
    );
    let outcome = train_run(&items, &val, &mcfg, &tcfg)?;
    for e in &outcome.log.epochs {
        match e.val_map {
            Some(v) => println!(
                "epoch {:>3}: loss {:.5} (cls {:.5} rec {:.5} kld {:.5}) val mAP {:.4}{}",
                e.epoch,
                e.total,
                e.l_cls,
                e.l_rec,
                e.l_kld,
                v,
                if e.best { " *" } else { "" }
            ),
            None => println!(
                "epoch {:>3}: loss {:.5} (cls {:.5} rec {:.5} kld {:.5})",
                e.epoch, e.total, e.l_cls, e.l_rec, e.l_kld
            ),
        }
    }

    ensure_dir(&a.out_dir)?;
    let ckpt = a.out_dir.join("model.ckpt");
    save_checkpoint(&outcome.params, &mcfg, &ckpt)?;
    let step_csv = a.out_dir.join("train_log.csv");
    outcome.log.write_step_csv(&step_csv)?;
    let epoch_csv = a.out_dir.join("epoch_summary.csv");
    outcome.log.write_epoch_csv(&epoch_csv)?;

    let mut mb = ManifestBuilder::new("train", tcfg.seed);
    mb.set("mode", mode.name());
    mb.set("epochs", tcfg.epochs);
    mb.set("batch-size", tcfg.batch_size);
    mb.set("lr", tcfg.lr0);
    mb.set("lambda1", tcfg.weights.lambda_cls);
    mb.set("lambda2", tcfg.weights.lambda_rec);
    mb.set("lambda3", tcfg.weights.lambda_kld);
    mb.set("window", mcfg.window);
    mb.set("embed-dim", mcfg.embed_dim);
    mb.set("latent-dim", mcfg.latent_dim);
    mb.set("alpha", mcfg.effective_alpha());
    mb.set("enc-hidden", mcfg.enc_hidden);
    mb.set("dec-hidden", mcfg.dec_hidden);
    mb.set("patience", tcfg.patience);
    mb.set("threads", tcfg.threads);
    mb.set("normalize-cls", tcfg.normalize_cls);
    mb.set("fixed-stride", tcfg.fixed_stride);
    mb.set("truncate-pairs", tcfg.truncate_pairs);
    mb.set("best-epoch", outcome.best_epoch);
    mb.input(&a.split)?;
    mb.output(&ckpt);
    mb.output(&step_csv);
    mb.output(&epoch_csv);
    mb.write(&a.out_dir)?;

    match outcome.best_val_map {
        Some(v) => println!(
            "best epoch {} (val mAP {:.4}); checkpoint: {}",
            outcome.best_epoch,
            v,
            ckpt.display()
        ),
        None => println!(
            "no validation set; kept final epoch {}; checkpoint: {}",
            outcome.best_epoch,
            ckpt.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which partition of the split to score.
    #[arg(long, value_parser = ["train", "val", "test"])]
    partition: Option<String>,
    /// map (plain) or mcap (calibrated).
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-frame latent means for every scored video.
    #[arg(long)]
    dump_latents: bool,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_ref())?;
    let partition = resolve(&a.partition, &file, "partition", "test".to_string())?;
    let metric = Metric::parse(&resolve(&a.metric, &file, "metric", "map".to_string())?)?;
    let threads = resolve(&a.threads, &file, "threads", 1)?;
    let seed = resolve(&a.seed, &file, "seed", 0)?;
    let dump = resolve_flag(a.dump_latents, &file, "dump-latents")?;

    let (split_file, catalog) = load_split(&a.split)?;
    let split = &split_file.split;
    let (cfg, params) = load_checkpoint(&a.checkpoint)?;
    if cfg.input_dim != catalog.feature_dim || cfg.num_actions != catalog.class_count {
        return Err(PtmaError::data(format!(
            "checkpoint expects D={} C={}, catalog has D={} C={}",
            cfg.input_dim, cfg.num_actions, catalog.feature_dim, catalog.class_count
        )));
    }
    let entries = match partition.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        _ => &split.test,
    };
    if entries.is_empty() {
        return Err(PtmaError::data(format!(
            "partition '{partition}' of this split is empty"
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PtmaError::config(format!("thread pool: {e}")))?;
    let (mut report, run) =
        pool.install(|| run_protocol(&catalog, split, entries, &params, &cfg, metric))?;
    report.config_digest = sha256_bytes(&config_bytes(&cfg));
    report.checkpoint_digest = sha256_file(&a.checkpoint)?;

    ensure_dir(&a.out_dir)?;
    let report_path = a.out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| PtmaError::data(format!("report encode: {e}")))?;
    std::fs::write(&report_path, json)
        .map_err(|e| PtmaError::io(report_path.display().to_string(), e))?;
    let frames_path = a.out_dir.join("frames.csv");
    write_frames_csv(&run, &frames_path)?;

    let mut latent_paths = Vec::new();
    if dump {
        let latent_dir = a.out_dir.join("latents");
        ensure_dir(&latent_dir)?;
        for seq in resolve_entries(&catalog, entries)? {
            let path = latent_dir.join(format!("{}_v{}.ftr", seq.video_id, seq.view_id));
            dump_latents(&params, &cfg, seq, &path)?;
            latent_paths.push(path);
        }
    }

    let mut mb = ManifestBuilder::new("eval", seed);
    mb.set("partition", &partition);
    mb.set("metric", metric.name());
    mb.set("threads", threads);
    mb.set("dump-latents", dump);
    mb.input(&a.split)?;
    mb.input(&a.checkpoint)?;
    mb.output(&report_path);
    mb.output(&frames_path);
    for p in &latent_paths {
        mb.output(p);
    }
    mb.write(&a.out_dir)?;

    println!(
        "{} over {} ({} frames): {:.4}; accuracy {:.4}",
        report.metric, partition, report.frames, report.mean_ap, report.accuracy
    );
    for cell in &report.view_cells {
        println!(
            "  view {}: {:.4} ({} frames)",
            cell.test_view, cell.mean_ap, cell.frames
        );
    }
    if let Some(avg) = report.view_avg {
        println!("  avg over views: {avg:.4}");
    }
    println!("report: {}", report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file to stream.
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (frame, argmax, then C+1 scores).
    #[arg(long)]
    out: PathBuf,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.checkpoint)?;
    let seq = read_feature_file(&a.input)?;
    if seq.feature_dim() != cfg.input_dim {
        return Err(PtmaError::data(format!(
            "{}: feature dim {} but checkpoint expects {}",
            a.input.display(),
            seq.feature_dim(),
            cfg.input_dim
        )));
    }
    let out_dir = a.out.parent().unwrap_or(Path::new(".")).to_path_buf();
    ensure_dir(&out_dir)?;
    let to_io = |e: std::io::Error| PtmaError::io(a.out.display().to_string(), e);
    let mut f = std::fs::File::create(&a.out).map_err(to_io)?;
    let cols: Vec<String> = (0..=cfg.num_actions).map(|c| format!("score_{c}")).collect();
    writeln!(f, "frame,argmax,{}", cols.join(",")).map_err(to_io)?;

    let mut state = stream_init::<f32>(&cfg);
    for t in 0..seq.frames() {
        let x_t = slice_rows(&seq.features, t, 1)?;
        let scores = stream_step(&mut state, &params, &cfg, &x_t)?;
        let row = scores.row(0);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).expect("finite scores"))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let formatted: Vec<String> = row.iter().map(|s| format!("{s}")).collect();
        writeln!(f, "{},{},{}", t, argmax, formatted.join(",")).map_err(to_io)?;
    }

    let mut mb = ManifestBuilder::new("infer", 0);
    mb.input(&a.checkpoint)?;
    mb.input(&a.input)?;
    mb.output(&a.out);
    mb.write(&out_dir)?;
    println!(
        "streamed {} frames from {} -> {}",
        seq.frames(),
        a.input.display(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    /// Use the built-in tiny configuration (T=4, D=8, E=6, Dz=3, C=2).
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    enc_hidden: Option<usize>,
    #[arg(long)]
    dec_hidden: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Relative tolerance (absolute floor 1e-8).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON report and manifest here (console-only otherwise).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let file = ConfigFile::load(a.config.as_ref())?;
    let tiny = ModelConfig::tiny();
    let mut cfg = if a.tiny {
        tiny
    } else {
        ModelConfig {
            input_dim: resolve(&a.feature_dim, &file, "feature-dim", tiny.input_dim)?,
            embed_dim: resolve(&a.embed_dim, &file, "embed-dim", tiny.embed_dim)?,
            latent_dim: resolve(&a.latent_dim, &file, "latent-dim", tiny.latent_dim)?,
            num_actions: resolve(&a.actions, &file, "actions", tiny.num_actions)?,
            window: resolve(&a.window, &file, "window", tiny.window)?,
            alpha: None,
            enc_hidden: resolve(&a.enc_hidden, &file, "enc-hidden", tiny.enc_hidden)?,
            dec_hidden: resolve(&a.dec_hidden, &file, "dec-hidden", tiny.dec_hidden)?,
            mode: Mode::Full,
        }
    };
    cfg.mode = Mode::parse(&resolve(&a.mode, &file, "mode", "full".to_string())?)?;
    let eps = resolve(&a.eps, &file, "eps", 1e-5)?;
    let tol = resolve(&a.tol, &file, "tol", 1e-4)?;
    let seed = resolve(&a.seed, &file, "seed", 0)?;

    let started = Instant::now();
    let report = window_grad_check(&cfg, &LossWeights::default(), seed, eps, tol)?;
    println!(
        "gradient check: mode {}, T={} D={} E={} Dz={} C={}, eps {:e}, tol {:e}",
        cfg.mode.name(),
        cfg.window,
        cfg.input_dim,
        cfg.embed_dim,
        cfg.latent_dim,
        cfg.num_actions,
        eps,
        tol
    );
    for c in &report.checks {
        println!(
            "  {:<16} {:>5} elems  max rel err {:>12.3e}  {}{}",
            c.name,
            c.numel,
            c.max_rel_err,
            if c.pass { "PASS" } else { "FAIL" },
            if c.nonfinite > 0 {
                format!("  ({} non-finite probes)", c.nonfinite)
            } else {
                String::new()
            }
        );
    }
    println!(
        "overall: {} (max rel err {:.3e}, {:.2}s)",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_err(),
        started.elapsed().as_secs_f64()
    );

    if let Some(out_dir) = &a.out_dir {
        ensure_dir(out_dir)?;
        #[derive(Serialize)]
        struct JsonCheck<'a> {
            name: &'a str,
            numel: usize,
            max_rel_err: f64,
            nonfinite: usize,
            pass: bool,
        }
        #[derive(Serialize)]
        struct JsonReport<'a> {
            eps: f64,
            tol: f64,
            passed: bool,
            checks: Vec<JsonCheck<'a>>,
        }
        let json = serde_json::to_string_pretty(&JsonReport {
            eps: report.eps,
            tol: report.tol,
            passed: report.passed,
            checks: report
                .checks
                .iter()
                .map(|c| JsonCheck {
                    name: c.name,
                    numel: c.numel,
                    max_rel_err: c.max_rel_err,
                    nonfinite: c.nonfinite,
                    pass: c.pass,
                })
                .collect(),
        })
        .expect("report serializes");
        let path = out_dir.join("gradcheck_report.json");
        std::fs::write(&path, json).map_err(|e| PtmaError::io(path.display().to_string(), e))?;
        let mut mb = ManifestBuilder::new("gradcheck", seed);
        mb.set("mode", cfg.mode.name());
        mb.set("eps", eps);
        mb.set("tol", tol);
        mb.output(&path);
        mb.write(out_dir)?;
    }

    if report.passed {
        Ok(())
    } else {
        Err(PtmaError::numeric(format!(
            "gradient check failed: max relative error {:.3e} over tolerance {:.1e}",
            report.max_rel_err(),
            tol
        )))
    }
}

// ---------------------------------------------------------------------------
// dump-latents
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DumpLatentsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Catalog manifest whose sequences get encoded.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Restrict to one view.
    #[arg(long)]
    view: Option<u32>,
}

fn cmd_dump_latents(a: DumpLatentsArgs) -> Result<()> {
    let (cfg, params) = load_checkpoint(&a.checkpoint)?;
    let catalog = load_catalog(&a.data)?;
    if cfg.input_dim != catalog.feature_dim {
        return Err(PtmaError::data(format!(
            "checkpoint expects D={}, catalog has D={}",
            cfg.input_dim, catalog.feature_dim
        )));
    }
    ensure_dir(&a.out_dir)?;
    let mut mb = ManifestBuilder::new("dump-latents", 0);
    mb.input(&a.checkpoint)?;
    mb.input(&a.data)?;
    let mut count = 0;
    for seq in &catalog.sequences {
        if a.view.map(|v| v == seq.view_id).unwrap_or(true) {
            let path = a.out_dir.join(format!("{}_v{}.ftr", seq.video_id, seq.view_id));
            dump_latents(&params, &cfg, seq, &path)?;
            mb.output(&path);
            count += 1;
        }
    }
    if count == 0 {
        return Err(PtmaError::data("no sequences matched"));
    }
    mb.write(&a.out_dir)?;
    println!(
        "wrote {count} latent files (D = {}) to {}",
        cfg.latent_dim,
        a.out_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Split(a) => cmd_split(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::DumpLatents(a) => cmd_dump_latents(a),
    }
}

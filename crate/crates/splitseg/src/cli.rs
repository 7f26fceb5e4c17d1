//! Experiment runner: data generation, training, attack, defense sweeps and
//! leakage reports, each as a subcommand writing into a fixed output layout
//! (config.txt, metrics.csv, ssim.csv, checkpoints/, dumps/, gallery/).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attack::{self, AttackConfig, SweepItem};
use crate::data::{self, PhantomSet};
use crate::metrics::{build_leakage_report, SsimRecord};
use crate::model::{
    load_checkpoint, per_site_widths, save_checkpoint, ArchSpec, CheckpointMeta, ModelKind,
    SkipVariant, SplitConfig,
};
use crate::slproto::{
    intercept, train_central, train_split, EpochRow, Schedule, ShareGuard, TrainConfig,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration; exit status 1.
    Validation(Vec<String>),
    /// Anything that failed at run time; exit status 2.
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

// ---------------------------------------------------------------------------
// Experiment configuration: a flat key = value text document.
// ---------------------------------------------------------------------------

/// Which model a training run builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunVariant {
    Central,
    Split(SkipVariant),
}

impl RunVariant {
    pub fn name(&self) -> &'static str {
        match self {
            RunVariant::Central => "unet_central",
            RunVariant::Split(SkipVariant::AllSkips) => "split_all_skips",
            RunVariant::Split(SkipVariant::NoSkips) => "split_no_skips",
            RunVariant::Split(SkipVariant::X3X4Only) => "split_x3_x4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unet_central" => Some(RunVariant::Central),
            "split_all_skips" => Some(RunVariant::Split(SkipVariant::AllSkips)),
            "split_no_skips" => Some(RunVariant::Split(SkipVariant::NoSkips)),
            "split_x3_x4" => Some(RunVariant::Split(SkipVariant::X3X4Only)),
            _ => None,
        }
    }
}

/// Every knob of a run. Serialized as `key = value` lines; unknown keys are
/// rejected and every run writes its resolved config next to its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub sites: usize,
    pub variant: RunVariant,
    pub dropout_p: f32,
    pub noise_sigma: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
    pub samples: usize,
    pub lr: f32,
    pub attack_steps: usize,
    pub attack_lr: f32,
    pub alpha_act: f32,
    pub alpha_tv: f32,
    pub alpha_l2: f32,
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sites: 4,
            variant: RunVariant::Split(SkipVariant::AllSkips),
            dropout_p: 0.0,
            noise_sigma: 0.0,
            batch_size: 8,
            epochs: 10,
            seed: 7,
            image_size: 96,
            samples: 200,
            lr: 1e-3,
            attack_steps: 2000,
            attack_lr: 0.1,
            alpha_act: 1e-3,
            alpha_tv: 1e-4,
            alpha_l2: 1e-5,
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document, collecting every problem instead of stopping
    /// at the first one.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut cfg = ExperimentConfig::default();
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                errors.push(format!("line {}: expected 'key = value'", lineno + 1));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let mut bad = |what: &str| {
                errors.push(format!("line {}: {} (got '{}')", lineno + 1, what, value));
            };
            match key {
                "sites" => match value.parse() {
                    Ok(v) => cfg.sites = v,
                    Err(_) => bad("sites must be a positive integer"),
                },
                "variant" => match RunVariant::parse(value) {
                    Some(v) => cfg.variant = v,
                    None => bad(
                        "variant must be one of unet_central, split_all_skips, \
                         split_no_skips, split_x3_x4",
                    ),
                },
                "dropout_p" => match value.parse() {
                    Ok(v) => cfg.dropout_p = v,
                    Err(_) => bad("dropout_p must be a float"),
                },
                "noise_sigma" => match value.parse() {
                    Ok(v) => cfg.noise_sigma = v,
                    Err(_) => bad("noise_sigma must be a float"),
                },
                "batch_size" => match value.parse() {
                    Ok(v) => cfg.batch_size = v,
                    Err(_) => bad("batch_size must be a positive integer"),
                },
                "epochs" => match value.parse() {
                    Ok(v) => cfg.epochs = v,
                    Err(_) => bad("epochs must be a positive integer"),
                },
                "seed" => match value.parse() {
                    Ok(v) => cfg.seed = v,
                    Err(_) => bad("seed must be an unsigned integer"),
                },
                "image_size" => match value.parse() {
                    Ok(v) => cfg.image_size = v,
                    Err(_) => bad("image_size must be a positive integer"),
                },
                "samples" => match value.parse() {
                    Ok(v) => cfg.samples = v,
                    Err(_) => bad("samples must be a positive integer"),
                },
                "lr" => match value.parse() {
                    Ok(v) => cfg.lr = v,
                    Err(_) => bad("lr must be a float"),
                },
                "attack_steps" => match value.parse() {
                    Ok(v) => cfg.attack_steps = v,
                    Err(_) => bad("attack_steps must be a positive integer"),
                },
                "attack_lr" => match value.parse() {
                    Ok(v) => cfg.attack_lr = v,
                    Err(_) => bad("attack_lr must be a float"),
                },
                "alpha_act" => match value.parse() {
                    Ok(v) => cfg.alpha_act = v,
                    Err(_) => bad("alpha_act must be a float"),
                },
                "alpha_tv" => match value.parse() {
                    Ok(v) => cfg.alpha_tv = v,
                    Err(_) => bad("alpha_tv must be a float"),
                },
                "alpha_l2" => match value.parse() {
                    Ok(v) => cfg.alpha_l2 = v,
                    Err(_) => bad("alpha_l2 must be a float"),
                },
                "data_dir" => {
                    cfg.data_dir = if value.is_empty() {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    };
                }
                other => errors.push(format!("line {}: unknown key '{other}'", lineno + 1)),
            }
        }
        errors.extend(cfg.validate());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Semantic checks, all reported at once.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.sites == 0 || 32 % self.sites.max(1) != 0 {
            errors.push(format!(
                "sites must divide the narrowest encoder width 32, got {}",
                self.sites
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            errors.push(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if self.noise_sigma < 0.0 {
            errors.push(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            errors.push("epochs must be >= 1".into());
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            errors.push(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            ));
        }
        if self.samples < 10 {
            errors.push(format!("samples must be >= 10, got {}", self.samples));
        }
        if self.attack_steps == 0 {
            errors.push("attack_steps must be >= 1".into());
        }
        errors
    }

    /// The resolved document written next to every run's outputs.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sites = {}", self.sites);
        let _ = writeln!(out, "variant = {}", self.variant.name());
        let _ = writeln!(out, "dropout_p = {}", self.dropout_p);
        let _ = writeln!(out, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "image_size = {}", self.image_size);
        let _ = writeln!(out, "samples = {}", self.samples);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "attack_steps = {}", self.attack_steps);
        let _ = writeln!(out, "attack_lr = {}", self.attack_lr);
        let _ = writeln!(out, "alpha_act = {}", self.alpha_act);
        let _ = writeln!(out, "alpha_tv = {}", self.alpha_tv);
        let _ = writeln!(out, "alpha_l2 = {}", self.alpha_l2);
        let _ = writeln!(
            out,
            "data_dir = {}",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        out
    }

    pub fn guard(&self) -> ShareGuard {
        ShareGuard {
            dropout_p: self.dropout_p,
            noise_sigma: self.noise_sigma,
        }
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "splitseg",
    about = "Split-learning simulator for multi-modal segmentation: training, \
             inversion attacks and share-boundary defenses"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic phantom set on disk.
    Gendata {
        #[arg(long, default_value_t = 484)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        sites: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long, default_value_t = false)]
        force: bool,
    },
    /// Train a centralized or split model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert intercepted activation dumps against an encoder checkpoint.
    Attack {
        /// Directory with act_s{site}_l{level}.ten / orig_s{site}.ten dumps.
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated levels; defaults to every level the checkpoint's
        /// variant shares.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Invert each sample independently instead of as one batch.
        #[arg(long, default_value_t = false)]
        per_sample: bool,
        /// Defense label recorded in ssim.csv; defaults to the guard of the
        /// training run the dumps came from.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train + intercept + attack across a defense parameter sweep.
    Sweep {
        /// "dropout_p" or "noise_sigma".
        #[arg(long)]
        param: String,
        /// Comma-separated parameter values, e.g. "0,1,2,5".
        #[arg(long)]
        values: String,
        /// Base config file; defaults to the short sweep budget
        /// (3 epochs on 200 phantoms).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Levels to attack per run (comma-separated).
        #[arg(long, default_value = "0")]
        levels: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate an ssim.csv into a leakage report.
    Report {
        #[arg(long)]
        ssim: PathBuf,
        /// Where to write leakage_report.csv; defaults next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point used by the binary; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Gendata {
            n,
            sites,
            size,
            seed,
            out,
            force,
        } => cmd_gendata(n, sites, size, seed, &out, force),
        Cmd::Train { config, out } => cmd_train(&config, &out),
        Cmd::Attack {
            dumps,
            checkpoint,
            levels,
            steps,
            seed,
            per_sample,
            label,
            out,
        } => cmd_attack(
            &dumps,
            &checkpoint,
            levels.as_deref(),
            steps,
            seed,
            per_sample,
            label,
            &out,
        ),
        Cmd::Sweep {
            param,
            values,
            config,
            levels,
            out,
        } => cmd_sweep(&param, &values, config.as_deref(), &levels, &out),
        Cmd::Report { ssim, out } => cmd_report(&ssim, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Validation(msgs)) => {
            for m in msgs {
                eprintln!("error: {m}");
            }
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

// ---------------------------------------------------------------------------
// gendata
// ---------------------------------------------------------------------------

pub fn cmd_gendata(
    n: usize,
    sites: usize,
    size: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> CliResult {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return Err(CliError::Validation(vec![format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )]));
        }
    }
    let set = data::gen_phantoms(n, sites, size, seed)
        .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    data::save_phantom_set(out, &set).map_err(CliError::runtime)?;
    let split = data::split_dataset(n, seed).map_err(CliError::runtime)?;
    println!(
        "wrote {} phantoms ({} modalities, {}x{}) to {}",
        n,
        sites,
        size,
        size,
        out.display()
    );
    println!(
        "split: {} train / {} val / {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn metrics_csv(history: &[EpochRow]) -> String {
    let mut out = String::from("epoch,split,loss,dice_mean,dice_per_class\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}/{:.6}/{:.6}",
            r.epoch, r.split, r.loss, r.dice_mean, r.dice_per_class[0], r.dice_per_class[1],
            r.dice_per_class[2]
        );
    }
    out
}

fn load_or_gen_phantoms(cfg: &ExperimentConfig) -> Result<PhantomSet, CliError> {
    match &cfg.data_dir {
        Some(dir) => {
            let set = data::load_phantom_set(dir).map_err(CliError::runtime)?;
            let mut problems = Vec::new();
            if set.sites != cfg.sites {
                problems.push(format!(
                    "data_dir has {} modalities but config says sites = {}",
                    set.sites, cfg.sites
                ));
            }
            if set.size != cfg.image_size {
                problems.push(format!(
                    "data_dir images are {}px but config says image_size = {}",
                    set.size, cfg.image_size
                ));
            }
            if set.n < cfg.samples {
                problems.push(format!(
                    "data_dir has {} samples but config wants {}",
                    set.n, cfg.samples
                ));
            }
            if !problems.is_empty() {
                return Err(CliError::Validation(problems));
            }
            Ok(PhantomSet {
                n: cfg.samples,
                samples: set.samples.into_iter().take(cfg.samples).collect(),
                ..set
            })
        }
        None => data::gen_phantoms(cfg.samples, cfg.sites, cfg.image_size, cfg.seed)
            .map_err(CliError::runtime),
    }
}

pub fn cmd_train(config_path: &Path, out: &Path) -> CliResult {
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::Validation(vec![format!(
            "cannot read config {}: {e}",
            config_path.display()
        )])
    })?;
    let cfg = ExperimentConfig::parse(&text).map_err(CliError::Validation)?;
    run_train(&cfg, out).map(|_| ())
}

/// Runs one training experiment into `out` and returns the metrics history.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EpochRow>, CliError> {
    fs::create_dir_all(out).map_err(CliError::runtime)?;
    fs::write(out.join("config.txt"), cfg.emit()).map_err(CliError::runtime)?;
    let phantoms = load_or_gen_phantoms(cfg)?;
    let dsplit = data::split_dataset(phantoms.n, cfg.seed).map_err(CliError::runtime)?;
    let arch = ArchSpec::default();

    let history = match cfg.variant {
        RunVariant::Central => {
            println!(
                "training centralized baseline: {} input channels, widths {:?}",
                cfg.sites,
                arch.encoder_widths()
            );
            let tc = TrainConfig {
                arch,
                split: SplitConfig {
                    num_sites: 1,
                    label_site: 0,
                    skip_variant: SkipVariant::AllSkips,
                },
                guard: ShareGuard::default(),
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                epochs: cfg.epochs,
                seed: cfg.seed,
                schedule: Schedule::Sequential,
            };
            let outcome = train_central(&phantoms, &dsplit, &tc).map_err(CliError::runtime)?;
            let meta = CheckpointMeta {
                kind: ModelKind::Central,
                num_sites: 1,
                label_site: 0,
                variant: SkipVariant::AllSkips,
                seed: cfg.seed,
                arch: ArchSpec {
                    in_channels: cfg.sites,
                    ..arch
                },
            };
            save_checkpoint(
                &out.join("checkpoints/model.ckpt"),
                &meta,
                &[
                    ("enc0", outcome.model.encoder.params()),
                    ("dec", outcome.model.decoder.params()),
                ],
            )
            .map_err(CliError::runtime)?;
            outcome.history
        }
        RunVariant::Split(variant) => {
            let split = SplitConfig {
                num_sites: cfg.sites,
                label_site: 0,
                skip_variant: variant,
            };
            let widths = per_site_widths(&arch, cfg.sites);
            for k in 0..cfg.sites {
                println!("site {k} encoder widths: {widths:?}");
            }
            println!(
                "decoder consumes concatenated widths {:?}",
                arch.encoder_widths()
            );
            let tc = TrainConfig {
                arch,
                split,
                guard: cfg.guard(),
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                epochs: cfg.epochs,
                seed: cfg.seed,
                schedule: Schedule::Threaded,
            };
            let outcome = train_split(&phantoms, &dsplit, &tc).map_err(CliError::runtime)?;

            // honest-but-curious tap on a fixed validation batch
            let tap_ids: Vec<u32> = dsplit
                .val
                .iter()
                .take(cfg.batch_size.min(dsplit.val.len()))
                .map(|&i| i as u32)
                .collect();
            let tap_iteration = outcome
                .history
                .len()
                .max(cfg.epochs * dsplit.train.len().div_ceil(cfg.batch_size))
                as u32;
            for site in &outcome.sites {
                let mut orig_saved = false;
                for &level in variant.shared_levels() {
                    let (act, orig) = intercept(site, level, &tap_ids, tap_iteration)
                        .map_err(CliError::runtime)?;
                    data::save_ten(
                        &out.join(format!("dumps/act_s{}_l{}.ten", site.site, level)),
                        &act,
                    )
                    .map_err(CliError::runtime)?;
                    if !orig_saved {
                        data::save_ten(&out.join(format!("dumps/orig_s{}.ten", site.site)), &orig)
                            .map_err(CliError::runtime)?;
                        orig_saved = true;
                    }
                }
            }
            let meta = CheckpointMeta {
                kind: ModelKind::Split,
                num_sites: cfg.sites,
                label_site: 0,
                variant,
                seed: cfg.seed,
                arch,
            };
            let mut components: Vec<(String, Vec<&crate::nn::Param>)> = Vec::new();
            for site in &outcome.sites {
                components.push((format!("enc{}", site.site), site.encoder.params()));
            }
            components.push(("dec".to_string(), outcome.coordinator.decoder.params()));
            let borrowed: Vec<(&str, Vec<&crate::nn::Param>)> = components
                .iter()
                .map(|(n, p)| (n.as_str(), p.clone()))
                .collect();
            save_checkpoint(&out.join("checkpoints/model.ckpt"), &meta, &borrowed)
                .map_err(CliError::runtime)?;
            outcome.history
        }
    };
    fs::write(out.join("metrics.csv"), metrics_csv(&history)).map_err(CliError::runtime)?;
    if let Some(last_val) = history.iter().rev().find(|r| r.split == "val") {
        println!(
            "final val loss {:.4}, mean foreground Dice {:.4}",
            last_val.loss, last_val.dice_mean
        );
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

fn parse_levels(s: &str) -> Result<Vec<usize>, CliError> {
    let levels: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse()).collect();
    match levels {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Validation(vec![format!(
            "cannot parse levels list '{s}'"
        )])),
    }
}

/// Reads the defense label of the training run the dumps came from.
fn defense_label_from(dumps: &Path) -> Option<String> {
    let cfg_path = dumps.parent()?.join("config.txt");
    let text = fs::read_to_string(cfg_path).ok()?;
    let cfg = ExperimentConfig::parse(&text).ok()?;
    Some(cfg.guard().label())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_attack(
    dumps: &Path,
    checkpoint: &Path,
    levels: Option<&str>,
    steps: Option<usize>,
    seed: u64,
    per_sample: bool,
    label: Option<String>,
    out: &Path,
) -> CliResult {
    let ckpt = load_checkpoint(checkpoint)
        .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    if ckpt.meta.kind == ModelKind::Central {
        return Err(CliError::Validation(vec![
            "a centralized checkpoint shares no activations to invert".into(),
        ]));
    }
    let levels = match levels {
        Some(s) => parse_levels(s)?,
        None => ckpt.meta.variant.shared_levels().to_vec(),
    };
    let mut missing = Vec::new();
    let mut items = Vec::new();
    let mut originals = BTreeMap::new();
    let mut encoders = BTreeMap::new();
    for site in 0..ckpt.meta.num_sites {
        let orig_path = dumps.join(format!("orig_s{site}.ten"));
        if !orig_path.exists() {
            missing.push(orig_path.display().to_string());
        }
        for &level in &levels {
            let act_path = dumps.join(format!("act_s{site}_l{level}.ten"));
            if !act_path.exists() {
                missing.push(act_path.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        let mut msgs = vec!["missing dump files:".to_string()];
        msgs.extend(missing);
        return Err(CliError::Validation(msgs));
    }
    for site in 0..ckpt.meta.num_sites {
        originals.insert(
            site,
            data::load_ten(&dumps.join(format!("orig_s{site}.ten"))).map_err(CliError::runtime)?,
        );
        encoders.insert(site, ckpt.encoder(site).expect("split checkpoint"));
        for &level in &levels {
            items.push(SweepItem {
                site,
                level,
                target: data::load_ten(&dumps.join(format!("act_s{site}_l{level}.ten")))
                    .map_err(CliError::runtime)?,
            });
        }
    }
    let cfg = AttackConfig {
        steps: steps.unwrap_or(AttackConfig::default().steps),
        per_sample,
        ..AttackConfig::default()
    };
    let defense = label
        .or_else(|| defense_label_from(dumps))
        .unwrap_or_else(|| "none".to_string());

    fs::create_dir_all(out).map_err(CliError::runtime)?;
    let mut cfg_txt = String::new();
    let _ = writeln!(cfg_txt, "dumps = {}", dumps.display());
    let _ = writeln!(cfg_txt, "checkpoint = {}", checkpoint.display());
    let _ = writeln!(
        cfg_txt,
        "levels = {}",
        levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(cfg_txt, "steps = {}", cfg.steps);
    let _ = writeln!(cfg_txt, "init_lr = {}", cfg.init_lr);
    let _ = writeln!(cfg_txt, "init = uniform[0,1)");
    let _ = writeln!(cfg_txt, "alpha_act = {}", cfg.alpha_act);
    let _ = writeln!(cfg_txt, "alpha_tv = {}", cfg.alpha_tv);
    let _ = writeln!(cfg_txt, "alpha_l2 = {}", cfg.alpha_l2);
    let _ = writeln!(cfg_txt, "per_sample = {per_sample}");
    let _ = writeln!(cfg_txt, "seed = {seed}");
    let _ = writeln!(cfg_txt, "defense = {defense}");
    fs::write(out.join("config.txt"), cfg_txt).map_err(CliError::runtime)?;

    let outcomes =
        attack::level_sweep(&encoders, &originals, &items, &cfg, seed).map_err(CliError::runtime)?;

    let mut csv = String::from("site,level,sample,defense,ssim\n");
    for o in &outcomes {
        for (j, v) in o.ssim_per_sample.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{},{},{:.6}", o.site, o.level, j, defense, v);
        }
        data::save_ten(
            &out.join(format!("inversions/rec_s{}_l{}.ten", o.site, o.level)),
            &o.result.recovered,
        )
        .map_err(CliError::runtime)?;
        let s = o.result.recovered.shape;
        for j in 0..s.batch {
            let plane = &o.result.recovered.values[j * s.hw()..(j + 1) * s.hw()];
            data::save_pgm(
                &out.join(format!("gallery/rec_s{}_l{}_b{j}.pgm", o.site, o.level)),
                plane,
                s.height,
                s.width,
            )
            .map_err(CliError::runtime)?;
        }
        println!(
            "site {} level {}: mean SSIM {:.4} (final loss {:.5})",
            o.site, o.level, o.ssim_mean, o.result.final_loss
        );
    }
    for (site, orig) in &originals {
        let s = orig.shape;
        for j in 0..s.batch {
            let plane = &orig.values[j * s.hw()..(j + 1) * s.hw()];
            data::save_pgm(
                &out.join(format!("gallery/orig_s{site}_b{j}.pgm")),
                plane,
                s.height,
                s.width,
            )
            .map_err(CliError::runtime)?;
        }
    }
    fs::write(out.join("ssim.csv"), csv).map_err(CliError::runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn cmd_sweep(
    param: &str,
    values: &str,
    config: Option<&Path>,
    levels: &str,
    out: &Path,
) -> CliResult {
    if param != "dropout_p" && param != "noise_sigma" {
        return Err(CliError::Validation(vec![format!(
            "param must be dropout_p or noise_sigma, got '{param}'"
        )]));
    }
    let values: Vec<f32> = {
        let parsed: Result<Vec<f32>, _> = values
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse())
            .collect();
        match parsed {
            Ok(v) if !v.is_empty() => v,
            _ => {
                return Err(CliError::Validation(vec![format!(
                    "cannot parse values list '{values}' (need at least one float)"
                )]))
            }
        }
    };
    let levels = parse_levels(levels)?;
    let base = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Validation(vec![format!("cannot read config {}: {e}", path.display())])
            })?;
            ExperimentConfig::parse(&text).map_err(CliError::Validation)?
        }
        None => ExperimentConfig {
            epochs: 3,
            samples: 200,
            ..ExperimentConfig::default()
        },
    };
    if base.variant == RunVariant::Central {
        return Err(CliError::Validation(vec![
            "sweep needs a split variant (the centralized model shares nothing)".into(),
        ]));
    }
    fs::create_dir_all(out).map_err(CliError::runtime)?;
    let mut rows = String::from("param,value,site,level,mean_ssim,val_dice\n");
    for &v in &values {
        let mut cfg = base.clone();
        match param {
            "dropout_p" => cfg.dropout_p = v,
            _ => cfg.noise_sigma = v,
        }
        if !cfg.validate().is_empty() {
            return Err(CliError::Validation(cfg.validate()));
        }
        let run_dir = out.join(format!("run_{param}_{v}"));
        println!("== sweep {param} = {v}");
        let history = run_train(&cfg, &run_dir)?;
        let val_dice = history
            .iter()
            .rev()
            .find(|r| r.split == "val")
            .map(|r| r.dice_mean)
            .unwrap_or(f32::NAN);
        let attack_out = run_dir.join("attack");
        cmd_attack(
            &run_dir.join("dumps"),
            &run_dir.join("checkpoints/model.ckpt"),
            Some(
                &levels
                    .iter()
                    .map(|l| l.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            Some(cfg.attack_steps),
            cfg.seed,
            false,
            Some(cfg.guard().label()),
            &attack_out,
        )?;
        let ssim_csv =
            fs::read_to_string(attack_out.join("ssim.csv")).map_err(CliError::runtime)?;
        let records = parse_ssim_csv(&ssim_csv)?;
        let report = build_leakage_report(&records).map_err(CliError::runtime)?;
        for r in &report.rows {
            let _ = writeln!(
                rows,
                "{},{},{},{},{:.6},{:.6}",
                param, v, r.site, r.level, r.mean_ssim, val_dice
            );
        }
    }
    fs::write(out.join("sweep.csv"), &rows).map_err(CliError::runtime)?;
    println!("{rows}");
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn parse_ssim_csv(text: &str) -> Result<Vec<SsimRecord>, CliError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CliError::Validation(vec![format!(
                "ssim.csv line {}: expected 5 columns, got {}",
                i + 1,
                parts.len()
            )]));
        }
        let parse_err = |what: &str| {
            CliError::Validation(vec![format!("ssim.csv line {}: bad {what}", i + 1)])
        };
        records.push(SsimRecord {
            site: parts[0].parse().map_err(|_| parse_err("site"))?,
            level: parts[1].parse().map_err(|_| parse_err("level"))?,
            sample: parts[2].parse().map_err(|_| parse_err("sample"))?,
            defense: parts[3].to_string(),
            ssim: parts[4].parse().map_err(|_| parse_err("ssim"))?,
        });
    }
    Ok(records)
}

pub fn cmd_report(ssim: &Path, out: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(ssim).map_err(|e| {
        CliError::Validation(vec![format!("cannot read {}: {e}", ssim.display())])
    })?;
    let records = parse_ssim_csv(&text)?;
    let report = build_leakage_report(&records)
        .map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    let target = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| ssim.with_file_name("leakage_report.csv"));
    fs::write(&target, report.to_csv()).map_err(CliError::runtime)?;
    print!("{}", report.summary());
    println!("wrote {}", target.display());
    Ok(())
}

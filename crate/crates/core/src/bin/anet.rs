//! `anet`: data generation, training, evaluation, ablation, gradient checks
//! and activation-map export.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure. `ANET_THREADS` caps the worker pool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use anet::ablation::{ablate_on, AblationSpec};
use anet::config::RunConfig;
use anet::data::{gen_synthetic, load_split, load_splits, split_by_identity, write_splits, Split};
use anet::eval::{evaluate_fixed, export_activation_maps, vehicleid_protocol, Protocol};
use anet::model::{ModelState, Selector, Variant};
use anet::train::{config_digest, Checkpoint, Trainer};
use anet::{verify, Error};

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.anet";
const LOG_FILE: &str = "log.jsonl";

#[derive(Parser)]
#[command(name = "anet", version, about = "Attribute-enhanced vehicle re-identification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`key = value`, dotted sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset with train/query/gallery manifests.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ids: Option<usize>,
        #[arg(long)]
        per_id: Option<usize>,
        #[arg(long)]
        train_ids: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one variant; writes config, loss log and checkpoints under --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from gen-data; synthesized in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint; the run's config.txt must sit next to it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        selector: Option<String>,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Keep same-identity same-camera gallery entries.
        #[arg(long)]
        no_camera_filter: bool,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant with several seeds and tabulate medians.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Comma-separated variants; all by default.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write channel-mean maps of G and G_reid as graymaps.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Primitive,
    Composed,
    All,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Verification(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::IncompatibleSelector { .. } | Error::InvalidArgument(_))
        );
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut c = match &args.config {
        Some(p) => RunConfig::parse(
            &fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Usage)?,
        )?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        c.set(k.trim(), v)?;
    }
    Ok(c)
}

fn ensure_empty_or_force(dir: &Path, force: bool) -> Result<(), Failure> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(usage(format!(
            "{} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config stored beside a checkpoint, with its digest checked.
fn run_config_for(checkpoint: &Path) -> Result<(RunConfig, Checkpoint), Failure> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))
        .map_err(Failure::Runtime)?;
    let cfg = RunConfig::parse(&text)?;
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_digest(&config_digest(&text))?;
    Ok((cfg, ck))
}

fn restore_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<ModelState, Failure> {
    let mut state = ModelState::init(&cfg.model, 0)?;
    ck.restore(&mut state, None)?;
    Ok(state)
}

fn gen_data(
    cfg: ConfigArgs,
    out: PathBuf,
    seed: Option<u64>,
    ids: Option<usize>,
    per_id: Option<usize>,
    train_ids: Option<usize>,
    force: bool,
) -> Result<(), Failure> {
    let mut c = load_config(&cfg)?;
    if let Some(s) = seed {
        c.data.seed = s;
    }
    if let Some(n) = ids {
        c.data.id_count = n;
        if train_ids.is_none() && c.train_ids >= n {
            c.train_ids = (n * 4 / 5).max(1);
        }
    }
    if let Some(n) = per_id {
        c.data.images_per_id = n;
    }
    if let Some(n) = train_ids {
        c.train_ids = n;
    }
    c.sync();
    if c.train_ids == 0 || c.train_ids >= c.data.id_count {
        return Err(usage(format!(
            "train ids {} must leave held-out identities among {}",
            c.train_ids, c.data.id_count
        )));
    }
    ensure_empty_or_force(&out, force)?;
    let splits = split_by_identity(&gen_synthetic(&c.data)?, c.train_ids)?;
    write_splits(&splits, &out)?;
    write_file(&out.join(CONFIG_FILE), &c.to_text())?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}",
        splits.train.len(),
        splits.query.len(),
        splits.gallery.len(),
        out.display()
    );
    Ok(())
}

fn train(
    cfg: ConfigArgs,
    variant: Option<String>,
    out: PathBuf,
    data: Option<PathBuf>,
    resume: bool,
) -> Result<(), Failure> {
    let mut c = load_config(&cfg)?;
    if let Some(v) = variant {
        c.set("variant", &v)?;
    }
    if !c.model.variant.supports(c.eval.selector) {
        c.eval.selector = Selector::F;
    }
    c.validate()?;
    let text = c.to_text();
    let splits = match &data {
        Some(dir) => load_splits(dir, &anet::data::AttributeSchema::color_type(c.data.color_classes, c.data.type_classes))?,
        None => split_by_identity(&gen_synthetic(&c.data)?, c.train_ids)?,
    };
    fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.into()))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        let stored = fs::read_to_string(out.join(CONFIG_FILE))
            .context("resume needs the run's config.txt")
            .map_err(Failure::Runtime)?;
        if stored != text {
            return Err(usage("resolved config differs from the stored run config"));
        }
        let mut t = Trainer::new(&splits.train, &c.model, &c.train)?;
        t.set_digest(config_digest(&text));
        t.restore(&Checkpoint::load(&ck_path)?)?;
        t
    } else {
        write_file(&out.join(CONFIG_FILE), &text)?;
        let mut t = Trainer::new(&splits.train, &c.model, &c.train)?;
        t.set_digest(config_digest(&text));
        t
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(out.join(LOG_FILE))
        .map_err(|e| Failure::Runtime(e.into()))?;
    while !trainer.finished() {
        let mut lines = String::new();
        let steps = trainer.run_epoch(|s| {
            lines.push_str(&serde_json::to_string(s).expect("step log serializes"));
            lines.push('\n');
        })?;
        log.write_all(lines.as_bytes()).map_err(|e| Failure::Runtime(e.into()))?;
        let last = steps.last().expect("epochs have steps");
        log::info!(
            "epoch {} stage {} lr {:.2e} loss {:.4}",
            last.epoch,
            last.stage,
            last.lr,
            last.report.total
        );
        trainer.checkpoint().save(&ck_path)?;
    }
    if !splits.query.is_empty() && !splits.gallery.is_empty() {
        let r = evaluate_fixed(
            &splits.query,
            &splits.gallery,
            &trainer.model,
            c.eval.selector,
            c.eval.cross_camera_filter,
        )?;
        write_file(&out.join("eval.json"), &r.to_json()?)?;
        println!(
            "{} ({}): mAP {:.4}  R1 {:.4}  R5 {:.4}",
            c.model.variant, c.eval.selector, r.map, r.r1, r.r5
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: PathBuf,
    data: PathBuf,
    selector: Option<String>,
    protocol: Option<String>,
    repeats: Option<usize>,
    seed: Option<u64>,
    no_camera_filter: bool,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (mut c, ck) = run_config_for(&checkpoint)?;
    if let Some(s) = selector {
        c.eval.selector = Selector::parse(&s)?;
    }
    if let Some(p) = protocol {
        c.eval.protocol = Protocol::parse(&p)?;
    }
    if let Some(r) = repeats {
        c.eval.repeats = r;
    }
    if let Some(s) = seed {
        c.eval.seed = s;
    }
    if no_camera_filter {
        c.eval.cross_camera_filter = false;
    }
    let variant = c.model.variant;
    if !variant.supports(c.eval.selector) {
        return Err(Error::IncompatibleSelector {
            selector: c.eval.selector.name().into(),
            variant: variant.name().into(),
        }
        .into());
    }
    let state = restore_model(&c, &ck)?;
    let schema = anet::data::AttributeSchema::color_type(c.data.color_classes, c.data.type_classes);
    let query = load_split(&data, &schema, Split::Query)?;
    let gallery = load_split(&data, &schema, Split::Gallery)?;
    let report = match c.eval.protocol {
        Protocol::Fixed => evaluate_fixed(&query, &gallery, &state, c.eval.selector, c.eval.cross_camera_filter)?,
        Protocol::VehicleIdRepeat => {
            let mut samples = query.samples.clone();
            samples.extend(gallery.samples.iter().cloned());
            let test = anet::data::Dataset::new(samples, schema, Split::Test)?;
            vehicleid_protocol(&test, &state, c.eval.selector, c.eval.repeats, c.eval.seed)?
        }
    };
    let json = report.to_json()?;
    match out {
        Some(p) => write_file(&p, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn ablate(
    cfg: ConfigArgs,
    data: Option<PathBuf>,
    seeds: u64,
    variants: Option<String>,
    out: PathBuf,
) -> Result<(), Failure> {
    let c = load_config(&cfg)?;
    c.model.validate()?;
    c.train.validate()?;
    let variants = match variants {
        Some(list) => list
            .split(',')
            .map(|v| Variant::parse(v.trim()))
            .collect::<Result<Vec<_>, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let spec = AblationSpec {
        data: c.data.clone(),
        train_ids: c.train_ids,
        model: c.model.clone(),
        train: c.train.clone(),
        variants,
        seeds: (0..seeds).collect(),
        cross_camera_filter: c.eval.cross_camera_filter,
        all_vs_all: c.eval.all_vs_all,
    };
    let splits = match &data {
        Some(dir) => load_splits(dir, &anet::data::AttributeSchema::color_type(c.data.color_classes, c.data.type_classes))?,
        None => spec.splits()?,
    };
    fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.into()))?;
    write_file(&out.join(CONFIG_FILE), &c.to_text())?;
    let table = ablate_on(&spec, &splits)?;
    write_file(&out.join("ablation.json"), &serde_json::to_string_pretty(&table).map_err(Error::from)?)?;
    let text = table.to_text();
    write_file(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(scope: Scope, seed: u64) -> Result<(), Failure> {
    let mut reports = Vec::new();
    if matches!(scope, Scope::Primitive | Scope::All) {
        reports.extend(verify::primitive_checks(seed)?);
    }
    if matches!(scope, Scope::Composed | Scope::All) {
        reports.extend(verify::composed_suite(seed)?);
    }
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn export_maps(checkpoint: PathBuf, data: PathBuf, count: usize, out: PathBuf) -> Result<(), Failure> {
    let (c, ck) = run_config_for(&checkpoint)?;
    let state = restore_model(&c, &ck)?;
    let schema = anet::data::AttributeSchema::color_type(c.data.color_classes, c.data.type_classes);
    let query = load_split(&data, &schema, Split::Query)?;
    let images: Vec<_> = query.samples.iter().take(count).map(|s| s.image.clone()).collect();
    let written = export_activation_maps(&state, &images, &out)?;
    println!("wrote {} maps to {}", written.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData { cfg, out, seed, ids, per_id, train_ids, force } => {
            gen_data(cfg, out, seed, ids, per_id, train_ids, force)
        }
        Cmd::Train { cfg, variant, out, data, resume } => train(cfg, variant, out, data, resume),
        Cmd::Eval { checkpoint, data, selector, protocol, repeats, seed, no_camera_filter, out } => {
            eval(checkpoint, data, selector, protocol, repeats, seed, no_camera_filter, out)
        }
        Cmd::Ablate { cfg, data, seeds, variants, out } => ablate(cfg, data, seeds, variants, out),
        Cmd::Gradcheck { scope, seed } => gradcheck(scope, seed),
        Cmd::ExportMaps { checkpoint, data, count, out } => export_maps(checkpoint, data, count, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = std::env::var("ANET_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: ANET_THREADS: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

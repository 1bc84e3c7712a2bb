//! Command-line driver: `train`, `translate`, `eval`, and `ablate` bind
//! config files plus dotted-key overrides to the library workflows. Every
//! command validates its whole input before touching the filesystem, and
//! exits 0 on success, 2 on configuration errors, 3 on data errors, 4 on
//! numerical aborts.

use clap::{Parser, Subcommand, ValueEnum};
use dcl::error::{Error, Result};
use dcl::evaluation::{
    diversity_score, frechet_distance, translate_folder, write_eval_report, Embedder, EvalRow,
    FeatureStats, RandomProjectionEmbedder, COLLAPSE_THRESHOLD,
};
use dcl::imagedata::{load_image, scan_image_dir};
use dcl::training::{load_trainer, run_training};
use ndarray::Array1;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "dcl",
    version,
    about = "Dual contrastive image translation toolkit"
)]
struct Cli {
    /// Override the config seed (applied after every --set).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory; defaults to runs/<config stem>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Dotted-key config override, repeatable (e.g. --set nce.temperature=0.05).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue a previous run from its latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Discard an existing run directory and start over.
        #[arg(long)]
        force: bool,
    },
    /// Translate a folder of images with a trained checkpoint.
    Translate {
        /// Run directory holding config.toml and checkpoints/.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint name under <run>/checkpoints (e.g. latest, epoch_10).
        #[arg(long, default_value = "latest")]
        checkpoint: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Direction::Xy)]
        direction: Direction,
    },
    /// Compare a real and a translated image folder.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Report path; defaults to <fake>/eval_report.tsv.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Checkpoint label recorded in the report.
        #[arg(long, default_value = "-")]
        checkpoint_id: String,
    },
    /// Train with exactly one ablation toggled on.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        which: Ablation,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    /// Forward translator G.
    Xy,
    /// Reverse translator F.
    Yx,
}

#[derive(Clone, Copy, ValueEnum, Debug)]
enum Ablation {
    /// Prepend the raw RGB tap to the contrastive layers.
    #[value(name = "I")]
    I,
    /// Add external negatives from the paired direction.
    #[value(name = "II")]
    II,
    /// Share one encoder and head set between both embeddings.
    #[value(name = "III")]
    III,
    /// Add the cycle-consistency term.
    #[value(name = "IV")]
    IV,
    /// Drop the reverse translator and its critic.
    #[value(name = "V")]
    V,
}

impl Ablation {
    fn id(self) -> &'static str {
        match self {
            Ablation::I => "I",
            Ablation::II => "II",
            Ablation::III => "III",
            Ablation::IV => "IV",
            Ablation::V => "V",
        }
    }

    fn override_key(self) -> &'static str {
        match self {
            Ablation::I => "nce.include_rgb_layer",
            Ablation::II => "nce.external_negatives",
            Ablation::III => "ablation.shared_embedding",
            Ablation::IV => "ablation.cycle_loss",
            Ablation::V => "ablation.single_direction",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn parse_sets(sets: &[String], seed: Option<u64>) -> Result<Vec<(String, String)>> {
    let mut overrides = Vec::with_capacity(sets.len() + 1);
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Error::Config(format!("--set needs KEY=VALUE, got `{s}`")));
        };
        if k.trim().is_empty() {
            return Err(Error::Config(format!("--set has an empty key in `{s}`")));
        }
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    Ok(overrides)
}

fn default_run_dir(config: &Path, suffix: Option<&str>) -> PathBuf {
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    match suffix {
        Some(sfx) => PathBuf::from("runs").join(format!("{stem}-ablation-{sfx}")),
        None => PathBuf::from("runs").join(stem),
    }
}

/// Append-only run directories: an occupied dir continues only with
/// --resume, or starts over with --force (which deletes it).
fn prepare_run_dir(run_dir: &Path, resume: bool, force: bool) -> Result<()> {
    let occupied = run_dir.join("config.toml").exists();
    if occupied && !resume && !force {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --resume to continue it or --force to discard it",
            run_dir.display()
        )));
    }
    if force && run_dir.exists() {
        std::fs::remove_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    }
    Ok(())
}

fn train(
    config: &Path,
    overrides: &[(String, String)],
    run_dir: Option<PathBuf>,
    suffix: Option<&str>,
    resume: bool,
    force: bool,
) -> Result<()> {
    if resume && force {
        return Err(Error::Config(
            "--resume and --force contradict each other".to_string(),
        ));
    }
    let cfg = dcl::config::load_config(config, overrides)?;
    let run_dir = match (run_dir, suffix) {
        (Some(dir), Some(sfx)) => {
            let name = dir
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".to_string());
            dir.with_file_name(format!("{name}-ablation-{sfx}"))
        }
        (Some(dir), None) => dir,
        (None, _) => default_run_dir(config, suffix),
    };
    prepare_run_dir(&run_dir, resume, force)?;
    run_training(&cfg, &run_dir, resume)
}

fn pick_generator<'a>(
    trainer: &'a dcl::training::Trainer,
    direction: Direction,
) -> Result<&'a dcl::networks::Generator> {
    match direction {
        Direction::Xy => Ok(&trainer.nets().gen_xy),
        Direction::Yx => trainer.nets().gen_yx.as_ref().ok_or_else(|| {
            Error::Config(
                "this run has no reverse translator (single-direction ablation)".to_string(),
            )
        }),
    }
}

fn translate(
    run: &Path,
    checkpoint: &str,
    overrides: &[(String, String)],
    input: &Path,
    out: &Path,
    direction: Direction,
) -> Result<()> {
    let cfg = dcl::config::load_config(&run.join("config.toml"), overrides)?;
    let trainer = load_trainer(&cfg, &run.join("checkpoints").join(checkpoint))?;
    let gen = pick_generator(&trainer, direction)?;
    let pairs = translate_folder(gen, input, out, cfg.data.crop_size as usize)?;
    println!(
        "translated {} images into {} (manifest.tsv alongside)",
        pairs.len(),
        out.display()
    );
    Ok(())
}

fn embed_dir(dir: &Path, emb: &dyn Embedder) -> Result<(Vec<Array1<f64>>, usize)> {
    let paths = scan_image_dir(dir)?;
    let mut embeddings = Vec::with_capacity(paths.len());
    for p in &paths {
        embeddings.push(emb.embed(&load_image(p)?));
    }
    let n = embeddings.len();
    Ok((embeddings, n))
}

fn eval(
    real: &Path,
    fake: &Path,
    report: Option<PathBuf>,
    checkpoint_id: &str,
    seed: u64,
) -> Result<()> {
    let emb = RandomProjectionEmbedder::new(seed);
    let (real_embs, n_real) = embed_dir(real, &emb)?;
    let fake_paths = scan_image_dir(fake)?;
    let mut fakes = Vec::with_capacity(fake_paths.len());
    for p in &fake_paths {
        fakes.push(load_image(p)?);
    }
    let fake_embs: Vec<Array1<f64>> = fakes.iter().map(|i| emb.embed(i)).collect();
    let n_fake = fakes.len();

    let stats_real = FeatureStats::from_embeddings(&real_embs)?;
    let stats_fake = FeatureStats::from_embeddings(&fake_embs)?;
    let fd = frechet_distance(&stats_real, &stats_fake)?;
    let diversity = diversity_score(&fakes)?;

    println!("FD (custom embedder): {fd}");
    println!("diversity: {diversity}");
    if diversity < COLLAPSE_THRESHOLD {
        eprintln!(
            "warning: diversity {diversity:e} is below {COLLAPSE_THRESHOLD:e}; \
             outputs look mode-collapsed"
        );
    }

    let report_path = report.unwrap_or_else(|| fake.join("eval_report.tsv"));
    write_eval_report(
        &report_path,
        &[
            EvalRow {
                metric: "FD (custom embedder)".to_string(),
                value: fd,
                n_real,
                n_fake,
                embedder: emb.name().to_string(),
                checkpoint: checkpoint_id.to_string(),
            },
            EvalRow {
                metric: "diversity".to_string(),
                value: diversity,
                n_real,
                n_fake,
                embedder: "pixel-space".to_string(),
                checkpoint: checkpoint_id.to_string(),
            },
        ],
    )?;
    println!("report written to {}", report_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let overrides = parse_sets(&cli.sets, cli.seed)?;
    match cli.command {
        Command::Train {
            config,
            resume,
            force,
        } => train(&config, &overrides, cli.run_dir, None, resume, force),
        Command::Ablate {
            config,
            which,
            resume,
            force,
        } => {
            let mut overrides = overrides;
            overrides.push((which.override_key().to_string(), "true".to_string()));
            train(
                &config,
                &overrides,
                cli.run_dir,
                Some(which.id()),
                resume,
                force,
            )
        }
        Command::Translate {
            run,
            checkpoint,
            input,
            out,
            direction,
        } => translate(&run, &checkpoint, &overrides, &input, &out, direction),
        Command::Eval {
            real,
            fake,
            report,
            checkpoint_id,
        } => eval(&real, &fake, report, &checkpoint_id, cli.seed.unwrap_or(1)),
    }
}

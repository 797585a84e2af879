use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rano_core::cohort::{cohort_summary, write_manifest, ModalitySet};
use rano_core::error::IoContext;
use rano_core::models::ArchitectureId;
use rano_core::preprocess::Pipeline;
use rano_core::runner::report::report_from_dir;
use rano_core::runner::synth::{generate, SynthConfig};
use rano_core::runner::{
    baseline, evaluate_checkpoint, explain_checkpoint, Choices, RunLimits, Study, StudyConfig,
    StudyData,
};
use rano_core::train::PretrainTask;
use rano_core::{Error, Result, VolumeGrid};

#[derive(Parser)]
#[command(
    name = "rano",
    version,
    about = "RANO treatment-response classification pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Study configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct ChoiceArgs {
    /// Override the baseline subtraction choice.
    #[arg(long)]
    subtraction: Option<bool>,
    /// Modality set, e.g. `T1W+T2W+FLAIR`.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    architecture: Option<String>,
    /// `none` or `rotation`.
    #[arg(long)]
    pretraining: Option<String>,
    #[arg(long)]
    clinical: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Index the dataset, apply the timepoint filter and write cohort manifests.
    Ingest(ConfigArg),
    /// Run bias correction, denoising, registration and normalization into the cache.
    Preprocess(ConfigArg),
    /// Write the fold plan of every modality set on the modality axis.
    Split(ConfigArg),
    /// Train one configuration on one fold.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        choices: ChoiceArgs,
    },
    /// Score a checkpoint on the test samples it was held out on.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run or resume the greedy ablation over all axes.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        /// Train only the first N folds of each option.
        #[arg(long)]
        max_folds: Option<usize>,
        /// Stop after training N new folds (the study can be resumed later).
        #[arg(long)]
        stop_after: Option<usize>,
        /// No per-epoch progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Grad-CAM and saliency maps for test samples of a checkpoint.
    Explain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample ids (`patient:prev->curr`); defaults to the first test samples.
        #[arg(long)]
        sample: Vec<String>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-render figures and tables from a study directory.
    Report {
        /// Study output directory.
        dir: PathBuf,
    },
    /// Write a small synthetic dataset with a ready-to-run config.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        patients: usize,
        #[arg(long, default_value_t = 4)]
        followups: usize,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(c: &ConfigArg, cmd: &str) -> Result<StudyConfig> {
    let cfg = StudyConfig::load(&c.config)?;
    let snap = cfg.write_snapshot(&cfg.study.output, &format!("config.{cmd}.toml"))?;
    log::info!("resolved config written to {}", snap.display());
    Ok(cfg)
}

fn parse_pretraining(s: &str) -> Result<PretrainTask> {
    match s.to_ascii_lowercase().as_str() {
        "none" => Ok(PretrainTask::None),
        "rotation" => Ok(PretrainTask::RotationSelfSupervised {
            n_rotations: 24,
            epochs: 10,
        }),
        other => Err(Error::InvalidArgument(format!(
            "pretraining `{other}`: use none or rotation, or list the task in the config"
        ))),
    }
}

fn resolve_choices(study: &Study, a: &ChoiceArgs) -> Result<Choices> {
    let mut c = baseline(&study.axes);
    if let Some(v) = a.subtraction {
        c.subtraction = v;
    }
    if let Some(m) = &a.modalities {
        c.modalities = m.parse::<ModalitySet>()?;
    }
    if let Some(m) = &a.architecture {
        c.architecture = m.parse::<ArchitectureId>()?;
    }
    if let Some(p) = &a.pretraining {
        c.pretraining = study
            .cfg
            .axes
            .pretraining
            .iter()
            .find(|t| t.name() == p.as_str())
            .cloned()
            .map_or_else(|| parse_pretraining(p), Ok)?;
    }
    if let Some(v) = a.clinical {
        c.clinical = v;
    }
    Ok(c)
}

fn ingest(cfg: &StudyConfig) -> Result<()> {
    let data = StudyData::open(cfg)?;
    let out = cfg.study.output.join("cohort");
    fs::create_dir_all(&out).at(&out)?;
    println!(
        "indexed {} sessions, {} kept after filtering, {} excluded",
        data.index.records.len(),
        data.filtered.kept.len(),
        data.filtered.excluded.len()
    );
    let excluded = out.join("excluded.json");
    fs::write(
        &excluded,
        serde_json::to_vec_pretty(&data.filtered.excluded)?,
    )
    .at(&excluded)?;
    for key in &cfg.axes.modalities {
        let mods: ModalitySet = key.parse()?;
        let samples = data.samples(&mods);
        let manifest = out.join(format!("{}.jsonl", mods.key()));
        write_manifest(&manifest, &samples)?;
        match cohort_summary(&samples) {
            Ok(s) => println!(
                "{:<20} {:>4} pairs  PD/SD/PR/CR {:?}",
                mods.key(),
                s.total,
                s.counts
            ),
            Err(_) => println!("{:<20}    0 pairs", mods.key()),
        }
    }
    Ok(())
}

fn preprocess(cfg: &StudyConfig) -> Result<()> {
    let template_path = cfg
        .preprocess
        .template
        .as_ref()
        .ok_or_else(|| Error::Config("preprocess.template is required".into()))?;
    let template = VolumeGrid::<f32>::read_nifti(template_path)?;
    let pipe = Pipeline::new(
        template,
        cfg.preprocess.params.clone(),
        cfg.preprocess.cache_dir.clone(),
    )?;
    let data = StudyData::open(cfg)?;
    let inputs: Vec<PathBuf> = data
        .filtered
        .kept
        .iter()
        .flat_map(|r| r.image_paths.values().cloned())
        .collect();
    println!("preprocessing {} volumes", inputs.len());
    let rows = pipe.process_all(&inputs);
    let log_path = cfg.study.output.join("preprocess_log.csv");
    let mut w = csv::Writer::from_path(&log_path)?;
    let mut flagged = 0;
    for r in &rows {
        flagged += usize::from(r.flag.is_some());
        w.serialize(r)?;
    }
    w.flush().at(&log_path)?;
    println!(
        "{} done, {} cached, {} flagged; log at {}",
        rows.len(),
        rows.iter().filter(|r| r.cached).count(),
        flagged,
        log_path.display()
    );
    Ok(())
}

fn split(cfg: &StudyConfig) -> Result<()> {
    let data = StudyData::open(cfg)?;
    for key in &cfg.axes.modalities {
        let mods: ModalitySet = key.parse()?;
        let plan = data.folds(&mods)?;
        let p = cfg
            .study
            .output
            .join("folds")
            .join(format!("{}.json", mods.key()));
        plan.save(&p)?;
        println!(
            "{:<20} per-fold PD/SD/PR/CR {:?}",
            mods.key(),
            plan.per_fold_class_counts
        );
        for w in &plan.warnings {
            println!("  warning: {w}");
        }
    }
    Ok(())
}

fn print_metrics(m: &rano_core::eval::Metrics) {
    println!(
        "balanced accuracy {:.4}  f1 {:.4}  precision {:.4}  recall {:.4}",
        m.balanced_accuracy, m.f1, m.precision, m.recall
    );
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest(c) => ingest(&load(&c, "ingest")?),
        Command::Preprocess(c) => preprocess(&load(&c, "preprocess")?),
        Command::Split(c) => split(&load(&c, "split")?),
        Command::Train {
            config,
            fold,
            choices,
        } => {
            let study = Study::open(load(&config, "train")?)?;
            let c = resolve_choices(&study, &choices)?;
            println!("training {} fold {fold}", c.key());
            let r = study.train_one(&c, fold, &mut |e| {
                println!(
                    "epoch {:>3} train {:.4} test {:.4} lr {:.1e}",
                    e.epoch, e.train_loss, e.test_loss, e.lr
                );
            })?;
            print_metrics(&r.metrics);
            println!(
                "best epoch {}, stopped by {:?}; checkpoint {}",
                r.best_epoch,
                r.stop_reason,
                study.out.join(r.checkpoint.unwrap_or_default()).display()
            );
            Ok(())
        }
        Command::Evaluate { config, checkpoint } => {
            let cfg = load(&config, "evaluate")?;
            let data = StudyData::open(&cfg)?;
            let (m, cm) = evaluate_checkpoint(&data, &checkpoint, cfg.study.averaging)?;
            print_metrics(&m);
            println!("confusion (rows truth PD/SD/PR/CR): {:?}", cm.counts);
            Ok(())
        }
        Command::Ablate {
            config,
            max_folds,
            stop_after,
            quiet,
        } => {
            let mut study = Study::open(load(&config, "ablate")?)?;
            study.quiet = quiet;
            let s = study.run(RunLimits {
                max_folds,
                stop_after,
            })?;
            for (axis, w) in &s.winner_chain {
                println!("{:<14} -> {}", axis.title(), w.as_deref().unwrap_or("none"));
            }
            println!("final pipeline {}", s.final_choices.key());
            println!("report in {}", study.out.join("report").display());
            Ok(())
        }
        Command::Explain {
            config,
            checkpoint,
            sample,
            n,
            out,
        } => {
            let cfg = load(&config, "explain")?;
            let data = StudyData::open(&cfg)?;
            let out = out.unwrap_or_else(|| cfg.study.output.join("explain"));
            let only = (!sample.is_empty()).then_some(sample.as_slice());
            let rows = explain_checkpoint(&data, &checkpoint, &out, n, only)?;
            for r in &rows {
                println!(
                    "{}: truth {} predicted {} (PD {:.3} SD {:.3} PR {:.3} CR {:.3})",
                    r.sample,
                    r.truth.as_deref().unwrap_or("?"),
                    r.predicted,
                    r.p_pd,
                    r.p_sd,
                    r.p_pr,
                    r.p_cr
                );
            }
            println!("maps in {}", out.display());
            Ok(())
        }
        Command::Report { dir } => {
            let files = report_from_dir(&dir)?;
            println!(
                "{} figures, table {}, summary {}",
                files.figures.len(),
                files.table_md.display(),
                files.summary_md.display()
            );
            Ok(())
        }
        Command::Synth {
            out,
            patients,
            followups,
            grid,
            seed,
        } => {
            let ds = generate(
                &out,
                &SynthConfig {
                    n_patients: patients,
                    followups,
                    grid: [grid; 3],
                    seed,
                    ..SynthConfig::default()
                },
            )?;
            println!(
                "{} sessions written; run `rano ablate --config {}`",
                ds.sessions,
                ds.config.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Interrupted(msg)) => {
            eprintln!("stopped: {msg}; rerun the same command to resume");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
